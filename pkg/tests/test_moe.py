import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.stats import norm

from tessera.datagen import gen_heteroscedastic
from tessera.errors import DimensionError, TrainingError
from tessera.moe import (
    MixturePrediction,
    MoeModel,
    TrainConfig,
    aleatoric_scale,
    epistemic_scale,
    mixture_log_pdf,
    mixture_nll,
    mixture_nll_loss,
    mixture_pdf,
    train_moe,
)
from tessera.nn import finite_difference_gradients, make_rng, softplus


def two_component():
    return MixturePrediction(w=[[0.5, 0.5]], mu=[[-1.0, 1.0]], sigma2=[[1.0, 1.0]])


# ------------------------------------------------------- decomposition

def test_hand_decomposition():
    pred = two_component()
    assert_allclose(pred.mean, [0.0], atol=1e-15)
    assert_allclose(pred.epistemic, [1.0], rtol=1e-12)
    assert_allclose(pred.aleatoric, [1.0], rtol=1e-12)


def test_weighted_mean_and_aleatoric():
    pred = MixturePrediction(w=[[0.25, 0.75]], mu=[[2.0, -2.0]], sigma2=[[4.0, 1.0]])
    assert_allclose(pred.mean, [0.25 * 2 - 0.75 * 2], rtol=1e-12)
    assert_allclose(pred.aleatoric, [np.sqrt(0.25 * 4 + 0.75 * 1)], rtol=1e-12)


def test_epistemic_ignores_gate_weights():
    mu = [[0.0, 3.0, -3.0]]
    s2 = [[1.0, 1.0, 1.0]]
    a = MixturePrediction(w=[[1 / 3, 1 / 3, 1 / 3]], mu=mu, sigma2=s2)
    b = MixturePrediction(w=[[0.98, 0.01, 0.01]], mu=mu, sigma2=s2)
    assert_allclose(a.epistemic, b.epistemic, rtol=0)
    # explicit RMS deviation of the means
    dev = np.array(mu[0]) - np.mean(mu[0])
    assert_allclose(a.epistemic, [np.sqrt(np.mean(dev ** 2))], rtol=1e-12)


def test_epistemic_zero_iff_means_agree():
    same = MixturePrediction(w=[[0.7, 0.3]], mu=[[1.5, 1.5]], sigma2=[[1.0, 2.0]])
    assert same.epistemic[0] == 0.0
    differ = MixturePrediction(w=[[0.7, 0.3]], mu=[[1.5, 1.500001]], sigma2=[[1.0, 2.0]])
    assert differ.epistemic[0] > 0.0


def test_scale_helpers_match_properties():
    pred = two_component()
    assert_allclose(aleatoric_scale(pred), pred.aleatoric, rtol=0)
    assert_allclose(epistemic_scale(pred), pred.epistemic, rtol=0)


def test_prediction_validation():
    with pytest.raises(DimensionError):
        MixturePrediction(w=[[0.5, 0.6]], mu=[[0.0, 0.0]], sigma2=[[1.0, 1.0]])
    with pytest.raises(DimensionError):
        MixturePrediction(w=[[0.5, 0.5]], mu=[[0.0, 0.0]], sigma2=[[1.0, 0.0]])
    with pytest.raises(DimensionError):
        MixturePrediction(w=[[1.0]], mu=[[0.0, 0.0]], sigma2=[[1.0, 1.0]])


# ------------------------------------------------------------- density

def test_single_component_matches_norm_pdf():
    pred = MixturePrediction(w=[[1.0]], mu=[[0.7]], sigma2=[[2.25]])
    ys = np.linspace(-4, 6, 11)
    assert_allclose(mixture_pdf(pred, ys),
                    norm.pdf(ys, loc=0.7, scale=1.5), rtol=1e-12)


def test_two_component_hand_density():
    pred = two_component()
    want = 0.5 * norm.pdf(0.0, -1.0, 1.0) + 0.5 * norm.pdf(0.0, 1.0, 1.0)
    assert_allclose(mixture_pdf(pred, 0.0), want, rtol=1e-12)
    assert_allclose(mixture_log_pdf(pred, 0.0), np.log(want), rtol=1e-12)


def test_density_integrates_to_one():
    pred = MixturePrediction(w=[[0.2, 0.5, 0.3]], mu=[[-2.0, 0.5, 3.0]],
                             sigma2=[[0.25, 1.0, 4.0]])
    ys = np.linspace(-20, 25, 20001)
    mass = np.trapezoid(mixture_pdf(pred, ys), ys)
    assert_allclose(mass, 1.0, atol=1e-9)


def test_density_pairs_rows_with_targets():
    pred = MixturePrediction(w=[[1.0], [1.0]], mu=[[0.0], [5.0]], sigma2=[[1.0], [1.0]])
    out = mixture_pdf(pred, [0.0, 5.0])
    assert_allclose(out, [norm.pdf(0.0), norm.pdf(0.0)], rtol=1e-12)
    with pytest.raises(DimensionError):
        mixture_pdf(pred, [0.0, 1.0, 2.0])


def test_log_pdf_survives_tiny_gate_weight():
    pred = MixturePrediction(w=[[1.0, 0.0]], mu=[[0.0, 50.0]], sigma2=[[1.0, 1.0]])
    assert_allclose(mixture_log_pdf(pred, 0.0), norm.logpdf(0.0), rtol=1e-12)


# ------------------------------------------------------------- forward

def test_forward_shapes_and_floor():
    model = MoeModel.init(3, n_experts=4, expert_hidden=8, rng=make_rng(0),
                          var_floor=1e-6)
    X = make_rng(1).standard_normal((10, 3))
    pred = model.forward(X)
    assert pred.w.shape == (10, 4)
    assert np.all(pred.sigma2 >= 1e-6)
    assert_allclose(pred.w.sum(axis=1), np.ones(10), atol=1e-12)


def test_variance_floor_under_extreme_negative_raw_head():
    model = MoeModel.init(2, n_experts=2, expert_hidden=4, rng=make_rng(0),
                          var_floor=1e-6)
    # force the raw-variance head output to a huge negative value
    for ex in model.experts:
        ex.weights[-1][:, 1] = 0.0
        ex.biases[-1][1] = -1e4
    pred = model.forward(np.zeros((3, 2)))
    assert_allclose(pred.sigma2, np.full((3, 2), 1e-6), rtol=0, atol=0)


def test_forward_matches_hand_computation_single_expert():
    model = MoeModel.init(2, n_experts=1, expert_hidden=4, rng=make_rng(5))
    x = np.array([[0.3, -0.7]])
    out = model.experts[0].forward(x)
    pred = model.forward(x)
    assert_allclose(pred.w, [[1.0]], rtol=0)
    assert_allclose(pred.mu, [[out[0, 0]]], rtol=0)
    assert_allclose(pred.sigma2, [[softplus(out[0, 1]) + model.var_floor]], rtol=1e-15)
    assert pred.epistemic[0] == 0.0


def test_gate_kinds():
    linear = MoeModel.init(3, n_experts=2, gate_kind="linear", rng=make_rng(0))
    assert linear.gate.n_layers == 1
    mlp = MoeModel.init(3, n_experts=2, gate_kind="mlp", gate_hidden=6, rng=make_rng(0))
    assert mlp.gate.n_layers == 2
    assert mlp.gate.widths[1] == 6
    with pytest.raises(DimensionError):
        MoeModel.init(3, gate_kind="softmax-tree")


# ----------------------------------------------------------------- nll

def brute_force_nll(model, X, y):
    pred = model.forward(X)
    total = 0.0
    for i in range(len(y)):
        mix = 0.0
        for k in range(pred.n_components):
            mix += pred.w[i, k] * norm.pdf(y[i], pred.mu[i, k],
                                           np.sqrt(pred.sigma2[i, k]))
        total += -np.log(mix)
    return total / len(y)


def test_nll_matches_brute_force():
    model = MoeModel.init(3, n_experts=3, expert_hidden=6, rng=make_rng(2))
    rng = make_rng(3)
    X = rng.standard_normal((12, 3))
    y = rng.standard_normal(12)
    loss, _ = mixture_nll(model, X, y)
    assert_allclose(loss, brute_force_nll(model, X, y), rtol=1e-10)
    assert_allclose(mixture_nll_loss(model, X, y), loss, rtol=0)


@pytest.mark.parametrize("gate_kind,n_experts", [("linear", 2), ("mlp", 3)])
def test_nll_gradients_match_finite_differences(gate_kind, n_experts):
    model = MoeModel.init(2, n_experts=n_experts, expert_hidden=5,
                          gate_kind=gate_kind, gate_hidden=4, rng=make_rng(7))
    rng = make_rng(8)
    X = rng.standard_normal((6, 2))
    y = rng.standard_normal(6)
    _, grads = mixture_nll(model, X, y)
    params = model.parameters()

    def loss():
        return mixture_nll_loss(model, X, y)

    fd = finite_difference_gradients(loss, params, h=1e-5)
    for g, f in zip(grads, fd):
        denom = np.maximum(np.maximum(np.abs(g), np.abs(f)), 1e-8)
        assert np.max(np.abs(g - f) / denom) < 1e-4


def test_nll_gate_gradient_sums_to_zero_per_row():
    # softmax invariance: shifting all logits of a row leaves the loss alone
    model = MoeModel.init(2, n_experts=4, expert_hidden=5, rng=make_rng(9))
    rng = make_rng(10)
    X = rng.standard_normal((8, 2))
    y = rng.standard_normal(8)
    _, grads = mixture_nll(model, X, y)
    gate_bias_grad = grads[1]  # linear gate: [W, b]
    assert abs(gate_bias_grad.sum()) < 1e-12


def test_nll_rejects_mismatched_targets():
    model = MoeModel.init(2, n_experts=2, rng=make_rng(0))
    with pytest.raises(DimensionError):
        mixture_nll(model, np.zeros((3, 2)), np.zeros(4))


# ------------------------------------------------------------ training

@pytest.fixture(scope="module")
def small_data():
    ds = gen_heteroscedastic(600, 2, "step", seed=123)
    return ds.X[:400], ds.y[:400], ds.X[400:], ds.y[400:]


def test_training_reduces_validation_nll(small_data):
    X, y, Xv, yv = small_data
    model = MoeModel.init(2, n_experts=2, expert_hidden=8, rng=make_rng(0))
    before = mixture_nll_loss(model, Xv, yv)
    hist = train_moe(model, X, y, Xv, yv,
                     TrainConfig(epochs=15, batch_size=64, lr=5e-3, seed=0))
    after = mixture_nll_loss(model, Xv, yv)
    assert after < before
    assert len(hist.train_nll) == len(hist.val_nll) == 15
    # the restored parameters realize the best validation epoch
    assert_allclose(after, min(hist.val_nll), rtol=1e-12)
    assert hist.best_epoch == int(np.argmin(hist.val_nll))


def test_training_is_seed_deterministic(small_data):
    X, y, Xv, yv = small_data

    def run():
        model = MoeModel.init(2, n_experts=2, expert_hidden=8, rng=make_rng(4))
        hist = train_moe(model, X, y, Xv, yv,
                         TrainConfig(epochs=3, batch_size=64, lr=1e-3, seed=5))
        return hist, model.forward(Xv[:5])

    h1, p1 = run()
    h2, p2 = run()
    assert h1.train_nll == h2.train_nll
    assert h1.val_nll == h2.val_nll
    assert_allclose(p1.mu, p2.mu, rtol=0)


@pytest.mark.filterwarnings("ignore:overflow")
def test_training_divergence_reports_epoch(small_data):
    X, y, Xv, yv = small_data
    model = MoeModel.init(2, n_experts=2, expert_hidden=8, rng=make_rng(0))
    with pytest.raises(TrainingError, match=r"epoch \d"):
        # squared residuals overflow, so the very first batch loss is inf
        train_moe(model, X, y * 1e200, Xv, yv * 1e200,
                  TrainConfig(epochs=3, batch_size=64, lr=1e-3, seed=0))


def test_empty_sets_rejected(small_data):
    X, y, Xv, yv = small_data
    model = MoeModel.init(2, n_experts=2, rng=make_rng(0))
    with pytest.raises(DimensionError):
        train_moe(model, X[:0], y[:0], Xv, yv, TrainConfig(epochs=1))


# ---------------------------------------------------------- checkpoint

def test_checkpoint_round_trip_bitwise(tmp_path):
    model = MoeModel.init(3, n_experts=4, expert_hidden=8, rng=make_rng(21))
    path = tmp_path / "model.json"
    model.save(path)
    clone = MoeModel.load(path)
    X = make_rng(22).standard_normal((20, 3))
    a, b = model.forward(X), clone.forward(X)
    assert np.array_equal(a.w, b.w)
    assert np.array_equal(a.mu, b.mu)
    assert np.array_equal(a.sigma2, b.sigma2)
    assert clone.var_floor == model.var_floor


def test_checkpoint_rejects_wrong_kind(tmp_path):
    model = MoeModel.init(2, n_experts=2, rng=make_rng(0))
    d = model.to_dict()
    d["kind"] = "linear_regression"
    with pytest.raises(DimensionError, match="kind"):
        MoeModel.from_dict(d)
    d = model.to_dict()
    d["format_version"] = 99
    with pytest.raises(DimensionError, match="version"):
        MoeModel.from_dict(d)


# ------------------------------------------------------------ property

@settings(deadline=None, max_examples=40)
@given(st.integers(min_value=1, max_value=5),
       st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_decomposition_invariants_random_models(k, seed):
    rng = make_rng(seed)
    model = MoeModel.init(2, n_experts=k, expert_hidden=3, rng=rng)
    X = rng.standard_normal((4, 2))
    pred = model.forward(X)
    assert np.all(pred.sigma2 >= model.var_floor)
    assert np.all(pred.aleatoric > 0.0)
    assert np.all(pred.epistemic >= 0.0)
    if k == 1:
        assert_allclose(pred.epistemic, np.zeros(4), atol=0)
    lo = pred.mu.min(axis=1) - 1e-12
    hi = pred.mu.max(axis=1) + 1e-12
    assert np.all((pred.mean >= lo) & (pred.mean <= hi))
