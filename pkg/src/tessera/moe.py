"""Mixture-of-experts density regressor.

A softmax gate weights K small MLP experts; each expert emits a mean and a
raw variance that is mapped through softplus plus a positive floor. The
model is trained by minibatch Adam on the Gaussian-mixture negative log
likelihood with exact analytic gradients. Two per-sample uncertainty
signals fall out of a forward pass: the gate-weighted data-noise scale and
the scale of disagreement between expert means.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit as sigmoid
from scipy.special import logsumexp

from .errors import DimensionError, TrainingError
from .nn import AdamState, Array, Mlp, adam_step, as_rng, make_rng, softmax, softplus

LOG_2PI = float(np.log(2.0 * np.pi))
VAR_FLOOR_DEFAULT = 1e-6
CHECKPOINT_VERSION = 1


@dataclass
class MixturePrediction:
    """Mixture parameters for a batch: n rows, K components per row.

    ``w`` holds per-row gate probabilities, ``mu`` component means and
    ``sigma2`` component variances.
    """

    w: Array
    mu: Array
    sigma2: Array

    def __post_init__(self):
        self.w = np.atleast_2d(np.asarray(self.w, dtype=np.float64))
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64))
        self.sigma2 = np.atleast_2d(np.asarray(self.sigma2, dtype=np.float64))
        if not (self.w.shape == self.mu.shape == self.sigma2.shape):
            raise DimensionError("w, mu, sigma2 must share one (n, K) shape")
        if self.w.shape[1] < 1 or self.w.shape[0] < 1:
            raise DimensionError("need at least one row and one component")
        if np.any(self.w < -1e-12) or np.any(np.abs(self.w.sum(axis=1) - 1.0) > 1e-9):
            raise DimensionError("gate weights must form per-row probability vectors")
        if np.any(self.sigma2 <= 0.0):
            raise DimensionError("component variances must be positive")

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @property
    def n_components(self) -> int:
        return self.w.shape[1]

    @property
    def mean(self) -> Array:
        """Gate-weighted predictive mean per row."""
        return np.sum(self.w * self.mu, axis=1)

    @property
    def mu_bar(self) -> Array:
        """Unweighted average of component means per row."""
        return np.mean(self.mu, axis=1)

    @property
    def aleatoric(self) -> Array:
        """Data-noise scale: sqrt of the gate-weighted component variance."""
        return np.sqrt(np.sum(self.w * self.sigma2, axis=1))

    @property
    def epistemic(self) -> Array:
        """Disagreement scale: RMS deviation of component means.

        Deliberately ignores the gate weights, so a confident gate does not
        mask experts that disagree. Zero exactly when all means coincide.
        """
        dev = self.mu - self.mu_bar[:, None]
        return np.sqrt(np.mean(dev * dev, axis=1))

    def rows(self, idx) -> "MixturePrediction":
        return MixturePrediction(self.w[idx], self.mu[idx], self.sigma2[idx])


def aleatoric_scale(pred: MixturePrediction) -> Array:
    return pred.aleatoric


def epistemic_scale(pred: MixturePrediction) -> Array:
    return pred.epistemic


class _ForwardParts(NamedTuple):
    X: Array
    logits: Array
    w: Array
    mu: Array
    raw_var: Array
    sigma2: Array
    gate_cache: dict
    expert_caches: list


class MoeModel:
    """Softmax-gated ensemble of small MLP experts with mean/variance heads."""

    def __init__(self, gate: Mlp, experts: Sequence[Mlp], var_floor: float = VAR_FLOOR_DEFAULT):
        experts = list(experts)
        if not experts:
            raise DimensionError("need at least one expert")
        if gate.output_dim != len(experts):
            raise DimensionError("gate must emit one logit per expert")
        d = gate.input_dim
        for i, ex in enumerate(experts):
            if ex.input_dim != d:
                raise DimensionError(f"expert {i} input width differs from gate")
            if ex.output_dim != 2:
                raise DimensionError(f"expert {i} must emit (mean, raw variance)")
        if not (var_floor > 0.0):
            raise DimensionError("var_floor must be positive")
        self.gate = gate
        self.experts = experts
        self.var_floor = float(var_floor)

    @classmethod
    def init(cls, input_dim: int, n_experts: int = 4, expert_hidden: int = 64,
             gate_kind: str = "linear", gate_hidden: int = 32,
             activation: str = "tanh", var_floor: float = VAR_FLOOR_DEFAULT,
             rng: int | np.random.Generator | None = None) -> "MoeModel":
        """Fresh model with Xavier-initialized parts.

        ``gate_kind`` selects a linear softmax gate (default) or a one
        hidden layer MLP gate of width ``gate_hidden``.
        """
        if n_experts < 1:
            raise DimensionError("n_experts must be >= 1")
        rng = as_rng(0 if rng is None else rng)
        if gate_kind == "linear":
            gate = Mlp.init((input_dim, n_experts), activation, rng)
        elif gate_kind == "mlp":
            gate = Mlp.init((input_dim, gate_hidden, n_experts), activation, rng)
        else:
            raise DimensionError(f"unknown gate_kind {gate_kind!r}")
        experts = [Mlp.init((input_dim, expert_hidden, 2), activation, rng)
                   for _ in range(n_experts)]
        return cls(gate, experts, var_floor)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def input_dim(self) -> int:
        return self.gate.input_dim

    def parameters(self) -> list[Array]:
        params = self.gate.parameters()
        for ex in self.experts:
            params.extend(ex.parameters())
        return params

    def set_parameters(self, params: Sequence[Array]) -> None:
        counts = [2 * self.gate.n_layers] + [2 * ex.n_layers for ex in self.experts]
        if len(params) != sum(counts):
            raise DimensionError("parameter list length mismatch")
        pos = 0
        self.gate.set_parameters(params[pos:pos + counts[0]])
        pos += counts[0]
        for ex, c in zip(self.experts, counts[1:]):
            ex.set_parameters(params[pos:pos + c])
            pos += c

    def _forward_parts(self, x: Array, check_finite: bool = False) -> _ForwardParts:
        X = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if X.shape[1] != self.input_dim:
            raise DimensionError(f"input must be (n, {self.input_dim})")
        logits, gate_cache = self.gate.forward_cache(X, check_finite=check_finite)
        w = softmax(logits, axis=1)
        n, k = X.shape[0], self.n_experts
        mu = np.empty((n, k))
        raw = np.empty((n, k))
        caches = []
        for j, ex in enumerate(self.experts):
            out, cache = ex.forward_cache(X, check_finite=check_finite)
            mu[:, j] = out[:, 0]
            raw[:, j] = out[:, 1]
            caches.append(cache)
        sigma2 = softplus(raw) + self.var_floor
        return _ForwardParts(X, logits, w, mu, raw, sigma2, gate_cache, caches)

    def forward(self, x: Array, check_finite: bool = True) -> MixturePrediction:
        parts = self._forward_parts(x, check_finite=check_finite)
        return MixturePrediction(parts.w, parts.mu, parts.sigma2)

    def to_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "kind": "moe",
            "var_floor": self.var_floor,
            "gate": self.gate.to_dict(),
            "experts": [ex.to_dict() for ex in self.experts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MoeModel":
        if d.get("format_version") != CHECKPOINT_VERSION:
            raise DimensionError(f"unsupported checkpoint version {d.get('format_version')!r}")
        if d.get("kind") != "moe":
            raise DimensionError(f"checkpoint kind {d.get('kind')!r} is not a mixture model")
        gate = Mlp.from_dict(d["gate"])
        experts = [Mlp.from_dict(e) for e in d["experts"]]
        return cls(gate, experts, float(d["var_floor"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "MoeModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _log_components(pred_w_log: Array, mu: Array, sigma2: Array, y: Array) -> Array:
    resid = y[:, None] - mu
    log_phi = -0.5 * (LOG_2PI + np.log(sigma2) + resid * resid / sigma2)
    return pred_w_log + log_phi


def mixture_log_pdf(pred: MixturePrediction, y) -> Array:
    """Log density of the row-wise mixture at y.

    ``y`` may be a scalar, a length-n vector paired row by row, or, when
    the prediction has a single row, a vector of query points.
    """
    scalar_in = np.ndim(y) == 0
    yv = np.atleast_1d(np.asarray(y, dtype=np.float64))
    w, mu, s2 = pred.w, pred.mu, pred.sigma2
    if pred.n == 1 and yv.shape[0] != 1:
        w = np.broadcast_to(w, (yv.shape[0], pred.n_components))
        mu = np.broadcast_to(mu, w.shape)
        s2 = np.broadcast_to(s2, w.shape)
    elif yv.shape[0] != pred.n:
        raise DimensionError("y must pair with prediction rows")
    with np.errstate(divide="ignore"):  # w == 0 gives -inf, which logsumexp absorbs
        log_w = np.log(w)
    out = logsumexp(_log_components(log_w, mu, s2, yv), axis=1)
    return float(out[0]) if scalar_in else out


def mixture_pdf(pred: MixturePrediction, y) -> Array:
    """Density of the row-wise mixture at y; same broadcasting as the log form."""
    return np.exp(mixture_log_pdf(pred, y))


def _nll_core(model: MoeModel, x: Array, y) -> tuple[_ForwardParts, Array, Array, Array]:
    parts = model._forward_parts(x)
    yv = np.asarray(y, dtype=np.float64).ravel()
    if yv.shape[0] != parts.X.shape[0]:
        raise DimensionError("y must have one target per row of x")
    if yv.shape[0] == 0:
        raise DimensionError("empty batch")
    log_w = parts.logits - logsumexp(parts.logits, axis=1, keepdims=True)
    comp = _log_components(log_w, parts.mu, parts.sigma2, yv)
    log_mix = logsumexp(comp, axis=1)
    return parts, yv, comp, log_mix


def mixture_nll_loss(model: MoeModel, x: Array, y) -> float:
    """Mean mixture negative log likelihood of a batch."""
    _, _, _, log_mix = _nll_core(model, x, y)
    loss = float(-np.mean(log_mix))
    if not np.isfinite(loss):
        raise TrainingError("non-finite mixture NLL")
    return loss


def mixture_nll(model: MoeModel, x: Array, y) -> tuple[float, list[Array]]:
    """Mean mixture NLL with exact gradients for every model parameter.

    Gradient order matches ``model.parameters()``: gate first, then each
    expert. Raises if the loss is not finite.
    """
    parts, yv, comp, log_mix = _nll_core(model, x, y)
    loss = float(-np.mean(log_mix))
    if not np.isfinite(loss):
        raise TrainingError("non-finite mixture NLL")
    n = yv.shape[0]
    resp = np.exp(comp - log_mix[:, None])  # per-row component responsibilities
    d_logits = (parts.w - resp) / n
    resid = yv[:, None] - parts.mu
    d_mu = -(resp * resid / parts.sigma2) / n
    d_sigma2 = -(resp * 0.5 * (resid * resid / (parts.sigma2 * parts.sigma2)
                               - 1.0 / parts.sigma2)) / n
    d_raw = d_sigma2 * sigmoid(parts.raw_var)  # softplus'(r) = sigmoid(r)
    grads = model.gate.backward(parts.gate_cache, d_logits)
    for j, ex in enumerate(model.experts):
        upstream = np.column_stack([d_mu[:, j], d_raw[:, j]])
        grads.extend(ex.backward(parts.expert_caches[j], upstream))
    return loss, grads


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise DimensionError("epochs must be >= 1")
        if self.batch_size < 1:
            raise DimensionError("batch_size must be >= 1")
        if not (self.lr > 0):
            raise DimensionError("lr must be positive")


@dataclass
class TrainHistory:
    train_nll: list[float] = field(default_factory=list)
    val_nll: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self) -> dict:
        return {"train_nll": self.train_nll, "val_nll": self.val_nll,
                "best_epoch": self.best_epoch}


def train_moe(model: MoeModel, x_train: Array, y_train: Array,
              x_val: Array, y_val: Array, config: TrainConfig | None = None) -> TrainHistory:
    """Minibatch Adam on the mixture NLL; mutates ``model`` in place.

    After the final epoch the parameters from the epoch with the lowest
    validation NLL are restored. Shuffling is driven only by
    ``config.seed``, so a rerun reproduces the same trajectory.
    """
    config = config or TrainConfig()
    x_train = np.atleast_2d(np.asarray(x_train, dtype=np.float64))
    x_val = np.atleast_2d(np.asarray(x_val, dtype=np.float64))
    y_train = np.asarray(y_train, dtype=np.float64).ravel()
    y_val = np.asarray(y_val, dtype=np.float64).ravel()
    n = x_train.shape[0]
    if n == 0 or x_val.shape[0] == 0:
        raise DimensionError("train and val sets must be nonempty")
    if y_train.shape[0] != n or y_val.shape[0] != x_val.shape[0]:
        raise DimensionError("targets must pair with inputs")
    rng = make_rng(config.seed)
    params = model.parameters()
    state = AdamState(params, lr=config.lr)
    history = TrainHistory()
    best_val = np.inf
    best_params = [p.copy() for p in params]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        try:
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                _, grads = mixture_nll(model, x_train[idx], y_train[idx])
                params = adam_step(state, params, grads)
                model.set_parameters(params)
            tr = mixture_nll_loss(model, x_train, y_train)
            va = mixture_nll_loss(model, x_val, y_val)
        except TrainingError as e:
            raise TrainingError(f"{e} (epoch {epoch})") from e
        history.train_nll.append(tr)
        history.val_nll.append(va)
        if va < best_val:
            best_val = va
            best_params = [p.copy() for p in params]
            history.best_epoch = epoch
    model.set_parameters(best_params)
    return history
