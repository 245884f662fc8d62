"""End-to-end experiment orchestration.

A JSON config drives four stages: data generation, model training,
conformal calibration, and per-method evaluation. Every artifact is a
deterministic function of (config, seed): JSON is canonical, CSV floats
are exact, and nothing embeds a timestamp, so reruns are byte-identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import serialize
from .conformal import ALPHA_DEFAULT, EPSILON_DEFAULT, CalibrationResult, ScaleKind, \
    build_intervals, calibrate
from .datagen import DEFAULT_FRACTIONS, Dataset, gen_clustered_shift, \
    gen_heteroscedastic, load_csv, save_csv, split_dataset
from .errors import ConfigError, MetricError
from .mc_dropout import DropoutMlp, DropoutTrainConfig, mc_intervals, mc_predict, \
    train_dropout
from .metrics import CwcConfig, MetricsReport, cwc, disentangle_stats, groupwise_picp, \
    mpiw_nmpiw, picp, point_metrics, report_nll, sparsification, ssc_detail
from .moe import MixturePrediction, MoeModel, TrainConfig, train_moe
from .nn import derived_seed, make_rng

METHODS = ("tessera_e", "tessera_a", "classical_cp", "moe_e", "moe_a", "mc_dropout")
SCHEMA_VERSION = 1

# sub-stream roles of the experiment seed
_ROLE_DATA, _ROLE_MOE_INIT, _ROLE_MOE_TRAIN, _ROLE_DROPOUT_INIT, \
    _ROLE_DROPOUT_TRAIN, _ROLE_MC_PASSES = range(6)


def _from_dict(cls, d: dict, context: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{context} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {unknown}")
    return cls(**d)


@dataclass
class DataSpec:
    """What data to evaluate on: a generator and its knobs, or a CSV path."""

    kind: str = "heteroscedastic"
    n: int = 5000
    dim: int = 4
    noise_profile: str = "step"
    noise_low: float = 0.2
    noise_high: float = 1.0
    noise_level: float = 0.5
    n_clusters: int = 8
    held_out_clusters: tuple = (6, 7)
    mode: str = "ood"
    cluster_std: float = 0.5
    center_radius: float = 2.0
    ood_radius: float = 6.0
    noise: float = 0.3
    path: str | None = None

    def __post_init__(self):
        if self.kind not in ("heteroscedastic", "clustered_shift", "csv"):
            raise ConfigError(f"unknown data kind {self.kind!r}")
        if self.kind == "csv" and not self.path:
            raise ConfigError("data kind 'csv' requires a path")
        self.held_out_clusters = tuple(int(c) for c in self.held_out_clusters)


@dataclass
class SplitSpec:
    fractions: tuple = DEFAULT_FRACTIONS
    mode: str = "random"

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)


@dataclass
class ModelSpec:
    n_experts: int = 4
    expert_hidden: int = 64
    gate: str = "linear"
    gate_hidden: int = 32
    activation: str = "tanh"
    var_floor: float = 1e-6


@dataclass
class TrainSpec:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-4


@dataclass
class McDropoutSpec:
    hidden: int = 64
    dropout: float = 0.5
    passes: int = 50
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3


@dataclass
class CalibrationSpec:
    alpha: float = ALPHA_DEFAULT
    epsilon: float = EPSILON_DEFAULT


@dataclass
class MetricsSpec:
    cwc_eta: tuple = (10.0, 50.0, 100.0)
    cwc_mu: float = 0.9
    ssc_bins: tuple = (3, 5, 10)
    sparsification_grid: tuple | None = None
    group_min_n: int = 10
    group_top_k: int = 15

    def __post_init__(self):
        self.cwc_eta = tuple(float(e) for e in self.cwc_eta)
        self.ssc_bins = tuple(int(j) for j in self.ssc_bins)
        if self.sparsification_grid is not None:
            self.sparsification_grid = tuple(float(f) for f in self.sparsification_grid)


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    output_dir: str = "tessera_run"
    methods: tuple = METHODS
    data: DataSpec = field(default_factory=DataSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    mc_dropout: McDropoutSpec = field(default_factory=McDropoutSpec)
    calibration: CalibrationSpec = field(default_factory=CalibrationSpec)
    metrics: MetricsSpec = field(default_factory=MetricsSpec)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema version {self.schema_version!r}")
        self.methods = resolve_methods(self.methods)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        sections = {"data": DataSpec, "split": SplitSpec, "model": ModelSpec,
                    "train": TrainSpec, "mc_dropout": McDropoutSpec,
                    "calibration": CalibrationSpec, "metrics": MetricsSpec}
        scalars = {"schema_version", "seed", "output_dir", "methods"}
        unknown = sorted(set(d) - set(sections) - scalars)
        if unknown:
            raise ConfigError(f"unknown keys in config: {unknown}")
        kwargs = {k: d[k] for k in scalars if k in d}
        for name, spec_cls in sections.items():
            if name in d:
                kwargs[name] = _from_dict(spec_cls, d[name], f"config.{name}")
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return serialize.to_jsonable(dataclasses.asdict(self))

    def config_hash(self) -> str:
        return hashlib.sha256(serialize.dumps(self.to_dict()).encode()).hexdigest()


def resolve_methods(methods) -> tuple:
    if isinstance(methods, str):
        methods = (methods,)
    out = []
    for m in methods:
        if m == "all":
            out.extend(METHODS)
        elif m in METHODS:
            out.append(m)
        else:
            raise ConfigError(f"unknown method {m!r}")
    seen: list[str] = []
    for m in out:
        if m not in seen:
            seen.append(m)
    return tuple(seen)


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(serialize.load(path))


def _artifact(out: Path, name: str, hint: str) -> Path:
    p = out / name
    if not p.exists():
        raise ConfigError(f"missing artifact {p}; run `tessera {hint}` first")
    return p


def stage_gen_data(config: ExperimentConfig, out: Path) -> Dataset:
    """Generate (or import) the dataset and write data.csv with metadata."""
    out.mkdir(parents=True, exist_ok=True)
    spec = config.data
    seed = derived_seed(config.seed, _ROLE_DATA)
    if spec.kind == "heteroscedastic":
        ds = gen_heteroscedastic(spec.n, spec.dim, spec.noise_profile, seed,
                                 noise_low=spec.noise_low, noise_high=spec.noise_high,
                                 noise_level=spec.noise_level)
    elif spec.kind == "clustered_shift":
        ds = gen_clustered_shift(spec.n, spec.dim, n_clusters=spec.n_clusters,
                                 held_out_clusters=spec.held_out_clusters, seed=seed,
                                 mode=spec.mode, fractions=config.split.fractions,
                                 cluster_std=spec.cluster_std,
                                 center_radius=spec.center_radius,
                                 ood_radius=spec.ood_radius, noise=spec.noise)
    else:
        ds = load_csv(spec.path)
    if ds.split is None:
        ds = split_dataset(ds, fractions=config.split.fractions,
                           mode=config.split.mode, seed=seed)
    save_csv(ds, out / "data.csv")
    _write_manifest(config, out)
    return ds


def stage_train(config: ExperimentConfig, out: Path) -> tuple[MoeModel, DropoutMlp]:
    """Train the mixture model and the dropout baseline on the train split."""
    out.mkdir(parents=True, exist_ok=True)
    ds = load_csv(_artifact(out, "data.csv", "gen-data"))
    train, val = ds.part("train"), ds.part("val")
    model = MoeModel.init(ds.dim, n_experts=config.model.n_experts,
                          expert_hidden=config.model.expert_hidden,
                          gate_kind=config.model.gate,
                          gate_hidden=config.model.gate_hidden,
                          activation=config.model.activation,
                          var_floor=config.model.var_floor,
                          rng=make_rng(derived_seed(config.seed, _ROLE_MOE_INIT)))
    history = train_moe(model, train.X, train.y, val.X, val.y,
                        TrainConfig(epochs=config.train.epochs,
                                    batch_size=config.train.batch_size,
                                    lr=config.train.lr,
                                    seed=derived_seed(config.seed, _ROLE_MOE_TRAIN)))
    model.save(out / "moe_model.json")
    serialize.dump(history.to_dict(), out / "moe_history.json")
    dropout = DropoutMlp.init(ds.dim, hidden=config.mc_dropout.hidden,
                              dropout=config.mc_dropout.dropout,
                              rng=make_rng(derived_seed(config.seed, _ROLE_DROPOUT_INIT)))
    mse = train_dropout(dropout, train.X, train.y,
                        DropoutTrainConfig(epochs=config.mc_dropout.epochs,
                                           batch_size=config.mc_dropout.batch_size,
                                           lr=config.mc_dropout.lr,
                                           seed=derived_seed(config.seed, _ROLE_DROPOUT_TRAIN)))
    dropout.save(out / "mc_dropout_model.json")
    serialize.dump({"train_mse": mse}, out / "mc_dropout_history.json")
    _write_manifest(config, out)
    return model, dropout


def stage_calibrate(config: ExperimentConfig, out: Path) -> dict[str, CalibrationResult]:
    """Split-conformal calibration of every scale family on the cal split."""
    out.mkdir(parents=True, exist_ok=True)
    ds = load_csv(_artifact(out, "data.csv", "gen-data"))
    model = MoeModel.load(_artifact(out, "moe_model.json", "train"))
    cal = ds.part("cal")
    pred = model.forward(cal.X)
    scales = {ScaleKind.EPISTEMIC: pred.epistemic,
              ScaleKind.ALEATORIC: pred.aleatoric,
              ScaleKind.CONSTANT: None}
    results = {}
    for kind, scale in scales.items():
        res = calibrate(cal.y, pred.mean, scale, kind=kind,
                        alpha=config.calibration.alpha,
                        epsilon=config.calibration.epsilon)
        res.save(out / f"calibration_{kind.value}.json")
        results[kind.value] = res
    _write_manifest(config, out)
    return results


def _method_intervals(method: str, config: ExperimentConfig, out: Path,
                      test: Dataset, pred: MixturePrediction):
    """Intervals, the uncertainty signal they came from, and the method's
    point predictions and density model for the test split."""
    alpha = config.calibration.alpha
    mu = pred.mean
    if method in ("tessera_e", "tessera_a"):
        kind = ScaleKind.EPISTEMIC if method.endswith("_e") else ScaleKind.ALEATORIC
        calib = CalibrationResult.load(
            _artifact(out, f"calibration_{kind.value}.json", "calibrate"))
        scale = pred.epistemic if kind is ScaleKind.EPISTEMIC else pred.aleatoric
        return build_intervals(calib, mu, scale), mu, pred
    if method == "classical_cp":
        calib = CalibrationResult.load(
            _artifact(out, "calibration_constant.json", "calibrate"))
        return build_intervals(calib, mu), mu, pred
    if method in ("moe_e", "moe_a"):
        scale = pred.epistemic if method == "moe_e" else pred.aleatoric
        return mc_intervals(mu, scale ** 2, alpha), mu, pred
    if method == "mc_dropout":
        dropout = DropoutMlp.load(_artifact(out, "mc_dropout_model.json", "train"))
        rng = make_rng(derived_seed(config.seed, _ROLE_MC_PASSES))
        mean, var = mc_predict(dropout, test.X, passes=config.mc_dropout.passes, rng=rng)
        gauss = MixturePrediction(w=np.ones((test.n, 1)),
                                  mu=mean[:, None],
                                  sigma2=np.maximum(var, 1e-12)[:, None])
        return mc_intervals(mean, var, alpha), mean, gauss
    raise ConfigError(f"unknown method {method!r}")


def _evaluate_method(method: str, config: ExperimentConfig, out: Path,
                     test: Dataset, pred: MixturePrediction):
    intervals, mu, density = _method_intervals(method, config, out, test, pred)
    mspec = config.metrics
    cov = picp(intervals, test.y)
    mpiw, nmpiw = mpiw_nmpiw(intervals, test.y)
    cwc_map = {}
    for eta in mspec.cwc_eta:
        key = str(int(eta)) if float(eta).is_integer() else repr(float(eta))
        cwc_map[key] = cwc(cov, nmpiw, CwcConfig(eta=eta, mu=mspec.cwc_mu))
    curve = sparsification(intervals.width / 2.0, test.y - mu,
                           grid=mspec.sparsification_grid)
    ssc_map: dict[str, list[float]] | None = {}
    ssc_note = None
    ssc_rows = {}
    for j in mspec.ssc_bins:
        try:
            bins = ssc_detail(intervals, test.y, j)
        except MetricError as e:
            ssc_map, ssc_note = None, str(e)
            ssc_rows = {}
            break
        ssc_rows[j] = bins
        ssc_map[str(j)] = [b.coverage for b in bins]
    pm = point_metrics(mu, test.y)
    report = MetricsReport(
        n_test=test.n, picp=cov, mpiw=mpiw, nmpiw=nmpiw, cwc=cwc_map,
        ause=curve.ause, ssc=ssc_map, ssc_note=ssc_note,
        rmse=pm.rmse, mae=pm.mae, pearson=pm.pearson, spearman=pm.spearman,
        nll=report_nll(density, test.y),
    )
    serialize.dump({"method": method, **report.to_dict()},
                   out / f"metrics_{method}.json")
    curves_dir = out / "curves"
    curves_dir.mkdir(exist_ok=True)
    serialize.write_csv(curves_dir / f"{method}_sparsification.csv",
                        ["fraction", "model_rmse", "oracle_rmse"],
                        zip(curve.fractions, curve.model_rmse, curve.oracle_rmse))
    for j, bins in ssc_rows.items():
        serialize.write_csv(curves_dir / f"{method}_ssc_J{j}.csv",
                            ["bin", "n", "mean_width", "coverage"],
                            [(i, b.n, b.mean_width, b.coverage)
                             for i, b in enumerate(bins)])
    return intervals, report


def stage_evaluate(config: ExperimentConfig, out: Path,
                   methods: tuple | None = None) -> dict[str, MetricsReport]:
    """Metrics and curves for every requested method on the test split."""
    out.mkdir(parents=True, exist_ok=True)
    methods = config.methods if methods is None else resolve_methods(methods)
    ds = load_csv(_artifact(out, "data.csv", "gen-data"))
    model = MoeModel.load(_artifact(out, "moe_model.json", "train"))
    test = ds.part("test")
    pred = model.forward(test.X)
    reports = {}
    group_rows = []
    for method in methods:
        intervals, report = _evaluate_method(method, config, out, test, pred)
        reports[method] = report
        if test.groups is not None:
            table = groupwise_picp(intervals, test.y, test.groups,
                                   min_n=config.metrics.group_min_n,
                                   top_k=config.metrics.group_top_k)
            group_rows.extend((method, e.group, e.n, e.picp) for e in table.entries)
    stats = disentangle_stats(pred.aleatoric, pred.epistemic)
    serialize.dump({
        "pearson": stats.pearson, "spearman": stats.spearman,
        "kendall": stats.kendall, "welch_t_p": stats.welch_t_p,
        "mann_whitney_p": stats.mann_whitney_p,
        "mean_aleatoric": float(np.mean(pred.aleatoric)),
        "mean_epistemic": float(np.mean(pred.epistemic)),
    }, out / "uncertainty_stats.json")
    curves_dir = out / "curves"
    curves_dir.mkdir(exist_ok=True)
    serialize.write_csv(curves_dir / "group_coverage.csv",
                        ["method", "group", "n", "coverage"], group_rows)
    _write_manifest(config, out)
    return reports


_STAGE_ARTIFACTS = {
    "gen-data": ("data.csv",),
    "train": ("moe_model.json", "mc_dropout_model.json"),
    "calibrate": tuple(f"calibration_{k.value}.json" for k in ScaleKind),
    "evaluate": ("uncertainty_stats.json",),
}


def _write_manifest(config: ExperimentConfig, out: Path,
                    failed_stage: str | None = None) -> None:
    artifacts = sorted(str(p.relative_to(out)).replace("\\", "/")
                       for p in out.rglob("*")
                       if p.is_file() and p.name != "manifest.json")
    stages = {name: ("ok" if all((out / a).exists() for a in needs) else "missing")
              for name, needs in _STAGE_ARTIFACTS.items()}
    if failed_stage is not None:
        stages[failed_stage] = "failed"
    serialize.dump({
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "stages": stages,
        "artifacts": artifacts,
        "status": "failed" if failed_stage else "ok",
    }, out / "manifest.json")


def run_experiment(config: ExperimentConfig, out: Path | str | None = None) -> Path:
    """All four stages in order; on failure the manifest records the stage
    that failed before the error propagates."""
    out = Path(config.output_dir if out is None else out)
    stages = (("gen-data", stage_gen_data), ("train", stage_train),
              ("calibrate", stage_calibrate), ("evaluate", stage_evaluate))
    for name, fn in stages:
        try:
            fn(config, out)
        except Exception:
            out.mkdir(parents=True, exist_ok=True)
            _write_manifest(config, out, failed_stage=name)
            raise
    return out


_REPORT_SCALARS = ("picp", "mpiw", "nmpiw", "ause", "rmse", "mae",
                   "pearson", "spearman", "nll")


def build_report(run_dirs, out_dir: Path | str) -> dict:
    """Aggregate per-method metrics across runs into mean/std tables.

    Writes report.json and report.csv under ``out_dir`` and returns the
    aggregated mapping.
    """
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ConfigError("need at least one run directory")
    per_method: dict[str, dict[str, list[float]]] = {}
    for d in run_dirs:
        files = sorted(d.glob("metrics_*.json"))
        if not files:
            raise ConfigError(f"no metrics files under {d}")
        for f in files:
            data = serialize.load(f)
            method = data["method"]
            bucket = per_method.setdefault(method, {})
            for key in _REPORT_SCALARS:
                bucket.setdefault(key, []).append(serialize.from_jsonable_float(data[key]))
            for eta, val in data["cwc"].items():
                bucket.setdefault(f"cwc_{eta}", []).append(serialize.from_jsonable_float(val))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = {}
    rows = []
    for method in sorted(per_method):
        table[method] = {}
        for key in sorted(per_method[method]):
            vals = np.asarray(per_method[method][key], dtype=np.float64)
            mean = float(np.mean(vals))
            std = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
            table[method][key] = {"mean": mean, "std": std, "n_runs": int(vals.size)}
            rows.append((method, key, mean, std, vals.size))
    serialize.dump(table, out_dir / "report.json")
    serialize.write_csv(out_dir / "report.csv",
                        ["method", "metric", "mean", "std", "n_runs"], rows)
    return table
