"""Synthetic regression data with controlled noise structure, dataset
splitting, and a lossless CSV round trip.

Generators record the true noise scale alongside each sample so adaptivity
metrics can be checked against ground truth. Everything is a pure function
of its seed.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, CsvFormatError, DimensionError
from .nn import Array, make_rng
from . import serialize

SPLIT_TAGS = ("train", "test", "val", "cal")
DEFAULT_FRACTIONS = (0.6, 0.2, 0.1, 0.1)
NOISE_PROFILES = ("constant", "linear", "step")


@dataclass
class Dataset:
    """Feature matrix, targets, and optional per-sample annotations.

    ``sigma_true`` is the generating noise scale when known; ``groups``
    are string labels; ``split`` holds one of the four split tags.
    """

    X: Array
    y: Array
    sigma_true: Array | None = None
    groups: np.ndarray | None = None
    split: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        n = self.X.shape[0]
        if n == 0 or self.X.shape[1] == 0:
            raise DimensionError("dataset must have rows and features")
        if self.y.shape[0] != n:
            raise DimensionError("y must have one target per row")
        if self.sigma_true is not None:
            self.sigma_true = np.asarray(self.sigma_true, dtype=np.float64).ravel()
            if self.sigma_true.shape[0] != n:
                raise DimensionError("sigma_true must have one entry per row")
            if np.any(self.sigma_true < 0):
                raise DimensionError("sigma_true must be nonnegative")
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=str)
            if self.groups.shape != (n,):
                raise DimensionError("groups must have one label per row")
            if any(g == "" for g in self.groups):
                raise DimensionError("group labels must be nonempty")
        if self.split is not None:
            self.split = np.asarray(self.split, dtype=str)
            if self.split.shape != (n,):
                raise DimensionError("split must have one tag per row")
            bad = sorted(set(self.split) - set(SPLIT_TAGS))
            if bad:
                raise DimensionError(f"unknown split tags: {bad}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def select(self, mask) -> "Dataset":
        """Row subset (boolean mask or index array); metadata is shared."""
        return Dataset(
            X=self.X[mask],
            y=self.y[mask],
            sigma_true=None if self.sigma_true is None else self.sigma_true[mask],
            groups=None if self.groups is None else self.groups[mask],
            split=None if self.split is None else self.split[mask],
            meta=self.meta,
        )

    def part(self, tag: str) -> "Dataset":
        """Rows carrying one split tag."""
        if self.split is None:
            raise DimensionError("dataset has no split assignment")
        if tag not in SPLIT_TAGS:
            raise DimensionError(f"unknown split tag {tag!r}")
        mask = self.split == tag
        if not np.any(mask):
            raise DimensionError(f"split {tag!r} is empty")
        return self.select(mask)


def _smooth_f(X: Array) -> Array:
    # fixed sum of sinusoids plus a mild affine trend; amplitude O(1) in d
    d = X.shape[1]
    freqs = 1.0 + 0.5 * np.arange(d)
    return (2.0 / np.sqrt(d)) * np.sin(X * freqs).sum(axis=1) \
        + 0.3 * X.sum(axis=1) / np.sqrt(d)


def _noise_scale(X: Array, profile: str, noise_low: float, noise_high: float,
                 noise_level: float) -> Array:
    n, d = X.shape
    if profile == "constant":
        return np.full(n, float(noise_level))
    if profile == "linear":
        # scales linearly in |x| from noise_low at the origin to noise_high
        # at the corner of the sampling box
        r = np.linalg.norm(X, axis=1) / (2.0 * np.sqrt(d))
        return noise_low + (noise_high - noise_low) * r
    if profile == "step":
        return np.where(X[:, 0] > 0.0, float(noise_high), float(noise_low))
    raise ConfigError(f"unknown noise profile {profile!r}")


def gen_heteroscedastic(n: int, dim: int, noise_profile: str = "step", seed: int = 0,
                        noise_low: float = 0.2, noise_high: float = 1.0,
                        noise_level: float = 0.5) -> Dataset:
    """Smooth signal plus input-dependent Gaussian noise.

    Features are uniform on [-2, 2]^dim. The noise scale follows the named
    profile: ``constant`` everywhere, ``linear`` in the distance from the
    origin, or a two-level ``step`` on the sign of the first feature.
    """
    if n < 1 or dim < 1:
        raise DimensionError("n and dim must be >= 1")
    if noise_profile not in NOISE_PROFILES:
        raise ConfigError(f"unknown noise profile {noise_profile!r}")
    if noise_low < 0 or noise_high < 0 or noise_level < 0:
        raise ConfigError("noise scales must be nonnegative")
    rng = make_rng(seed)
    X = rng.uniform(-2.0, 2.0, size=(n, dim))
    sigma = _noise_scale(X, noise_profile, noise_low, noise_high, noise_level)
    y = _smooth_f(X) + sigma * rng.standard_normal(n)
    meta = {
        "generator": "heteroscedastic",
        "n": int(n), "dim": int(dim), "seed": int(seed),
        "noise_profile": noise_profile,
        "noise_low": float(noise_low), "noise_high": float(noise_high),
        "noise_level": float(noise_level),
    }
    return Dataset(X=X, y=y, sigma_true=sigma, meta=meta)


def gen_clustered_shift(n: int, dim: int, n_clusters: int = 8,
                        held_out_clusters=(6, 7), seed: int = 0,
                        mode: str = "ood", fractions=DEFAULT_FRACTIONS,
                        cluster_std: float = 0.5, center_radius: float = 2.0,
                        ood_radius: float = 6.0, noise: float = 0.3) -> Dataset:
    """Gaussian clusters with a distribution-shift split.

    In ``ood`` mode every sample from the held-out clusters goes to the
    test split and the remaining rows are split train/val/cal at the
    relative proportions of ``fractions``; calibration therefore sees no
    shifted data. In ``iid`` mode cluster identity is ignored and rows are
    split like any other dataset. Held-out cluster centers sit at
    ``ood_radius`` from the origin while the rest stay near
    ``center_radius``, so the shift is controllably far.
    """
    if n < n_clusters:
        raise DimensionError("need at least one sample per cluster")
    if dim < 1 or n_clusters < 2:
        raise DimensionError("dim must be >= 1 and n_clusters >= 2")
    held = sorted(set(int(c) for c in held_out_clusters))
    if mode not in ("ood", "iid"):
        raise ConfigError(f"unknown mode {mode!r}")
    if any(c < 0 or c >= n_clusters for c in held):
        raise ConfigError("held_out_clusters must be valid cluster indices")
    if mode == "ood" and (not held or len(held) >= n_clusters):
        raise ConfigError("ood mode needs a nonempty strict subset of held-out clusters")
    if not (cluster_std > 0 and center_radius > 0 and ood_radius > 0 and noise >= 0):
        raise ConfigError("cluster geometry parameters must be positive")
    rng = make_rng(seed)
    centers = rng.normal(0.0, center_radius, size=(n_clusters, dim))
    for c in held:
        direction = rng.standard_normal(dim)
        norm = np.linalg.norm(direction)
        if norm == 0.0:
            direction = np.ones(dim)
            norm = np.sqrt(dim)
        centers[c] = direction / norm * ood_radius
    base, rem = divmod(n, n_clusters)
    counts = np.full(n_clusters, base)
    counts[:rem] += 1
    assignment = np.repeat(np.arange(n_clusters), counts)
    rng.shuffle(assignment)
    X = centers[assignment] + cluster_std * rng.standard_normal((n, dim))
    sigma = np.full(n, float(noise))
    y = _smooth_f(X) + sigma * rng.standard_normal(n)
    groups = np.array([f"cluster_{c:02d}" for c in assignment])
    ds = Dataset(X=X, y=y, sigma_true=sigma, groups=groups, meta={
        "generator": "clustered_shift",
        "n": int(n), "dim": int(dim), "seed": int(seed),
        "n_clusters": int(n_clusters), "held_out_clusters": held,
        "mode": mode, "fractions": [float(f) for f in fractions],
        "cluster_std": float(cluster_std), "center_radius": float(center_radius),
        "ood_radius": float(ood_radius), "noise": float(noise),
    })
    if mode == "iid":
        return split_dataset(ds, fractions=fractions, seed=seed)
    split = np.empty(n, dtype=object)
    held_mask = np.isin(assignment, held)
    split[held_mask] = "test"
    rest_idx = np.flatnonzero(~held_mask)
    if rest_idx.size == 0:
        raise ConfigError("held-out clusters swallowed every sample")
    rest_fracs = np.array([fractions[0], fractions[2], fractions[3]], dtype=np.float64)
    rest_fracs = rest_fracs / rest_fracs.sum()
    perm = rest_idx[rng.permutation(rest_idx.size)]
    edges = np.round(np.cumsum(rest_fracs) * rest_idx.size).astype(int)
    edges[-1] = rest_idx.size
    for tag, lo, hi in zip(("train", "val", "cal"), np.r_[0, edges[:-1]], edges):
        split[perm[lo:hi]] = tag
    ds.split = np.asarray(split, dtype=str)
    return ds


def split_dataset(ds: Dataset, fractions=DEFAULT_FRACTIONS, mode: str = "random",
                  seed: int = 0) -> Dataset:
    """Assign split tags (train, test, val, cal) at the given fractions.

    ``random`` permutes rows; realized sizes are within one row of exact.
    ``by_group`` keeps each group intact, assigning whole groups greedily
    (largest first) to whichever split is furthest below its target.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (4,):
        raise ConfigError("fractions must list four values (train, test, val, cal)")
    if np.any(fr < 0) or abs(float(fr.sum()) - 1.0) > 1e-9:
        raise ConfigError("fractions must be nonnegative and sum to 1")
    n = ds.n
    split = np.empty(n, dtype=object)
    if mode == "random":
        rng = make_rng(seed)
        perm = rng.permutation(n)
        edges = np.round(np.cumsum(fr) * n).astype(int)
        edges[-1] = n
        for tag, lo, hi in zip(SPLIT_TAGS, np.r_[0, edges[:-1]], edges):
            split[perm[lo:hi]] = tag
    elif mode == "by_group":
        if ds.groups is None:
            raise ConfigError("by_group split requires group labels")
        names, counts = np.unique(ds.groups, return_counts=True)
        order = np.lexsort((names, -counts))
        targets = fr * n
        assigned = np.zeros(4)
        choice: dict[str, str] = {}
        for i in order:
            deficits = targets - assigned
            pick = int(np.argmax(deficits))
            if counts[i] > targets[pick]:
                warnings.warn(f"group {str(names[i])!r} ({counts[i]} rows) exceeds "
                              f"the {SPLIT_TAGS[pick]} target of {targets[pick]:.1f}",
                              stacklevel=2)
            choice[str(names[i])] = SPLIT_TAGS[pick]
            assigned[pick] += counts[i]
        for j, g in enumerate(ds.groups):
            split[j] = choice[str(g)]
    else:
        raise ConfigError(f"unknown split mode {mode!r}")
    out = ds.select(np.arange(n))
    out.split = np.asarray(split, dtype=str)
    out.meta = dict(ds.meta)
    out.meta["split"] = {"fractions": [float(f) for f in fr], "mode": mode,
                         "seed": int(seed)}
    return out


def save_csv(ds: Dataset, path) -> None:
    """Write the dataset and, when metadata exists, a JSON sidecar.

    Floats are shortest-repr, so a load reproduces the exact values.
    """
    path = Path(path)
    header = [f"feature_{j}" for j in range(ds.dim)] + ["target"]
    if ds.sigma_true is not None:
        header.append("sigma_true")
    if ds.groups is not None:
        header.append("group")
    if ds.split is not None:
        header.append("split")
    rows = []
    for i in range(ds.n):
        row = [serialize.format_float(v) for v in ds.X[i]]
        row.append(serialize.format_float(ds.y[i]))
        if ds.sigma_true is not None:
            row.append(serialize.format_float(ds.sigma_true[i]))
        if ds.groups is not None:
            row.append(str(ds.groups[i]))
        if ds.split is not None:
            row.append(str(ds.split[i]))
        rows.append(",".join(row))
    path.write_text(",".join(header) + "\n" + "\n".join(rows) + "\n")
    if ds.meta:
        serialize.dump(ds.meta, path.with_name(path.name + ".meta.json"))


def load_csv(path) -> Dataset:
    """Inverse of :func:`save_csv`; malformed rows name their line number."""
    path = Path(path)
    text = path.read_text()
    lines = [ln for ln in text.split("\n") if ln != ""]
    if not lines:
        raise CsvFormatError(f"{path.name}: empty file")
    header = lines[0].split(",")
    feat_cols = [h for h in header if h.startswith("feature_")]
    dim = len(feat_cols)
    if dim == 0 or feat_cols != [f"feature_{j}" for j in range(dim)]:
        raise CsvFormatError(f"{path.name}: header must start with feature_0..feature_{{d-1}}")
    if "target" not in header:
        raise CsvFormatError(f"{path.name}: missing target column")
    col = {name: i for i, name in enumerate(header)}
    known = set(feat_cols) | {"target", "sigma_true", "group", "split"}
    unknown = [h for h in header if h not in known]
    if unknown:
        raise CsvFormatError(f"{path.name}: unknown columns {unknown}")
    n = len(lines) - 1
    if n == 0:
        raise CsvFormatError(f"{path.name}: no data rows")
    X = np.empty((n, dim))
    y = np.empty(n)
    sigma = np.empty(n) if "sigma_true" in col else None
    groups = [] if "group" in col else None
    split = [] if "split" in col else None
    for i, line in enumerate(lines[1:]):
        lineno = i + 2  # 1-based, after the header line
        cells = line.split(",")
        if len(cells) != len(header):
            raise CsvFormatError(f"{path.name}: line {lineno}: expected "
                                 f"{len(header)} cells, got {len(cells)}")
        try:
            for j in range(dim):
                X[i, j] = float(cells[col[f"feature_{j}"]])
            y[i] = float(cells[col["target"]])
            if sigma is not None:
                sigma[i] = float(cells[col["sigma_true"]])
        except ValueError as e:
            raise CsvFormatError(f"{path.name}: line {lineno}: {e}") from e
        if groups is not None:
            groups.append(cells[col["group"]])
        if split is not None:
            split.append(cells[col["split"]])
    meta = {}
    sidecar = path.with_name(path.name + ".meta.json")
    if sidecar.exists():
        meta = serialize.load(sidecar)
    try:
        return Dataset(X=X, y=y, sigma_true=sigma,
                       groups=None if groups is None else np.asarray(groups),
                       split=None if split is None else np.asarray(split),
                       meta=meta)
    except DimensionError as e:
        raise CsvFormatError(f"{path.name}: {e}") from e
