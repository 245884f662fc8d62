"""Monte Carlo dropout baseline.

A small MLP trained on squared error with inverted dropout on its hidden
layers. Dropout stays on at prediction time: T stochastic passes give a
per-sample mean and an unbiased variance, turned into Gaussian intervals
mean +/- z_{1-alpha/2} * std.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .conformal import PredictionIntervals
from .errors import ConfigError, DimensionError, TrainingError
from .nn import AdamState, Array, Mlp, adam_step, as_rng, make_rng

CHECKPOINT_VERSION = 1


class DropoutMlp:
    """MLP regressor whose hidden units are dropped out both in training
    and at prediction time."""

    def __init__(self, net: Mlp, dropout: float = 0.5):
        if net.output_dim != 1:
            raise DimensionError("dropout regressor must emit a single output")
        if not (0.0 <= dropout < 1.0):
            raise ConfigError("dropout rate must lie in [0, 1)")
        self.net = net
        self.dropout = float(dropout)

    @classmethod
    def init(cls, input_dim: int, hidden: int = 64, dropout: float = 0.5,
             activation: str = "relu",
             rng: int | np.random.Generator | None = None) -> "DropoutMlp":
        net = Mlp.init((input_dim, hidden, 1), activation, as_rng(0 if rng is None else rng))
        return cls(net, dropout)

    @property
    def input_dim(self) -> int:
        return self.net.input_dim

    def sample_masks(self, n: int, rng: np.random.Generator) -> list[Array]:
        """Inverted-dropout masks, one per hidden layer: 0 with probability
        p, else 1/(1-p), so the masked activation is unbiased."""
        keep = 1.0 - self.dropout
        masks = []
        for w in self.net.weights[:-1]:
            m = (rng.random((n, w.shape[1])) < keep).astype(np.float64) / keep
            masks.append(m)
        return masks

    def stochastic_forward(self, x: Array, rng: np.random.Generator) -> Array:
        X = np.atleast_2d(np.asarray(x, dtype=np.float64))
        masks = self.sample_masks(X.shape[0], rng)
        return self.net.forward(X, hidden_masks=masks)[:, 0]

    def deterministic_forward(self, x: Array) -> Array:
        X = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self.net.forward(X)[:, 0]

    def to_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "kind": "mc_dropout",
            "dropout": self.dropout,
            "net": self.net.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DropoutMlp":
        if d.get("format_version") != CHECKPOINT_VERSION:
            raise DimensionError(f"unsupported checkpoint version {d.get('format_version')!r}")
        if d.get("kind") != "mc_dropout":
            raise DimensionError(f"checkpoint kind {d.get('kind')!r} is not a dropout model")
        return cls(Mlp.from_dict(d["net"]), float(d["dropout"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DropoutMlp":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class DropoutTrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not (self.lr > 0):
            raise ConfigError("epochs and batch_size must be >= 1 and lr positive")


def train_dropout(model: DropoutMlp, x: Array, y: Array,
                  config: DropoutTrainConfig | None = None) -> list[float]:
    """Minibatch Adam on mean squared error with dropout active.

    Returns the per-epoch full-data MSE measured without dropout. The run
    is a pure function of (initial weights, data, config.seed).
    """
    config = config or DropoutTrainConfig()
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    yv = np.asarray(y, dtype=np.float64).ravel()
    n = X.shape[0]
    if n == 0:
        raise DimensionError("empty training set")
    if yv.shape[0] != n:
        raise DimensionError("targets must pair with inputs")
    rng = make_rng(config.seed)
    params = model.net.parameters()
    state = AdamState(params, lr=config.lr)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            Xb, yb = X[idx], yv[idx]
            masks = model.sample_masks(Xb.shape[0], rng)
            out, cache = model.net.forward_cache(Xb, hidden_masks=masks)
            resid = out[:, 0] - yb
            upstream = (2.0 * resid / Xb.shape[0])[:, None]
            grads = model.net.backward(cache, upstream)
            params = adam_step(state, params, grads)
            model.net.set_parameters(params)
        mse = float(np.mean((model.deterministic_forward(X) - yv) ** 2))
        if not np.isfinite(mse):
            raise TrainingError(f"non-finite training loss (epoch {epoch})")
        history.append(mse)
    return history


def mc_predict(model: DropoutMlp, x: Array, passes: int = 50,
               rng: int | np.random.Generator | None = None) -> tuple[Array, Array]:
    """Mean and unbiased variance over ``passes`` stochastic forward passes."""
    if passes < 2:
        raise ConfigError("need at least two passes for an unbiased variance")
    rng = as_rng(0 if rng is None else rng)
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    draws = np.empty((passes, X.shape[0]))
    for t in range(passes):
        draws[t] = model.stochastic_forward(X, rng)
    return draws.mean(axis=0), draws.var(axis=0, ddof=1)


def mc_intervals(mean: Array, variance: Array, alpha: float = 0.10) -> PredictionIntervals:
    """Symmetric Gaussian intervals mean +/- z_{1-alpha/2} * sqrt(variance)."""
    m = np.asarray(mean, dtype=np.float64).ravel()
    v = np.asarray(variance, dtype=np.float64).ravel()
    if m.shape != v.shape or m.size == 0:
        raise DimensionError("mean and variance must be nonempty and equal length")
    if np.any(v < 0):
        raise DimensionError("variances must be nonnegative")
    if not (0.0 < alpha < 1.0):
        raise ConfigError("alpha must lie strictly between 0 and 1")
    z = float(norm.ppf(1.0 - alpha / 2.0))
    sd = np.sqrt(v)
    half = z * sd
    return PredictionIntervals(center=m, lower=m - half, upper=m + half, scale=sd,
                               half=half)
