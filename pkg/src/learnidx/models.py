"""Regression primitives used by the staged index.

Two model families: closed-form least-squares lines and a small ReLU
multilayer perceptron trained with plain mini-batch gradient descent.
Everything operates on float64 numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LinearModel:
    slope: float
    intercept: float

    def __post_init__(self):
        if not (math.isfinite(self.slope) and math.isfinite(self.intercept)):
            raise ValueError("linear model parameters must be finite")

    def predict(self, x):
        return self.slope * np.asarray(x, dtype=np.float64) + self.intercept

    def n_params(self) -> int:
        return 2


@dataclass(frozen=True)
class ModelArch:
    """Root architecture: ``hidden_layers == 0`` means a linear model."""

    hidden_layers: int = 0
    width: int = 0

    def __post_init__(self):
        if self.hidden_layers == 0:
            if self.width != 0:
                raise ValueError("linear arch takes no width")
        elif self.hidden_layers in (1, 2):
            if self.width <= 0:
                raise ValueError("NN width must be positive")
        else:
            raise ValueError("hidden_layers must be 0, 1 or 2")

    @property
    def is_linear(self) -> bool:
        return self.hidden_layers == 0

    @property
    def name(self) -> str:
        if self.is_linear:
            return "LIN"
        if self.hidden_layers == 1:
            return f"NN{self.width}"
        return f"NN2-{self.width}"

    @property
    def layer_widths(self) -> list[int]:
        return [1] + [self.width] * self.hidden_layers + [1]

    def flops(self) -> int:
        """Multiply-add count of one forward pass (ReLU counted as one op)."""
        if self.is_linear:
            return 2
        widths = self.layer_widths
        ops = 0
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            ops += 2 * fan_in * fan_out
        ops += self.width * self.hidden_layers
        return ops

    @classmethod
    def parse(cls, text: str) -> "ModelArch":
        t = text.strip().upper()
        if t in ("LIN", "LINEAR"):
            return cls()
        if t.startswith("NN2-"):
            return cls(2, int(t[4:]))
        if t.startswith("NN"):
            return cls(1, int(t[2:]))
        raise ValueError(f"unknown architecture {text!r}")

    def __str__(self) -> str:
        return self.name


LIN = ModelArch()

DEFAULT_ARCHS = (
    LIN,
    ModelArch(1, 4),
    ModelArch(1, 8),
    ModelArch(1, 16),
    ModelArch(2, 4),
    ModelArch(2, 8),
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 0.1
    batch_size: int = 256
    seed: int = 0
    fine_tune_epochs: int = 50

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.fine_tune_epochs <= 0:
            raise ValueError("epochs, batch_size and fine_tune_epochs must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.fine_tune_epochs > self.epochs:
            raise ValueError("fine_tune_epochs must not exceed epochs")


@dataclass
class NeuralNet:
    layer_widths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    final_loss: float = float("nan")
    arch: ModelArch = field(default=LIN)

    def __post_init__(self):
        widths = self.layer_widths
        if len(widths) < 3 or widths[0] != 1 or widths[-1] != 1:
            raise ValueError("layer_widths must be [1, hidden..., 1]")
        if len(self.weights) != len(widths) - 1 or len(self.biases) != len(widths) - 1:
            raise ValueError("one weight matrix and bias vector per layer")
        for w, b, fan_in, fan_out in zip(self.weights, self.biases, widths[:-1], widths[1:]):
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ValueError("parameter shape does not match layer_widths")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("neural net parameters must be finite")
        if self.arch.is_linear:
            self.arch = ModelArch(len(widths) - 2, widths[1])

    def predict(self, x):
        return nn_forward(self, x)

    def flat_params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def n_params(self) -> int:
        return int(sum(w.size + b.size for w, b in zip(self.weights, self.biases)))

    def copy(self) -> "NeuralNet":
        return NeuralNet(
            list(self.layer_widths),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.final_loss,
            self.arch,
        )


def _as_xy(pairs) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pairs, tuple) and len(pairs) == 2 and isinstance(pairs[0], np.ndarray):
        x, y = pairs
    else:
        arr = np.asarray(list(pairs), dtype=np.float64)
        if arr.size == 0:
            return np.empty(0), np.empty(0)
        x, y = arr[:, 0], arr[:, 1]
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)


def fit_linear(pairs) -> LinearModel:
    """Least-squares line through ``pairs``.

    ``pairs`` is either a sequence of ``(x, y)`` tuples or an ``(x, y)``
    tuple of arrays. Constant x yields ``slope=0, intercept=mean(y)``.
    """
    x, y = _as_xy(pairs)
    if x.size == 0:
        raise ValueError("empty training set")
    if not np.all(np.isfinite(x)):
        raise ValueError("x values must be finite")
    x_mean = x.mean()
    y_mean = y.mean()
    dx = x - x_mean
    sxx = float(np.dot(dx, dx))
    if sxx == 0.0:
        return LinearModel(0.0, float(y_mean))
    slope = float(np.dot(dx, y - y_mean)) / sxx
    return LinearModel(slope, float(y_mean - slope * x_mean))


def linear_predict(m: LinearModel, x):
    return m.slope * x + m.intercept


def nn_forward(m: NeuralNet, x):
    """Feed-forward evaluation; scalar in, scalar out, or array in, array out.

    Every product is elementwise with a fixed summation order, so a key
    gets bit-identical output whether it is evaluated alone or in a batch.
    Routing depends on that.
    """
    scalar = np.ndim(x) == 0
    h = np.atleast_1d(np.asarray(x, dtype=np.float64))[:, None]
    last = len(m.weights) - 1
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        out = h[:, 0:1] * w[0]
        for k in range(1, w.shape[0]):
            out = out + h[:, k : k + 1] * w[k]
        out = out + b
        h = out if i == last else np.maximum(out, 0.0)
    y = h[:, 0]
    return float(y[0]) if scalar else y


def init_nn(arch: ModelArch, seed: int) -> NeuralNet:
    if arch.is_linear:
        raise ValueError("init_nn needs an NN architecture")
    rng = np.random.default_rng(seed)
    widths = arch.layer_widths
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return NeuralNet(widths, weights, biases, arch=arch)


def _forward_cache(weights, biases, x):
    acts = [x[:, None]]
    pre = []
    h = acts[0]
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return pre, acts


def nn_loss_and_grads(weights, biases, x, y):
    """Mean squared error and its analytic gradient for one batch."""
    pre, acts = _forward_cache(weights, biases, x)
    n = x.shape[0]
    resid = acts[-1][:, 0] - y
    loss = float(np.dot(resid, resid)) / n
    delta = (2.0 / n) * resid[:, None]
    gw = [None] * len(weights)
    gb = [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights[i].T) * (pre[i - 1] > 0.0)
    return loss, gw, gb


def _mse(weights, biases, x, y) -> float:
    _, acts = _forward_cache(weights, biases, x)
    r = acts[-1][:, 0] - y
    return float(np.dot(r, r)) / x.shape[0]


def _standardizer(x: np.ndarray) -> tuple[float, float]:
    mu = float(x.mean())
    sd = float(x.std())
    return mu, (sd if sd > 0 else 1.0)


def _to_standardized(weights, biases, mu: float, sd: float):
    """Re-express first-layer parameters for inputs ``(x - mu) / sd``."""
    weights = [w.copy() for w in weights]
    biases = [b.copy() for b in biases]
    biases[0] = biases[0] + mu * weights[0][0]
    weights[0] = weights[0] * sd
    return weights, biases


def _from_standardized(weights, biases, mu: float, sd: float):
    weights = [w.copy() for w in weights]
    biases = [b.copy() for b in biases]
    weights[0] = weights[0] / sd
    biases[0] = biases[0] - mu * weights[0][0]
    return weights, biases


def _run_gd(weights, biases, z, y, epochs: int, cfg: TrainConfig, seed: int, keep_best: bool):
    """Mini-batch gradient descent on standardized inputs ``z``."""
    weights = [w.copy() for w in weights]
    biases = [b.copy() for b in biases]
    rng = np.random.default_rng(seed)
    n = z.shape[0]
    bs = min(cfg.batch_size, n)
    lr = cfg.learning_rate

    best_loss = _mse(weights, biases, z, y) if keep_best else math.inf
    best = ([w.copy() for w in weights], [b.copy() for b in biases])
    loss = best_loss
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, bs):
                idx = order[start : start + bs]
                _, gw, gb = nn_loss_and_grads(weights, biases, z[idx], y[idx])
                for i in range(len(weights)):
                    weights[i] -= lr * gw[i]
                    biases[i] -= lr * gb[i]
            loss = _mse(weights, biases, z, y)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"training diverged at epoch {epoch}")
            if keep_best and loss < best_loss:
                best_loss = loss
                best = ([w.copy() for w in weights], [b.copy() for b in biases])
    if keep_best:
        return best[0], best[1], best_loss
    return weights, biases, loss


def fit_nn(pairs, arch: ModelArch, cfg: TrainConfig) -> NeuralNet:
    """Train a fresh network. Inputs are expected in ``[0, 1]`` already.

    Training runs on standardized inputs and the affine map is folded into
    the first layer afterwards, so the result takes raw inputs.
    """
    if arch.is_linear:
        raise ValueError(f"fit_nn needs an NN architecture, got {arch.name}")
    x, y = _as_xy(pairs)
    if x.size == 0:
        raise ValueError("empty training set")
    mu, sd = _standardizer(x)
    net = init_nn(arch, cfg.seed)
    weights, biases, _ = _run_gd(net.weights, net.biases, (x - mu) / sd, y, cfg.epochs, cfg, cfg.seed + 1, keep_best=False)
    weights, biases = _from_standardized(weights, biases, mu, sd)
    out = NeuralNet(arch.layer_widths, weights, biases, arch=arch)
    out.final_loss = mse(out, (x, y))
    return out


def fine_tune(model, pairs, cfg: TrainConfig):
    """Continue training ``model`` on ``pairs`` for ``cfg.fine_tune_epochs``.

    Returns the lowest-loss snapshot seen, which may be the starting
    parameters. A linear model is simply refit in closed form.
    """
    if isinstance(model, LinearModel):
        return fit_linear(pairs)
    x, y = _as_xy(pairs)
    if x.size == 0:
        raise ValueError("empty training set")
    mu, sd = _standardizer(x)
    w0, b0 = _to_standardized(model.weights, model.biases, mu, sd)
    weights, biases, _ = _run_gd(w0, b0, (x - mu) / sd, y, cfg.fine_tune_epochs, cfg, cfg.seed + 2, keep_best=True)
    weights, biases = _from_standardized(weights, biases, mu, sd)
    out = NeuralNet(list(model.layer_widths), weights, biases, arch=model.arch)
    out.final_loss = mse(out, (x, y))
    start_loss = mse(model, (x, y))
    if not out.final_loss <= start_loss:
        # folding round-off can cost an ulp when no epoch improved
        out = model.copy()
        out.final_loss = start_loss
    return out


def mse(model, pairs) -> float:
    x, y = _as_xy(pairs)
    r = np.asarray(model.predict(x)) - y
    return float(np.dot(r, r)) / x.size


def set_flat_params(net: NeuralNet, flat: Sequence[float]) -> NeuralNet:
    flat = np.asarray(flat, dtype=np.float64)
    weights, biases = [], []
    pos = 0
    for w, b in zip(net.weights, net.biases):
        weights.append(flat[pos : pos + w.size].reshape(w.shape))
        pos += w.size
        biases.append(flat[pos : pos + b.size].copy())
        pos += b.size
    if pos != flat.size:
        raise ValueError("flat parameter vector has the wrong length")
    return NeuralNet(list(net.layer_widths), weights, biases, net.final_loss, net.arch)
