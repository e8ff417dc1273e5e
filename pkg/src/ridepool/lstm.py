"""A small LSTM -> fully connected -> ReLU network written directly in numpy.

Gate order in the stacked weight tensors is input, forget, output, cell
candidate (``i, f, o, g``).  Training uses backpropagation through time over
fixed windows and Adam.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .errors import ConfigError, FormatError, InvalidInputError, NumericOverflowError

FORMAT_HEADER = "ridepool-lstm"
FORMAT_VERSION = 1
TENSORS = ("W", "U", "b", "F", "c")


@dataclass
class LstmParams:
    W: np.ndarray  # (4, hidden, input)
    U: np.ndarray  # (4, hidden, hidden)
    b: np.ndarray  # (4, hidden)
    F: np.ndarray  # (input, hidden)
    c: np.ndarray  # (input,)
    scale: float = 1.0

    def __post_init__(self):
        for name in TENSORS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        hidden, inp = self.hidden_dim, self.input_dim
        expected = {"W": (4, hidden, inp), "U": (4, hidden, hidden), "b": (4, hidden),
                    "F": (inp, hidden), "c": (inp,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise InvalidInputError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if not all(np.all(np.isfinite(getattr(self, n))) for n in TENSORS):
            raise InvalidInputError("parameters must be finite")

    @property
    def input_dim(self) -> int:
        return self.W.shape[2]

    @property
    def hidden_dim(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "LstmParams":
        return LstmParams(*(getattr(self, n).copy() for n in TENSORS), scale=self.scale)

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in TENSORS}

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "LstmParams":
        return cls(np.zeros((4, hidden_dim, input_dim)), np.zeros((4, hidden_dim, hidden_dim)),
                   np.zeros((4, hidden_dim)), np.zeros((input_dim, hidden_dim)), np.zeros(input_dim))


@dataclass
class LstmState:
    h: np.ndarray
    cell: np.ndarray

    @classmethod
    def zeros(cls, hidden_dim: int) -> "LstmState":
        return cls(np.zeros(hidden_dim), np.zeros(hidden_dim))

    def copy(self) -> "LstmState":
        return LstmState(self.h.copy(), self.cell.copy())


@dataclass(frozen=True)
class TrainConfig:
    window: int = 30
    learning_rate: float = 1e-2
    epochs: int = 20
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    stride: int | None = None
    seed: int = 0
    steps_per_day: int = 1440

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


def init_params(input_dim: int, hidden_dim: int | None = None, seed: int = 0) -> LstmParams:
    """Uniform(-k, k) initialisation with k = 1/sqrt(hidden); forget-gate bias 1."""
    hidden_dim = hidden_dim or input_dim
    rng = np.random.default_rng(seed)
    k = 1.0 / math.sqrt(hidden_dim)
    W = rng.uniform(-k, k, (4, hidden_dim, input_dim))
    U = rng.uniform(-k, k, (4, hidden_dim, hidden_dim))
    b = rng.uniform(-k, k, (4, hidden_dim))
    b[1] = 1.0
    F = rng.uniform(-k, k, (input_dim, hidden_dim))
    # positive output bias keeps every ReLU unit alive at the start of training
    c = np.full(input_dim, k)
    return LstmParams(W, U, b, F, c)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _step(params, h, cell, x):
    z = params.W @ x + params.U @ h + params.b
    i = _sigmoid(z[0])
    f = _sigmoid(z[1])
    o = _sigmoid(z[2])
    g = np.tanh(z[3])
    cell_new = f * cell + i * g
    tc = np.tanh(cell_new)
    h_new = o * tc
    a = params.F @ h_new + params.c
    y = np.maximum(a, 0.0)
    return h_new, cell_new, y, (i, f, o, g, tc, a)


def lstm_forward(params: LstmParams, state: LstmState, x: np.ndarray) -> tuple[LstmState, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.input_dim,):
        raise InvalidInputError(f"input has shape {x.shape}, expected ({params.input_dim},)")
    if state.h.shape != (params.hidden_dim,) or state.cell.shape != (params.hidden_dim,):
        raise InvalidInputError("state dimensions do not match hidden_dim")
    h, cell, y, _ = _step(params, state.h, state.cell, x)
    return LstmState(h, cell), y


def lstm_loss_grad(params: LstmParams, inputs: np.ndarray, targets: np.ndarray,
                   state: LstmState | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error of a sequence and its gradient by backpropagation through time."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    T = len(inputs)
    if inputs.shape != targets.shape or inputs.ndim != 2 or inputs.shape[1] != params.input_dim:
        raise InvalidInputError(f"inputs/targets must both be (T, {params.input_dim})")
    if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(targets))):
        raise InvalidInputError("inputs and targets must be finite")
    state = state or LstmState.zeros(params.hidden_dim)
    hs, cells, caches, ys = [state.h], [state.cell], [], []
    for t in range(T):
        h, cell, y, cache = _step(params, hs[-1], cells[-1], inputs[t])
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(cell)) and np.all(np.isfinite(y))):
            raise NumericOverflowError(f"non-finite activation at step {t}", step=t)
        hs.append(h)
        cells.append(cell)
        caches.append(cache)
        ys.append(y)
    ys = np.array(ys)
    diff = ys - targets
    with np.errstate(over="ignore"):
        sq = diff * diff
    bad = np.flatnonzero(~np.all(np.isfinite(sq), axis=1))
    if len(bad):
        raise NumericOverflowError(f"squared error overflows at step {bad[0]}", step=int(bad[0]))
    loss = float(np.mean(sq))

    grads = {n: np.zeros_like(v) for n, v in params.tensors().items()}
    dh_next = np.zeros(params.hidden_dim)
    dc_next = np.zeros(params.hidden_dim)
    dy_all = 2.0 * diff / diff.size
    for t in reversed(range(T)):
        i, f, o, g, tc, a = caches[t]
        da = dy_all[t] * (a > 0)
        grads["F"] += np.outer(da, hs[t + 1])
        grads["c"] += da
        dh = params.F.T @ da + dh_next
        do = dh * tc
        dcell = dh * o * (1.0 - tc * tc) + dc_next
        di = dcell * g
        dg = dcell * i
        df = dcell * cells[t]
        dc_next = dcell * f
        dz = np.stack([di * i * (1.0 - i), df * f * (1.0 - f), do * o * (1.0 - o), dg * (1.0 - g * g)])
        grads["W"] += dz[:, :, None] * inputs[t][None, None, :]
        grads["U"] += dz[:, :, None] * hs[t][None, None, :]
        grads["b"] += dz
        dh_next = np.einsum("khj,kh->j", params.U, dz)
        if not (np.all(np.isfinite(dz)) and np.all(np.isfinite(grads["W"]))):
            raise NumericOverflowError(f"non-finite gradient at step {t}", step=t)
    return loss, grads


def sequence_loss(params: LstmParams, inputs: np.ndarray, targets: np.ndarray, dtype=np.float64) -> float:
    """Forward-only loss, optionally evaluated in a wider float type."""
    tensors = SimpleNamespace(**{n: np.asarray(getattr(params, n), dtype=dtype) for n in TENSORS})
    return _sequence_loss(tensors, inputs, targets, dtype)


def _sequence_loss(tensors, inputs, targets, dtype):
    h = np.zeros(tensors.W.shape[1], dtype=dtype)
    cell = np.zeros_like(h)
    total = dtype(0)
    targets = np.asarray(targets, dtype=dtype)
    for x, tgt in zip(np.asarray(inputs, dtype=dtype), targets):
        h, cell, y, _ = _step(tensors, h, cell, x)
        total += np.sum((y - tgt) ** 2)
    return total / targets.size


def gradient_errors(params: LstmParams, inputs: np.ndarray, targets: np.ndarray,
                    epsilon: float = 1e-5, dtype=np.longdouble) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients, per tensor.

    The analytic gradient is the float64 one used for training.  The central
    differences are evaluated in ``dtype``; the default extended precision
    keeps forward-pass roundoff (a few ulps of the loss, amplified by
    ``1/epsilon``) well below the tolerance for coordinates with tiny
    gradients.
    """
    _, grads = lstm_loss_grad(params, inputs, targets)
    tensors = SimpleNamespace(**{n: np.array(getattr(params, n), dtype=dtype) for n in TENSORS})
    eps = dtype(epsilon)
    out = {}
    for name in TENSORS:
        tensor = getattr(tensors, name)
        worst = 0.0
        for idx in np.ndindex(tensor.shape):
            saved = tensor[idx]
            tensor[idx] = saved + eps
            plus = _sequence_loss(tensors, inputs, targets, dtype)
            tensor[idx] = saved - eps
            minus = _sequence_loss(tensors, inputs, targets, dtype)
            tensor[idx] = saved
            numeric = float((plus - minus) / (2 * eps))
            analytic = float(grads[name][idx])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
            worst = max(worst, err)
        out[name] = worst
    return out


def gradient_check(params: LstmParams, window: int = 3, epsilon: float = 1e-5,
                   inputs: np.ndarray | None = None, targets: np.ndarray | None = None,
                   seed: int = 0, dtype=np.longdouble) -> float:
    """Compare analytic gradients with central differences on a random sequence.

    Returns the largest relative error ``|a - n| / max(|a|, |n|, 1e-12)`` over
    every parameter coordinate.
    """
    rng = np.random.default_rng(seed)
    if inputs is None:
        inputs = rng.uniform(0.0, 1.0, (window, params.input_dim))
    if targets is None:
        targets = rng.uniform(0.0, 1.0, (window, params.input_dim))
    return max(gradient_errors(params, inputs, targets, epsilon, dtype).values())


class Adam:
    def __init__(self, params: LstmParams, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(v) for n, v in params.tensors().items()}
        self.v = {n: np.zeros_like(v) for n, v in params.tensors().items()}
        self.t = 0

    def update(self, params: LstmParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        corr1 = 1.0 - self.beta1 ** self.t
        corr2 = 1.0 - self.beta2 ** self.t
        for n in TENSORS:
            g = grads[n]
            self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * g * g
            step = self.lr * (self.m[n] / corr1) / (np.sqrt(self.v[n] / corr2) + self.eps)
            getattr(params, n)[...] -= step


def train(params: LstmParams, history: np.ndarray, cfg: TrainConfig = TrainConfig()) -> tuple[LstmParams, list[float]]:
    """Fit the network to predict the next step's counts from the current one.

    ``history`` holds count grids, shape ``(T, n, n)`` or ``(T, n*n)``.  Inputs
    and targets are divided by the largest training count, which is stored
    on the returned parameters as ``scale``.
    """
    history = np.asarray(history, dtype=np.float64)
    T = history.shape[0]
    X = history.reshape(T, -1)
    if X.shape[1] != params.input_dim:
        raise ConfigError(f"history has {X.shape[1]} cells per step, network expects {params.input_dim}")
    if T < 2 * cfg.steps_per_day:
        raise ConfigError(f"training needs at least 2 days of history ({2 * cfg.steps_per_day} steps), got {T}")
    scale = max(float(X.max()), 1.0)
    X = X / scale
    params = params.copy()
    params.scale = scale
    stride = cfg.stride or cfg.window
    starts = np.arange(0, T - cfg.window, stride)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    curve = []
    for _ in range(cfg.epochs):
        order = rng.permutation(starts)
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            total = {n: np.zeros_like(v) for n, v in params.tensors().items()}
            batch_loss = 0.0
            # fixed summation order keeps the result bit-reproducible
            for s in batch:
                loss, grads = lstm_loss_grad(params, X[s:s + cfg.window], X[s + 1:s + cfg.window + 1])
                batch_loss += loss
                for n in TENSORS:
                    total[n] += grads[n]
            for n in TENSORS:
                total[n] /= len(batch)
            opt.update(params, total)
            losses.append(batch_loss / len(batch))
        curve.append(float(np.mean(losses)) if losses else 0.0)
    return params, curve


def round_counts(y: np.ndarray, n: int) -> np.ndarray:
    """Round-half-up to a valid count grid: nonnegative integers, zero diagonal."""
    grid = np.floor(np.asarray(y, dtype=np.float64).reshape(n, n) + 0.5)
    grid = np.maximum(grid, 0).astype(np.int64)
    np.fill_diagonal(grid, 0)
    return grid


def save_params(path: str | Path, params: LstmParams) -> None:
    """Text dump with a version header; floats are written with ``repr`` so they round-trip."""
    with open(path, "w") as fh:
        fh.write(f"{FORMAT_HEADER} {FORMAT_VERSION}\n")
        fh.write(f"input_dim {params.input_dim}\nhidden_dim {params.hidden_dim}\nscale {params.scale!r}\n")
        for name in TENSORS:
            tensor = getattr(params, name)
            fh.write(f"{name} {' '.join(str(d) for d in tensor.shape)}\n")
            flat = tensor.reshape(-1, tensor.shape[-1])
            for row in flat:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_params(path: str | Path) -> LstmParams:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].split()[:1] != [FORMAT_HEADER]:
        raise FormatError(f"{path}: not an LSTM parameter file")
    version = int(lines[0].split()[1])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    meta = {}
    pos = 1
    for key in ("input_dim", "hidden_dim", "scale"):
        k, v = lines[pos].split()
        if k != key:
            raise FormatError(f"{path}:{pos + 1}: expected {key}")
        meta[key] = v
        pos += 1
    tensors = {}
    for name in TENSORS:
        head = lines[pos].split()
        if head[0] != name:
            raise FormatError(f"{path}:{pos + 1}: expected tensor {name}")
        shape = tuple(int(d) for d in head[1:])
        pos += 1
        nrows = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
        rows = [[float(v) for v in lines[pos + r].split()] for r in range(nrows)]
        pos += nrows
        tensors[name] = np.array(rows, dtype=np.float64).reshape(shape)
    params = LstmParams(**tensors, scale=float(meta["scale"]))
    if params.input_dim != int(meta["input_dim"]) or params.hidden_dim != int(meta["hidden_dim"]):
        raise FormatError(f"{path}: tensor shapes disagree with the header")
    return params
