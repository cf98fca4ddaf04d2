"""One-hidden-layer sigmoid dynamics network with Monte-Carlo dropout.

The network maps ``(x, y, theta, v, omega)`` to ``(xdot, ydot, thetadot)``.
Inputs and targets are standardized with training-set statistics stored in
:class:`ModelParams`.  Dropout acts on the hidden layer only and uses
inverted scaling, so the unmasked network equals the mask expectation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .plant import Dataset

logger = logging.getLogger(__name__)

IN_DIM = 5
OUT_DIM = 3
MODEL_FILE_MAGIC = "dropout-mpc-model"
MODEL_FILE_VERSION = 1


class ModelFileError(ValueError):
    """Raised for unreadable, corrupt or version-mismatched model files."""


def sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@dataclass(frozen=True)
class ModelParams:
    W1: np.ndarray  # (hidden, in)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (out, hidden)
    b2: np.ndarray  # (out,)
    input_mean: np.ndarray
    input_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray
    dropout_rate: float = 0.2

    def __post_init__(self):
        for name in ("W1", "b1", "W2", "b2", "input_mean", "input_std", "target_mean", "target_std"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        hidden, n_in = self.W1.shape
        n_out = self.W2.shape[0]
        if (self.b1.shape != (hidden,) or self.W2.shape != (n_out, hidden) or self.b2.shape != (n_out,)
                or self.input_mean.shape != (n_in,) or self.input_std.shape != (n_in,)
                or self.target_mean.shape != (n_out,) or self.target_std.shape != (n_out,)):
            raise ValueError("inconsistent network dimensions")
        if n_in != IN_DIM or n_out != OUT_DIM:
            raise ValueError(f"network must map {IN_DIM} inputs to {OUT_DIM} outputs")
        if np.any(self.input_std <= 0) or np.any(self.target_std <= 0):
            raise ValueError("normalization std must be strictly positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    @classmethod
    def initialize(cls, rng: np.random.Generator, hidden_dim: int = 30, dropout_rate: float = 0.2,
                   input_mean=None, input_std=None, target_mean=None, target_std=None) -> "ModelParams":
        """Uniform(+-1/sqrt(fan_in)) weights and biases."""
        k1 = 1.0 / np.sqrt(IN_DIM)
        k2 = 1.0 / np.sqrt(hidden_dim)
        return cls(
            W1=rng.uniform(-k1, k1, (hidden_dim, IN_DIM)),
            b1=rng.uniform(-k1, k1, hidden_dim),
            W2=rng.uniform(-k2, k2, (OUT_DIM, hidden_dim)),
            b2=rng.uniform(-k2, k2, OUT_DIM),
            input_mean=np.zeros(IN_DIM) if input_mean is None else input_mean,
            input_std=np.ones(IN_DIM) if input_std is None else input_std,
            target_mean=np.zeros(OUT_DIM) if target_mean is None else target_mean,
            target_std=np.ones(OUT_DIM) if target_std is None else target_std,
            dropout_rate=dropout_rate,
        )

    def replace(self, **changes) -> "ModelParams":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return ModelParams(**fields)


@dataclass(frozen=True)
class DropoutMask:
    keep: np.ndarray
    rate: float

    def __post_init__(self):
        keep = np.array(self.keep, dtype=bool)
        keep.setflags(write=False)
        object.__setattr__(self, "keep", keep)
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")

    @property
    def scale(self) -> np.ndarray:
        """Per-unit multiplier: ``keep / (1 - rate)``."""
        return self.keep / (1.0 - self.rate)


def sample_mask(rng: np.random.Generator, p: float, hidden_dim: int = 30) -> DropoutMask:
    """Keep each hidden unit independently with probability ``1 - p``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    return DropoutMask(rng.random(hidden_dim) >= p, p)


def _check_inputs(params: ModelParams, mask: DropoutMask | None, state, inputs):
    state = np.asarray(state, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if state.shape[-1:] != (3,) or inputs.shape[-1:] != (2,):
        raise ValueError("state must have trailing size 3 and input trailing size 2")
    if mask is not None and mask.keep.shape != (params.hidden_dim,):
        raise ValueError("mask length does not match the hidden layer")
    if not (np.all(np.isfinite(state)) and np.all(np.isfinite(inputs))):
        raise ValueError("state and input must be finite")
    lead = np.broadcast_shapes(state.shape[:-1], inputs.shape[:-1])
    return np.concatenate([np.broadcast_to(state, lead + (3,)), np.broadcast_to(inputs, lead + (2,))], axis=-1)


def _hidden(params: ModelParams, feats: np.ndarray):
    z = (feats - params.input_mean) / params.input_std
    a = z @ params.W1.T + params.b1
    return sigmoid(a)


def forward(params: ModelParams, mask: DropoutMask | None, state, inputs) -> np.ndarray:
    """State derivative predicted by the (optionally masked) network."""
    feats = _check_inputs(params, mask, state, inputs)
    h = _hidden(params, feats)
    if mask is not None:
        h = h * mask.scale
    y = h @ params.W2.T + params.b2
    return y * params.target_std + params.target_mean


def jacobians(params: ModelParams, mask: DropoutMask | None, state, inputs) -> tuple[np.ndarray, np.ndarray]:
    """Analytic ``(d f / d state, d f / d input)`` with shapes ``(..., 3, 3)`` and ``(..., 3, 2)``."""
    feats = _check_inputs(params, mask, state, inputs)
    h = _hidden(params, feats)
    dh = h * (1.0 - h)
    if mask is not None:
        dh = dh * mask.scale
    # J = diag(target_std) W2 diag(dh) W1 diag(1/input_std)
    W1s = params.W1 / params.input_std
    J = np.einsum("oh,...h,hi->...oi", params.W2, dh, W1s) * params.target_std[:, None]
    return J[..., :3], J[..., 3:]


def mc_predict(params: ModelParams, state, inputs, M: int, rng: np.random.Generator,
               p: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population std of ``M`` stochastic forward passes."""
    if M < 1:
        raise ValueError("M must be at least 1")
    p = params.dropout_rate if p is None else p
    outs = np.stack([forward(params, sample_mask(rng, p, params.hidden_dim), state, inputs)
                     for _ in range(M)])
    rel = outs - outs[0]
    return outs[0] + rel.mean(axis=0), rel.std(axis=0)


class NetworkModel:
    """A fixed realization of the network usable as continuous-time dynamics.

    Normalization is folded into the weights once so that repeated
    evaluation inside the NLP solver is cheap.
    """

    def __init__(self, params: ModelParams, mask: DropoutMask | None = None):
        self.params = params
        self.mask = mask
        scale = np.ones(params.hidden_dim) if mask is None else mask.scale
        self._W1 = params.W1 / params.input_std
        self._b1 = params.b1 - self._W1 @ params.input_mean
        self._W2 = params.target_std[:, None] * params.W2 * scale
        self._b2 = params.target_std * params.b2 + params.target_mean

    def _feats(self, state, inputs):
        state = np.asarray(state, dtype=float)
        inputs = np.asarray(inputs, dtype=float)
        lead = np.broadcast_shapes(state.shape[:-1], inputs.shape[:-1])
        return np.concatenate([np.broadcast_to(state, lead + (3,)), np.broadcast_to(inputs, lead + (2,))], axis=-1)

    def __call__(self, state, inputs) -> np.ndarray:
        h = sigmoid(self._feats(state, inputs) @ self._W1.T + self._b1)
        return h @ self._W2.T + self._b2

    def value_and_jacobians(self, state, inputs):
        h = sigmoid(self._feats(state, inputs) @ self._W1.T + self._b1)
        f = h @ self._W2.T + self._b2
        J = np.einsum("oh,...h,hi->...oi", self._W2, h * (1.0 - h), self._W1)
        return f, J[..., :3], J[..., 3:]

    def jacobians(self, state, inputs):
        _, Jx, Ju = self.value_and_jacobians(state, inputs)
        return Jx, Ju

    def contracted_hessian(self, state, inputs, weights):
        """``sum_i weights[i] * d2 f_i / d(x,u)^2`` as ``(..., 5, 5)`` blocks."""
        h = sigmoid(self._feats(state, inputs) @ self._W1.T + self._b1)
        curv = (np.asarray(weights) @ self._W2) * h * (1.0 - h) * (1.0 - 2.0 * h)
        return np.einsum("hi,...h,hj->...ij", self._W1, curv, self._W1)


# ----------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 600
    batch_size: int = 128
    learning_rate: float = 1e-3
    train_fraction: float = 0.8
    hidden_dim: int = 30
    dropout_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie strictly between 0 and 1")
        if self.batch_size < 1 or self.hidden_dim < 1:
            raise ValueError("batch_size and hidden_dim must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")


@dataclass
class TrainHistory:
    train_mse: list[float] = field(default_factory=list)
    test_mse: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def split_indices(n: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffled train/test split used by :func:`train`."""
    perm = np.random.default_rng([cfg.seed, 1]).permutation(n)
    n_train = int(round(cfg.train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _safe_std(values: np.ndarray, names, warnings: list[str]) -> np.ndarray:
    std = values.std(axis=0)
    bad = ~(std > 1e-12)
    for i in np.flatnonzero(bad):
        msg = f"feature '{names[i]}' has zero variance; std clamped to 1"
        logger.warning(msg)
        warnings.append(msg)
    return np.where(bad, 1.0, std)


def normalized_mse(params: ModelParams, data: Dataset) -> float:
    """MSE of the full network in standardized-target units."""
    pred = NetworkModel(params)(data.states, data.inputs)
    err = (pred - data.targets) / params.target_std
    return float(np.mean(err**2))


def train(dataset: Dataset, cfg: TrainConfig, rng: np.random.Generator | None = None
          ) -> tuple[ModelParams, TrainHistory]:
    """Minibatch Adam on standardized MSE with hidden-layer dropout active."""
    n = len(dataset)
    if n < 2:
        raise ValueError("dataset needs at least two samples")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    history = TrainHistory()
    tr_idx, te_idx = split_indices(n, cfg)
    train_set, test_set = dataset.subset(tr_idx), dataset.subset(te_idx)

    X = train_set.features
    Y = train_set.targets
    in_mean, out_mean = X.mean(axis=0), Y.mean(axis=0)
    in_std = _safe_std(X, ["x", "y", "theta", "v", "omega"], history.warnings)
    out_std = _safe_std(Y, ["xdot", "ydot", "thetadot"], history.warnings)
    Z = (X - in_mean) / in_std
    T = (Y - out_mean) / out_std

    p = cfg.dropout_rate
    init = ModelParams.initialize(rng, cfg.hidden_dim, p)
    theta = [np.array(init.W1), np.array(init.b1), np.array(init.W2), np.array(init.b2)]
    m = [np.zeros_like(w) for w in theta]
    v = [np.zeros_like(w) for w in theta]
    beta1, beta2, eps, lr = 0.9, 0.999, 1e-8, cfg.learning_rate
    step = 0

    def pack(ws) -> ModelParams:
        return ModelParams(ws[0].copy(), ws[1].copy(), ws[2].copy(), ws[3].copy(),
                           in_mean, in_std, out_mean, out_std, p)

    n_train = len(Z)
    for _ in range(cfg.epochs):
        order = rng.permutation(n_train)
        for start in range(0, n_train, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            zb, tb = Z[idx], T[idx]
            W1, b1, W2, b2 = theta
            h = sigmoid(zb @ W1.T + b1)
            keep = (rng.random(h.shape) >= p) / (1.0 - p)
            hd = h * keep
            y = hd @ W2.T + b2
            g_y = 2.0 * (y - tb) / y.size
            gW2 = g_y.T @ hd
            gb2 = g_y.sum(axis=0)
            g_a = (g_y @ W2) * keep * h * (1.0 - h)
            gW1 = g_a.T @ zb
            gb1 = g_a.sum(axis=0)
            step += 1
            c1 = 1.0 - beta1**step
            c2 = 1.0 - beta2**step
            for w, g, mi, vi in zip(theta, (gW1, gb1, gW2, gb2), m, v):
                mi *= beta1
                mi += (1.0 - beta1) * g
                vi *= beta2
                vi += (1.0 - beta2) * g * g
                w -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
        params = pack(theta)
        history.train_mse.append(normalized_mse(params, train_set))
        history.test_mse.append(normalized_mse(params, test_set))
    return pack(theta), history


# ----------------------------------------------------------------------
# Model file
# ----------------------------------------------------------------------
#
# Line-oriented text, one field per line, "name value value ...":
#   dropout-mpc-model 1
#   dims <in> <hidden> <out>
#   dropout_rate <p>
#   input_mean, input_std, target_mean, target_std   (in/out values)
#   W1 (hidden*in values, row-major), b1, W2 (out*hidden, row-major), b2
# Floats use 17 digits after the point in exponent form, so reading back is exact.

_ARRAY_FIELDS = ("input_mean", "input_std", "target_mean", "target_std", "W1", "b1", "W2", "b2")


def _fmt(values) -> str:
    return " ".join(f"{float(v):.17e}" for v in np.ravel(values))


def save_params(params: ModelParams, path) -> None:
    hidden = params.hidden_dim
    lines = [f"{MODEL_FILE_MAGIC} {MODEL_FILE_VERSION}",
             f"dims {IN_DIM} {hidden} {OUT_DIM}",
             f"dropout_rate {params.dropout_rate:.17e}"]
    lines += [f"{name} {_fmt(getattr(params, name))}" for name in _ARRAY_FIELDS]
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path) -> ModelParams:
    try:
        text = Path(path).read_text()
    except OSError:
        raise
    except UnicodeDecodeError as exc:
        raise ModelFileError(f"{path}: not a text model file") from exc
    lines = [ln.split() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0][0] != MODEL_FILE_MAGIC or len(lines[0]) != 2:
        raise ModelFileError(f"{path}: missing '{MODEL_FILE_MAGIC}' header")
    if lines[0][1] != str(MODEL_FILE_VERSION):
        raise ModelFileError(f"{path}: unsupported model file version {lines[0][1]!r} "
                             f"(expected {MODEL_FILE_VERSION})")
    rows = {ln[0]: ln[1:] for ln in lines[1:]}
    try:
        n_in, hidden, n_out = (int(v) for v in rows["dims"])
        p = float(rows["dropout_rate"][0])
        arrays = {name: np.array([float(v) for v in rows[name]]) for name in _ARRAY_FIELDS}
    except (KeyError, ValueError, IndexError) as exc:
        raise ModelFileError(f"{path}: malformed model file ({exc})") from exc
    if n_in != IN_DIM or n_out != OUT_DIM:
        raise ModelFileError(f"{path}: dims {n_in}x{n_out} do not match {IN_DIM}x{OUT_DIM}")
    expected = {"input_mean": n_in, "input_std": n_in, "target_mean": n_out, "target_std": n_out,
                "W1": hidden * n_in, "b1": hidden, "W2": n_out * hidden, "b2": n_out}
    for name, size in expected.items():
        if arrays[name].size != size:
            raise ModelFileError(f"{path}: field {name} has {arrays[name].size} values, expected {size}")
    arrays["W1"] = arrays["W1"].reshape(hidden, n_in)
    arrays["W2"] = arrays["W2"].reshape(n_out, hidden)
    try:
        return ModelParams(dropout_rate=p, **arrays)
    except ValueError as exc:
        raise ModelFileError(f"{path}: {exc}") from exc
