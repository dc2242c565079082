"""Two small differentiable classifiers with closed-form derivatives.

Architectures:

* ``linear-softmax``: logits = W x + b, parameters [W row-major, b].
* ``mlp-dropout``: one tanh hidden layer with inverted dropout applied after
  the nonlinearity, parameters [W1, b1, W2, b2]. tanh keeps the loss twice
  differentiable everywhere, so the Hessian is well defined.

Loss convention: ``loss`` is mean cross-entropy over the batch plus
``weight_decay / 2 * ||theta||^2``; ``grad`` is its exact gradient. The
Hessian used by ``hvp`` and ``exact_hessian`` is the SUM over samples of
per-sample cross-entropy Hessians plus ``(n * weight_decay + damping) * I``
(per-sample curvature is summed, not averaged, so influence solves see the
same scaling as the unnormalized gradient sum they are paired with).
Derivative paths always run with dropout disabled; dropout masks exist only
for training steps and stochastic confidence passes.

``hvp`` (Pearlmutter directional differentiation) and ``exact_hessian``
(explicit Gauss-Newton plus activation-curvature assembly) are written as
independent routes so each can check the other.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .errors import (
    BadMagicError,
    CapacityError,
    DataFormatError,
    DataValidationError,
    FormatVersionError,
    TruncatedPayloadError,
    UnsupportedArchitectureError,
)

ARCH_LINEAR = "linear-softmax"
ARCH_MLP = "mlp-dropout"

_PARAM_MAGIC = b"PRMV"
_PARAM_VERSION = 1
_PARAM_HEADER = struct.Struct("<4sIQ")

_INIT_STREAM = 21


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor; ``weight_decay`` is part of the empirical risk."""

    arch: str
    input_dim: int
    n_classes: int
    hidden_dim: int | None = None
    dropout_rate: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.arch not in (ARCH_LINEAR, ARCH_MLP):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.arch == ARCH_MLP:
            if self.hidden_dim is None or self.hidden_dim < 1:
                raise ValueError("mlp-dropout requires hidden_dim >= 1")
        elif self.hidden_dim is not None:
            raise ValueError("hidden_dim only applies to mlp-dropout")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.arch == ARCH_LINEAR and self.dropout_rate != 0.0:
            raise ValueError("linear-softmax has no dropout")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in param_layout(self))


def param_layout(spec: ModelSpec) -> tuple[tuple[str, tuple[int, ...]], ...]:
    """Ordered (segment name, shape) pairs defining the flat parameter layout."""
    d, c = spec.input_dim, spec.n_classes
    if spec.arch == ARCH_LINEAR:
        return (("W", (c, d)), ("b", (c,)))
    h = spec.hidden_dim
    return (("W1", (h, d)), ("b1", (h,)), ("W2", (c, h)), ("b2", (c,)))


@dataclass
class ParamVector:
    """Flat parameter vector plus the layout that maps segments to layers."""

    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        expected = sum(int(np.prod(s)) for _, s in self.layout)
        if self.values.size != expected:
            raise ValueError(
                f"parameter vector has {self.values.size} entries, layout needs {expected}"
            )
        if not np.isfinite(self.values).all():
            raise DataValidationError("parameter vector contains NaN or Inf")

    def segment(self, name: str) -> np.ndarray:
        offset = 0
        for seg, shape in self.layout:
            size = int(np.prod(shape))
            if seg == name:
                return self.values[offset : offset + size].reshape(shape)
            offset += size
        raise KeyError(name)

    def __array__(self, dtype=None):
        return self.values if dtype is None else self.values.astype(dtype)


def _flat(theta) -> np.ndarray:
    v = theta.values if isinstance(theta, ParamVector) else np.asarray(theta, dtype=np.float64)
    return v.reshape(-1)


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng([_INIT_STREAM, seed])
    parts = []
    for name, shape in param_layout(spec):
        if len(shape) == 2:
            fan_out, fan_in = shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            parts.append(rng.uniform(-a, a, size=shape).reshape(-1))
        else:
            parts.append(np.zeros(shape))
    return np.concatenate(parts)


def unpack(spec: ModelSpec, theta) -> dict[str, np.ndarray]:
    """Views of the flat vector as named layer arrays."""
    flat = _flat(theta)
    if flat.size != spec.n_params:
        raise ValueError(f"expected {spec.n_params} parameters, got {flat.size}")
    out = {}
    offset = 0
    for name, shape in param_layout(spec):
        size = int(np.prod(shape))
        out[name] = flat[offset : offset + size].reshape(shape)
        offset += size
    return out


@dataclass(frozen=True)
class DropoutMask:
    """Inverted-dropout keep indicators for one forward pass.

    Entries are 0 (dropped) or 1/(1-rate) (kept), one per hidden unit.
    """

    keep: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "keep", np.asarray(self.keep, dtype=np.float64))


def draw_dropout_masks(spec: ModelSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """(n, hidden_dim) matrix of inverted-dropout scale factors."""
    if spec.arch != ARCH_MLP:
        raise UnsupportedArchitectureError(f"{spec.arch} has no dropout layer")
    rate = spec.dropout_rate
    if rate == 0.0:
        return np.ones((n, spec.hidden_dim))
    keep = rng.random((n, spec.hidden_dim)) < (1.0 - rate)
    return keep / (1.0 - rate)


def _as_xy(batch) -> tuple[np.ndarray, np.ndarray]:
    """Accepts a Dataset or an (X, y) pair; returns float64 (n, D) and int (n,)."""
    if isinstance(batch, Dataset):
        return batch.features(), batch.labels()
    X, y = batch
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    return X, y


def _check_batch(spec: ModelSpec, X: np.ndarray, y: np.ndarray) -> None:
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if X.shape[1] != spec.input_dim:
        raise ValueError(f"batch feature dim {X.shape[1]} != input_dim {spec.input_dim}")
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"{X.shape[0]} samples but {y.shape[0]} labels")
    if (y < 0).any() or (y >= spec.n_classes).any():
        raise ValueError("label out of range")


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _hidden(spec: ModelSpec, params: dict, X: np.ndarray) -> np.ndarray:
    return np.tanh(X @ params["W1"].T + params["b1"])


def forward_batch(
    spec: ModelSpec, theta, X: np.ndarray, masks: np.ndarray | None = None
) -> np.ndarray:
    """Class probabilities, one row per sample.

    ``masks`` (mlp only): (n, hidden_dim) inverted-dropout scale factors; None
    runs the deterministic network.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != spec.input_dim:
        raise ValueError(f"input dim {X.shape[1]} != {spec.input_dim}")
    p = unpack(spec, theta)
    if spec.arch == ARCH_LINEAR:
        if masks is not None:
            raise UnsupportedArchitectureError("dropout mask on linear-softmax")
        return _softmax(X @ p["W"].T + p["b"])
    t = _hidden(spec, p, X)
    if masks is not None:
        t = t * np.asarray(masks, dtype=np.float64)
    return _softmax(t @ p["W2"].T + p["b2"])


def forward(spec: ModelSpec, theta, x: np.ndarray, mask: DropoutMask | None = None) -> np.ndarray:
    """Probability simplex vector for one flattened trial."""
    masks = None if mask is None else mask.keep[None, :]
    return forward_batch(spec, theta, np.asarray(x, dtype=np.float64)[None, :], masks)[0]


def ce_loss(spec: ModelSpec, theta, batch, masks: np.ndarray | None = None) -> float:
    """Mean cross-entropy only, no regularizer."""
    X, y = _as_xy(batch)
    _check_batch(spec, X, y)
    probs = forward_batch(spec, theta, X, masks)
    ce = -np.log(np.maximum(probs[np.arange(len(y)), y], 1e-300))
    return float(ce.mean())


def loss(spec: ModelSpec, theta, batch, masks: np.ndarray | None = None) -> float:
    """Mean cross-entropy plus the L2 term weight_decay/2 * ||theta||^2."""
    flat = _flat(theta)
    return ce_loss(spec, flat, batch, masks) + 0.5 * spec.weight_decay * float(flat @ flat)


def ce_gradients(spec: ModelSpec, theta, batch) -> np.ndarray:
    """(n, P) matrix of per-sample cross-entropy gradients, no L2 term.

    These are the inner gradients of the influence score; the regularizer is
    sample-independent so it belongs to the Hessian, not here.
    """
    X, y = _as_xy(batch)
    _check_batch(spec, X, y)
    params = unpack(spec, theta)
    n = X.shape[0]
    idx = np.arange(n)
    if spec.arch == ARCH_LINEAR:
        probs = _softmax(X @ params["W"].T + params["b"])
        delta = probs.copy()
        delta[idx, y] -= 1.0
        gW = delta[:, :, None] * X[:, None, :]
        return np.concatenate([gW.reshape(n, -1), delta], axis=1)
    t = _hidden(spec, params, X)
    probs = _softmax(t @ params["W2"].T + params["b2"])
    delta2 = probs.copy()
    delta2[idx, y] -= 1.0
    delta1 = (delta2 @ params["W2"]) * (1.0 - t * t)
    gW1 = delta1[:, :, None] * X[:, None, :]
    gW2 = delta2[:, :, None] * t[:, None, :]
    return np.concatenate(
        [gW1.reshape(n, -1), delta1, gW2.reshape(n, -1), delta2], axis=1
    )


def ce_grad(spec: ModelSpec, theta, batch, masks: np.ndarray | None = None) -> np.ndarray:
    """Mean cross-entropy gradient, no regularizer.

    With ``masks`` (training steps only) the backward pass runs through the
    given dropout scales.
    """
    flat = _flat(theta)
    if masks is None:
        return ce_gradients(spec, flat, batch).mean(axis=0)
    X, y = _as_xy(batch)
    _check_batch(spec, X, y)
    params = unpack(spec, flat)
    n = X.shape[0]
    idx = np.arange(n)
    t = _hidden(spec, params, X)
    td = t * masks
    probs = _softmax(td @ params["W2"].T + params["b2"])
    delta2 = probs.copy()
    delta2[idx, y] -= 1.0
    delta1 = (delta2 @ params["W2"]) * masks * (1.0 - t * t)
    gW1 = delta1.T @ X
    gb1 = delta1.sum(axis=0)
    gW2 = delta2.T @ td
    gb2 = delta2.sum(axis=0)
    return np.concatenate([gW1.reshape(-1), gb1, gW2.reshape(-1), gb2]) / n


def grad(spec: ModelSpec, theta, batch, masks: np.ndarray | None = None) -> np.ndarray:
    """Gradient of :func:`loss`: mean cross-entropy gradient + weight_decay * theta."""
    flat = _flat(theta)
    return ce_grad(spec, flat, batch, masks) + spec.weight_decay * flat


def hvp(spec: ModelSpec, theta, d, v: np.ndarray, damping: float = 0.0) -> np.ndarray:
    """(H + damping*I) v with H = sum of per-sample CE Hessians + n*wd*I.

    Pearlmutter directional differentiation of the gradient; dropout disabled.
    """
    X, y = _as_xy(d)
    _check_batch(spec, X, y)
    flat = _flat(theta)
    v = _flat(v)
    if v.size != spec.n_params:
        raise ValueError(f"v has {v.size} entries, expected {spec.n_params}")
    n = X.shape[0]
    params = unpack(spec, flat)
    vparts = unpack(spec, v)
    ridge = n * spec.weight_decay + damping

    if spec.arch == ARCH_LINEAR:
        probs = _softmax(X @ params["W"].T + params["b"])
        rz = X @ vparts["W"].T + vparts["b"]
        rdelta = probs * rz - probs * (probs * rz).sum(axis=1, keepdims=True)
        hW = rdelta.T @ X
        hb = rdelta.sum(axis=0)
        return np.concatenate([hW.reshape(-1), hb]) + ridge * v

    idx = np.arange(n)
    t = _hidden(spec, params, X)
    A = 1.0 - t * t
    probs = _softmax(t @ params["W2"].T + params["b2"])
    delta2 = probs.copy()
    delta2[idx, y] -= 1.0

    rz1 = X @ vparts["W1"].T + vparts["b1"]
    rt = A * rz1
    rz2 = t @ vparts["W2"].T + rt @ params["W2"].T + vparts["b2"]
    rdelta2 = probs * rz2 - probs * (probs * rz2).sum(axis=1, keepdims=True)

    wbar = delta2 @ params["W2"]
    rdelta1 = (delta2 @ vparts["W2"] + rdelta2 @ params["W2"]) * A + wbar * (-2.0 * t * rt)

    hW1 = rdelta1.T @ X
    hb1 = rdelta1.sum(axis=0)
    hW2 = rdelta2.T @ t + delta2.T @ rt
    hb2 = rdelta2.sum(axis=0)
    return np.concatenate([hW1.reshape(-1), hb1, hW2.reshape(-1), hb2]) + ridge * v


def exact_hessian(
    spec: ModelSpec, theta, d, damping: float = 0.0, cap: int = 2000
) -> np.ndarray:
    """Dense P x P Hessian, assembled from explicit second derivatives.

    Independent of :func:`hvp` (blockwise closed forms here, directional
    differentiation there) so the two can serve as mutual oracles. Guarded by
    ``cap`` because the cost is O(n P^2).
    """
    P = spec.n_params
    if P > cap:
        raise CapacityError(f"P={P} exceeds dense-Hessian cap {cap}")
    X, y = _as_xy(d)
    _check_batch(spec, X, y)
    flat = _flat(theta)
    n = X.shape[0]
    params = unpack(spec, flat)
    ridge = n * spec.weight_decay + damping

    if spec.arch == ARCH_LINEAR:
        c, dim = spec.n_classes, spec.input_dim
        probs = _softmax(X @ params["W"].T + params["b"])
        # S summed over samples, contracted with outer products of X.
        S = probs[:, :, None] * -probs[:, None, :]
        S[:, np.arange(c), np.arange(c)] += probs
        H = np.zeros((P, P))
        hww = np.einsum("ivw,id,ie->vdwe", S, X, X).reshape(c * dim, c * dim)
        hwb = np.einsum("ivw,id->vdw", S, X).reshape(c * dim, c)
        H[: c * dim, : c * dim] = hww
        H[: c * dim, c * dim :] = hwb
        H[c * dim :, : c * dim] = hwb.T
        H[c * dim :, c * dim :] = S.sum(axis=0)
        H += ridge * np.eye(P)
        return 0.5 * (H + H.T)

    h, dim, c = spec.hidden_dim, spec.input_dim, spec.n_classes
    oW1, ob1 = 0, h * dim
    oW2, ob2 = ob1 + h, ob1 + h + c * h
    idx = np.arange(n)
    H = np.zeros((P, P))
    t_all = _hidden(spec, params, X)
    probs_all = _softmax(t_all @ params["W2"].T + params["b2"])
    W2 = params["W2"]
    for i in range(n):
        x, t, p = X[i], t_all[i], probs_all[i]
        delta2 = p.copy()
        delta2[y[i]] -= 1.0
        A = 1.0 - t * t
        B = -2.0 * t * A
        S = np.diag(p) - np.outer(p, p)

        # Logit Jacobian J[c, param] for the Gauss-Newton term J^T S J.
        J = np.zeros((c, P))
        WA = W2 * A[None, :]
        J[:, oW1:ob1] = (WA[:, :, None] * x[None, None, :]).reshape(c, h * dim)
        J[:, ob1:oW2] = WA
        for cc in range(c):
            J[cc, oW2 + cc * h : oW2 + (cc + 1) * h] = t
            J[cc, ob2 + cc] = 1.0
        H += J.T @ S @ J

        # Curvature of the logits themselves, weighted by delta2.
        wbar = W2.T @ delta2
        xx = np.outer(x, x)
        for k in range(h):
            rw = slice(oW1 + k * dim, oW1 + (k + 1) * dim)
            coef = wbar[k] * B[k]
            H[rw, rw] += coef * xx
            H[rw, ob1 + k] += coef * x
            H[ob1 + k, rw] += coef * x
            H[ob1 + k, ob1 + k] += coef
            for cc in range(c):
                cross = delta2[cc] * A[k]
                col = oW2 + cc * h + k
                H[col, rw] += cross * x
                H[rw, col] += cross * x
                H[col, ob1 + k] += cross
                H[ob1 + k, col] += cross
    H += ridge * np.eye(P)
    return 0.5 * (H + H.T)


def predict(spec: ModelSpec, theta, X: np.ndarray) -> np.ndarray:
    """Argmax class labels; ties resolve to the lowest class index."""
    return np.argmax(forward_batch(spec, theta, X), axis=1)


def save_params(theta, path: str | Path) -> None:
    """Write the flat vector as magic "PRMV", version u32, P u64, f64 LE values."""
    flat = _flat(theta)
    buf = _PARAM_HEADER.pack(_PARAM_MAGIC, _PARAM_VERSION, flat.size)
    Path(path).write_bytes(buf + flat.astype("<f8").tobytes())


def load_params(path: str | Path) -> np.ndarray:
    """Read a vector written by :func:`save_params`, validating strictly."""
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise TruncatedPayloadError("file shorter than the 4-byte magic", len(buf))
    if buf[:4] != _PARAM_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {_PARAM_MAGIC!r}", 0)
    if len(buf) < _PARAM_HEADER.size:
        raise TruncatedPayloadError("incomplete header", len(buf))
    _, version, count = _PARAM_HEADER.unpack_from(buf, 0)
    if version != _PARAM_VERSION:
        raise FormatVersionError(
            f"unsupported format version {version}, expected {_PARAM_VERSION}", 4
        )
    end = _PARAM_HEADER.size + 8 * count
    if len(buf) < end:
        raise TruncatedPayloadError(
            f"file ends inside the value block (need {end} bytes)", len(buf)
        )
    if len(buf) > end:
        raise DataFormatError(f"{len(buf) - end} trailing bytes", end)
    values = np.frombuffer(buf, dtype="<f8", count=count, offset=_PARAM_HEADER.size)
    values = values.astype(np.float64)
    if not np.isfinite(values).all():
        raise DataValidationError("parameter file contains NaN or Inf")
    return values
