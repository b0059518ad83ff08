"""Reverse-mode automatic differentiation over dense float64 tensors.

A :class:`Tape` records every differentiable operation executed inside its
``with`` block (define-by-run). ``tape.backward(loss)`` walks the recorded
operations once, in reverse, and returns a gradient for every tensor that
participates in the computation and requires a gradient.

All primitives operate on :class:`Tensor` and are plain functions; the model
code composes them directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels
from .errors import ContractError, DimensionError


class Tensor:
    """Dense n-dimensional float64 array with an optional gradient slot.

    ``data`` is mutable only between training steps (the optimizer updates
    parameters in place); during a step tensors are treated as immutable.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor created from non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


@dataclass
class _TapeEntry:
    inputs: tuple
    output: Tensor
    backward_fn: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    _entries: list = field(default_factory=list)
    backward_visits: int = 0

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, inputs, output, backward_fn):
        self._entries.append(_TapeEntry(tuple(inputs), output, backward_fn))

    def backward(self, target: Tensor) -> dict:
        """Accumulate d(target)/d(tensor) for every recorded tensor.

        Returns a dict keyed by Tensor (identity). May be called more than
        once on the same tape, e.g. to get per-task gradients separately.
        Also mirrors leaf gradients into each tensor's ``grad`` slot.
        """
        if target.size != 1:
            raise ContractError("backward target must be scalar")
        self.backward_visits = 0
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        tensors: dict[int, Tensor] = {id(target): target}
        for entry in reversed(self._entries):
            gout = grads.get(id(entry.output))
            if gout is None:
                continue
            self.backward_visits += 1
            gins = entry.backward_fn(gout)
            for t, g in zip(entry.inputs, gins):
                if g is None or not t.requires_grad:
                    continue
                tid = id(t)
                tensors[tid] = t
                if tid in grads:
                    grads[tid] = grads[tid] + g
                else:
                    grads[tid] = g
        out = {tensors[tid]: g for tid, g in grads.items()
               if tensors[tid].requires_grad}
        for t, g in out.items():
            t.grad = g
        return out


_ACTIVE: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def _make(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = _active_tape()
    if tape is not None and requires:
        tape.record(inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make((a, b), out, backward)


def multiply_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make((a,), a.data * s, lambda g: (g * s,))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make((a, b), out, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, multiply_scalar(b, -1.0))


def neg(a: Tensor) -> Tensor:
    return multiply_scalar(a, -1.0)


def leaky_relu(a: Tensor, alpha: float = 0.01) -> Tensor:
    if not 0.0 < alpha < 1.0:
        raise ContractError(f"leaky_relu alpha must lie in (0, 1), got {alpha}")
    slope = np.where(a.data > 0.0, 1.0, alpha)
    return _make((a,), np.maximum(a.data, alpha * a.data),
                 lambda g: (g * slope,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(v)), with the overflow-safe split for large v."""
    v = a.data
    out = np.where(v > 0.0, v + np.log1p(np.exp(-np.abs(v))),
                   np.log1p(np.exp(-np.abs(v))))
    sig = 1.0 / (1.0 + np.exp(-np.clip(v, -500.0, 500.0)))
    return _make((a,), out, lambda g: (g * sig,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through inside [lo, hi], zero outside."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _make((a,), np.clip(a.data, lo, hi),
                 lambda g: (g * inside,))


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    return _make((a,), a.data.reshape(shape),
                 lambda g: (g.reshape(orig),))


def flatten(a: Tensor) -> Tensor:
    """Collapse all trailing axes: (N, ...) -> (N, prod)."""
    return reshape(a, (a.data.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ranks = {t.data.ndim for t in tensors}
    if len(ranks) != 1:
        raise DimensionError("concat inputs must share rank")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make(tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis),
                 backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    orig = a.data.shape
    return _make((a,), np.asarray(a.data.mean()),
                 lambda g: (np.broadcast_to(g / n, orig).copy(),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dims differ: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make((a, b), a.data @ b.data, backward)


def global_average_pool(a: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) by averaging the spatial grid."""
    if a.data.ndim != 4:
        raise DimensionError("global_average_pool expects NCHW input")
    n, c, h, w = a.data.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return _make((a,), a.data.mean(axis=(2, 3)), backward)


def log_softmax(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError("log_softmax expects (N, K) logits")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def backward(g):
        return (g - np.exp(ls) * g.sum(axis=1, keepdims=True),)

    return _make((a,), ls, backward)


def gather_logit(a: Tensor, indices) -> Tensor:
    """Pick entry [i, indices[i]] from each row of an (N, K) tensor."""
    idx = np.asarray(indices, dtype=np.int64)
    n, k = a.data.shape
    if idx.shape != (n,):
        raise DimensionError("gather_logit needs one index per row")
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= k:
        raise ContractError("gather_logit index out of range")
    rows = np.arange(n)

    def backward(g):
        out = np.zeros((n, k))
        out[rows, idx] = g
        return (out,)

    return _make((a,), a.data[rows, idx], backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(inp: Tensor, kernel: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) via im2col lowering.

    ``inp`` is (N, C, H, W), ``kernel`` is (F, C, kH, kW), ``bias`` is (F,).
    The unfold/fold steps run on the compiled kernel backend when available.
    """
    if inp.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError("conv2d expects NCHW input and FCHW kernel")
    n, c, h, w = inp.data.shape
    f, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise DimensionError(
            f"conv2d channel mismatch: input has {c}, kernel expects {ck}")
    if bias.data.shape != (f,):
        raise DimensionError("conv2d bias must have one entry per filter")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError("conv2d kernel larger than padded input")
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    if padding:
        padded = np.pad(inp.data, ((0, 0), (0, 0), (padding, padding),
                                   (padding, padding)))
    else:
        padded = inp.data
    cols = _kernels.im2col(np.ascontiguousarray(padded), kh, kw, stride)
    kmat = kernel.data.reshape(f, c * kh * kw)
    out = np.matmul(kmat[None], cols).reshape(n, f, oh, ow)
    out = out + bias.data[None, :, None, None]

    def backward(g):
        gmat = g.reshape(n, f, oh * ow)
        dbias = g.sum(axis=(0, 2, 3))
        dkmat = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
        dcols = np.matmul(kmat.T[None], gmat)
        dpadded = _kernels.col2im(np.ascontiguousarray(dcols),
                                  n, c, hp, wp, kh, kw, stride)
        if padding:
            dinp = dpadded[:, :, padding:padding + h, padding:padding + w]
        else:
            dinp = dpadded
        return dinp, dkmat.reshape(f, c, kh, kw), dbias

    return _make((inp, kernel, bias), out, backward)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Per-channel running statistics, updated only in train mode."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def create(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.running_mean.copy(), self.running_var.copy())


def batch_norm(inp: Tensor, gamma: Tensor, beta: Tensor,
               state: BatchNormState, mode: str = "train",
               momentum: float = 0.1, epsilon: float = 1e-5) -> Tensor:
    """Channelwise batch normalization over an NCHW tensor.

    Train mode normalizes with batch statistics and updates ``state`` in
    place (exponential moving average, unbiased variance for the running
    value); eval mode normalizes with the stored running statistics.
    """
    if inp.data.ndim != 4:
        raise DimensionError("batch_norm expects NCHW input")
    n, c, h, w = inp.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError("batch_norm gamma/beta must be per-channel")
    if mode not in ("train", "eval"):
        raise ContractError(f"batch_norm mode must be train or eval, got {mode!r}")
    m = n * h * w
    if mode == "train":
        if m < 2:
            raise ContractError(
                "batch_norm train mode needs at least 2 values per channel")
        mu = inp.data.mean(axis=(0, 2, 3))
        var = inp.data.var(axis=(0, 2, 3))
        state.running_mean = (1 - momentum) * state.running_mean + momentum * mu
        state.running_var = ((1 - momentum) * state.running_var
                             + momentum * var * m / (m - 1))
    else:
        mu = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (inp.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if mode == "eval":
            dinp = dxhat * inv_std[None, :, None, None]
        else:
            s1 = dxhat.sum(axis=(0, 2, 3))
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))
            dinp = (inv_std[None, :, None, None] / m) * (
                m * dxhat - s1[None, :, None, None]
                - xhat * s2[None, :, None, None])
        return dinp, dgamma, dbeta

    return _make((inp, gamma, beta), out, backward)


# ---------------------------------------------------------------------------
# gradient checking oracle
# ---------------------------------------------------------------------------

def gradient_check(f, points, step: float = 1e-5,
                   max_coords: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> float:
    """Compare analytic gradients of a scalar function with central differences.

    ``points`` is a Tensor or a sequence of Tensors that ``f`` closes over;
    each must have ``requires_grad`` set. Returns the maximum over checked
    coordinates of |analytic - numeric| / max(1, |analytic|). When
    ``max_coords`` is given, that many coordinates are sampled per tensor
    instead of sweeping all of them.
    """
    if isinstance(points, Tensor):
        points = [points]
    if not 1e-7 < step < 1e-3:
        raise ContractError(f"finite-difference step {step} outside (1e-7, 1e-3)")
    with Tape() as tape:
        out = f()
        if out.size != 1:
            raise ContractError("gradient_check requires a scalar-valued function")
        grads = tape.backward(out)
    if rng is None:
        rng = np.random.default_rng(0)

    worst = 0.0
    for t in points:
        analytic = grads.get(t)
        if analytic is None:
            analytic = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            hi = f().item()
            flat[i] = orig - step
            lo = f().item()
            flat[i] = orig
            numeric = (hi - lo) / (2 * step)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]))
            worst = max(worst, err)
    return worst
