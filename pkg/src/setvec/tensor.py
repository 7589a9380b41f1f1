"""Numeric arrays with a recording tape and reverse-mode differentiation.

Every forward op is a plain function taking :class:`Tensor` inputs. When a
:class:`GradientTape` is active and at least one input is being watched, the
op appends a node holding a vector-Jacobian closure; :func:`backward` walks
those nodes in reverse.

Broadcasting is deliberately absent apart from a bias vector added across
the leading (batch) axis.
"""
from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Input shapes do not satisfy an op's shape rule."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf encountered while debug checks are on."""


class TapeError(RuntimeError):
    pass


_DEBUG = False


def set_debug(flag: bool) -> None:
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


@contextlib.contextmanager
def debug_mode(flag: bool = True):
    """Temporarily enable (or disable) non-finite checks on every op."""
    prev = _DEBUG
    set_debug(flag)
    try:
        yield
    finally:
        set_debug(prev)


class Tensor:
    """Read-only n-dimensional float array.

    Parameters
    ----------
    data : array_like
        Values; copied and frozen.
    requires_grad : bool
        Leaf tensors with this flag are watched by any active tape.
    dtype : numpy dtype, optional
        Defaults to float64 unless ``data`` is already a float32 array.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = np.float32 if getattr(data, "dtype", None) == np.float32 else np.float64
        arr = np.array(data, dtype=dtype, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        if _DEBUG:
            _check_finite("tensor", arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # trusted internal constructor: no copy
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        if not arr.flags.c_contiguous:
            arr = arr.copy()
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype, name=self.name)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return subtract(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return subtract(_as_tensor(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) and (dtype is None or x.dtype == dtype) else Tensor(x, dtype=dtype)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite values in tensor of shape {arr.shape}")


# --------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradientTape:
    """Ordered record of executed ops.

    Use as a context manager; ops run inside the block are recorded if any
    of their inputs is watched (a leaf with ``requires_grad`` or the output of
    an earlier recorded op).
    """

    nodes: list[_Node] = field(default_factory=list)
    _watched: set[int] = field(default_factory=set)
    _keep: list[Tensor] = field(default_factory=list)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._watched.add(id(t))
            self._keep.append(t)

    def is_watched(self, t: Tensor) -> bool:
        return id(t) in self._watched or t.requires_grad

    def __enter__(self) -> "GradientTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


_TAPES: list[GradientTape] = []


def _tracked(t: Tensor) -> bool:
    """Whether a gradient for ``t`` could be requested from the active tape."""
    return bool(_TAPES) and _TAPES[-1].is_watched(t)


def _record(op: str, inputs: tuple[Tensor, ...], out_arr: np.ndarray, vjp) -> Tensor:
    if _DEBUG:
        _check_finite(op, out_arr)
    out = Tensor._wrap(out_arr)
    if _TAPES:
        tape = _TAPES[-1]
        if any(tape.is_watched(t) for t in inputs):
            tape.nodes.append(_Node(op, inputs, out, vjp))
            tape._watched.add(id(out))
            for t in inputs:
                if t.requires_grad and id(t) not in tape._watched:
                    tape.watch(t)
    return out


class Gradients:
    """Mapping from tensor identity to its accumulated gradient.

    Looking up a tensor that the loss does not depend on returns zeros of
    that tensor's shape.
    """

    def __init__(self, grads: dict[int, np.ndarray], tape: GradientTape | None = None):
        self._grads = grads
        # the tape keeps every keyed tensor alive, so ids stay unambiguous
        self._tape = tape

    def __getitem__(self, t: Tensor) -> Tensor:
        g = self._grads.get(id(t))
        if g is None:
            return Tensor._wrap(np.zeros(t.shape, dtype=t.dtype))
        return Tensor._wrap(g.astype(t.dtype, copy=False))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def get_array(self, t: Tensor) -> np.ndarray:
        return self[t].data


def backward(loss: Tensor, tape: GradientTape) -> Gradients:
    """Reverse-mode sweep from a scalar ``loss`` over ``tape``."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not tape.nodes:
        raise TapeError("backward: tape is empty")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g_out = grads.get(id(node.output))
        if g_out is None:
            continue
        for inp, g in zip(node.inputs, node.vjp(g_out)):
            if g is None:
                continue
            if g.shape != inp.shape:
                raise ShapeError(f"{node.op}: gradient shape {g.shape} != input shape {inp.shape}")
            prev = grads.get(id(inp))
            grads[id(inp)] = g if prev is None else prev + g
    return Gradients(grads, tape)


# --------------------------------------------------------------------------
# elementwise and reductions


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias with shape ``a.shape[1:]``."""
    if a.shape == b.shape:
        return _record("add", (a, b), a.data + b.data, lambda g: (g, g))
    if a.ndim >= 2 and b.shape == a.shape[1:]:
        return _record("add", (a, b), a.data + b.data, lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("subtract", a, b)
    return _record("subtract", (a, b), a.data - b.data, lambda g: (g, -g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("multiply", a, b)
    ad, bd = a.data, b.data
    return _record("multiply", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _record("scale", (a,), a.data * a.dtype.type(factor), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # subgradient at exactly 0 is 0
    return _record("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _record("sigmoid", (x,), s, lambda g: (g * s * (1 - s),))


def log_sigmoid(x: Tensor) -> Tensor:
    """``log(sigmoid(x))`` evaluated without overflow for large ``|x|``."""
    z = x.data
    out = np.minimum(z, 0) - np.log1p(np.exp(-np.abs(z)))
    return _record("log_sigmoid", (x,), out, lambda g: (g * _sigmoid(-z),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _record("tanh", (x,), t, lambda g: (g * (1 - t * t),))


def log(x: Tensor) -> Tensor:
    if _DEBUG and np.any(x.data <= 0):
        raise NonFiniteError("log: non-positive input")
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _record("log", (x,), out, lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _record("exp", (x,), e, lambda g: (g * e,))


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = x.shape
    out = x.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("sum", (x,), np.asarray(out), vjp)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / n)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """Row-wise log-sum-exp with max subtraction."""
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def vjp(g):
        return (np.expand_dims(g, axis) * e / s,)

    return _record("logsumexp", (x,), out, vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got shape {x.shape}")
    return _record("transpose", (x,), x.data.T, lambda g: (g.T,))


def take(x: Tensor, indices) -> Tensor:
    """Gather rows of ``x`` along axis 0 (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _record("take", (x,), x.data[idx], vjp)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("stack: empty input list")
    for t in tensors[1:]:
        _same_shape("stack", tensors[0], t)
    out = np.stack([t.data for t in tensors])
    return _record("stack", tensors, out, lambda g: tuple(g[i] for i in range(len(tensors))))


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(m, n) @ (n, p) -> (m, p)``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two vectors, or row-wise inner products of two matrices."""
    _same_shape("dot", a, b)
    if a.ndim not in (1, 2):
        raise ShapeError(f"dot: expected rank 1 or 2, got shape {a.shape}")
    ad, bd = a.data, b.data
    out = np.asarray((ad * bd).sum(axis=-1))

    def vjp(g):
        g = np.asarray(g)[..., None] if a.ndim == 2 else g
        return (g * bd, g * ad)

    return _record("dot", (a, b), out, vjp)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with ``x`` (n, i), ``weight`` (i, o), ``bias`` (o,)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine: shape mismatch x{x.shape} W{weight.shape} b{bias.shape}")
    xd, wd = x.data, weight.data
    return _record(
        "affine", (x, weight, bias), xd @ wd + bias.data,
        lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)),
    )


# --------------------------------------------------------------------------
# convolution and pooling


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is (N, C, H, W), ``weight`` is (O, C, kh, kw), ``bias`` is (O,).
    Output is (N, O, (H + 2p - kh)//s + 1, (W + 2p - kw)//s + 1).
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} vs {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    oh, ow = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {weight.shape} too large for input {x.shape}")
    # im2col as (C, kh*kw, N, oh, ow): each kernel offset is one block copy
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.zeros((c, n, hp, wp), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x.data.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh * kw, n, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i * kw + j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    cols = cols.reshape(c * kh * kw, n * oh * ow)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(o, n, oh, ow).transpose(1, 0, 2, 3)

    need_dx = _tracked(x)

    def vjp(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, n * oh * ow)
        dw = (g2 @ cols.T).reshape(weight.shape)
        db = g2.sum(axis=1) if bias is not None else None
        if not need_dx:
            return [None, dw] + ([db] if bias is not None else [])
        dcols = (wmat.T @ g2).reshape(c, kh * kw, n, oh, ow)
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, i * kw + j]
        dx = dxp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
        return [np.ascontiguousarray(dx), dw] + ([db] if bias is not None else [])

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv2d", inputs, out, vjp)


def _pool_view(op: str, x: Tensor, kernel: int | tuple[int, int]):
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected rank-4 input, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % kh or w % kw:
        raise ShapeError(f"{op}: input {x.shape} not divisible by kernel {(kh, kw)}")
    return x.data.reshape(n, c, h // kh, kh, w // kw, kw), (kh, kw)


def max_pool2d(x: Tensor, kernel: int | tuple[int, int] = 2) -> Tensor:
    """Non-overlapping max pooling (stride equals kernel); H and W must divide evenly."""
    v, _ = _pool_view("max_pool2d", x, kernel)
    out = v.max(axis=(3, 5))
    # first maximal element in each window takes the gradient
    flat = v.transpose(0, 1, 2, 4, 3, 5).reshape(*out.shape, -1)
    arg = flat.argmax(axis=-1)
    shape = x.shape

    def vjp(g):
        d = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(d, arg[..., None], g[..., None], axis=-1)
        kh, kw = v.shape[3], v.shape[5]
        d = d.reshape(*out.shape, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(shape)
        return (d,)

    return _record("max_pool2d", (x,), out, vjp)


def avg_pool2d(x: Tensor, kernel: int | tuple[int, int] | None = None) -> Tensor:
    """Non-overlapping average pooling; ``kernel=None`` pools the whole plane."""
    if kernel is None:
        kernel = (x.shape[2], x.shape[3]) if x.ndim == 4 else 1
    v, (kh, kw) = _pool_view("avg_pool2d", x, kernel)
    out = v.mean(axis=(3, 5))
    shape = x.shape

    def vjp(g):
        d = np.broadcast_to(g[:, :, :, None, :, None] / (kh * kw), v.shape)
        return (d.reshape(shape).copy(),)

    return _record("avg_pool2d", (x,), out, vjp)


# --------------------------------------------------------------------------
# normalization


BN_MOMENTUM = 0.9
BN_EPS = 1e-5


def _check_bn_rank(x: Tensor) -> None:
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: expected rank 2 or 4, got shape {x.shape}")


def _bn_bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v if ndim == 2 else v[None, :, None, None]


def _chan_sum(a: np.ndarray) -> np.ndarray:
    # reducing the contiguous trailing plane first is much faster than axis=(0, 2, 3)
    if a.ndim == 2:
        return a.sum(axis=0)
    return a.reshape(a.shape[0], a.shape[1], -1).sum(axis=2).sum(axis=0)


def batch_moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (mean, biased variance) over every axis but axis 1."""
    m = x.size // x.shape[1]
    mu = _chan_sum(x) / m
    d = x - _bn_bcast(mu, x.ndim)
    return mu, _chan_sum(d * d) / m


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    train: bool,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization of (N, C) or (N, C, H, W) input.

    In training mode the batch's own mean and biased variance are used; use
    :func:`batch_moments` and :func:`update_running` to advance the running
    statistics. In inference mode the running statistics are used and each
    row is transformed independently.
    """
    _check_bn_rank(x)
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"batch_norm: {name} shape {t.shape} vs input {x.shape}")
    nd = x.ndim
    xd = x.data
    gd = _bn_bcast(gamma.data, nd)
    if not train:
        inv = 1.0 / np.sqrt(_bn_bcast(running_var.data, nd) + eps)
        xhat = (xd - _bn_bcast(running_mean.data, nd)) * inv
        out = xhat * gd + _bn_bcast(beta.data, nd)

        def vjp_eval(g):
            gx = g * gd * inv
            return (
                gx, _chan_sum(g * xhat), _chan_sum(g),
                -_chan_sum(gx), _chan_sum(-0.5 * gx * xhat * inv),
            )

        return _record("batch_norm", (x, gamma, beta, running_mean, running_var), out, vjp_eval)
    mu, var = batch_moments(xd)
    inv = 1.0 / np.sqrt(_bn_bcast(var, nd) + eps)
    xhat = (xd - _bn_bcast(mu, nd)) * inv
    out = xhat * gd + _bn_bcast(beta.data, nd)
    m = xd.size // c

    def vjp(g):
        dgamma = _chan_sum(g * xhat)
        dbeta = _chan_sum(g)
        # d/dx of gamma * xhat + beta with batch statistics
        dx = (gd * inv) * (g - _bn_bcast(dbeta / m, nd) - xhat * _bn_bcast(dgamma / m, nd))
        return (dx, dgamma, dbeta)

    return _record("batch_norm", (x, gamma, beta), out, vjp)


def update_running(running: np.ndarray, batch_value: np.ndarray, momentum: float = BN_MOMENTUM) -> np.ndarray:
    """Exponential moving average: ``momentum * running + (1 - momentum) * batch``."""
    return (momentum * running + (1.0 - momentum) * batch_value).astype(running.dtype)


# --------------------------------------------------------------------------
# dispatch by name


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "max_pool2d": max_pool2d,
    "avg_pool2d": avg_pool2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "log_sigmoid": log_sigmoid,
    "tanh": tanh,
    "add": add,
    "multiply": multiply,
    "subtract": subtract,
    "scale": scale,
    "sum": sum,
    "mean": mean,
    "log": log,
    "exp": exp,
    "logsumexp": logsumexp,
    "dot": dot,
    "batch_norm": batch_norm,
    "affine": affine,
    "reshape": reshape,
    "transpose": transpose,
    "take": take,
}


def apply(op_kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Run the op named ``op_kind`` on ``inputs`` with op-specific keyword params."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}") from None
    return fn(*inputs, **params)


# --------------------------------------------------------------------------
# finite-difference verification


KINK_TOL = 1e-6


def grad_check(
    op_kind: str | Callable[..., Tensor],
    inputs: Sequence[Tensor | np.ndarray],
    epsilon: float = 1e-5,
    seed: int = 0,
    kink_inputs: Iterable[int] = (),
    **params,
) -> float:
    """Max relative error between tape gradients and central differences.

    Non-scalar outputs are reduced with a fixed random projection. The error
    per coordinate is ``|analytic - numeric| / max(1, |analytic|)``. For
    ``relu`` (and any input index listed in ``kink_inputs``) coordinates
    within ``KINK_TOL`` of zero are skipped.
    """
    if not 0 < epsilon <= 1e-3:
        raise ValueError(f"epsilon must be in (0, 1e-3], got {epsilon}")
    fn = OPS[op_kind] if isinstance(op_kind, str) else op_kind
    arrays = [np.array(t.data if isinstance(t, Tensor) else t, dtype=np.float64) for t in inputs]
    if np.sum([a.size for a in arrays]) > 10_000:
        raise ValueError("grad_check: too many input coordinates to enumerate")
    kinks = set(kink_inputs)
    if op_kind == "relu":
        kinks.add(0)

    with debug_mode(True):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        with GradientTape() as tape:
            out = fn(*leaves, **params)
            proj = np.random.default_rng(seed).standard_normal(out.shape)
            loss = sum(multiply(out, Tensor(proj, dtype=out.dtype)))

        def scalar(vals):
            return float(np.sum(fn(*[Tensor(v) for v in vals], **params).data * proj))

        if tape.nodes:
            grads = backward(loss, tape)
            analytic = [grads.get_array(t) for t in leaves]
        else:
            analytic = [np.zeros_like(a) for a in arrays]

        worst = 0.0
        for k, a in enumerate(arrays):
            for idx in np.ndindex(a.shape):
                if k in kinks and abs(a[idx]) < KINK_TOL:
                    continue
                plus = [x.copy() for x in arrays]
                minus = [x.copy() for x in arrays]
                plus[k][idx] += epsilon
                minus[k][idx] -= epsilon
                numeric = (scalar(plus) - scalar(minus)) / (2 * epsilon)
                an = float(analytic[k][idx])
                worst = max(worst, abs(an - numeric) / max(1.0, abs(an)))
    return worst


# --------------------------------------------------------------------------
# ITF tensor files


ITF_MAGIC = b"ITF1"


class FormatError(ValueError):
    """A binary file is malformed, truncated, or fails its checksum."""


def itf_encode(arr) -> bytes:
    """Serialize to ITF: magic, u8 rank, u32 LE dims, f32 LE values."""
    arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
    if arr.ndim > 255:
        raise ShapeError("itf: rank exceeds 255")
    head = ITF_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def itf_decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one ITF record at ``offset``; return (float32 array, next offset)."""
    if buf[offset:offset + 4] != ITF_MAGIC:
        raise FormatError("itf: bad magic")
    if len(buf) < offset + 5:
        raise FormatError("itf: truncated header")
    rank = buf[offset + 4]
    pos = offset + 5
    if len(buf) < pos + 4 * rank:
        raise FormatError("itf: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    end = pos + 4 * count
    if len(buf) < end:
        raise FormatError("itf: truncated data")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(dims)
    return arr, end


def save_itf(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(itf_encode(arr))


def load_itf(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = itf_decode(buf)
    if end != len(buf):
        raise FormatError(f"itf: {len(buf) - end} trailing bytes in {path}")
    return arr
