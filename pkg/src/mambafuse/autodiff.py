"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

A define-by-run tape: every primitive records its output, parents and a
backward closure on the currently active ``Tape``.  Arrays are plain numpy,
float32 by default with a float64 mode for gradient checking.
"""

from __future__ import annotations

import contextlib
import math
import os
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

SAFE_DIV_EPS = 1e-4

_DEBUG_FINITE = bool(os.environ.get("MAMBAFUSE_DEBUG"))


class ConfigError(ValueError):
    """Raised for shape/parameter configuration mistakes."""


class AlignmentError(ConfigError):
    """Raised when two feature maps that must be spatially aligned are not."""


class UsageError(ValueError):
    """Raised for API misuse (e.g. backward on a non-scalar loss)."""


class NumericError(ArithmeticError):
    """Raised when a non-finite value appears inside a guarded computation."""


# ---------------------------------------------------------------------------
# precision mode

_dtype = np.float32


def default_dtype():
    return _dtype


def set_default_dtype(dtype) -> None:
    global _dtype
    if dtype not in (np.float32, np.float64):
        raise UsageError(f"unsupported dtype {dtype!r}")
    _dtype = dtype


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the default dtype; mode is 'f32' or 'f64'."""
    global _dtype
    if mode not in ("f32", "f64"):
        raise UsageError(f"unknown precision mode {mode!r}")
    prev = _dtype
    _dtype = np.float64 if mode == "f64" else np.float32
    try:
        yield
    finally:
        _dtype = prev


# ---------------------------------------------------------------------------
# tape

class Node:
    __slots__ = ("out", "parents", "fn")

    def __init__(self, out: "Tensor", parents: tuple, fn: Callable):
        self.out = out
        self.parents = parents
        self.fn = fn


class Tape:
    """Ordered record of primitive applications (topological by construction)."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


class _TapeState(threading.local):
    # independent tapes may run on separate threads; each thread records
    # to its own stack
    def __init__(self):
        self.stack = [Tape()]
        self.grad_enabled = True


_state = _TapeState()


def _stack() -> list:
    return _state.stack


def current_tape() -> Tape:
    return _state.stack[-1]


def reset_tape() -> Tape:
    """Replace the implicit base tape (frees recorded graph memory)."""
    _state.stack[0] = Tape()
    return _state.stack[0]


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


# ---------------------------------------------------------------------------
# tensor

class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype)
        if self.data.ndim > 4:
            raise ConfigError(f"rank {self.data.ndim} > 4 not supported")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; everything funnels into the primitives below
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    if _DEBUG_FINITE and not np.all(np.isfinite(out.data)):
        raise NumericError("non-finite value in forward op")
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        current_tape().nodes.append(Node(out, tuple(parents), fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, ext in enumerate(shape):
        if ext == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _accumulate(t: Tensor, g: Optional[np.ndarray]) -> None:
    if g is None or not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g, dtype=t.data.dtype), t.data.shape)
    # accumulation always builds a fresh array, so aliasing g is safe
    t.grad = g if t.grad is None else t.grad + g


def backward(tape: Tape, loss: Tensor) -> dict:
    """Reverse sweep over ``tape`` seeding at scalar ``loss``.

    Populates ``.grad`` on every tensor reached and returns a name->Tensor
    map for any ``Parameter`` leaves that received a gradient.
    """
    if loss.size != 1:
        raise UsageError(f"loss must be scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    seen = False
    for node in reversed(tape.nodes):
        if node.out is loss:
            seen = True
        if node.out.grad is None:
            continue
        grads = node.fn(node.out.grad)
        for p, g in zip(node.parents, grads):
            _accumulate(p, g)
    if not seen and loss.requires_grad:
        raise UsageError("loss is not on the given tape")
    out = {}
    for node in tape.nodes:
        for p in node.parents:
            name = getattr(p, "name", None)
            if name is not None and p.grad is not None:
                out[name] = Tensor(p.grad)
    return out


# ---------------------------------------------------------------------------
# elementwise primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda gy: (gy, gy))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda gy: (gy, -gy))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda gy: (-gy,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda gy: (gy * b.data, gy * a.data))


def safe_div(a: Tensor, b: Tensor, eps: float = SAFE_DIV_EPS) -> Tensor:
    """a / (b + eps); eps=0 gives plain division."""
    denom = b.data + eps
    out = Tensor(a.data / denom)
    return _record(
        out, (a, b),
        lambda gy: (gy / denom, -gy * a.data / (denom * denom)),
    )


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    out = Tensor(s)
    return _record(out, (a,), lambda gy: (gy * s * (1.0 - s),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # stable form: exp is only ever taken of a non-positive argument
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, z) / (1.0 + z)


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda gy: (gy * (s + a.data * s * (1.0 - s)),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = Tensor(e)
    return _record(out, (a,), lambda gy: (gy * e,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda gy: (gy / a.data,))


def sqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.data)
    out = Tensor(r)
    return _record(out, (a,), lambda gy: (gy * 0.5 / r,))


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    x = a.data
    out = Tensor(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))))
    s = _sigmoid_np(x)
    return _record(out, (a,), lambda gy: (gy * s,))


def arctan(a: Tensor) -> Tensor:
    out = Tensor(np.arctan(a.data))
    return _record(out, (a,), lambda gy: (gy / (1.0 + a.data * a.data),))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data >= b.data  # ties route to the first argument
    out = Tensor(np.where(take_a, a.data, b.data))
    return _record(
        out, (a, b),
        lambda gy: (gy * take_a, gy * ~take_a),
    )


def minimum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data))
    return _record(
        out, (a, b),
        lambda gy: (gy * take_a, gy * ~take_a),
    )


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(a.data * mask)
    return _record(out, (a,), lambda gy: (gy * mask,))


_POINTWISE_UNARY = {"sigmoid": sigmoid, "silu": silu, "exp": exp, "softplus": softplus}
_POINTWISE_BINARY = {"add": add, "sub": sub, "mul": mul, "safe_div": safe_div}


def pointwise(op_kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch by name over the elementwise op set."""
    if op_kind in _POINTWISE_UNARY:
        if b is not None:
            raise UsageError(f"{op_kind} is unary")
        return _POINTWISE_UNARY[op_kind](a)
    if op_kind in _POINTWISE_BINARY:
        if b is None:
            raise UsageError(f"{op_kind} needs two operands")
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError as e:
            raise ConfigError(f"non-broadcastable shapes {a.shape} vs {b.shape}") from e
        return _POINTWISE_BINARY[op_kind](a, b)
    raise UsageError(f"unknown pointwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# shape primitives

def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda gy: (gy.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = Tensor(a.data.transpose(axes))
    return _record(out, (a,), lambda gy: (gy.transpose(inv),))


def flip(a: Tensor, axis: int) -> Tensor:
    out = Tensor(np.flip(a.data, axis=axis))
    return _record(out, (a,), lambda gy: (np.flip(gy, axis=axis),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bw(gy):
        return tuple(np.split(gy, splits, axis=axis))

    return _record(out, tensors, bw)


def getitem(a: Tensor, idx) -> Tensor:
    out = Tensor(a.data[idx])
    shape = a.data.shape
    # basic indexing never aliases, so plain assignment is enough; only
    # integer-array (fancy) indexing can select an element twice
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, np.integer, slice, type(None),
                               type(Ellipsis))) for p in parts)

    def bw(gy):
        g = np.zeros(shape, dtype=gy.dtype)
        if basic:
            g[idx] = gy
        else:
            np.add.at(g, idx, gy)
        return (g,)

    return _record(out, (a,), bw)


def pad2d(a: Tensor, pad: int) -> Tensor:
    if a.ndim != 4:
        raise ConfigError(f"pad2d needs rank 4, got {a.ndim}")
    if pad == 0:
        return a
    out = Tensor(np.pad(a.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))))
    return _record(out, (a,), lambda gy: (gy[:, :, pad:-pad, pad:-pad],))


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# reductions

def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    shape = a.data.shape
    return _record(out, (a,), lambda gy: (np.broadcast_to(gy, shape),))


def sum_axis(a: Tensor, axis, keepdims: bool = True) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.data.shape

    def bw(gy):
        if not keepdims:
            gy = np.expand_dims(gy, axis)
        return (np.broadcast_to(gy, shape),)

    return _record(out, (a,), bw)


def mean_axis(a: Tensor, axis, keepdims: bool = True) -> Tensor:
    axes = axis if isinstance(axis, tuple) else (axis,)
    n = 1
    for ax in axes:
        n *= a.data.shape[ax]
    return mul(sum_axis(a, axis, keepdims), Tensor(1.0 / n))


def mean_all(a: Tensor) -> Tensor:
    return mul(sum_all(a), Tensor(1.0 / a.size))


def max_axis(a: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    """Max along one axis; gradient routes to the first maximal element."""
    out_data = a.data.max(axis=axis, keepdims=keepdims)
    arg = a.data.argmax(axis=axis)  # first index on ties
    out = Tensor(out_data)
    shape = a.data.shape

    def bw(gy):
        gy_e = gy if keepdims else np.expand_dims(gy, axis)
        g = np.zeros(shape, dtype=gy.dtype)
        np.put_along_axis(g, np.expand_dims(arg, axis), gy_e, axis=axis)
        return (g,)

    return _record(out, (a,), bw)


def max_channel(a: Tensor) -> Tensor:
    return max_axis(a, axis=1, keepdims=True)


def mean_channel(a: Tensor) -> Tensor:
    return mean_axis(a, axis=1, keepdims=True)


def global_avg_pool(a: Tensor) -> Tensor:
    if a.ndim != 4:
        raise ConfigError(f"global_avg_pool needs rank 4, got {a.ndim}")
    return mean_axis(a, axis=(2, 3), keepdims=True)


def max_pool2d(a: Tensor, kernel: int, stride: int, padding: int) -> Tensor:
    if a.ndim != 4:
        raise ConfigError(f"max_pool2d needs rank 4, got {a.ndim}")
    B, C, H, W = a.data.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kernel > Hp or kernel > Wp:
        raise ConfigError(f"pool kernel {kernel} exceeds padded input {Hp}x{Wp}")
    neg = np.finfo(a.data.dtype).min
    xp = np.full((B, C, Hp, Wp), neg, dtype=a.data.dtype)
    xp[:, :, padding:padding + H, padding:padding + W] = a.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [B,C,Ho,Wo,k,k]
    Ho, Wo = win.shape[2], win.shape[3]
    flat = win.reshape(B, C, Ho, Wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])

    def bw(gy):
        ky, kx = np.unravel_index(arg, (kernel, kernel))
        oy = np.arange(Ho)[None, None, :, None] * stride
        ox = np.arange(Wo)[None, None, None, :] * stride
        bi = np.arange(B)[:, None, None, None]
        ci = np.arange(C)[None, :, None, None]
        flat = ((bi * C + ci) * Hp + (oy + ky)) * Wp + (ox + kx)
        g = np.bincount(flat.ravel(), weights=gy.ravel(),
                        minlength=B * C * Hp * Wp).reshape(B, C, Hp, Wp).astype(gy.dtype)
        if padding:
            g = g[:, :, padding:-padding, padding:-padding]
        return (g,)

    return _record(out, (a,), bw)


def reduce(op_kind: str, a: Tensor, **kwargs) -> Tensor:
    """Dispatch by name over the reduction op set."""
    table = {
        "max_channel": max_channel,
        "mean_channel": mean_channel,
        "global_avg_pool": global_avg_pool,
        "max_pool2d": max_pool2d,
        "sum_all": sum_all,
    }
    if op_kind not in table:
        raise UsageError(f"unknown reduce op {op_kind!r}")
    return table[op_kind](a, **kwargs)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data)

    def bw(gy):
        ad, bd = a.data, b.data
        ga = gy @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ gy
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _record(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: y = x @ W^T + b, W is [Dout, Din]."""
    dout, din = weight.shape
    if x.shape[-1] != din:
        raise ConfigError(f"linear: input extent {x.shape[-1]} != Din {din}")
    y = matmul(x, transpose(weight, (1, 0)))
    if bias is not None:
        y = add(y, bias)
    return y


# ---------------------------------------------------------------------------
# convolution

def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor],
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding (im2col under the hood)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigError(f"conv2d needs rank-4 input/weight, got {x.shape}/{weight.shape}")
    B, C, H, W = x.data.shape
    Cout, Cin, K, K2 = weight.data.shape
    if Cin != C:
        raise ConfigError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if K != K2:
        raise ConfigError(f"conv2d kernel must be square, got {weight.shape}")
    Ho = conv_out_size(H, K, stride, padding)
    Wo = conv_out_size(W, K, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ConfigError(
            f"conv2d output would be empty for input {x.shape}, kernel {K}, "
            f"stride {stride}, padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (K, K), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [B,C,Ho,Wo,K,K]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * K * K)
    wmat = weight.data.reshape(Cout, C * K * K)
    y = (cols @ wmat.T).reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    if bias is not None:
        y = y + bias.data.reshape(1, Cout, 1, 1)
    out = Tensor(y)
    Hp, Wp = H + 2 * padding, W + 2 * padding

    def bw(gy):
        gflat = gy.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Cout)
        gw = (gflat.T @ cols).reshape(Cout, C, K, K)
        gcols = (gflat @ wmat).reshape(B, Ho, Wo, C, K, K)
        gx = np.zeros((B, C, Hp, Wp), dtype=gy.dtype)
        for ky in range(K):
            for kx in range(K):
                gx[:, :, ky:ky + Ho * stride:stride, kx:kx + Wo * stride:stride] += \
                    gcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        gb = gflat.sum(axis=0) if bias is not None else None
        if bias is not None:
            return (gx, gw, gb)
        return (gx, gw)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, bw)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ConfigError(f"upsample needs rank 4, got {x.ndim}")
    out = Tensor(x.data.repeat(2, axis=2).repeat(2, axis=3))
    B, C, H, W = x.data.shape

    def bw(gy):
        return (gy.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# bilinear sampling (zero padding outside [0,H-1]x[0,W-1])

def grid_sample_taps(x: Tensor, ys: Tensor, xs: Tensor) -> Tensor:
    """Bilinearly sample x:[B,C,H,W] at real coords ys/xs:[B,T,Ho,Wo].

    Returns [B,C*T,Ho,Wo] with the channel axis major (tap index minor);
    out-of-bounds neighbors contribute zero.  Differentiable w.r.t. x and
    both coordinate fields.
    """
    B, C, H, W = x.data.shape
    if ys.shape != xs.shape or ys.shape[0] != B:
        raise ConfigError(f"coordinate shapes {ys.shape}/{xs.shape} mismatch input {x.shape}")
    y = ys.data
    xx = xs.data
    y0 = np.floor(y)
    x0 = np.floor(xx)
    wy = y - y0
    wx = xx - x0
    y0i = y0.astype(np.int64)
    x0i = x0.astype(np.int64)

    xf = x.data.reshape(B, C, H * W)
    T, Ho, Wo = y.shape[1], y.shape[2], y.shape[3]
    bidx = np.arange(B)[:, None]

    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            yc = y0i + dy
            xc = x0i + dx
            valid = (yc >= 0) & (yc < H) & (xc >= 0) & (xc < W)
            pos = (np.clip(yc, 0, H - 1) * W + np.clip(xc, 0, W - 1)).reshape(B, -1)
            g = xf[bidx, :, pos]                       # [B, T*Ho*Wo, C]
            g = g.transpose(0, 2, 1).reshape(B, C, T, Ho, Wo)
            g = g * valid[:, None]
            wgt = (wy if dy else 1.0 - wy) * (wx if dx else 1.0 - wx)
            corners.append((g, wgt[:, None], valid, pos))
    out_data = sum(g * w for g, w, _, _ in corners)
    out = Tensor(out_data.reshape(B, C * T, Ho, Wo))

    def bw(gy_flat):
        gy = gy_flat.reshape(B, C, T, Ho, Wo)
        gys = np.zeros_like(y)
        gxs = np.zeros_like(xx)
        idx_parts, wgt_parts = [], []
        base = (np.arange(B)[:, None] * (H * W)).astype(np.int64)
        for (g, w, valid, pos), (dy, dx) in zip(corners, ((0, 0), (0, 1), (1, 0), (1, 1))):
            contrib = (gy * w * valid[:, None]).reshape(B, C, -1).transpose(0, 2, 1)
            idx3 = ((base + pos) * C)[:, :, None] + np.arange(C)
            idx_parts.append(idx3.ravel())
            wgt_parts.append(contrib.ravel())
            gdot = (gy * g).sum(axis=1)  # d out / d weight, summed over channels
            sy = (wx if dx else 1.0 - wx) * (1.0 if dy else -1.0)
            sx = (wy if dy else 1.0 - wy) * (1.0 if dx else -1.0)
            gys += gdot * sy
            gxs += gdot * sx
        # one fused scatter-accumulate for all four corners
        gxT = np.bincount(np.concatenate(idx_parts),
                          weights=np.concatenate(wgt_parts),
                          minlength=B * H * W * C).reshape(B, H * W, C)
        gx = gxT.transpose(0, 2, 1).reshape(B, C, H, W).astype(gy.dtype)
        return (gx, gys, gxs)

    return _record(out, (x, ys, xs), bw)


def bilinear_sample(plane: Tensor, x: float, y: float) -> Tensor:
    """Sample a [H,W] plane at column x, row y; returns a scalar tensor."""
    if plane.ndim != 2:
        raise ConfigError(f"bilinear_sample needs a [H,W] plane, got {plane.shape}")
    H, W = plane.shape
    p4 = reshape(plane, (1, 1, H, W))
    ys = _as_tensor(np.full((1, 1, 1, 1), y, dtype=plane.data.dtype))
    xs = _as_tensor(np.full((1, 1, 1, 1), x, dtype=plane.data.dtype))
    return reshape(grid_sample_taps(p4, ys, xs), ())


# ---------------------------------------------------------------------------
# composed helpers

def log_softmax(x: Tensor, axis: int) -> Tensor:
    m = stop_gradient(max_axis(x, axis=axis, keepdims=True))
    shifted = sub(x, m)
    lse = log(sum_axis(exp(shifted), axis=axis, keepdims=True))
    return sub(shifted, lse)


def softmax(x: Tensor, axis: int) -> Tensor:
    return exp(log_softmax(x, axis))


def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Channelwise layer normalization over axis 1 of a [B,C,H,W] map."""
    mu = mean_axis(x, axis=1, keepdims=True)
    xc = sub(x, mu)
    var = mean_axis(mul(xc, xc), axis=1, keepdims=True)
    inv = safe_div(Tensor(np.ones((), dtype=x.data.dtype)),
                   sqrt(add(var, Tensor(eps))), eps=0.0)
    C = x.shape[1]
    return add(mul(mul(xc, inv), reshape(gamma, (1, C, 1, 1))),
               reshape(beta, (1, C, 1, 1)))


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-3,
               sample: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued over ``inputs``.  With ``sample`` set, only
    that many randomly chosen coordinates per input are perturbed.
    """
    if h <= 0:
        raise UsageError("h must be positive")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f(*inputs)
        backward(tape, loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        idxs = range(flat.size)
        if sample is not None and flat.size > sample:
            r = rng or np.random.default_rng(0)
            idxs = r.choice(flat.size, size=sample, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = f(*inputs).item()
            flat[i] = orig - h
            with no_grad():
                fm = f(*inputs).item()
            flat[i] = orig
            cd = (fp - fm) / (2.0 * h)
            a = gflat[i]
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            worst = max(worst, err)
    return worst
