"""Dense float32 array kernels used by every layer of the model.

Arrays are plain ``numpy.ndarray`` values in row-major (C) order. Kernels accept
arbitrary leading batch axes: a depthwise convolution over ``(..., C, H, W)``
treats everything before ``C`` as batch. Each forward kernel that has a
non-trivial adjoint is paired with a ``*_backward`` function returning the
vector-Jacobian products; the autodiff layer wires those together.

Conventions fixed here (none of them come from the model description itself):

* convolution kernels are 3x3 by default, stride 1, zero "same" padding;
* pooling is 2x2 mean with stride 2, upsampling is nearest neighbour;
* group-norm statistics are accumulated in float64.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterator, Sequence

import numpy as np

Tensor = np.ndarray

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


def tensor(data, shape: Sequence[int] | None = None, dtype=DTYPE) -> Tensor:
    arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise ShapeError(f"all extents must be >= 1, got {shape}")
        if math.prod(shape) != arr.size:
            raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    return arr


def flat_offset(shape: Sequence[int], index: Sequence[int]) -> int:
    """Row-major offset of ``index`` (last axis fastest)."""
    if len(shape) != len(index):
        raise ShapeError(f"index rank {len(index)} != tensor rank {len(shape)}")
    off = 0
    for extent, i in zip(shape, index):
        if not 0 <= i < extent:
            raise IndexError(f"index {tuple(index)} out of range for {tuple(shape)}")
        off = off * extent + i
    return off


def unflatten_offset(shape: Sequence[int], offset: int) -> tuple[int, ...]:
    out = []
    for extent in reversed(shape):
        offset, i = divmod(offset, extent)
        out.append(i)
    if offset:
        raise IndexError("offset out of range")
    return tuple(reversed(out))


# ---------------------------------------------------------------------------
# multiply-accumulate instrument


class MacCounter:
    def __init__(self) -> None:
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.total += n
        self.by_op[op] = self.by_op.get(op, 0) + n


_counters: list[MacCounter] = []


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count multiply-accumulates issued by forward kernels inside the block."""
    counter = MacCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _record(op: str, n: int) -> None:
    for c in _counters:
        c.add(op, n)


# ---------------------------------------------------------------------------
# convolutions


def _check_odd_kernel(kh: int, kw: int) -> None:
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")


def _patches(x: Tensor, kh: int, kw: int) -> Tensor:
    # (B, C, H, W) -> (C, B*H*W, kh*kw), zero "same" padding
    B, C, H, W = x.shape
    xp = np.pad(x, [(0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)])
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win.transpose(1, 0, 2, 3, 4, 5).reshape(C, B * H * W, kh * kw)


def conv2d_depthwise(x: Tensor, kernels: Tensor) -> Tensor:
    """Per-channel 2-D cross-correlation with depth multiplier.

    ``x`` is ``(..., C, H, W)`` and ``kernels`` is ``(C, M, kh, kw)``. Output
    channel ``c*M + m`` is channel ``c`` filtered by kernel ``(c, m)``.
    """
    if x.ndim < 3:
        raise ShapeError(f"depthwise input needs (..., C, H, W), got {x.shape}")
    if kernels.ndim != 4:
        raise ShapeError(f"depthwise kernels need (C, M, kh, kw), got {kernels.shape}")
    C, H, W = x.shape[-3:]
    kc, M, kh, kw = kernels.shape
    if kc != C:
        raise ShapeError(f"input has {C} channels but kernel bank has {kc}")
    _check_odd_kernel(kh, kw)
    lead = x.shape[:-3]
    B = math.prod(lead)
    cols = _patches(x.reshape(B, C, H, W), kh, kw)
    k = kernels.reshape(C, M, kh * kw).transpose(0, 2, 1)
    out = np.matmul(cols, k)  # (C, BHW, M)
    _record("depthwise", out.size * kh * kw)
    out = out.reshape(C, B, H, W, M).transpose(1, 0, 4, 2, 3)
    return np.ascontiguousarray(out).reshape(lead + (C * M, H, W))


def conv2d_depthwise_backward(
    grad: Tensor, x: Tensor, kernels: Tensor
) -> tuple[Tensor, Tensor]:
    C, H, W = x.shape[-3:]
    _, M, kh, kw = kernels.shape
    ph, pw = kh // 2, kw // 2
    B = math.prod(x.shape[:-3])
    # (B, C, M, H, W) -> (C, BHW, M)
    g = grad.reshape(B, C, M, H, W).transpose(1, 0, 3, 4, 2).reshape(C, B * H * W, M)
    cols = _patches(x.reshape(B, C, H, W), kh, kw)
    dk = np.matmul(cols.transpose(0, 2, 1), g)  # (C, khkw, M)
    dk = dk.transpose(0, 2, 1).reshape(kernels.shape)
    dcols = np.matmul(g, kernels.reshape(C, M, kh * kw))  # (C, BHW, khkw)
    dcols = dcols.reshape(C, B, H, W, kh, kw)
    dxp = np.zeros((C, B, H + 2 * ph, W + 2 * pw), dtype=grad.dtype)
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u : u + H, v : v + W] += dcols[..., u, v]
    dx = dxp[:, :, ph : ph + H, pw : pw + W].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dx).reshape(x.shape), dk


def _pointwise_operands(x: Tensor, weights: Tensor, bias: Tensor):
    # Normalizes to grouped form: x (B, G, Cin, HW), w (G, Cout, Cin), b (G, Cout)
    if weights.ndim == 2:
        weights = weights[None]
        bias = bias[None]
    G, Cout, Cin = weights.shape
    if x.ndim < 3:
        raise ShapeError(f"pointwise input needs (..., C, H, W), got {x.shape}")
    C, H, W = x.shape[-3:]
    if C != G * Cin:
        raise ShapeError(
            f"input has {C} channels but weights expect {G} group(s) of {Cin}"
        )
    if bias.shape != (G, Cout):
        raise ShapeError(f"bias shape {bias.shape} != {(G, Cout)}")
    xg = x.reshape((-1, G, Cin, H * W))
    return xg, weights, bias


def conv2d_pointwise(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """1x1 channel mixing.

    ``weights`` is ``(C_out, C)`` with ``bias`` ``(C_out,)``, or grouped as
    ``(G, C_out, C/G)`` with ``bias`` ``(G, C_out)`` for G independent mixers
    over contiguous channel groups.
    """
    grouped = weights.ndim == 3
    xg, w, b = _pointwise_operands(x, weights, bias)
    G, Cout, Cin = w.shape
    H, W = x.shape[-2:]
    y = np.matmul(w[None], xg) + b[None, :, :, None]
    _record("pointwise", y.size * Cin)
    lead = x.shape[:-3]
    return y.reshape(lead + ((G * Cout) if grouped else Cout, H, W))


def conv2d_pointwise_backward(
    grad: Tensor, x: Tensor, weights: Tensor, bias: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    grouped = weights.ndim == 3
    xg, w, _ = _pointwise_operands(x, weights, bias)
    G, Cout, Cin = w.shape
    g = grad.reshape((xg.shape[0], G, Cout, xg.shape[-1]))
    dx = np.matmul(np.swapaxes(w, -1, -2)[None], g).reshape(x.shape)
    g2 = g.transpose(1, 2, 0, 3).reshape(G, Cout, -1)
    x2 = xg.transpose(1, 2, 0, 3).reshape(G, Cin, -1)
    dw = np.matmul(g2, x2.transpose(0, 2, 1))
    db = g.sum(axis=(0, 3))
    if not grouped:
        dw, db = dw[0], db[0]
    return dx, dw, db


# ---------------------------------------------------------------------------
# activations


def relu(t: Tensor) -> Tensor:
    return np.maximum(t, 0).astype(t.dtype, copy=False)


def leaky_relu(t: Tensor, slope: float) -> Tensor:
    return np.where(t >= 0, t, t * t.dtype.type(slope))


def leaky_relu_grad(t: Tensor, slope: float) -> Tensor:
    # subgradient at exactly 0 is the slope (and 0 for relu)
    return np.where(t > 0, 1.0, slope).astype(t.dtype)


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    v = np.asarray(v)
    if not np.issubdtype(v.dtype, np.floating):
        v = v.astype(DTYPE)
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(grad: Tensor, s: Tensor, axis: int = -1) -> Tensor:
    return s * (grad - (grad * s).sum(axis=axis, keepdims=True))


def scaled_inner_product(a: Tensor, b: Tensor, d: int | None = None) -> float:
    """<a, b> / sqrt(d) for two maps of equal shape; ``d`` defaults to a.size."""
    if a.shape != b.shape:
        raise ShapeError(f"inner product of {a.shape} and {b.shape}")
    if d is None:
        d = a.size
    return float(np.dot(a.ravel().astype(np.float64), b.ravel().astype(np.float64)) / math.sqrt(d))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = np.matmul(a, b)
    _record("matmul", out.size * a.shape[-1])
    return out


# ---------------------------------------------------------------------------
# resampling


def avg_pool2(t: Tensor) -> Tensor:
    H, W = t.shape[-2:]
    if H % 2 or W % 2:
        raise ShapeError(f"2x2 pooling needs even extents, got {H}x{W}")
    r = t.reshape(t.shape[:-2] + (H // 2, 2, W // 2, 2))
    return r.mean(axis=(-3, -1), dtype=np.float64).astype(t.dtype)


def avg_pool2_backward(grad: Tensor) -> Tensor:
    return upsample2(grad) * grad.dtype.type(0.25)


def upsample2(t: Tensor) -> Tensor:
    return np.repeat(np.repeat(t, 2, axis=-2), 2, axis=-1)


def upsample2_backward(grad: Tensor) -> Tensor:
    H, W = grad.shape[-2:]
    r = grad.reshape(grad.shape[:-2] + (H // 2, 2, W // 2, 2))
    return r.sum(axis=(-3, -1))


# ---------------------------------------------------------------------------
# normalization


def norm_groups(channels: int, max_groups: int = 4) -> int:
    """Largest divisor of ``channels`` not exceeding ``max_groups``."""
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def group_norm(
    t: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5
) -> Tensor:
    y, _ = group_norm_with_stats(t, groups, gamma, beta, eps)
    return y


def group_norm_with_stats(t, groups, gamma, beta, eps=1e-5):
    C, H, W = t.shape[-3:]
    if groups < 1 or C % groups:
        raise ShapeError(f"{C} channels cannot be split into {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"affine parameters must have shape ({C},)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    g = t.reshape((-1, groups, (C // groups) * H * W))
    mean = g.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = ((g - mean) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((g - mean) * inv_std).astype(t.dtype).reshape(t.shape)
    y = xhat * gamma[:, None, None] + beta[:, None, None]
    return y.astype(t.dtype, copy=False), (xhat, inv_std.astype(t.dtype))


def group_norm_backward(grad, xhat, inv_std, groups, gamma):
    C = xhat.shape[-3]
    axes = tuple(range(grad.ndim - 3)) + (grad.ndim - 2, grad.ndim - 1)
    dgamma = (grad * xhat).sum(axis=axes)
    dbeta = grad.sum(axis=axes)
    dxhat = (grad * gamma[:, None, None]).reshape((-1, groups, C // groups * xhat.shape[-1] * xhat.shape[-2]))
    xh = xhat.reshape(dxhat.shape)
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xh * (dxhat * xh).mean(axis=-1, keepdims=True)
    )
    return dx.reshape(xhat.shape).astype(grad.dtype, copy=False), dgamma, dbeta
