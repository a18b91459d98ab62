"""Dense tensors with reverse-mode automatic differentiation.

Everything the network needs runs through the ops in this module: 2-D
convolution (cross-correlation convention), max pooling with an argmax map,
dense affine maps, stable softmax, cross-entropy (plain and fused with
softmax), concatenation/slicing, and the usual elementwise activations.
Forward passes record a tape; ``backward`` walks it in reverse topological
order and accumulates gradients additively across fan-out.

Tensors are float32 by default; pass float64 data (or build models with
``dtype=np.float64``) when checking gradients against finite differences.
Every op validates that its output is finite and raises ``NumericError``
otherwise - NaN/Inf never propagates silently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

from .errors import DimensionError, GeometryError, LabelError, NumericError, StateError

MAX_RANK = 5
PROB_FLOOR = 1e-12

_grad_enabled = True


class no_grad:
    """Context manager that suppresses tape recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite value in result")


class Tensor:
    """N-dimensional array (rank <= 5) with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = _as_array(data, dtype)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"tensor rank {arr.ndim} exceeds maximum {MAX_RANK}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"<Tensor{tag} shape={self.data.shape} dtype={self.data.dtype}>"

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray, own: bool = False):
        """Add ``g`` into the gradient slot.

        own=True promises the caller made ``g`` fresh and will not reuse it,
        so the first accumulation can keep it without a defensive copy.
        """
        if self.grad is None:
            if own and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode pass from this scalar; see module docstring."""
        backward(self)


def _make_op(out_data: np.ndarray, parents: Sequence[Tensor],
             backward_fn: Callable[[np.ndarray], None], op: str) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss``.

    ``loss`` must be a scalar produced by recorded ops; gradients accumulate
    additively where a tensor fans out into several consumers.
    """
    if loss.data.size != 1:
        raise StateError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss._parents:
        raise StateError("backward before forward: loss has no recorded graph")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvSpec:
    """Geometry of a conv layer: filter count, kernel extents, stride, padding."""

    out_channels: int
    kernel_h: int
    kernel_w: int
    stride_h: int = 1
    stride_w: int = 1
    padding: str = "valid"

    def __post_init__(self):
        if self.out_channels < 1:
            raise GeometryError(f"out_channels must be >= 1, got {self.out_channels}")
        for field in ("kernel_h", "kernel_w", "stride_h", "stride_w"):
            if getattr(self, field) < 1:
                raise GeometryError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.padding not in ("valid", "same"):
            raise GeometryError(f"padding must be 'valid' or 'same', got {self.padding!r}")


def conv_output_geometry(h: int, w: int, kh: int, kw: int, sh: int, sw: int,
                         padding: str) -> tuple[int, int, int, int, int, int]:
    """Output extents and (top, bottom, left, right) zero padding for a conv."""
    if padding == "same":
        oh = -(-h // sh)
        ow = -(-w // sw)
        ph = max((oh - 1) * sh + kh - h, 0)
        pw = max((ow - 1) * sw + kw - w, 0)
        pt, pl = ph // 2, pw // 2
        return oh, ow, pt, ph - pt, pl, pw - pl
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise GeometryError(
            f"conv output extent < 1 for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {sh}x{sw}, padding=valid")
    return oh, ow, 0, 0, 0, 0


def _window_view(xp: np.ndarray, oh: int, ow: int, kh: int, kw: int,
                 sh: int, sw: int) -> np.ndarray:
    b, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, shape=(b, c, oh, ow, kh, kw),
                      strides=(s0, s1, s2 * sh, s3 * sw, s2, s3))


def _window_view_cl(xp: np.ndarray, oh: int, ow: int, kh: int, kw: int,
                    sh: int, sw: int) -> np.ndarray:
    # xp is channel-last [B,H,W,C]; windows come out [B,oh,ow,kh,kw,C] so
    # the contiguous channel axis stays innermost and the im2col copy moves
    # whole cache lines instead of single floats
    b, c = xp.shape[0], xp.shape[3]
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, shape=(b, oh, ow, kh, kw, c),
                      strides=(s0, s1 * sh, s2 * sw, s1, s2, s3))


def conv2d(x: Tensor, weights: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """Cross-correlation of a [B,C,H,W] input with [K,C,kh,kw] filters."""
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d expects [B,C,H,W] input, got shape {x.shape}")
    b, c, h, w = x.shape
    expect = (spec.out_channels, c, spec.kernel_h, spec.kernel_w)
    if weights.shape != expect:
        raise DimensionError(
            f"conv2d weight shape {weights.shape} does not match input {x.shape} "
            f"and spec (expected {expect})")
    if bias.shape != (spec.out_channels,):
        raise DimensionError(f"conv2d bias shape {bias.shape}, expected ({spec.out_channels},)")
    k, kh, kw = spec.out_channels, spec.kernel_h, spec.kernel_w
    sh, sw = spec.stride_h, spec.stride_w
    oh, ow, pt, pb, pl, pr = conv_output_geometry(h, w, kh, kw, sh, sw, spec.padding)
    if spec.padding == "same" and (kh > h + pt + pb or kw > w + pl + pr):
        raise GeometryError(f"conv kernel {kh}x{kw} larger than padded input")

    # work channel-last internally: the one-time transposes are dense block
    # copies, while im2col and the backward fold then stream contiguous
    # channel runs, which is several times faster than gathering floats
    # scattered across channel planes
    xt = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    if pt or pb or pl or pr:
        xp = np.pad(xt, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    else:
        xp = xt
    cols = np.ascontiguousarray(_window_view_cl(xp, oh, ow, kh, kw, sh, sw))
    cols = cols.reshape(b * oh * ow, kh * kw * c)
    wmat = np.ascontiguousarray(
        weights.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, k))
    out = cols @ wmat
    out += bias.data
    y = out.reshape(b, oh, ow, k).transpose(0, 3, 1, 2)

    def grad_fn(g: np.ndarray):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * oh * ow, k)
        if weights.requires_grad:
            dw = (cols.T @ gmat).reshape(kh, kw, c, k).transpose(3, 2, 0, 1)
            weights.accumulate_grad(np.ascontiguousarray(dw), own=True)
        if bias.requires_grad:
            bias.accumulate_grad(gmat.sum(axis=0), own=True)
        if x.requires_grad:
            dwin = (gmat @ wmat.T).reshape(b, oh, ow, kh, kw, c)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + (oh - 1) * sh + 1:sh,
                        j:j + (ow - 1) * sw + 1:sw, :] += dwin[:, :, :, i, j, :]
            dx = dxp[:, pt:pt + h, pl:pl + w, :].transpose(0, 3, 1, 2)
            x.accumulate_grad(np.ascontiguousarray(dx), own=True)

    return _make_op(np.ascontiguousarray(y), (x, weights, bias), grad_fn, "conv2d")


def maxpool2d(x: Tensor, pool_h: int, pool_w: int, stride_h: int, stride_w: int,
              padding: str = "valid") -> tuple[Tensor, np.ndarray]:
    """Window maximum over a [B,C,H,W] input.

    Returns the pooled tensor and the argmax map: for each output cell, the
    flat index (into the unpadded H*W plane) of the input pixel that won.
    Ties go to the lowest flat index. ``padding='same'`` pads with -inf so
    border windows shrink instead of erroring.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d expects [B,C,H,W] input, got shape {x.shape}")
    b, c, h, w = x.shape
    if padding == "valid" and (pool_h > h or pool_w > w):
        raise GeometryError(f"pool window {pool_h}x{pool_w} larger than input {h}x{w}")
    oh, ow, pt, pb, pl, pr = conv_output_geometry(h, w, pool_h, pool_w,
                                                  stride_h, stride_w, padding)
    if pt or pb or pl or pr:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    win = _window_view(xp, oh, ow, pool_h, pool_w, stride_h, stride_w)
    flat = np.ascontiguousarray(win).reshape(b, c, oh, ow, pool_h * pool_w)
    idx_in_win = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx_in_win[..., None], axis=-1)[..., 0]

    # argmax positions in unpadded input coordinates
    grid_h = np.arange(oh)[:, None] * stride_h
    grid_w = np.arange(ow)[None, :] * stride_w
    src_h = grid_h[None, None] + idx_in_win // pool_w - pt
    src_w = grid_w[None, None] + idx_in_win % pool_w - pl
    argmax_map = src_h * w + src_w

    def grad_fn(g: np.ndarray):
        if x.requires_grad:
            dx = np.zeros((b, c, h * w), dtype=x.data.dtype)
            bidx = np.arange(b)[:, None, None, None]
            cidx = np.arange(c)[None, :, None, None]
            np.add.at(dx, (bidx, cidx, argmax_map), g)
            x.accumulate_grad(dx.reshape(b, c, h, w), own=True)

    return _make_op(out, (x,), grad_fn, "maxpool2d"), argmax_map


# ---------------------------------------------------------------------------
# dense / softmax / losses


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map  [B,N] @ [N,M] + [M]."""
    if x.data.ndim != 2 or weights.data.ndim != 2:
        raise DimensionError(f"dense expects 2-D operands, got {x.shape} and {weights.shape}")
    if x.shape[1] != weights.shape[0]:
        raise DimensionError(
            f"dense inner extents disagree: input {x.shape} vs weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise DimensionError(f"dense bias shape {bias.shape}, expected ({weights.shape[1]},)")
    out = x.data @ weights.data
    out += bias.data

    def grad_fn(g: np.ndarray):
        if x.requires_grad:
            x.accumulate_grad(g @ weights.data.T, own=True)
        if weights.requires_grad:
            weights.accumulate_grad(x.data.T @ g, own=True)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0), own=True)

    return _make_op(out, (x, weights, bias), grad_fn, "dense")


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax of [B,N] logits, max-subtracted for stability."""
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"softmax expects [B,N] with N >= 1, got shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax: non-finite input logits")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g: np.ndarray):
        if x.requires_grad:
            inner = (g * p).sum(axis=1, keepdims=True)
            x.accumulate_grad((g - inner) * p, own=True)

    return _make_op(p, (x,), grad_fn, "softmax")


def _validate_targets(targets: np.ndarray, n_classes: int, op: str) -> np.ndarray:
    t = np.asarray(targets)
    if t.ndim != 1:
        raise DimensionError(f"{op}: targets must be a 1-D index array, got shape {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= n_classes):
        raise LabelError(f"{op}: target out of range [0, {n_classes})")
    return t.astype(np.int64)


def cross_entropy(probs: Tensor, targets) -> Tensor:
    """Mean over the batch of -log(probs[target]), floored at 1e-12."""
    if probs.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B,N] probabilities, got {probs.shape}")
    b, n = probs.shape
    t = _validate_targets(targets, n, "cross_entropy")
    if t.shape[0] != b:
        raise DimensionError(f"cross_entropy: {b} rows but {t.shape[0]} targets")
    picked = probs.data[np.arange(b), t]
    floored = np.maximum(picked, PROB_FLOOR)
    loss = np.array(-np.log(floored).mean(), dtype=probs.data.dtype)

    def grad_fn(g: np.ndarray):
        if probs.requires_grad:
            dp = np.zeros_like(probs.data)
            live = picked >= PROB_FLOOR
            dp[np.arange(b), t] = np.where(live, -1.0 / floored, 0.0) / b
            probs.accumulate_grad(dp * g, own=True)

    return _make_op(loss, (probs,), grad_fn, "cross_entropy")


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Fused softmax + cross-entropy on [B,N] logits; gradient is (p - onehot)/B."""
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects [B,N] logits, got {logits.shape}")
    b, n = logits.shape
    t = _validate_targets(targets, n, "softmax_cross_entropy")
    if t.shape[0] != b:
        raise DimensionError(f"softmax_cross_entropy: {b} rows but {t.shape[0]} targets")
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    logp = shifted - np.log(z)
    loss = np.array(-logp[np.arange(b), t].mean(), dtype=logits.data.dtype)

    def grad_fn(g: np.ndarray):
        if logits.requires_grad:
            dp = p.copy()
            dp[np.arange(b), t] -= 1.0
            logits.accumulate_grad(dp * (g / b), own=True)

    return _make_op(loss, (logits,), grad_fn, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# shape ops


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate tensors along ``axis``; all other extents must agree."""
    if not parts:
        raise DimensionError("concat of zero parts")
    rank = parts[0].data.ndim
    ref = list(parts[0].shape)
    for p in parts[1:]:
        if p.data.ndim != rank:
            raise DimensionError(f"concat rank mismatch: {parts[0].shape} vs {p.shape}")
        for ax in range(rank):
            if ax != axis and p.shape[ax] != ref[ax]:
                raise DimensionError(
                    f"concat off-axis extent mismatch on axis {ax}: "
                    f"{parts[0].shape} vs {p.shape}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g: np.ndarray):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * rank
                sl[axis] = slice(lo, hi)
                p.accumulate_grad(g[tuple(sl)])

    return _make_op(out, tuple(parts), grad_fn, "concat")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    rank = x.data.ndim
    if not (0 <= axis < rank):
        raise DimensionError(f"slice axis {axis} out of range for rank {rank}")
    if not (0 <= start < stop <= x.shape[axis]):
        raise DimensionError(f"slice [{start}:{stop}) invalid for extent {x.shape[axis]}")
    sl = [slice(None)] * rank
    sl[axis] = slice(start, stop)
    out = x.data[tuple(sl)].copy()

    def grad_fn(g: np.ndarray):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            dx[tuple(sl)] = g
            x.accumulate_grad(dx)

    return _make_op(out, (x,), grad_fn, "slice")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)
    orig = x.data.shape

    def grad_fn(g: np.ndarray):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(orig))

    return _make_op(out.copy(), (x,), grad_fn, "reshape")


def flatten_batch(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    with np.errstate(over="ignore"):
        out = a.data + b.data

    def grad_fn(g: np.ndarray):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _make_op(out, (a, b), grad_fn, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    with np.errstate(over="ignore"):
        out = a.data * b.data

    def grad_fn(g: np.ndarray):
        if a.requires_grad:
            a.accumulate_grad(g * b.data, own=True)
        if b.requires_grad:
            b.accumulate_grad(g * a.data, own=True)

    return _make_op(out, (a, b), grad_fn, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * x.data.dtype.type(c)

    def grad_fn(g: np.ndarray):
        if x.requires_grad:
            x.accumulate_grad(g * x.data.dtype.type(c), own=True)

    return _make_op(out, (x,), grad_fn, "scale")


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)

    def grad_fn(g: np.ndarray):
        if x.requires_grad:
            x.accumulate_grad(g * out * (1.0 - out), own=True)

    return _make_op(out, (x,), grad_fn, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def grad_fn(g: np.ndarray):
        if x.requires_grad:
            x.accumulate_grad(g * (1.0 - out * out), own=True)

    return _make_op(out, (x,), grad_fn, "tanh")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def grad_fn(g: np.ndarray):
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0), own=True)

    return _make_op(out, (x,), grad_fn, "relu")


def sum_all(x: Tensor) -> Tensor:
    out = np.array(x.data.sum(), dtype=x.data.dtype)

    def grad_fn(g: np.ndarray):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g, x.data.shape))

    return _make_op(out, (x,), grad_fn, "sum")
