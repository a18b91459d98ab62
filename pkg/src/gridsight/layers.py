"""Layer abstractions over the raw tensor ops.

A layer owns its parameters (wrapped in ``LayerParams`` so the model can
collect them by name), applies one forward transformation, and leaves all
gradient bookkeeping to the tape. The ConvLSTM cell follows the usual
convolutional gating: one strided input-to-state convolution and one
stride-1 same-padded state-to-state convolution jointly produce the four
gate pre-activations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .errors import DimensionError, GridsightError
from .tensor import ConvSpec, Tensor, conv_output_geometry


@dataclass
class LayerParams:
    """Named parameter bundle: (role, tensor) pairs owned by one layer."""

    name: str
    tensors: list = field(default_factory=list)

    def register(self, role: str, t: Tensor) -> Tensor:
        if any(r == role for r, _ in self.tensors):
            raise ValueError(f"layer {self.name!r} already has a {role!r} tensor")
        t.name = f"{self.name}.{role}"
        self.tensors.append((role, t))
        return t


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int,
                   fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int,
               dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _init_weights(rng: np.random.Generator, shape: tuple, fan_in: int,
                  fan_out: int, activation: str | None,
                  dtype=np.float32) -> np.ndarray:
    # relu halves activation variance layer over layer; He's sqrt(2) gain
    # compensates, which matters through the five-conv coordinate trunk.
    # Linear outputs (heads) keep the variance-neutral Glorot bound.
    if activation == "relu":
        return he_uniform(rng, shape, fan_in, dtype)
    return glorot_uniform(rng, shape, fan_in, fan_out, dtype)


def _conv_fans(k: int, c: int, kh: int, kw: int) -> tuple[int, int]:
    return c * kh * kw, k * kh * kw


def same_tap_fraction(h: int, w: int, kh: int, kw: int,
                      sh: int, sw: int) -> float:
    """Mean fraction of kernel taps that land on real input pixels under
    same padding, averaged over output positions. Separable in h and w."""
    oh, ow, pt, _, pl, _ = conv_output_geometry(h, w, kh, kw, sh, sw, "same")
    if oh <= 0 or ow <= 0:
        # no output positions to average over; the caller's geometry checks
        # will reject the layer, so any neutral value works here
        return 1.0
    y0 = np.arange(oh) * sh - pt
    x0 = np.arange(ow) * sw - pl
    vy = np.clip(np.minimum(y0 + kh, h) - np.maximum(y0, 0), 0, kh)
    vx = np.clip(np.minimum(x0 + kw, w) - np.maximum(x0, 0), 0, kw)
    return float(vy.sum() * vx.sum()) / float(oh * kh * ow * kw)


class Conv2D:
    """Convolution with optional ReLU; weights [K,C,kh,kw], bias [K].

    When ``input_hw`` is given for a same-padded layer, the init bound is
    rescaled by the mean fraction of kernel taps that actually overlap the
    input. Once a feature map shrinks to near the kernel size most taps sit
    on zero padding, the nominal fan-in wildly overestimates input variance,
    and activations die a few layers in unless the bound compensates.
    """

    def __init__(self, name: str, in_channels: int, spec: ConvSpec,
                 rng: np.random.Generator, activation: str | None = "relu",
                 input_hw: tuple | None = None, dtype=np.float32):
        self.spec = spec
        self.activation = activation
        self.params = LayerParams(name)
        k, kh, kw = spec.out_channels, spec.kernel_h, spec.kernel_w
        fi, fo = _conv_fans(k, in_channels, kh, kw)
        w_arr = _init_weights(rng, (k, in_channels, kh, kw), fi, fo,
                              activation, dtype)
        if input_hw is not None and spec.padding == "same":
            frac = same_tap_fraction(input_hw[0], input_hw[1], kh, kw,
                                     spec.stride_h, spec.stride_w)
            w_arr *= np.sqrt(1.0 / frac)
        self.weight = self.params.register(
            "weight", Tensor(w_arr, requires_grad=True))
        self.bias = self.params.register(
            "bias", Tensor(np.zeros(k, dtype=dtype), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        y = tt.conv2d(x, self.weight, self.bias, self.spec)
        return tt.relu(y) if self.activation == "relu" else y

    def output_geometry(self, h: int, w: int) -> tuple[int, int]:
        oh, ow, *_ = conv_output_geometry(h, w, self.spec.kernel_h, self.spec.kernel_w,
                                          self.spec.stride_h, self.spec.stride_w,
                                          self.spec.padding)
        return oh, ow


class Dense:
    """Affine layer with optional ReLU; weights [N,M], bias [M]."""

    def __init__(self, name: str, in_features: int, out_features: int,
                 rng: np.random.Generator, activation: str | None = "relu",
                 dtype=np.float32):
        self.activation = activation
        self.params = LayerParams(name)
        self.weight = self.params.register(
            "weight", Tensor(_init_weights(rng, (in_features, out_features),
                                           in_features, out_features,
                                           activation, dtype),
                             requires_grad=True))
        self.bias = self.params.register(
            "bias", Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        y = tt.dense(x, self.weight, self.bias)
        return tt.relu(y) if self.activation == "relu" else y


class MaxPool2D:
    """Parameter-free pooling wrapper; discards the argmax map."""

    def __init__(self, pool_h: int, pool_w: int, stride_h: int, stride_w: int,
                 padding: str = "valid"):
        self.pool_h, self.pool_w = pool_h, pool_w
        self.stride_h, self.stride_w = stride_h, stride_w
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        out, _ = tt.maxpool2d(x, self.pool_h, self.pool_w,
                              self.stride_h, self.stride_w, self.padding)
        return out

    def output_geometry(self, h: int, w: int) -> tuple[int, int]:
        oh, ow, *_ = conv_output_geometry(h, w, self.pool_h, self.pool_w,
                                          self.stride_h, self.stride_w, self.padding)
        return oh, ow


def td_apply(layer, x: Tensor) -> Tensor:
    """Apply ``layer`` to each time slice of a [B,T,...] tensor.

    Parameters are shared across steps and each step is processed
    independently, so time is folded into the batch axis for one pass
    instead of looping (identical math, one GEMM instead of T).
    """
    if x.data.ndim < 3:
        raise DimensionError(f"td_apply expects [B,T,...] input, got shape {x.shape}")
    b, t = x.shape[0], x.shape[1]
    if t < 1:
        raise DimensionError("td_apply needs at least one time step")
    y = layer(tt.reshape(x, (b * t,) + x.shape[2:]))
    return tt.reshape(y, (b, t) + y.shape[1:])


@dataclass
class ConvLSTMState:
    """Recurrent state: hidden and cell maps, both [B,K,h,w]."""

    hidden: Tensor
    cell: Tensor

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise DimensionError(
                f"hidden/cell shape mismatch: {self.hidden.shape} vs {self.cell.shape}")


class ConvLSTMCell:
    """Convolutional LSTM without peepholes.

    The input-to-state convolution carries the layer's stride and emits 4K
    channels (gate order i, f, g, o); the state-to-state convolution is
    stride-1 same-padded so hidden extents stay fixed across steps. The
    forget-gate slice of the bias starts at +1.
    """

    def __init__(self, name: str, in_channels: int, hidden_channels: int,
                 kernel_h: int, kernel_w: int, stride_h: int, stride_w: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.input_spec = ConvSpec(4 * hidden_channels, kernel_h, kernel_w,
                                   stride_h, stride_w, "same")
        self.state_spec = ConvSpec(4 * hidden_channels, kernel_h, kernel_w, 1, 1, "same")
        self.params = LayerParams(name)
        k4 = 4 * hidden_channels
        fi, fo = _conv_fans(k4, in_channels, kernel_h, kernel_w)
        self.input_kernel = self.params.register(
            "input_kernel",
            Tensor(glorot_uniform(rng, (k4, in_channels, kernel_h, kernel_w), fi, fo, dtype),
                   requires_grad=True))
        fi, fo = _conv_fans(k4, hidden_channels, kernel_h, kernel_w)
        self.state_kernel = self.params.register(
            "state_kernel",
            Tensor(glorot_uniform(rng, (k4, hidden_channels, kernel_h, kernel_w), fi, fo, dtype),
                   requires_grad=True))
        bias = np.zeros(k4, dtype=dtype)
        bias[hidden_channels:2 * hidden_channels] = 1.0
        self.bias = self.params.register("bias", Tensor(bias, requires_grad=True))
        self._zero_bias = Tensor(np.zeros(k4, dtype=dtype))
        self._dtype = dtype

    def hidden_geometry(self, in_h: int, in_w: int) -> tuple[int, int]:
        oh, ow, *_ = conv_output_geometry(
            in_h, in_w, self.input_spec.kernel_h, self.input_spec.kernel_w,
            self.input_spec.stride_h, self.input_spec.stride_w, "same")
        return oh, ow

    def init_state(self, batch: int, in_h: int, in_w: int) -> ConvLSTMState:
        oh, ow = self.hidden_geometry(in_h, in_w)
        shape = (batch, self.hidden_channels, oh, ow)
        return ConvLSTMState(hidden=Tensor(np.zeros(shape, dtype=self._dtype)),
                             cell=Tensor(np.zeros(shape, dtype=self._dtype)))

    def step(self, x: Tensor, state: ConvLSTMState) -> tuple[Tensor, ConvLSTMState]:
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"convlstm input shape {x.shape} does not match "
                f"{self.in_channels} input channels")
        oh, ow = self.hidden_geometry(x.shape[2], x.shape[3])
        expect = (x.shape[0], self.hidden_channels, oh, ow)
        if state.hidden.shape != expect:
            raise DimensionError(
                f"convlstm state shape {state.hidden.shape} does not match "
                f"input-derived geometry {expect}")
        z = tt.add(tt.conv2d(x, self.input_kernel, self.bias, self.input_spec),
                   tt.conv2d(state.hidden, self.state_kernel, self._zero_bias,
                             self.state_spec))
        k = self.hidden_channels
        i = tt.sigmoid(tt.slice_axis(z, 1, 0, k))
        f = tt.sigmoid(tt.slice_axis(z, 1, k, 2 * k))
        g = tt.tanh(tt.slice_axis(z, 1, 2 * k, 3 * k))
        o = tt.sigmoid(tt.slice_axis(z, 1, 3 * k, 4 * k))
        new_cell = tt.add(tt.mul(f, state.cell), tt.mul(i, g))
        new_hidden = tt.mul(o, tt.tanh(new_cell))
        return new_hidden, ConvLSTMState(hidden=new_hidden, cell=new_cell)


def convlstm_step(x: Tensor, state: ConvLSTMState,
                  cell: ConvLSTMCell) -> tuple[Tensor, ConvLSTMState]:
    return cell.step(x, state)


def run_sequence(cell: ConvLSTMCell, inputs: Tensor) -> Tensor:
    """Thread a ConvLSTM over [B,T,C,H,W], zero-initialized; stack hiddens."""
    if inputs.data.ndim != 5:
        raise DimensionError(f"run_sequence expects [B,T,C,H,W], got {inputs.shape}")
    b, t = inputs.shape[0], inputs.shape[1]
    if t < 1:
        raise DimensionError("run_sequence needs at least one time step")
    state = cell.init_state(b, inputs.shape[3], inputs.shape[4])
    outs = []
    for ti in range(t):
        frame = tt.reshape(tt.slice_axis(inputs, 1, ti, ti + 1), (b,) + inputs.shape[2:])
        try:
            h, state = cell.step(frame, state)
        except GridsightError as e:
            raise type(e)(f"{e} (time step {ti})") from e
        outs.append(tt.reshape(h, (b, 1) + h.shape[1:]))
    return tt.concat(outs, 1)
