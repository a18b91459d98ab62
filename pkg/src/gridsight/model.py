"""The full recognition graph: coordinate, relative-distance, orientation,
and action branches over one full frame plus three buffered crops.

Wiring summary (all convs ReLU + same padding, all heads linear):

  full frame [B,4,H,W]
    conv1(32,3x9,s3) pool1(4x4,s3) conv2 conv3 pool2(2x2,s3) conv4 conv5
    pool3(2x2,s2) -> flatten -> fc1(256) fc2(256)            = trunk T
  T -> dx/dy/dz heads (relative-distance logits)
  concat(T, delta logits) -> mix fc(256)                     = C
  C -> x/y/z heads
  crops [B,3,4,h_c,w_c]
    TD conv1(32,3x3,s2) TD conv2 TD pool(4x4,s3) TD conv3    = S  [B,3,32,h,w]
  concat(flatten S over all steps, T) -> fc(256)             = O
  O -> theta head
  S -> ConvLSTM1(32,3x3,s2) -> ConvLSTM2(32,3x3,s2), last hidden flattened
  concat(lstm, C, O) -> fc(256) -> action head

The ``no_relative`` ablation removes the delta heads and their concatenation
(a genuinely smaller graph); the other ablations transform the input data
and reuse this graph unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .errors import DimensionError, GeometryError, LabelError
from .layers import Conv2D, ConvLSTMCell, Dense, LayerParams, MaxPool2D, run_sequence, td_apply
from .tensor import ConvSpec, Tensor

TIME_STEPS = 3
HEAD_ORDER = ("x", "y", "z", "theta", "action", "dx", "dy", "dz")
FEATURE_WIDTH = 256


@dataclass
class LabelSpace:
    """Class counts for every head; has_z=False collapses z and dz to width 1."""

    n_x: int
    n_y: int
    n_theta: int
    n_action: int
    n_z: int = 1
    n_dx: int = 16
    n_dy: int = 16
    n_dz: int = 1
    has_z: bool = False

    def __post_init__(self):
        if not self.has_z:
            self.n_z = 1
            self.n_dz = 1
        for name in ("n_x", "n_y", "n_z", "n_theta", "n_action", "n_dx", "n_dy", "n_dz"):
            if getattr(self, name) < 1:
                raise LabelError(f"{name} must be >= 1, got {getattr(self, name)}")

    def head_width(self, head: str) -> int:
        return {"x": self.n_x, "y": self.n_y, "z": self.n_z, "theta": self.n_theta,
                "action": self.n_action, "dx": self.n_dx, "dy": self.n_dy,
                "dz": self.n_dz}[head]

    def widths(self) -> tuple:
        return tuple(self.head_width(h) for h in HEAD_ORDER)


@dataclass
class InputGeometry:
    """Spatial extents of the full frame and of the resized crops."""

    frame_h: int = 120
    frame_w: int = 160
    crop_h: int = 100
    crop_w: int = 150

    def __post_init__(self):
        for name in ("frame_h", "frame_w", "crop_h", "crop_w"):
            if getattr(self, name) < 1:
                raise GeometryError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass(frozen=True)
class AblationConfig:
    """Which pathway to sever; at most one is set in the reported experiments."""

    no_relative: bool = False
    no_temporal: bool = False
    no_depth: bool = False
    no_crop: bool = False

    def tag(self) -> str:
        on = [n for n in ("no_relative", "no_temporal", "no_depth", "no_crop")
              if getattr(self, n)]
        return "+".join(on) if on else "full"


@dataclass
class StateActionLabel:
    """Ground-truth or predicted class indices for one sample."""

    x: int
    y: int
    z: int
    theta: int
    action: int
    dx: int
    dy: int
    dz: int

    def validate(self, space: LabelSpace) -> None:
        for head in HEAD_ORDER:
            v = getattr(self, head)
            if not (0 <= v < space.head_width(head)):
                raise LabelError(
                    f"label {head}={v} outside [0, {space.head_width(head)})")

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, h) for h in HEAD_ORDER], dtype=np.int64)

    @classmethod
    def from_array(cls, arr) -> "StateActionLabel":
        vals = [int(v) for v in np.asarray(arr).reshape(-1)]
        if len(vals) != len(HEAD_ORDER):
            raise DimensionError(f"label array needs {len(HEAD_ORDER)} entries, got {len(vals)}")
        return cls(*vals)


@dataclass
class NetOutput:
    """Per-head probability vectors, each [B, n_head] and row-normalized."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    theta: np.ndarray
    action: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    dz: np.ndarray

    def __post_init__(self):
        for head in HEAD_ORDER:
            p = getattr(self, head)
            if p.ndim != 2:
                raise DimensionError(f"head {head}: expected [B,N] probabilities, got {p.shape}")
            if not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
                raise DimensionError(f"head {head}: rows do not sum to 1")

    def head(self, name: str) -> np.ndarray:
        return getattr(self, name)

    @property
    def batch(self) -> int:
        return self.x.shape[0]


@dataclass
class NetInput:
    """One forward pass worth of observations.

    full_frame: [B,4,H,W] RGB-D at t; crops: [B,3,4,crop_h,crop_w] RGB-D
    buffered crops at t-2, t-1, t. Channels ordered R,G,B,depth; everything
    normalized to [0,1] (depth divided by the sensing range).
    """

    full_frame: Tensor
    crops: Tensor

    def __post_init__(self):
        ff, cr = self.full_frame, self.crops
        if ff.data.ndim != 4 or ff.shape[1] != 4:
            raise DimensionError(f"full_frame must be [B,4,H,W], got {ff.shape}")
        if cr.data.ndim != 5 or cr.shape[1] != TIME_STEPS or cr.shape[2] != 4:
            raise DimensionError(
                f"crops must be [B,{TIME_STEPS},4,h,w], got {cr.shape}")
        if ff.shape[0] != cr.shape[0]:
            raise DimensionError(
                f"batch mismatch: full_frame {ff.shape[0]} vs crops {cr.shape[0]}")
        for name, t in (("full_frame", ff), ("crops", cr)):
            lo, hi = float(t.data.min()), float(t.data.max())
            if lo < -1e-5 or hi > 1.0 + 1e-5:
                raise DimensionError(
                    f"{name} values outside [0,1]: range [{lo:.4f}, {hi:.4f}] "
                    "(inputs must be normalized)")


class ModelParams:
    """Every parameter tensor in the model, keyed 'layer.role', ordered."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._layer_names: set[str] = set()
        self._ids: set[int] = set()

    def adopt(self, lp: LayerParams) -> None:
        if lp.name in self._layer_names:
            raise ValueError(f"duplicate layer name {lp.name!r}")
        self._layer_names.add(lp.name)
        for role, t in lp.tensors:
            if id(t) in self._ids:
                raise ValueError(f"tensor {lp.name}.{role} registered twice")
            self._ids.add(id(t))
            self._entries[f"{lp.name}.{role}"] = t

    def named_tensors(self) -> list:
        return list(self._entries.items())

    def get(self, name: str) -> Tensor:
        return self._entries[name]

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self._entries.values())


def _trace(name: str, layer, h: int, w: int) -> tuple[int, int]:
    try:
        oh, ow = layer.output_geometry(h, w)
    except GeometryError as e:
        raise GeometryError(f"cannot place layer {name}: {e}") from e
    if oh < 1 or ow < 1:
        raise GeometryError(
            f"cannot place layer {name}: output extent {oh}x{ow} from input {h}x{w}")
    return oh, ow


class Model:
    """Built network: parameters, layers, and the wiring in the module docstring."""

    def __init__(self, space: LabelSpace, geometry: InputGeometry,
                 ablation: AblationConfig, seed: int = 0, dtype=np.float32):
        self.space = space
        self.geometry = geometry
        self.ablation = ablation
        self.seed = seed
        self.dtype = dtype
        self.params = ModelParams()
        self.geometry_trace: dict[str, tuple] = {}
        rng = np.random.default_rng(seed)
        self._build(rng)

    # -- construction -----------------------------------------------------

    def _add(self, layer):
        self.params.adopt(layer.params)
        return layer

    def _build(self, rng: np.random.Generator) -> None:
        g, dt = self.geometry, self.dtype
        conv = lambda: ConvSpec(32, 3, 9, 3, 3, "same")

        self.coord_convs = []
        h, w = g.frame_h, g.frame_w
        self.coord_pools = {1: MaxPool2D(4, 4, 3, 3, "same"),
                            3: MaxPool2D(2, 2, 3, 3, "same"),
                            5: MaxPool2D(2, 2, 2, 2, "same")}
        in_ch = 4
        for i in range(1, 6):
            layer = self._add(Conv2D(f"coord_conv{i}", in_ch, conv(), rng,
                                     input_hw=(h, w), dtype=dt))
            h, w = _trace(f"coord_conv{i}", layer, h, w)
            self.geometry_trace[f"coord_conv{i}"] = (32, h, w)
            in_ch = 32
            self.coord_convs.append(layer)
            if i in self.coord_pools:
                pool = self.coord_pools[i]
                h, w = _trace(f"coord_pool_after{i}", pool, h, w)
                self.geometry_trace[f"coord_pool_after{i}"] = (32, h, w)
        self.trunk_flat = 32 * h * w
        self.coord_fc1 = self._add(Dense("coord_fc1", self.trunk_flat, FEATURE_WIDTH, rng, dtype=dt))
        self.coord_fc2 = self._add(Dense("coord_fc2", FEATURE_WIDTH, FEATURE_WIDTH, rng, dtype=dt))

        sp = self.space
        if not self.ablation.no_relative:
            self.delta_heads = {
                h2: self._add(Dense(f"delta_{h2}_head", FEATURE_WIDTH, sp.head_width(h2),
                                    rng, activation=None, dtype=dt))
                for h2 in ("dx", "dy", "dz")}
            mix_in = FEATURE_WIDTH + sp.n_dx + sp.n_dy + sp.n_dz
        else:
            self.delta_heads = {}
            mix_in = FEATURE_WIDTH
        self.coord_mix = self._add(Dense("coord_mix", mix_in, FEATURE_WIDTH, rng, dtype=dt))
        self.state_heads = {
            h2: self._add(Dense(f"{h2}_head", FEATURE_WIDTH, sp.head_width(h2),
                                rng, activation=None, dtype=dt))
            for h2 in ("x", "y", "z")}

        td_spec = lambda: ConvSpec(32, 3, 3, 2, 2, "same")
        ch, cw = g.crop_h, g.crop_w
        self.td_conv1 = self._add(Conv2D("td_conv1", 4, td_spec(), rng,
                                         input_hw=(ch, cw), dtype=dt))
        ch, cw = _trace("td_conv1", self.td_conv1, ch, cw)
        self.geometry_trace["td_conv1"] = (32, ch, cw)
        self.td_conv2 = self._add(Conv2D("td_conv2", 32, td_spec(), rng,
                                         input_hw=(ch, cw), dtype=dt))
        ch, cw = _trace("td_conv2", self.td_conv2, ch, cw)
        self.geometry_trace["td_conv2"] = (32, ch, cw)
        self.td_pool = MaxPool2D(4, 4, 3, 3, "same")
        ch, cw = _trace("td_pool", self.td_pool, ch, cw)
        self.geometry_trace["td_pool"] = (32, ch, cw)
        self.td_conv3 = self._add(Conv2D("td_conv3", 32, td_spec(), rng,
                                         input_hw=(ch, cw), dtype=dt))
        ch, cw = _trace("td_conv3", self.td_conv3, ch, cw)
        self.geometry_trace["td_conv3"] = (32, ch, cw)
        self.td_flat = TIME_STEPS * 32 * ch * cw

        self.orient_fc = self._add(Dense("orient_fc", self.td_flat + FEATURE_WIDTH,
                                         FEATURE_WIDTH, rng, dtype=dt))
        self.theta_head = self._add(Dense("theta_head", FEATURE_WIDTH, sp.n_theta,
                                          rng, activation=None, dtype=dt))

        self.lstm1 = self._add(ConvLSTMCell("lstm1", 32, 32, 3, 3, 2, 2, rng, dtype=dt))
        lh, lw = self.lstm1.hidden_geometry(ch, cw)
        self.geometry_trace["lstm1"] = (32, lh, lw)
        self.lstm2 = self._add(ConvLSTMCell("lstm2", 32, 32, 3, 3, 2, 2, rng, dtype=dt))
        lh, lw = self.lstm2.hidden_geometry(lh, lw)
        self.geometry_trace["lstm2"] = (32, lh, lw)
        self.lstm_flat = 32 * lh * lw

        self.action_fc = self._add(Dense("action_fc",
                                         self.lstm_flat + 2 * FEATURE_WIDTH,
                                         FEATURE_WIDTH, rng, dtype=dt))
        self.action_head = self._add(Dense("action_head", FEATURE_WIDTH, sp.n_action,
                                           rng, activation=None, dtype=dt))

    # -- forward ----------------------------------------------------------

    def head_names(self) -> tuple:
        """Heads that exist in this graph, in canonical order."""
        if self.ablation.no_relative:
            return tuple(h for h in HEAD_ORDER if h not in ("dx", "dy", "dz"))
        return HEAD_ORDER

    def _check_input(self, inp: NetInput) -> None:
        g = self.geometry
        if inp.full_frame.shape[2:] != (g.frame_h, g.frame_w):
            raise DimensionError(
                f"full_frame extents {inp.full_frame.shape[2:]} do not match "
                f"model geometry ({g.frame_h}, {g.frame_w})")
        if inp.crops.shape[3:] != (g.crop_h, g.crop_w):
            raise DimensionError(
                f"crop extents {inp.crops.shape[3:]} do not match "
                f"model geometry ({g.crop_h}, {g.crop_w})")

    def forward_logits(self, inp: NetInput) -> dict:
        """Tape-recorded forward pass; returns head name -> logits Tensor."""
        self._check_input(inp)
        b = inp.full_frame.shape[0]

        h = inp.full_frame
        for i, layer in enumerate(self.coord_convs, start=1):
            h = layer(h)
            if i in self.coord_pools:
                h = self.coord_pools[i](h)
        t_feat = self.coord_fc2(self.coord_fc1(tt.flatten_batch(h)))

        logits: dict = {}
        if self.delta_heads:
            for name in ("dx", "dy", "dz"):
                logits[name] = self.delta_heads[name](t_feat)
            c_in = tt.concat([t_feat, logits["dx"], logits["dy"], logits["dz"]], 1)
        else:
            c_in = t_feat
        c_feat = self.coord_mix(c_in)
        for name in ("x", "y", "z"):
            logits[name] = self.state_heads[name](c_feat)

        s = td_apply(self.td_conv1, inp.crops)
        s = td_apply(self.td_conv2, s)
        s = td_apply(self.td_pool, s)
        s = td_apply(self.td_conv3, s)

        o_in = tt.concat([tt.reshape(s, (b, self.td_flat)), t_feat], 1)
        o_feat = self.orient_fc(o_in)
        logits["theta"] = self.theta_head(o_feat)

        h1 = run_sequence(self.lstm1, s)
        h2 = run_sequence(self.lstm2, h1)
        last = tt.reshape(tt.slice_axis(h2, 1, TIME_STEPS - 1, TIME_STEPS),
                          (b, self.lstm_flat))
        a_feat = self.action_fc(tt.concat([last, c_feat, o_feat], 1))
        logits["action"] = self.action_head(a_feat)
        return logits


def build_model(space: LabelSpace, geometry: InputGeometry,
                ablation: AblationConfig | None = None, seed: int = 0,
                dtype=np.float32) -> Model:
    return Model(space, geometry, ablation or AblationConfig(), seed=seed, dtype=dtype)


def forward(model: Model, inp: NetInput) -> NetOutput:
    """Inference pass producing normalized probabilities for all 8 heads.

    On a ``no_relative`` graph the delta heads do not exist; their fields are
    filled with uniform distributions (argmax 0, zero information).
    """
    with tt.no_grad():
        logits = model.forward_logits(inp)
    b = inp.full_frame.shape[0]
    probs = {}
    for head in HEAD_ORDER:
        if head in logits:
            probs[head] = tt.softmax(logits[head]).data
        else:
            n = model.space.head_width(head)
            probs[head] = np.full((b, n), 1.0 / n, dtype=model.dtype)
    return NetOutput(**probs)


def loss(output: NetOutput, label, weights: dict | None = None) -> float:
    """Weighted sum of per-head cross-entropies on probability vectors.

    ``label`` is a StateActionLabel (batch of one) or an integer array of
    shape [B, 8] in canonical head order. Width-1 heads (z and dz when the
    space has no Z axis) contribute exactly zero and are skipped.
    """
    if isinstance(label, StateActionLabel):
        arr = label.to_array().reshape(1, -1)
    else:
        arr = np.asarray(label, dtype=np.int64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
    if arr.shape != (output.batch, len(HEAD_ORDER)):
        raise DimensionError(
            f"labels shape {arr.shape}, expected ({output.batch}, {len(HEAD_ORDER)})")
    w = weights or {}
    total = 0.0
    for col, head in enumerate(HEAD_ORDER):
        p = output.head(head)
        if p.shape[1] == 1:
            if np.any(arr[:, col] != 0):
                raise LabelError(f"label {head} nonzero for width-1 head")
            continue
        ce = tt.cross_entropy(tt.Tensor(p), arr[:, col])
        total += float(w.get(head, 1.0)) * float(ce.data)
    return total


def loss_from_logits(model: Model, logits: dict, labels: np.ndarray,
                     weights: dict | None = None) -> Tensor:
    """Training loss on the tape: fused softmax+cross-entropy per live head."""
    w = weights or {}
    labels = np.asarray(labels, dtype=np.int64)
    total = None
    for col, head in enumerate(HEAD_ORDER):
        if head not in logits or model.space.head_width(head) == 1:
            continue
        term = tt.softmax_cross_entropy(logits[head], labels[:, col])
        wh = float(w.get(head, 1.0))
        if wh != 1.0:
            term = tt.scale(term, wh)
        total = term if total is None else tt.add(total, term)
    if total is None:
        raise LabelError("no live heads to compute a loss over")
    return total


def argmax_classes(output: NetOutput) -> np.ndarray:
    """[B,8] argmax per head, lowest index winning ties."""
    cols = [np.argmax(output.head(h), axis=1) for h in HEAD_ORDER]
    return np.stack(cols, axis=1).astype(np.int64)


def predict(model: Model, inp: NetInput) -> list:
    """Per-sample hard predictions as StateActionLabel records."""
    classes = argmax_classes(forward(model, inp))
    return [StateActionLabel.from_array(row) for row in classes]
