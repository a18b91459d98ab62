"""Frame preprocessing: detection seam, buffered cropping, resize and
normalization, and multi-expert masking.

Everything here is a pure function of its inputs. Boxes use inclusive pixel
corners. The buffered crop follows width' = round(r * width + c_min) with
round-half-up, centered on the original box and clamped to the frame by
shifting (extent is preserved whenever it fits).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DimensionError, GeometryError, LabelError, StateError
from .tensor import Tensor


def round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive pixel corners (x1, y1) top-left, (x2, y2) bottom-right."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise GeometryError(
                f"degenerate box ({self.x1},{self.y1})..({self.x2},{self.y2})")

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0


@dataclass(frozen=True)
class CropConfig:
    """Buffered-crop parameters; defaults follow the r=1.1, 10 px buffer."""

    r: float = 1.1
    c_min: int = 10
    out_w: int = 150
    out_h: int = 100

    def __post_init__(self):
        if self.r < 1.0:
            raise ConfigError(f"crop factor r must be >= 1, got {self.r}")
        if self.c_min < 0:
            raise ConfigError(f"c_min must be >= 0, got {self.c_min}")


@dataclass
class RawFrame:
    """One RGB-D observation; depth in meters, NaN marking invalid returns.

    oracle_boxes carries simulator ground truth for the oracle detector and
    is absent on frames that did not come from the simulator.
    """

    rgb: np.ndarray
    depth: np.ndarray
    timestamp: int = 0
    oracle_boxes: tuple | None = None

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.uint8)
        self.depth = np.asarray(self.depth, dtype=np.float32)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise DimensionError(f"rgb must be HxWx3, got {self.rgb.shape}")
        if self.depth.shape != self.rgb.shape[:2]:
            raise DimensionError(
                f"depth extent {self.depth.shape} does not match rgb {self.rgb.shape[:2]}")
        with np.errstate(invalid="ignore"):
            if np.any(self.depth < 0):
                raise DimensionError("negative depth values (use NaN for invalid)")

    @property
    def extent(self) -> tuple[int, int]:
        return self.rgb.shape[0], self.rgb.shape[1]


def _clamp_span(lo: int, hi: int, limit: int) -> tuple[int, int]:
    """Shift [lo, hi] into [0, limit]; shrink only if it cannot fit."""
    if hi - lo > limit:
        return 0, limit
    if lo < 0:
        hi -= lo
        lo = 0
    if hi > limit:
        lo -= hi - limit
        hi = limit
    return lo, hi


def buffered_crop(box: BoundingBox, cfg: CropConfig,
                  frame_extent: tuple[int, int]) -> BoundingBox:
    """Grow a detection box by the crop factor and recenter within the frame.

    frame_extent is (height, width). Clamping is total: the result always
    lies within the frame, preserving the requested extent when it fits.
    """
    fh, fw = frame_extent
    new_w = round_half_up(cfg.r * box.width + cfg.c_min)
    new_h = round_half_up(cfg.r * box.height + cfg.c_min)
    cx, cy = box.center()
    x1 = round_half_up(cx - new_w / 2.0)
    y1 = round_half_up(cy - new_h / 2.0)
    x1, x2 = _clamp_span(x1, x1 + new_w, fw - 1)
    y1, y2 = _clamp_span(y1, y1 + new_h, fh - 1)
    return BoundingBox(x1, y1, x2, y2)


@functools.lru_cache(maxsize=256)
def _axis_weights(n_in: int, n_out: int) -> np.ndarray:
    """[n_out, n_in] linear interpolation matrix with half-pixel centers.

    Edge samples clamp: where both taps land on the same input row the two
    weights add to 1, matching a clamped gather exactly.
    """
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0f = np.floor(pos)
    t = (pos - i0f).astype(np.float32)
    i0 = np.clip(i0f.astype(np.int64), 0, n_in - 1)
    i1 = np.clip(i0f.astype(np.int64) + 1, 0, n_in - 1)
    m = np.zeros((n_out, n_in), dtype=np.float32)
    rows = np.arange(n_out)
    m[rows, i0] = 1.0 - t
    m[rows, i1] += t
    m.setflags(write=False)
    return m


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize as two small matmuls; crops are tiny next
    to the output, so gather-based interpolation wastes most of its time."""
    h, w = img.shape[:2]
    wy = _axis_weights(h, out_h)
    wx = _axis_weights(w, out_w)
    flat = img.reshape(h, -1).astype(np.float32)
    mid = (wy @ flat).reshape(out_h, w, -1)
    out = np.matmul(mid.transpose(0, 2, 1), wx.T).transpose(0, 2, 1)
    if img.ndim == 2:
        return np.ascontiguousarray(out[:, :, 0])
    return np.ascontiguousarray(out)


def _resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    yi = np.clip(np.floor((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), 0, h - 1)
    xi = np.clip(np.floor((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), 0, w - 1)
    return img[np.ix_(yi, xi)]


def normalize_depth(depth: np.ndarray, depth_range: float) -> np.ndarray:
    d = np.nan_to_num(depth, nan=0.0)
    return np.clip(d / depth_range, 0.0, 1.0).astype(np.float32)


def frame_to_channels(frame: RawFrame, depth_range: float) -> np.ndarray:
    """[4,H,W] float32 in [0,1]: RGB scaled by 255, depth by the range."""
    rgb = frame.rgb.astype(np.float32).transpose(2, 0, 1) / 255.0
    d = normalize_depth(frame.depth, depth_range)
    return np.concatenate([rgb, d[None]], axis=0)


def resize_channels(frame: RawFrame, out_h: int, out_w: int,
                    depth_range: float) -> np.ndarray:
    """[4,out_h,out_w]: bilinear RGB, nearest depth, then normalization."""
    rgb = _resize_bilinear(frame.rgb, out_h, out_w).transpose(2, 0, 1) / 255.0
    d = normalize_depth(_resize_nearest(frame.depth, out_h, out_w), depth_range)
    return np.concatenate([rgb.astype(np.float32), d[None]], axis=0)


def crop_and_resize(frames: tuple, box_at_t: BoundingBox, cfg: CropConfig,
                    depth_range: float) -> Tensor:
    """Crop three frames with the frame-t buffered box; resize and normalize.

    frames are (t-2, t-1, t); the same box is applied to all three. Returns
    a [3,4,out_h,out_w] tensor.
    """
    if len(frames) != 3:
        raise DimensionError(f"need exactly 3 frames, got {len(frames)}")
    extent = frames[0].extent
    for f in frames[1:]:
        if f.extent != extent:
            raise DimensionError(f"frame extent mismatch: {extent} vs {f.extent}")
    box = buffered_crop(box_at_t, cfg, extent)
    out = np.empty((3, 4, cfg.out_h, cfg.out_w), dtype=np.float32)
    for i, f in enumerate(frames):
        rgb = f.rgb[box.y1:box.y2 + 1, box.x1:box.x2 + 1]
        depth = f.depth[box.y1:box.y2 + 1, box.x1:box.x2 + 1]
        out[i, :3] = _resize_bilinear(rgb, cfg.out_h, cfg.out_w).transpose(2, 0, 1) / 255.0
        out[i, 3] = normalize_depth(_resize_nearest(depth, cfg.out_h, cfg.out_w),
                                    depth_range)
    return Tensor(out)


def detect(frame: RawFrame, mode: str = "oracle", color_keys: dict | None = None,
           tol: int = 60) -> list:
    """Expert detection stand-in.

    oracle mode replays simulator ground truth; blob mode finds the largest
    connected component of pixels within ``tol`` (per channel) of each
    expert's key color. Returns [(expert_id, BoundingBox)]; an empty list is
    a detection miss.
    """
    if mode == "oracle":
        if frame.oracle_boxes is None:
            raise StateError("frame carries no oracle boxes")
        return list(frame.oracle_boxes)
    if mode != "blob":
        raise ConfigError(f"unknown detector mode {mode!r}")
    if not color_keys:
        raise ConfigError("blob mode needs expert color keys")
    found = []
    rgb = frame.rgb.astype(np.int16)
    for expert_id, color in color_keys.items():
        key = np.asarray(color, dtype=np.int16)
        mask = np.all(np.abs(rgb - key) <= tol, axis=2)
        labels, n = ndimage.label(mask)
        if n == 0:
            continue
        sizes = np.bincount(labels.reshape(-1))
        best = int(sizes[1:].argmax()) + 1
        ys, xs = np.nonzero(labels == best)
        x1, x2 = int(xs.min()), int(xs.max())
        y1, y2 = int(ys.min()), int(ys.max())
        if x1 >= x2 or y1 >= y2:
            continue
        found.append((expert_id, BoundingBox(x1, y1, x2, y2)))
    return found


def mask_other_experts(frame: RawFrame, boxes: list, keep,
                       background: RawFrame) -> RawFrame:
    """Replace every expert region except ``keep``'s with the background.

    Where another expert's box overlaps the kept expert's, the kept pixels
    win. Pixels outside all boxes are bit-identical to the input. A keep
    expert with no box (out of view in this frame, a lost track) is not an
    error: the others are masked and nothing is restored.
    """
    if background.extent != frame.extent:
        raise DimensionError(
            f"background extent {background.extent} does not match frame {frame.extent}")
    keep_box = None
    for expert_id, box in boxes:
        if expert_id == keep:
            keep_box = box
    rgb = frame.rgb.copy()
    depth = frame.depth.copy()
    for expert_id, box in boxes:
        if expert_id == keep:
            continue
        sl = np.s_[box.y1:box.y2 + 1, box.x1:box.x2 + 1]
        rgb[sl] = background.rgb[sl]
        depth[sl] = background.depth[sl]
    if keep_box is not None:
        sl = np.s_[keep_box.y1:keep_box.y2 + 1, keep_box.x1:keep_box.x2 + 1]
        rgb[sl] = frame.rgb[sl]
        depth[sl] = frame.depth[sl]
    kept = None
    if frame.oracle_boxes is not None:
        kept = tuple((i, b) for i, b in frame.oracle_boxes if i == keep)
    return RawFrame(rgb=rgb, depth=depth, timestamp=frame.timestamp,
                    oracle_boxes=kept)


def assemble_sample(frames: tuple, boxes_per_frame: tuple, target,
                    cfg: CropConfig, depth_range: float, ablation=None,
                    background: RawFrame | None = None,
                    detector: str = "oracle",
                    color_keys: dict | None = None) -> tuple:
    """Build one (full_frame, crops) array pair for the network.

    frames: RawFrames at (t-2, t-1, t); boxes_per_frame: per-frame
    [(expert_id, box)] ground truth used for masking; the crop box comes
    from the configured detector run on the (masked) frame t. Returns
    ([4,H,W], [3,4,out_h,out_w]) float32 arrays, or None when the detector
    misses the target (callers count a miss against accuracy).

    Ablation transforms happen here: no_temporal repeats frame t,
    no_depth zeroes the depth channel, no_crop feeds resized full frames.
    """
    if ablation is not None and ablation.no_temporal:
        frames = (frames[2], frames[2], frames[2])
        boxes_per_frame = (boxes_per_frame[2],) * 3

    n_experts = len(boxes_per_frame[2])
    if n_experts > 1:
        if background is None:
            raise StateError("masking multiple experts requires a background frame")
        frames = tuple(mask_other_experts(f, list(bx), target, background)
                       for f, bx in zip(frames, boxes_per_frame))

    full = frame_to_channels(frames[2], depth_range)

    if ablation is not None and ablation.no_crop:
        crops = np.stack([resize_channels(f, cfg.out_h, cfg.out_w, depth_range)
                          for f in frames], axis=0)
    else:
        detections = detect(frames[2], mode=detector, color_keys=color_keys)
        box = next((b for i, b in detections if i == target), None)
        if box is None:
            return None
        crops = crop_and_resize(frames, box, cfg, depth_range).data

    if ablation is not None and ablation.no_depth:
        full[3] = 0.0
        crops[:, 3] = 0.0
    return full, crops
