"""Synthetic RGB-D corridor world for state-action recognition.

The world is a box-shaped room viewed by a fixed pinhole RGB-D camera looking
down the +x axis. Experts are colored billboards on a coarse grid of cells;
their facing is drawn as a notch stripe whose axis and offset code the
orientation bijectively: horizontal for north/south (shifted up for north,
down for south), vertical for east/west (shifted toward +y for east, -y for
west), a dot for up/down (shifted up/down likewise). A single frame therefore
suffices to read the orientation. Rendering is a tiny z-buffer rasterizer over
an analytic background (floor, two side walls, a far wall); depth is euclidean
ray distance like a real depth sensor, not the z coordinate.

Coordinates: x runs down the corridor (away from the camera), y runs left to
right across it, z is up. Grid cell (i, j) has its center at
((i + 0.5) * cell_m, (j + 0.5) * cell_m). Orientations are indexed
N=0 (+y), E=1 (+x), S=2 (-y), W=3 (-x), U=4 (+z), D=5 (-z); actions are
forward=0, stop=1, turn-left=2, turn-right=3, pitch-up=4, pitch-down=5.
The patrol template uses the first four of each.

Everything is deterministic: frames are pure functions of (config, poses,
perturbation, seed, vantage), and dataset sample i depends only on
(generation seed, i), so generation can be sharded by index.
"""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import io as gio
from .errors import ConfigError, GeometryError, LabelError, StateError
from .model import HEAD_ORDER, LabelSpace
from .preproc import BoundingBox, RawFrame

ORIENTATIONS = ("N", "E", "S", "W", "U", "D")
ACTIONS = ("forward", "stop", "turn-left", "turn-right", "pitch-up", "pitch-down")
FORWARD, STOP, TURN_LEFT, TURN_RIGHT, PITCH_UP, PITCH_DOWN = range(6)
N, E, S, W, U, D = range(6)

# turn tables are total over all six orientations; turns never produce U/D,
# and from U/D the two turns land on distinct headings so inverse_dynamics
# stays unambiguous
_RIGHT_OF = (E, S, W, N, N, N)
_LEFT_OF = (W, N, E, S, S, S)
_FORWARD_DELTA = {N: (0, 1, 0), E: (1, 0, 0), S: (0, -1, 0),
                  W: (-1, 0, 0), U: (0, 0, 1), D: (0, 0, -1)}

PERTURBATION_KINDS = ("none", "distractor-boxes", "dim-light",
                      "human-silhouette", "occlusion")


@dataclass(frozen=True)
class Perturbation:
    """A test-time scene corruption. magnitude means: occlusion = fraction of
    the expert's visible width covered (0..1 exclusive), dim-light = RGB scale
    factor (0..1], distractor-boxes = how many boxes, human-silhouette = how
    many figures."""

    kind: str = "none"
    magnitude: float = 0.0

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ConfigError(f"unknown perturbation kind {self.kind!r}")
        m = self.magnitude
        if not np.isfinite(m):
            raise ConfigError("perturbation magnitude must be finite")
        if self.kind == "occlusion" and not 0.0 < m < 1.0:
            raise ConfigError(f"occlusion fraction must be in (0, 1), got {m}")
        if self.kind == "dim-light" and not 0.0 < m <= 1.0:
            raise ConfigError(f"dim-light scale must be in (0, 1], got {m}")
        if self.kind in ("distractor-boxes", "human-silhouette") and m < 1.0:
            raise ConfigError(f"{self.kind} count must be >= 1, got {m}")


@dataclass(frozen=True)
class ExpertPose:
    """Grid pose plus the action that produced it (stop for initial poses)."""

    cell_x: int
    cell_y: int
    cell_z: int = 0
    theta: int = N
    action: int = STOP

    @property
    def cell(self) -> tuple:
        return (self.cell_x, self.cell_y, self.cell_z)


@dataclass(frozen=True)
class WorldConfig:
    # grid and templates
    template: str = "patrol"
    grid_nx: int = 10
    grid_ny: int = 3
    grid_nz: int = 1
    cell_m: float = 0.5
    level_m: float = 0.35
    # camera
    frame_h: int = 120
    frame_w: int = 160
    fx: float = 140.0
    fy: float = 160.0
    cam_x: float = -2.0
    cam_y: float = 0.75
    cam_z: float = 0.45
    # 0 = the fixed surveillance vantage; nonzero jitters cam_x/cam_y on a
    # +/-1 lattice per sample. cam_x jitter of half a cell makes exact-cell
    # X unidentifiable from depth alone (untextured floor, clipped far
    # wall), capping X accuracy near 0.7, so it is opt-in for experiments.
    vantage_jitter_m: float = 0.0
    depth_range_m: float = 10.0
    # room
    far_wall_x_m: float = 8.0
    wall_margin_m: float = 0.25
    floor_color: tuple = (95, 95, 100)
    wall_color: tuple = (150, 150, 155)
    far_wall_color: tuple = (170, 170, 175)
    # experts
    n_experts: int = 2
    expert_colors: tuple = ((200, 40, 40), (40, 185, 40))
    expert_size_m: float = 0.35
    notch_color: tuple = (250, 250, 70)
    notch_frac: float = 0.2
    # perturbation props
    occluder_color: tuple = (165, 130, 85)
    distractor_size_m: float = 0.3
    shirt_color: tuple = (215, 75, 60)
    trouser_color: tuple = (60, 60, 90)
    # patrol policy
    p_stop: float = 0.10
    p_turn: float = 0.12
    p_pitch: float = 0.10
    # relative-offset binning ranges (meters, [lo, hi))
    rel_x_range: tuple = (0.0, 8.0)
    rel_y_range: tuple = (-1.0, 1.0)
    rel_z_range: tuple = (-0.5, 0.5)

    def __post_init__(self):
        if self.template not in ("patrol", "manipulation"):
            raise ConfigError(f"unknown template {self.template!r}")
        if min(self.grid_nx, self.grid_ny, self.grid_nz) < 1:
            raise ConfigError("grid extents must be >= 1")
        if self.template == "patrol" and self.grid_nz != 1:
            raise ConfigError("patrol template is single-level (grid_nz must be 1)")
        for name in ("cell_m", "level_m", "fx", "fy", "depth_range_m",
                     "expert_size_m", "distractor_size_m"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.frame_h < 8 or self.frame_w < 8:
            raise ConfigError("frame extent must be at least 8x8")
        if self.vantage_jitter_m < 0:
            raise ConfigError("vantage_jitter_m must be >= 0")
        if not 1 <= self.n_experts <= len(self.expert_colors):
            raise ConfigError(
                f"n_experts {self.n_experts} needs a color per expert "
                f"({len(self.expert_colors)} given)")
        for name in ("p_stop", "p_turn", "p_pitch"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.p_stop + self.p_turn + self.p_pitch >= 1.0:
            raise ConfigError("policy probabilities must leave room for forward")
        for rname in ("rel_x_range", "rel_y_range", "rel_z_range"):
            lo, hi = getattr(self, rname)
            if not lo < hi:
                raise ConfigError(f"{rname} must be an increasing pair")
        if self.far_wall_x_m <= self.grid_nx * self.cell_m:
            raise ConfigError("far wall must sit beyond the last grid cell")
        j = self.vantage_jitter_m
        if not (self.wall_y_lo < self.cam_y - j
                and self.cam_y + j < self.wall_y_hi):
            raise ConfigError(
                "camera (with jitter) must sit strictly between the side "
                f"walls: cam_y {self.cam_y} +/- {j} vs "
                f"({self.wall_y_lo}, {self.wall_y_hi})")
        if self.cam_z <= 0.0:
            raise ConfigError("cam_z must be above the floor")

    # -- derived geometry -------------------------------------------------

    @property
    def wall_y_lo(self) -> float:
        return -self.wall_margin_m

    @property
    def wall_y_hi(self) -> float:
        return self.grid_ny * self.cell_m + self.wall_margin_m

    @property
    def n_theta(self) -> int:
        return 4 if self.template == "patrol" else 6

    @property
    def n_action(self) -> int:
        return 4 if self.template == "patrol" else 6

    def expert_center(self, pose: ExpertPose) -> tuple:
        return ((pose.cell_x + 0.5) * self.cell_m,
                (pose.cell_y + 0.5) * self.cell_m,
                pose.cell_z * self.level_m + self.expert_size_m / 2)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict, key_prefix: str = "world") -> "WorldConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown key {key_prefix}.{sorted(unknown)[0]}")
        kw = {}
        for k, v in d.items():
            if isinstance(v, list):
                v = tuple(tuple(e) if isinstance(e, list) else e for e in v)
            kw[k] = v
        return cls(**kw)


def label_space_for(cfg: WorldConfig) -> LabelSpace:
    if cfg.template == "patrol":
        return LabelSpace(n_x=cfg.grid_nx, n_y=cfg.grid_ny, n_theta=4,
                          n_action=4, n_dx=16, n_dy=16, has_z=False)
    return LabelSpace(n_x=cfg.grid_nx, n_y=cfg.grid_ny, n_z=cfg.grid_nz,
                      n_theta=6, n_action=6, n_dx=16, n_dy=16, n_dz=16,
                      has_z=True)


def check_space(cfg: WorldConfig, space: LabelSpace) -> None:
    """The label space a model trains against must match the world grid."""
    want = label_space_for(cfg)
    for head in HEAD_ORDER:
        if space.head_width(head) != want.head_width(head):
            raise ConfigError(
                f"label space {head} width {space.head_width(head)} does not "
                f"match the world grid (expected {want.head_width(head)})")
    if space.has_z != want.has_z:
        raise ConfigError(
            f"label space has_z={space.has_z} does not match template "
            f"{cfg.template!r}")


# ---------------------------------------------------------------------------
# dynamics


def _in_grid(cfg: WorldConfig, cell: tuple) -> bool:
    x, y, z = cell
    return 0 <= x < cfg.grid_nx and 0 <= y < cfg.grid_ny and 0 <= z < cfg.grid_nz


def step_dynamics(cfg: WorldConfig, pose: ExpertPose, action: int) -> ExpertPose:
    """Total transition function. The returned pose's action field records
    what actually happened: a forward into a wall degrades to stop, as does
    a pitch that is already at its target facing."""
    if not _in_grid(cfg, pose.cell):
        raise StateError(f"pose {pose.cell} outside the grid")
    if not 0 <= pose.theta < cfg.n_theta:
        raise StateError(f"orientation {pose.theta} invalid for {cfg.template}")
    if not 0 <= action < cfg.n_action:
        raise LabelError(f"action {action} invalid for {cfg.template}")
    if action == FORWARD:
        dx, dy, dz = _FORWARD_DELTA[pose.theta]
        cell = (pose.cell_x + dx, pose.cell_y + dy, pose.cell_z + dz)
        if _in_grid(cfg, cell):
            return replace(pose, cell_x=cell[0], cell_y=cell[1],
                           cell_z=cell[2], action=FORWARD)
        return replace(pose, action=STOP)
    if action == STOP:
        return replace(pose, action=STOP)
    if action == TURN_LEFT:
        return replace(pose, theta=_LEFT_OF[pose.theta], action=TURN_LEFT)
    if action == TURN_RIGHT:
        return replace(pose, theta=_RIGHT_OF[pose.theta], action=TURN_RIGHT)
    if action == PITCH_UP:
        if pose.theta == U:
            return replace(pose, action=STOP)
        return replace(pose, theta=U, action=PITCH_UP)
    if pose.theta == D:
        return replace(pose, action=STOP)
    return replace(pose, theta=D, action=PITCH_DOWN)


def inverse_dynamics(cfg: WorldConfig, prev: ExpertPose, cur: ExpertPose) -> int:
    """Recover the action that maps prev to cur in one step."""
    if prev.cell != cur.cell:
        delta = (cur.cell_x - prev.cell_x, cur.cell_y - prev.cell_y,
                 cur.cell_z - prev.cell_z)
        if cur.theta == prev.theta and delta == _FORWARD_DELTA[prev.theta]:
            return FORWARD
        raise LabelError(
            f"pose transition {prev.cell}->{cur.cell} (theta {prev.theta}->"
            f"{cur.theta}) is not a single action")
    if cur.theta == prev.theta:
        return STOP
    if cur.theta == _RIGHT_OF[prev.theta]:
        return TURN_RIGHT
    if cur.theta == _LEFT_OF[prev.theta]:
        return TURN_LEFT
    if cur.theta == U:
        return PITCH_UP
    if cur.theta == D:
        return PITCH_DOWN
    raise LabelError(
        f"orientation change {prev.theta}->{cur.theta} is not a single action")


def patrol_policy(cfg: WorldConfig, rng: np.random.Generator,
                  pose: ExpertPose) -> int:
    """Stochastic wanderer: mostly forward, occasional stops and turns, and
    a turn instead of walking into a wall."""
    r = rng.random()
    if r < cfg.p_stop:
        return STOP
    r -= cfg.p_stop
    if r < cfg.p_turn:
        return TURN_LEFT if rng.random() < 0.5 else TURN_RIGHT
    r -= cfg.p_turn
    if cfg.template == "manipulation" and r < cfg.p_pitch:
        return PITCH_UP if rng.random() < 0.5 else PITCH_DOWN
    dx, dy, dz = _FORWARD_DELTA[pose.theta]
    target = (pose.cell_x + dx, pose.cell_y + dy, pose.cell_z + dz)
    if _in_grid(cfg, target):
        return FORWARD
    return TURN_LEFT if rng.random() < 0.5 else TURN_RIGHT


# ---------------------------------------------------------------------------
# rendering

_BG_CACHE: dict = {}
_BG_CACHE_LIMIT = 32


@dataclass
class _Board:
    """An upright camera-facing rectangle (billboard)."""

    x: float
    y_c: float
    z_lo: float
    w: float
    h: float
    color: tuple
    notch: str | None = None  # 'h' | 'v' | 'dot'
    notch_off: float = 0.0  # -1 | 0 | +1, shifts the stripe a quarter extent
    legs_color: tuple | None = None  # lower 40% recolored when set


def _bg_key(cfg: WorldConfig, vantage: tuple) -> tuple:
    return (cfg.frame_h, cfg.frame_w, cfg.fx, cfg.fy, vantage,
            cfg.far_wall_x_m, cfg.wall_y_lo, cfg.wall_y_hi,
            cfg.floor_color, cfg.wall_color, cfg.far_wall_color)


def _background(cfg: WorldConfig, vantage: tuple) -> tuple:
    """Analytic room render (rgb, euclidean depth) for one camera position."""
    key = _bg_key(cfg, vantage)
    hit = _BG_CACHE.get(key)
    if hit is None:
        H, W = cfg.frame_h, cfg.frame_w
        cx, cy, cz = vantage
        dy = (np.arange(W) + 0.5 - W / 2) / cfg.fx
        dz = (H / 2 - (np.arange(H) + 0.5)) / cfg.fy
        dy = np.broadcast_to(dy[None, :], (H, W))
        dz = np.broadcast_to(dz[:, None], (H, W))
        # rays are (1, dy, dz) per unit of forward distance; t is forward
        # distance to each candidate surface
        with np.errstate(divide="ignore", invalid="ignore"):
            t_floor = np.where(dz < 0, -cz / dz, np.inf)
            t_lo = np.where(dy < 0, (cfg.wall_y_lo - cy) / dy, np.inf)
            t_hi = np.where(dy > 0, (cfg.wall_y_hi - cy) / dy, np.inf)
        t_far = np.full((H, W), cfg.far_wall_x_m - cx)
        ts = np.stack([t_far, t_floor, t_lo, t_hi])
        which = np.argmin(ts, axis=0)
        t = np.take_along_axis(ts, which[None], axis=0)[0]
        palette = np.array([cfg.far_wall_color, cfg.floor_color,
                            cfg.wall_color, cfg.wall_color], dtype=np.uint8)
        rgb = palette[which]
        depth = (t * np.sqrt(1.0 + dy * dy + dz * dz)).astype(np.float32)
        if len(_BG_CACHE) >= _BG_CACHE_LIMIT:
            _BG_CACHE.clear()
        _BG_CACHE[key] = (rgb, depth)
        hit = (rgb, depth)
    return hit[0].copy(), hit[1].copy()


def _draw_board(rgb: np.ndarray, depth: np.ndarray, cfg: WorldConfig,
                vantage: tuple, b: _Board):
    """z-buffer rasterize one billboard; returns its unclamped pixel rect
    (x1, y1, x2, y2, inclusive) or None when behind the camera."""
    cx, cy, cz = vantage
    d = b.x - cx
    if d <= 0.05:
        return None
    H, W = cfg.frame_h, cfg.frame_w
    u1 = W / 2 + cfg.fx * (b.y_c - b.w / 2 - cy) / d
    u2 = W / 2 + cfg.fx * (b.y_c + b.w / 2 - cy) / d
    v1 = H / 2 - cfg.fy * (b.z_lo + b.h - cz) / d
    v2 = H / 2 - cfg.fy * (b.z_lo - cz) / d
    c_lo, c_hi = math.ceil(u1 - 0.5), math.floor(u2 - 0.5)
    r_lo, r_hi = math.ceil(v1 - 0.5), math.floor(v2 - 0.5)
    rect = (c_lo, r_lo, c_hi, r_hi)
    cc0, cc1 = max(c_lo, 0), min(c_hi, W - 1)
    rr0, rr1 = max(r_lo, 0), min(r_hi, H - 1)
    if cc0 > cc1 or rr0 > rr1:
        return rect
    cols = np.arange(cc0, cc1 + 1)
    rows = np.arange(rr0, rr1 + 1)
    ly = (cols + 0.5 - W / 2) * d / cfg.fx
    lz = (H / 2 - (rows + 0.5)) * d / cfg.fy
    dist = np.sqrt(d * d + ly[None, :] ** 2 + lz[:, None] ** 2).astype(np.float32)
    sub_rgb = rgb[rr0:rr1 + 1, cc0:cc1 + 1]
    sub_depth = depth[rr0:rr1 + 1, cc0:cc1 + 1]
    closer = dist < sub_depth
    face = np.empty((rows.size, cols.size, 3), dtype=np.uint8)
    face[:] = b.color
    wy = cy + ly[None, :]
    wz = cz + lz[:, None]
    if b.legs_color is not None:
        face[np.broadcast_to(wz < b.z_lo + 0.4 * b.h, face.shape[:2])] = b.legs_color
    if b.notch is not None:
        # stripes stop short of the edges so the face stays one connected
        # component for the blob detector; the quarter-extent offset keeps
        # the band interior too (center +- h/4 +- frac*h/2 < half extent)
        nz = b.z_lo + b.h / 2 + (b.notch_off * b.h / 4 if b.notch != "v" else 0.0)
        ny = b.y_c + (b.notch_off * b.w / 4 if b.notch == "v" else 0.0)
        band_h = np.abs(wz - nz) <= cfg.notch_frac * b.h / 2
        band_v = np.abs(wy - ny) <= cfg.notch_frac * b.w / 2
        span_h = np.abs(wy - b.y_c) <= 0.3 * b.w
        span_v = np.abs(wz - (b.z_lo + b.h / 2)) <= 0.3 * b.h
        if b.notch == "h":
            nm = band_h & span_h
        elif b.notch == "v":
            nm = band_v & span_v
        else:
            nm = band_h & band_v
        face[np.broadcast_to(nm, face.shape[:2])] = cfg.notch_color
    sub_rgb[closer] = face[closer]
    sub_depth[closer] = dist[closer]
    return rect


def _expert_board(cfg: WorldConfig, pose: ExpertPose, expert_id: int) -> _Board:
    ex, ey, _ = cfg.expert_center(pose)
    notch = "dot" if pose.theta >= U else ("h" if pose.theta in (N, S) else "v")
    off = 1.0 if pose.theta in (N, E, U) else -1.0
    return _Board(x=ex, y_c=ey, z_lo=pose.cell_z * cfg.level_m,
                  w=cfg.expert_size_m, h=cfg.expert_size_m,
                  color=cfg.expert_colors[expert_id], notch=notch, notch_off=off)


def _occluder_board(cfg: WorldConfig, pose: ExpertPose, frac: float,
                    vantage: tuple) -> _Board:
    """A cardboard panel 0.3 m in front of the expert whose projection covers
    the leftmost frac of the expert's projected width."""
    ex, ey, _ = cfg.expert_center(pose)
    cx, cy, cz = vantage
    d = ex - cx
    do = d - 0.3
    shrink = do / d
    y_left = cy + (ey - cfg.expert_size_m / 2 - cy) * shrink - 0.02
    y_right = cy + (ey - cfg.expert_size_m / 2 + frac * cfg.expert_size_m
                    - cy) * shrink + 0.02
    z_top = cz + (pose.cell_z * cfg.level_m + cfg.expert_size_m - cz) * shrink
    return _Board(x=ex - 0.3, y_c=(y_left + y_right) / 2, z_lo=0.0,
                  w=y_right - y_left, h=z_top + 0.03, color=cfg.occluder_color)


def _perturbation_boards(cfg: WorldConfig, pert: Perturbation, poses,
                         vantage: tuple, rng: np.random.Generator) -> list:
    boards = []
    if pert.kind == "occlusion":
        for pose in poses:
            boards.append(_occluder_board(cfg, pose, pert.magnitude, vantage))
    elif pert.kind == "distractor-boxes":
        x_hi = cfg.grid_nx * cfg.cell_m
        for _ in range(max(1, int(round(pert.magnitude)))):
            color = cfg.expert_colors[rng.integers(len(cfg.expert_colors))]
            boards.append(_Board(
                x=float(rng.uniform(0.3, x_hi)),
                y_c=float(rng.uniform(0.1, cfg.grid_ny * cfg.cell_m - 0.1)),
                z_lo=0.0, w=cfg.distractor_size_m, h=cfg.distractor_size_m,
                color=color))
    elif pert.kind == "human-silhouette":
        x_hi = cfg.grid_nx * cfg.cell_m
        for _ in range(max(1, int(round(pert.magnitude)))):
            boards.append(_Board(
                x=float(rng.uniform(0.5, x_hi)),
                y_c=float(rng.uniform(0.2, cfg.grid_ny * cfg.cell_m - 0.2)),
                z_lo=0.0, w=0.45, h=1.6, color=cfg.shirt_color,
                legs_color=cfg.trouser_color))
    return boards


def render(cfg: WorldConfig, poses, perturbation: Perturbation | None = None,
           seed: int = 0, vantage: tuple | None = None,
           timestamp: int = 0) -> RawFrame:
    """Render one frame. poses[i] is expert i's pose; oracle_boxes on the
    result hold each visible expert's full projected box (occlusion does not
    shrink it, matching what a tracking detector would report)."""
    if vantage is None:
        vantage = (cfg.cam_x, cfg.cam_y, cfg.cam_z)
    vantage = tuple(float(v) for v in vantage)
    if not (cfg.wall_y_lo < vantage[1] < cfg.wall_y_hi) or vantage[2] <= 0.0:
        raise GeometryError(f"vantage {vantage} lies outside the room")
    if len(poses) > cfg.n_experts:
        raise StateError(f"{len(poses)} poses for {cfg.n_experts} experts")
    pert = Perturbation() if perturbation is None else perturbation
    rgb, depth = _background(cfg, vantage)
    rects = []
    for i, pose in enumerate(poses):
        rects.append(_draw_board(rgb, depth, cfg, vantage,
                                 _expert_board(cfg, pose, i)))
    rng = np.random.default_rng(seed)
    for b in _perturbation_boards(cfg, pert, poses, vantage, rng):
        _draw_board(rgb, depth, cfg, vantage, b)
    if pert.kind == "dim-light":
        rgb = np.floor(rgb.astype(np.float32) * pert.magnitude + 0.5).astype(np.uint8)
    oracle = []
    H, W = cfg.frame_h, cfg.frame_w
    for i, rect in enumerate(rects):
        if rect is None:
            continue
        x1, y1 = max(rect[0], 0), max(rect[1], 0)
        x2, y2 = min(rect[2], W - 1), min(rect[3], H - 1)
        if x1 < x2 and y1 < y2:
            oracle.append((i, BoundingBox(x1, y1, x2, y2)))
    return RawFrame(rgb=rgb, depth=depth, timestamp=timestamp,
                    oracle_boxes=tuple(oracle))


def capture_background(cfg: WorldConfig, vantage: tuple | None = None) -> RawFrame:
    """The empty-world render; this exact frame is the masking background."""
    return render(cfg, [], vantage=vantage)


# ---------------------------------------------------------------------------
# sampling


def relative_bins(cfg: WorldConfig, space: LabelSpace, pose: ExpertPose,
                  vantage: tuple) -> tuple:
    """Discretize the expert's offset from the camera into (dx, dy, dz) bins.
    Offsets are binned uniformly over the configured ranges and clamped."""

    def _bin(v, lo, hi, n):
        if n == 1:
            return 0
        return int(np.clip(math.floor((v - lo) / ((hi - lo) / n)), 0, n - 1))

    ex, ey, ez = cfg.expert_center(pose)
    return (_bin(ex - vantage[0], *cfg.rel_x_range, space.n_dx),
            _bin(ey - vantage[1], *cfg.rel_y_range, space.n_dy),
            _bin(ez - vantage[2], *cfg.rel_z_range, space.n_dz))


def _random_pose(cfg: WorldConfig, rng: np.random.Generator) -> ExpertPose:
    return ExpertPose(cell_x=int(rng.integers(cfg.grid_nx)),
                      cell_y=int(rng.integers(cfg.grid_ny)),
                      cell_z=int(rng.integers(cfg.grid_nz)),
                      theta=int(rng.integers(cfg.n_theta)), action=STOP)


def _collides(steps) -> bool:
    for poses in steps:
        cells = [p.cell for p in poses]
        if len(set(cells)) != len(cells):
            return True
    return False


def sample_episode(cfg: WorldConfig, rng: np.random.Generator) -> tuple:
    """Draw one i.i.d. sample: uniform poses two steps back, rolled forward
    twice under the patrol policy, plus a quantized camera jitter. Pose sets
    where two experts would share a cell are rejected and redrawn."""
    while True:
        steps = [[_random_pose(cfg, rng) for _ in range(cfg.n_experts)]]
        for _ in range(2):
            steps.append([step_dynamics(cfg, p, patrol_policy(cfg, rng, p))
                          for p in steps[-1]])
        if not _collides(steps):
            break
    j = cfg.vantage_jitter_m
    vantage = (cfg.cam_x + float(rng.integers(-1, 2)) * j,
               cfg.cam_y + float(rng.integers(-1, 2)) * j,
               cfg.cam_z)
    return steps, vantage


def sample_labels(cfg: WorldConfig, space: LabelSpace, steps,
                  vantage: tuple) -> np.ndarray:
    """Per-expert ground truth in canonical head order [E, 8]."""
    out = np.zeros((cfg.n_experts, 8), dtype=np.int64)
    for e in range(cfg.n_experts):
        p1, p2 = steps[1][e], steps[2][e]
        action = inverse_dynamics(cfg, p1, p2)
        bx, by, bz = relative_bins(cfg, space, p2, vantage)
        z = p2.cell_z if space.has_z else 0
        out[e] = (p2.cell_x, p2.cell_y, z, p2.theta, action, bx, by, bz)
    return out


def _pick_perturbation(mix, rng: np.random.Generator) -> Perturbation:
    r = rng.random() * sum(w for _, w in mix)
    acc = 0.0
    for pert, w in mix:
        acc += w
        if r < acc:
            return pert
    return mix[-1][0]


def render_sample(cfg: WorldConfig, steps, vantage: tuple,
                  perturbation: Perturbation | None = None,
                  seed: int = 0) -> tuple:
    """Three frames (t-2, t-1, t) of one episode under a fixed perturbation
    placement (clutter stays put across the triplet)."""
    return tuple(render(cfg, steps[t], perturbation, seed=seed,
                        vantage=vantage, timestamp=t) for t in range(3))


def generate_dataset(cfg: WorldConfig, path: str, n_samples: int, seed: int,
                     perturbation_mix=None, space: LabelSpace | None = None):
    """Write a dataset file and return a stratification report.

    perturbation_mix: [(Perturbation, weight)] sampled per episode (default:
    all clean). The report histograms every label head; classes with zero
    mass are listed under dead_classes and warned about, since a head can
    never learn them.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    if space is None:
        space = label_space_for(cfg)
    else:
        check_space(cfg, space)
    mix = list(perturbation_mix or [(Perturbation(), 1.0)])
    for pert, w in mix:
        if w < 0:
            raise ConfigError("perturbation weights must be >= 0")
    if sum(w for _, w in mix) <= 0:
        raise ConfigError("perturbation mix weights must sum to > 0")

    counts = {head: np.zeros(space.head_width(head), dtype=np.int64)
              for head in HEAD_ORDER}
    bg = capture_background(cfg)
    world_json = json.dumps(cfg.to_dict(), sort_keys=True)
    with gio.DatasetWriter(path, cfg.frame_h, cfg.frame_w, cfg.n_experts,
                           n_samples, seed, space, world_json, bg) as w:
        for i in range(n_samples):
            rng = np.random.default_rng((seed, i))
            steps, vantage = sample_episode(cfg, rng)
            pert = _pick_perturbation(mix, rng)
            pert_seed = int(rng.integers(0, 2 ** 32))
            frames = render_sample(cfg, steps, vantage, pert, seed=pert_seed)
            labels = sample_labels(cfg, space, steps, vantage)
            poses = np.array([[(p.cell_x, p.cell_y, p.cell_z, p.theta, p.action)
                               for p in poses_t] for poses_t in steps],
                             dtype=np.int64)
            boxes = []
            for fr in frames:
                by_id = dict(fr.oracle_boxes)
                boxes.append([by_id.get(e) for e in range(cfg.n_experts)])
            w.add_sample(frames, boxes, poses, labels, vantage)
            for h, head in enumerate(HEAD_ORDER):
                np.add.at(counts[head], labels[:, h], 1)

    dead = {head: [int(c) for c in np.nonzero(counts[head] == 0)[0]]
            for head in HEAD_ORDER if np.any(counts[head] == 0)}
    for head, classes in dead.items():
        warnings.warn(
            f"dataset {path}: {head} classes {classes} have no samples",
            stacklevel=2)
    return {
        "path": path,
        "n_samples": n_samples,
        "n_experts": cfg.n_experts,
        "seed": seed,
        "label_histograms": {h: [int(c) for c in counts[h]] for h in HEAD_ORDER},
        "dead_classes": dead,
    }
