"""Binary dataset and checkpoint formats.

Both formats are fixed-layout little-endian with a trailing 64-bit checksum
(the first 8 bytes of the SHA-256 of everything before it), so they can be
re-read byte-compatibly from any language. Writes are atomic: a temp file in
the same directory is renamed over the target.

Dataset file ("SAND1"):
  magic 5s | version u32 | frame_h u32 | frame_w u32 | n_experts u32 |
  n_samples u64 | seed u64 | label space 8*u32 + has_z u8 |
  world-config JSON (u32 length + utf8) | background rgb u8[H*W*3] +
  depth f32[H*W] | n_samples fixed-size records | checksum u64.
Each record:
  3 frames (rgb u8[H*W*3], depth f32[H*W]) | boxes i32[3,E,4] (-1 = absent) |
  poses i32[3,E,5] (cell_x, cell_y, cell_z, theta, action) |
  labels u16[E,8] (canonical head order) | vantage f64[3].

Checkpoint file ("SANC1"):
  magic 5s | version u32 | label space 8*u32 + has_z u8 | ablation 4*u8 |
  geometry 4*u32 (frame_h, frame_w, crop_h, crop_w) | n_params u32 |
  per parameter: name_len u16 + name utf8 + rank u8 + extents rank*u32 +
  data f32 LE | checksum u64.
"""

from __future__ import annotations

import hashlib
import json
import mmap
import os
import struct

import numpy as np

from .errors import DimensionError, FormatError, GeometryError
from .model import (AblationConfig, HEAD_ORDER, InputGeometry, LabelSpace, Model,
                    build_model)
from .preproc import BoundingBox, RawFrame

DATASET_MAGIC = b"SAND1"
CHECKPOINT_MAGIC = b"SANC1"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1

_SPACE_FIELDS = ("n_x", "n_y", "n_z", "n_theta", "n_action", "n_dx", "n_dy", "n_dz")


def _pack_space(space: LabelSpace) -> bytes:
    return struct.pack("<8IB", *(getattr(space, f) for f in _SPACE_FIELDS),
                       1 if space.has_z else 0)


def _unpack_space(buf: bytes) -> LabelSpace:
    vals = struct.unpack("<8IB", buf)
    kw = dict(zip(_SPACE_FIELDS, vals[:8]))
    return LabelSpace(has_z=bool(vals[8]), **kw)


_SPACE_BYTES = struct.calcsize("<8IB")


def _checksum(h: "hashlib._Hash") -> bytes:
    return h.digest()[:8]


def _atomic_write(path: str, writer_fn) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        writer_fn(f)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


class _HashingFile:
    """Wraps a file object, hashing every written byte."""

    def __init__(self, f):
        self.f = f
        self.hash = hashlib.sha256()

    def write(self, data: bytes):
        self.f.write(data)
        self.hash.update(data)


# ---------------------------------------------------------------------------
# dataset


class DatasetWriter:
    """Streams fixed-size sample records; finalizes with the checksum."""

    def __init__(self, path: str, frame_h: int, frame_w: int, n_experts: int,
                 n_samples: int, seed: int, space: LabelSpace, world_json: str,
                 background: RawFrame):
        if background.extent != (frame_h, frame_w):
            raise DimensionError(
                f"background extent {background.extent} does not match "
                f"frame {frame_h}x{frame_w}")
        self.path = path
        self.frame_h, self.frame_w = frame_h, frame_w
        self.n_experts = n_experts
        self.n_samples = n_samples
        self._written = 0
        self._tmp = path + ".tmp"
        self._f = open(self._tmp, "wb")
        self._hf = _HashingFile(self._f)
        hf = self._hf
        hf.write(DATASET_MAGIC)
        hf.write(struct.pack("<IIIIQQ", DATASET_VERSION, frame_h, frame_w,
                             n_experts, n_samples, seed))
        hf.write(_pack_space(space))
        blob = world_json.encode("utf-8")
        hf.write(struct.pack("<I", len(blob)))
        hf.write(blob)
        hf.write(background.rgb.tobytes())
        hf.write(background.depth.astype("<f4").tobytes())

    def add_sample(self, frames: tuple, boxes, poses, labels, vantage) -> None:
        """frames: 3 RawFrames; boxes: [3][E] of BoundingBox|None;
        poses: int array [3,E,5]; labels: int array [E,8]; vantage: 3 floats."""
        if self._written >= self.n_samples:
            raise FormatError("more samples added than declared in the header")
        hf = self._hf
        for fr in frames:
            if fr.extent != (self.frame_h, self.frame_w):
                raise DimensionError(f"frame extent {fr.extent} does not match header")
            hf.write(fr.rgb.tobytes())
            hf.write(fr.depth.astype("<f4").tobytes())
        box_arr = np.full((3, self.n_experts, 4), -1, dtype="<i4")
        for t in range(3):
            for e in range(self.n_experts):
                b = boxes[t][e]
                if b is not None:
                    box_arr[t, e] = (b.x1, b.y1, b.x2, b.y2)
        hf.write(box_arr.tobytes())
        hf.write(np.asarray(poses, dtype="<i4").reshape(3, self.n_experts, 5).tobytes())
        hf.write(np.asarray(labels, dtype="<u2").reshape(self.n_experts, 8).tobytes())
        hf.write(np.asarray(vantage, dtype="<f8").reshape(3).tobytes())
        self._written += 1

    def close(self) -> None:
        if self._written != self.n_samples:
            self._f.close()
            os.unlink(self._tmp)
            raise FormatError(
                f"declared {self.n_samples} samples but wrote {self._written}")
        self._f.write(_checksum(self._hf.hash))
        self._f.flush()
        os.fsync(self._f.fileno())
        self._f.close()
        os.replace(self._tmp, self.path)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *rest):
        if exc_type is None:
            self.close()
        else:
            self._f.close()
            if os.path.exists(self._tmp):
                os.unlink(self._tmp)
        return False


class DatasetReader:
    """Memory-mapped random access to a dataset file.

    The header is validated on open (magic, version, size arithmetic); the
    trailing checksum is verified too unless verify=False.
    """

    def __init__(self, path: str, verify: bool = True):
        self.path = path
        self._file = open(path, "rb")
        try:
            self._mm = mmap.mmap(self._file.fileno(), 0, access=mmap.ACCESS_READ)
        except ValueError as e:
            self._file.close()
            raise FormatError(f"cannot map {path}: {e}") from e
        mm = self._mm
        try:
            if len(mm) < 5 or mm[:5] != DATASET_MAGIC:
                raise FormatError(
                    f"bad dataset magic: expected {DATASET_MAGIC!r}, "
                    f"found {bytes(mm[:5])!r}")
            off = 5
            fixed = struct.calcsize("<IIIIQQ")
            if len(mm) < off + fixed + _SPACE_BYTES + 4:
                raise FormatError("dataset header truncated")
            version, fh, fw, ne, ns, seed = struct.unpack_from("<IIIIQQ", mm, off)
            off += fixed
            if version != DATASET_VERSION:
                raise FormatError(
                    f"unsupported dataset version: expected {DATASET_VERSION}, "
                    f"found {version}")
            self.frame_h, self.frame_w = fh, fw
            self.n_experts, self.n_samples, self.seed = ne, ns, seed
            self.space = _unpack_space(mm[off:off + _SPACE_BYTES])
            off += _SPACE_BYTES
            (jlen,) = struct.unpack_from("<I", mm, off)
            off += 4
            if len(mm) < off + jlen:
                raise FormatError("dataset header truncated in world config")
            self.world_json = bytes(mm[off:off + jlen]).decode("utf-8")
            off += jlen
            bg_bytes = fh * fw * 3 + fh * fw * 4
            if len(mm) < off + bg_bytes:
                raise FormatError("dataset header truncated in background frame")
            self._bg_off = off
            off += bg_bytes
            self._data_off = off
            frame_bytes = fh * fw * 3 + fh * fw * 4
            self.record_size = (3 * frame_bytes + 3 * ne * 4 * 4 +
                                3 * ne * 5 * 4 + ne * 8 * 2 + 3 * 8)
            want = self._data_off + ns * self.record_size + 8
            if len(mm) != want:
                raise FormatError(
                    f"dataset size mismatch: header implies {want} bytes, "
                    f"file has {len(mm)}")
            if verify:
                self.verify_checksum()
        except Exception:
            self.close()
            raise

    def verify_checksum(self) -> None:
        h = hashlib.sha256()
        h.update(self._mm[:-8])
        if _checksum(h) != self._mm[-8:]:
            raise FormatError("dataset checksum mismatch (corrupt or truncated file)")

    # -- accessors --------------------------------------------------------

    def _view(self, offset: int, dtype, count: int) -> np.ndarray:
        return np.frombuffer(self._mm, dtype=dtype, count=count, offset=offset)

    @property
    def background(self) -> RawFrame:
        fh, fw = self.frame_h, self.frame_w
        rgb = self._view(self._bg_off, np.uint8, fh * fw * 3).reshape(fh, fw, 3)
        depth = self._view(self._bg_off + fh * fw * 3, "<f4", fh * fw).reshape(fh, fw)
        return RawFrame(rgb=rgb.copy(), depth=depth.copy(), oracle_boxes=())

    def _record_off(self, i: int) -> int:
        if not (0 <= i < self.n_samples):
            raise IndexError(f"sample {i} out of range [0, {self.n_samples})")
        return self._data_off + i * self.record_size

    def boxes(self, i: int) -> list:
        fh, fw, ne = self.frame_h, self.frame_w, self.n_experts
        off = self._record_off(i) + 3 * (fh * fw * 3 + fh * fw * 4)
        arr = self._view(off, "<i4", 3 * ne * 4).reshape(3, ne, 4)
        out = []
        for t in range(3):
            row = []
            for e in range(ne):
                x1, y1, x2, y2 = (int(v) for v in arr[t, e])
                row.append(None if x1 < 0 else BoundingBox(x1, y1, x2, y2))
            out.append(row)
        return out

    def frames(self, i: int) -> tuple:
        fh, fw = self.frame_h, self.frame_w
        off = self._record_off(i)
        boxes = self.boxes(i)
        frames = []
        for t in range(3):
            rgb = self._view(off, np.uint8, fh * fw * 3).reshape(fh, fw, 3)
            off += fh * fw * 3
            depth = self._view(off, "<f4", fh * fw).reshape(fh, fw)
            off += fh * fw * 4
            oracle = tuple((e, b) for e, b in enumerate(boxes[t]) if b is not None)
            frames.append(RawFrame(rgb=rgb.copy(), depth=depth.copy(),
                                   timestamp=t, oracle_boxes=oracle))
        return tuple(frames)

    def poses(self, i: int) -> np.ndarray:
        fh, fw, ne = self.frame_h, self.frame_w, self.n_experts
        off = (self._record_off(i) + 3 * (fh * fw * 3 + fh * fw * 4) +
               3 * ne * 4 * 4)
        return self._view(off, "<i4", 3 * ne * 5).reshape(3, ne, 5).astype(np.int64)

    def labels(self, i: int) -> np.ndarray:
        fh, fw, ne = self.frame_h, self.frame_w, self.n_experts
        off = (self._record_off(i) + 3 * (fh * fw * 3 + fh * fw * 4) +
               3 * ne * 4 * 4 + 3 * ne * 5 * 4)
        return self._view(off, "<u2", ne * 8).reshape(ne, 8).astype(np.int64)

    def vantage(self, i: int) -> np.ndarray:
        off = self._record_off(i) + self.record_size - 24
        return self._view(off, "<f8", 3).copy()

    def close(self) -> None:
        if getattr(self, "_mm", None) is not None:
            self._mm.close()
            self._mm = None
        if getattr(self, "_file", None) is not None:
            self._file.close()
            self._file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, path: str) -> None:
    def body(f):
        hf = _HashingFile(f)
        hf.write(CHECKPOINT_MAGIC)
        hf.write(struct.pack("<I", CHECKPOINT_VERSION))
        hf.write(_pack_space(model.space))
        ab = model.ablation
        hf.write(struct.pack("<4B", ab.no_relative, ab.no_temporal,
                             ab.no_depth, ab.no_crop))
        g = model.geometry
        hf.write(struct.pack("<4I", g.frame_h, g.frame_w, g.crop_h, g.crop_w))
        named = model.params.named_tensors()
        hf.write(struct.pack("<I", len(named)))
        for name, t in named:
            nb = name.encode("utf-8")
            hf.write(struct.pack("<H", len(nb)))
            hf.write(nb)
            hf.write(struct.pack("<B", t.data.ndim))
            hf.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            hf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        f.write(_checksum(hf.hash))

    _atomic_write(path, body)


def _space_mismatch(stored: LabelSpace, want: LabelSpace) -> str | None:
    for head in HEAD_ORDER:
        if stored.head_width(head) != want.head_width(head):
            return (f"{head} head width {stored.head_width(head)} in checkpoint "
                    f"vs {want.head_width(head)} requested")
    if stored.has_z != want.has_z:
        return f"has_z {stored.has_z} in checkpoint vs {want.has_z} requested"
    return None


def load_checkpoint(path: str, expect_space: LabelSpace | None = None,
                    dtype=np.float32) -> Model:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 13 or blob[:5] != CHECKPOINT_MAGIC:
        raise FormatError(
            f"bad checkpoint magic: expected {CHECKPOINT_MAGIC!r}, "
            f"found {blob[:5]!r}")
    h = hashlib.sha256()
    h.update(blob[:-8])
    if _checksum(h) != blob[-8:]:
        raise FormatError("checkpoint checksum mismatch (corrupt or truncated file)")
    off = 5
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise FormatError(
            f"unsupported checkpoint version: expected {CHECKPOINT_VERSION}, "
            f"found {version}")
    space = _unpack_space(blob[off:off + _SPACE_BYTES])
    off += _SPACE_BYTES
    ab = AblationConfig(*(bool(b) for b in struct.unpack_from("<4B", blob, off)))
    off += 4
    fh, fw, ch, cw = struct.unpack_from("<4I", blob, off)
    off += 16
    if expect_space is not None:
        msg = _space_mismatch(space, expect_space)
        if msg:
            raise GeometryError(f"checkpoint label space mismatch: {msg}")
    (n_params,) = struct.unpack_from("<I", blob, off)
    off += 4
    model = build_model(space, InputGeometry(fh, fw, ch, cw), ab, dtype=dtype)
    params = dict(model.params.named_tensors())
    seen = set()
    for _ in range(n_params):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        if name not in params:
            raise FormatError(f"checkpoint parameter {name!r} unknown to this model")
        if params[name].data.shape != tuple(shape):
            raise FormatError(
                f"checkpoint parameter {name!r} shape {tuple(shape)} vs "
                f"model {params[name].data.shape}")
        params[name].data = data.astype(dtype)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise FormatError(f"checkpoint missing parameters: {sorted(missing)[:4]}")
    return model


def file_checksum(path: str) -> str:
    """Full-file SHA-256 hex digest, for determinism comparisons."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json_atomic(path: str, obj) -> None:
    """Canonical (sorted, newline-terminated) JSON, atomically replaced."""
    blob = (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")
    _atomic_write(path, lambda f: f.write(blob))
