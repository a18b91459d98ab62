"""Dataset and checkpoint format round-trips plus corruption handling."""

import os

import numpy as np
import pytest

from gridsight import world as gw
from gridsight.errors import FormatError, GeometryError
from gridsight.io import (CHECKPOINT_MAGIC, DATASET_MAGIC, DatasetReader,
                          DatasetWriter, file_checksum, load_checkpoint,
                          save_checkpoint)
from gridsight.model import (InputGeometry, LabelSpace, NetInput, build_model,
                             forward)
from gridsight.tensor import Tensor


def small_cfg():
    return gw.WorldConfig(grid_nx=4, grid_ny=2, frame_h=24, frame_w=32)


def write_dataset(path, n=3, seed=5, cfg=None):
    cfg = cfg or small_cfg()
    gw.generate_dataset(cfg, str(path), n, seed=seed)
    return cfg


MINI = dict(n_x=4, n_y=2, n_z=1, n_theta=4, n_action=4,
            n_dx=3, n_dy=3, n_dz=1, has_z=False)


def mini_model(seed=0):
    return build_model(LabelSpace(**MINI), InputGeometry(24, 32, 20, 28),
                       seed=seed)


# ---------------------------------------------------------------------------
# dataset round-trip


def test_dataset_roundtrip_fields(tmp_path):
    path = tmp_path / "d.ds"
    cfg = write_dataset(path, n=4, seed=9)
    with DatasetReader(str(path)) as r:
        assert r.n_samples == 4
        assert r.seed == 9
        assert (r.frame_h, r.frame_w) == (cfg.frame_h, cfg.frame_w)
        assert r.n_experts == len(cfg.expert_colors)
        assert gw.WorldConfig.from_dict(__import__("json").loads(r.world_json)) == cfg
        for i in range(4):
            frames = r.frames(i)
            assert len(frames) == 3
            for fr in frames:
                assert fr.rgb.shape == (cfg.frame_h, cfg.frame_w, 3)
                assert fr.depth.dtype == np.float32
            labels = r.labels(i)
            assert labels.shape == (r.n_experts, 8)
            poses = r.poses(i)
            assert poses.shape == (3, r.n_experts, 5)


def test_dataset_frames_match_rerender(tmp_path):
    # stored pixels must equal a fresh render from the stored poses, else
    # perturbed re-rendering in training would drift from the originals
    path = tmp_path / "d.ds"
    cfg = write_dataset(path, n=3, seed=2)
    with DatasetReader(str(path)) as r:
        for i in range(3):
            poses = r.poses(i)
            vantage = tuple(float(v) for v in r.vantage(i))
            stored = r.frames(i)
            for t in range(3):
                ps = [gw.ExpertPose(*map(int, poses[t, e])) for e in range(r.n_experts)]
                fresh = gw.render(cfg, ps, vantage=vantage, timestamp=t)
                assert np.array_equal(fresh.rgb, stored[t].rgb)
                assert np.array_equal(fresh.depth, stored[t].depth)


def test_dataset_labels_follow_step_dynamics(tmp_path):
    path = tmp_path / "d.ds"
    cfg = write_dataset(path, n=6, seed=3)
    with DatasetReader(str(path)) as r:
        for i in range(6):
            poses = r.poses(i)
            for e in range(r.n_experts):
                prev = gw.ExpertPose(*map(int, poses[1, e]))
                cur = gw.ExpertPose(*map(int, poses[2, e]))
                act = gw.inverse_dynamics(cfg, prev, cur)
                assert act == int(poses[2, e, 4])


def test_dataset_generation_deterministic(tmp_path):
    a, b = tmp_path / "a.ds", tmp_path / "b.ds"
    write_dataset(a, n=5, seed=7)
    write_dataset(b, n=5, seed=7)
    assert file_checksum(str(a)) == file_checksum(str(b))


def test_dataset_background_matches_capture(tmp_path):
    path = tmp_path / "d.ds"
    cfg = write_dataset(path, n=2, seed=4)
    with DatasetReader(str(path)) as r:
        bg = gw.capture_background(cfg)
        stored = r.background
        assert np.array_equal(stored.rgb, bg.rgb)
        assert np.array_equal(stored.depth, bg.depth)


# ---------------------------------------------------------------------------
# dataset corruption


def test_dataset_rejects_bad_magic(tmp_path):
    path = tmp_path / "d.ds"
    write_dataset(path)
    blob = bytearray(path.read_bytes())
    blob[:5] = b"XXXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        DatasetReader(str(path))


def test_dataset_rejects_bad_version(tmp_path):
    path = tmp_path / "d.ds"
    write_dataset(path)
    blob = bytearray(path.read_bytes())
    blob[5] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="version"):
        DatasetReader(str(path))


def test_dataset_rejects_flipped_payload_byte(tmp_path):
    path = tmp_path / "d.ds"
    write_dataset(path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="checksum"):
        DatasetReader(str(path))


def test_dataset_rejects_truncations(tmp_path):
    path = tmp_path / "d.ds"
    write_dataset(path, n=2)
    blob = path.read_bytes()
    rng = np.random.default_rng(0)
    cuts = set(int(c) for c in rng.integers(1, len(blob), size=40)) | {1, 4, 5, 64}
    for cut in cuts:
        t = tmp_path / "t.ds"
        t.write_bytes(blob[:cut])
        with pytest.raises(FormatError):
            DatasetReader(str(t))


def test_dataset_index_out_of_range(tmp_path):
    path = tmp_path / "d.ds"
    write_dataset(path, n=2)
    with DatasetReader(str(path)) as r:
        with pytest.raises(IndexError):
            r.frames(2)


def test_writer_count_mismatch_fails_and_cleans_up(tmp_path):
    path = tmp_path / "d.ds"
    cfg = small_cfg()
    bg = gw.capture_background(cfg)
    w = DatasetWriter(str(path), cfg.frame_h, cfg.frame_w, 2, 3, 0,
                      gw.label_space_for(cfg), "{}", bg)
    with pytest.raises(FormatError, match="declared 3"):
        w.close()
    assert not os.path.exists(str(path))
    assert not os.path.exists(str(path) + ".tmp")


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    m = mini_model(seed=3)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(m, str(p1))
    m2 = load_checkpoint(str(p1))
    for (n1, t1), (n2, t2) in zip(m.params.named_tensors(),
                                  m2.params.named_tensors()):
        assert n1 == n2
        assert np.array_equal(t1.data, t2.data), n1
    save_checkpoint(m2, str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_roundtrip_preserves_forward(tmp_path):
    m = mini_model(seed=4)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, str(path))
    m2 = load_checkpoint(str(path))
    rng = np.random.default_rng(0)
    g = m.geometry
    inp = NetInput(
        full_frame=Tensor(rng.random((2, 4, g.frame_h, g.frame_w), dtype=np.float32)),
        crops=Tensor(rng.random((2, 3, 4, g.crop_h, g.crop_w), dtype=np.float32)))
    out1, out2 = forward(m, inp), forward(m2, inp)
    for head in ("x", "y", "z", "theta", "action", "dx", "dy", "dz"):
        assert np.array_equal(getattr(out1, head), getattr(out2, head))


def test_checkpoint_space_mismatch_names_head(tmp_path):
    m = mini_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, str(path))
    other = dict(MINI)
    other["n_theta"] = 6
    with pytest.raises(GeometryError, match="theta"):
        load_checkpoint(str(path), expect_space=LabelSpace(**other))


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(mini_model(), str(path))
    blob = bytearray(path.read_bytes())
    blob[:5] = b"NOPE!"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(str(path))


def test_checkpoint_rejects_flipped_weight_byte(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(mini_model(), str(path))
    blob = bytearray(path.read_bytes())
    blob[len(blob) - 100] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="checksum"):
        load_checkpoint(str(path))


def test_checkpoint_rejects_truncations(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(mini_model(), str(path))
    blob = path.read_bytes()
    rng = np.random.default_rng(1)
    cuts = set(int(c) for c in rng.integers(1, len(blob), size=40)) | {1, 5, 12}
    for cut in cuts:
        t = tmp_path / "t.ckpt"
        t.write_bytes(blob[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(str(t))


def test_magic_values():
    assert DATASET_MAGIC == b"SAND1"
    assert CHECKPOINT_MAGIC == b"SANC1"
