"""Graph construction, forward contracts, loss arithmetic, and an
end-to-end gradient check on a miniature geometry."""

import numpy as np
import pytest

from gridsight import tensor as T
from gridsight.errors import DimensionError, GeometryError, LabelError
from gridsight.model import (AblationConfig, InputGeometry, LabelSpace, NetInput,
                             NetOutput, StateActionLabel, argmax_classes, build_model,
                             forward, loss, loss_from_logits, predict, HEAD_ORDER)

PATROL = dict(n_x=10, n_y=3, n_theta=4, n_action=4)
MINI_GEOM = dict(frame_h=24, frame_w=32, crop_h=10, crop_w=15)


def mini_model(space=None, ablation=None, seed=0, dtype=np.float32):
    return build_model(space or LabelSpace(**PATROL), InputGeometry(**MINI_GEOM),
                       ablation, seed=seed, dtype=dtype)


def make_input(rng, geom, batch, dtype=np.float32):
    ff = rng.uniform(0.0, 1.0, (batch, 4, geom.frame_h, geom.frame_w)).astype(dtype)
    cr = rng.uniform(0.0, 1.0, (batch, 3, 4, geom.crop_h, geom.crop_w)).astype(dtype)
    return NetInput(T.Tensor(ff), T.Tensor(cr))


def test_patrol_space_builds_with_expected_head_widths():
    m = build_model(LabelSpace(**PATROL), InputGeometry())
    assert m.state_heads["x"].weight.shape == (256, 10)
    assert m.state_heads["y"].weight.shape == (256, 3)
    assert m.state_heads["z"].weight.shape == (256, 1)
    assert m.theta_head.weight.shape == (256, 4)
    assert m.action_head.weight.shape == (256, 4)
    # default full-resolution trace: trunk collapses to 1x1, crops to 5x7
    assert m.geometry_trace["coord_pool_after5"] == (32, 1, 1)
    assert m.geometry_trace["td_conv3"] == (32, 5, 7)


def test_manipulation_space_builds_with_z_head():
    space = LabelSpace(n_x=4, n_y=4, n_z=3, n_theta=6, n_action=6,
                       n_dz=16, has_z=True)
    m = build_model(space, InputGeometry())
    assert m.state_heads["z"].weight.shape == (256, 3)
    assert m.theta_head.weight.shape == (256, 6)
    assert "delta_dz_head.weight" in dict(m.params.named_tensors())
    assert m.params.get("delta_dz_head.weight").shape == (256, 16)


def test_label_space_without_z_collapses_z_widths():
    space = LabelSpace(n_x=2, n_y=2, n_theta=2, n_action=2, n_z=7, n_dz=9, has_z=False)
    assert space.n_z == 1 and space.n_dz == 1


def test_no_relative_graph_is_smaller_and_lacks_delta_heads():
    full = mini_model()
    ablated = mini_model(ablation=AblationConfig(no_relative=True))
    assert ablated.params.n_parameters() < full.params.n_parameters()
    names = dict(ablated.params.named_tensors())
    assert not any(k.startswith("delta_") for k in names)
    assert ablated.head_names() == ("x", "y", "z", "theta", "action")


def test_no_crop_variant_builds_with_same_graph():
    full = mini_model()
    variant = mini_model(ablation=AblationConfig(no_crop=True))
    assert variant.params.n_parameters() == full.params.n_parameters()


def test_impossible_geometry_names_failing_layer():
    geom = InputGeometry(**MINI_GEOM)
    geom.frame_h = 0
    with pytest.raises(GeometryError) as err:
        build_model(LabelSpace(**PATROL), geom)
    assert "coord_conv1" in str(err.value)


def test_build_is_seed_deterministic():
    a, b = mini_model(seed=5), mini_model(seed=5)
    for (na, ta), (nb, tb) in zip(a.params.named_tensors(), b.params.named_tensors()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)
    c = mini_model(seed=6)
    diffs = sum(not np.array_equal(ta.data, tc.data)
                for (_, ta), (_, tc) in zip(a.params.named_tensors(),
                                            c.params.named_tensors()))
    assert diffs > 0


def test_fresh_model_predictions_unbiased():
    # an untrained head should cost about ln(n) per example (uniform guess);
    # a large gap either way means dead units or a systematic class bias
    m = mini_model(seed=1)
    rng = np.random.default_rng(2)
    out = forward(m, make_input(rng, m.geometry, 4))
    for head in HEAD_ORDER:
        p = out.head(head)
        n = p.shape[1]
        assert np.all(p > 1e-8), f"{head} collapsed to zero probability"
        ce = -np.mean(np.log(np.clip(p, 1e-12, None)))
        assert abs(ce - np.log(n)) <= 0.35 * np.log(n) + 0.2, (
            f"{head} untrained loss {ce:.3f} far from ln({n})")


def test_duplicate_batch_rows_give_identical_outputs():
    m = mini_model(seed=2)
    rng = np.random.default_rng(3)
    one = make_input(rng, m.geometry, 1)
    two = NetInput(T.Tensor(np.repeat(one.full_frame.data, 2, axis=0)),
                   T.Tensor(np.repeat(one.crops.data, 2, axis=0)))
    out = forward(m, two)
    for head in HEAD_ORDER:
        np.testing.assert_array_equal(out.head(head)[0], out.head(head)[1])


def test_output_rows_sum_to_one_over_many_inputs():
    m = mini_model(seed=3)
    rng = np.random.default_rng(4)
    out = forward(m, make_input(rng, m.geometry, 100))
    for head in HEAD_ORDER:
        np.testing.assert_allclose(out.head(head).sum(axis=1), np.ones(100), atol=1e-6)


def test_forward_geometry_mismatch_rejected():
    m = mini_model()
    rng = np.random.default_rng(5)
    bad = make_input(rng, InputGeometry(frame_h=30, frame_w=32, crop_h=10, crop_w=15), 1)
    with pytest.raises(DimensionError):
        forward(m, bad)


def test_net_input_requires_normalized_values():
    with pytest.raises(DimensionError):
        NetInput(T.Tensor(np.full((1, 4, 6, 6), 3.0)),
                 T.Tensor(np.zeros((1, 3, 4, 5, 5))))


def _uniform_output(space, batch=1):
    return NetOutput(**{h: np.full((batch, space.head_width(h)),
                                   1.0 / space.head_width(h)) for h in HEAD_ORDER})


def test_loss_perfect_prediction_is_zero():
    space = LabelSpace(**PATROL)
    probs = {}
    label = StateActionLabel(x=3, y=1, z=0, theta=2, action=0, dx=5, dy=7, dz=0)
    for h in HEAD_ORDER:
        row = np.zeros((1, space.head_width(h)))
        row[0, getattr(label, h)] = 1.0
        probs[h] = row
    assert loss(NetOutput(**probs), label) == pytest.approx(0.0, abs=1e-6)


def test_loss_uniform_closed_form():
    space = LabelSpace(**PATROL)
    label = StateActionLabel(x=0, y=0, z=0, theta=0, action=0, dx=0, dy=0, dz=0)
    got = loss(_uniform_output(space), label)
    want = np.log(10) + np.log(3) + np.log(4) + np.log(4) + np.log(16) + np.log(16)
    assert got == pytest.approx(want, rel=1e-6)


def test_loss_scales_linearly_in_weights():
    space = LabelSpace(**PATROL)
    label = StateActionLabel(x=0, y=0, z=0, theta=0, action=0, dx=0, dy=0, dz=0)
    base = loss(_uniform_output(space), label)
    doubled = loss(_uniform_output(space), label, weights={h: 2.0 for h in HEAD_ORDER})
    assert doubled == pytest.approx(2.0 * base, rel=1e-9)


def test_loss_rejects_out_of_range_label():
    space = LabelSpace(**PATROL)
    label = StateActionLabel(x=10, y=0, z=0, theta=0, action=0, dx=0, dy=0, dz=0)
    with pytest.raises(LabelError):
        loss(_uniform_output(space), label)


def test_state_action_label_validation():
    space = LabelSpace(**PATROL)
    StateActionLabel(9, 2, 0, 3, 3, 15, 15, 0).validate(space)
    with pytest.raises(LabelError):
        StateActionLabel(9, 3, 0, 3, 3, 15, 15, 0).validate(space)


def test_argmax_prediction_and_tie_rule():
    space = LabelSpace(n_x=3, n_y=2, n_theta=2, n_action=2, n_dx=2, n_dy=2)
    probs = {h: np.full((1, space.head_width(h)), 1.0 / space.head_width(h))
             for h in HEAD_ORDER}
    probs["x"] = np.array([[0.1, 0.7, 0.2]])
    probs["y"] = np.array([[0.5, 0.5]])
    classes = argmax_classes(NetOutput(**probs))
    assert classes[0, HEAD_ORDER.index("x")] == 1
    assert classes[0, HEAD_ORDER.index("y")] == 0


def test_predict_invariant_to_monotone_logit_rescaling():
    m = mini_model(seed=7)
    rng = np.random.default_rng(8)
    inp = make_input(rng, m.geometry, 3)
    with T.no_grad():
        logits = m.forward_logits(inp)
    for head, t in logits.items():
        a = np.argmax(T.softmax(t).data, axis=1)
        b = np.argmax(T.softmax(T.scale(t, 2.5)).data, axis=1)
        np.testing.assert_array_equal(a, b)


def test_predict_returns_labels():
    m = mini_model(seed=9)
    rng = np.random.default_rng(10)
    labels = predict(m, make_input(rng, m.geometry, 2))
    assert len(labels) == 2
    for lab in labels:
        lab.validate(m.space)


def _logit_vector(m, inp, head):
    with T.no_grad():
        return m.forward_logits(inp)[head].data.copy()


def test_relative_pathway_feeds_coordinate_heads():
    m = mini_model(seed=11)
    rng = np.random.default_rng(12)
    inp = make_input(rng, m.geometry, 1)
    before = _logit_vector(m, inp, "x")
    # silence the delta-logit columns of the mix layer's input
    m.coord_mix.weight.data[256:, :] = 0.0
    after = _logit_vector(m, inp, "x")
    assert not np.allclose(before, after, atol=1e-7)


def test_coordinate_and_orientation_features_feed_action_head():
    m = mini_model(seed=13)
    rng = np.random.default_rng(14)
    inp = make_input(rng, m.geometry, 1)
    before = _logit_vector(m, inp, "action")
    lo = m.lstm_flat
    m.action_fc.weight.data[lo:lo + 256, :] = 0.0
    mid = _logit_vector(m, inp, "action")
    assert not np.allclose(before, mid, atol=1e-7)
    m.action_fc.weight.data[lo + 256:, :] = 0.0
    after = _logit_vector(m, inp, "action")
    assert not np.allclose(mid, after, atol=1e-7)


def test_trunk_features_feed_orientation_head():
    m = mini_model(seed=15)
    rng = np.random.default_rng(16)
    inp = make_input(rng, m.geometry, 1)
    before = _logit_vector(m, inp, "theta")
    m.orient_fc.weight.data[m.td_flat:, :] = 0.0
    after = _logit_vector(m, inp, "theta")
    assert not np.allclose(before, after, atol=1e-7)


def test_end_to_end_sampled_gradcheck_mini_geometry():
    space = LabelSpace(n_x=4, n_y=3, n_theta=4, n_action=4, n_dx=5, n_dy=5)
    m = mini_model(space=space, seed=3, dtype=np.float64)
    rng = np.random.default_rng(21)
    batch = 2
    ff = rng.uniform(0.0, 1.0, (batch, 4, 24, 32))
    cr = rng.uniform(0.0, 1.0, (batch, 3, 4, 10, 15))
    labels = np.stack([rng.integers(0, w, size=batch) for w in space.widths()], axis=1)

    def run_loss():
        inp = NetInput(T.Tensor(ff), T.Tensor(cr))
        return loss_from_logits(m, m.forward_logits(inp), labels)

    m.params.zero_grad()
    run_loss().backward()

    # a bias step shifts a whole channel and the shift is amplified through
    # the dense stack, so a coarse step crosses downstream ReLU kinks; 1e-7
    # stays on the differentiable branch while float64 keeps the quotient
    # exact to ~5e-9
    eps = 1e-7
    picker = np.random.default_rng(22)
    checked = 0
    for name, t in m.params.named_tensors():
        if name.startswith("z_head."):
            # width-1 head: dropped from the loss, so its gradient is
            # genuinely zero (the dz head still feeds the coordinate concat)
            assert t.grad is None
            continue
        assert t.grad is not None, f"no gradient reached {name}"
        flat = t.data.reshape(-1)
        for idx in picker.choice(flat.size, size=min(2, flat.size), replace=False):
            saved = flat[idx]
            flat[idx] = saved + eps
            with T.no_grad():
                hi = float(run_loss().data)
            flat[idx] = saved - eps
            with T.no_grad():
                lo = float(run_loss().data)
            flat[idx] = saved
            num = (hi - lo) / (2.0 * eps)
            ana = t.grad.reshape(-1)[idx]
            assert abs(ana - num) <= 1e-6 + 1e-3 * max(abs(ana), abs(num)), (
                f"{name}[{idx}]: analytic {ana:.6e} vs numeric {num:.6e}")
            checked += 1
    assert checked >= 50
