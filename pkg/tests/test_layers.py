"""Layer wrappers, time distribution, and the ConvLSTM cell."""

import numpy as np
import pytest

from gridsight import tensor as T
from gridsight.errors import DimensionError
from gridsight.layers import (Conv2D, ConvLSTMCell, ConvLSTMState, Dense, LayerParams,
                              MaxPool2D, glorot_uniform, run_sequence, td_apply)

from helpers import check_grad


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def test_layer_params_reject_duplicate_role():
    lp = LayerParams("conv1")
    lp.register("weight", T.Tensor(np.zeros(2)))
    with pytest.raises(ValueError):
        lp.register("weight", T.Tensor(np.zeros(2)))


def test_glorot_bounds():
    rng = np.random.default_rng(0)
    w = glorot_uniform(rng, (50, 40), 50, 40)
    limit = np.sqrt(6.0 / 90.0)
    assert np.all(np.abs(w) <= limit)
    assert w.std() > 0.1 * limit


def test_conv_layer_applies_relu_and_tracks_geometry():
    rng = np.random.default_rng(1)
    layer = Conv2D("c", 1, T.ConvSpec(2, 3, 3, 1, 1, "same"), rng)
    out = layer(T.Tensor(rng.standard_normal((1, 1, 5, 6)).astype(np.float32)))
    assert out.shape == (1, 2, 5, 6)
    assert np.all(out.data >= 0.0)
    assert layer.output_geometry(5, 6) == (5, 6)


def test_dense_activation_switch():
    rng = np.random.default_rng(2)
    x = np.array([[-2.0, 0.5, -1.0]], dtype=np.float32)
    head = Dense("head", 3, 3, rng, activation=None)
    head.weight.data = np.eye(3, dtype=np.float32)
    head.bias.data[:] = 0.0
    np.testing.assert_array_equal(head(T.Tensor(x)).data, x)
    hidden = Dense("hidden", 3, 3, rng, activation="relu")
    hidden.weight.data = np.eye(3, dtype=np.float32)
    hidden.bias.data[:] = 0.0
    np.testing.assert_array_equal(hidden(T.Tensor(x)).data,
                                  np.array([[0.0, 0.5, 0.0]], dtype=np.float32))


def test_td_apply_single_step_reduces_to_layer():
    rng = np.random.default_rng(3)
    layer = MaxPool2D(2, 2, 2, 2)
    x = rng.standard_normal((2, 1, 1, 4, 4)).astype(np.float32)
    out = td_apply(layer, T.Tensor(x))
    direct = layer(T.Tensor(x[:, 0]))
    assert out.shape == (2, 1, 1, 2, 2)
    np.testing.assert_array_equal(out.data[:, 0], direct.data)


def test_td_apply_shares_parameters_across_steps():
    rng = np.random.default_rng(4)
    layer = Conv2D("c", 1, T.ConvSpec(2, 3, 3, 2, 2, "same"), rng)
    frame = rng.standard_normal((2, 1, 1, 6, 6)).astype(np.float32)
    x = np.repeat(frame, 3, axis=1)
    out = td_apply(layer, T.Tensor(x))
    assert out.shape[1] == 3
    np.testing.assert_array_equal(out.data[:, 0], out.data[:, 1])
    np.testing.assert_array_equal(out.data[:, 1], out.data[:, 2])


def test_td_apply_propagates_layer_geometry_errors():
    from gridsight.errors import GeometryError
    layer = MaxPool2D(9, 9, 1, 1)
    with pytest.raises(GeometryError):
        td_apply(layer, T.Tensor(np.ones((1, 2, 1, 4, 4))))


def test_td_apply_shared_weight_gradient_sums_over_steps():
    rng = np.random.default_rng(5)
    spec = T.ConvSpec(1, 2, 2, 1, 1, "valid")

    def build(t):
        layer = Conv2D("c", 1, spec, rng, activation=None, dtype=np.float64)
        layer.weight, layer.bias = t["w"], t["b"]
        out = td_apply(layer, t["x"])
        return T.sum_all(out)

    check_grad(build, {
        "x": rng.standard_normal((1, 3, 1, 3, 4)),
        "w": rng.standard_normal((1, 1, 2, 2)),
        "b": rng.standard_normal(1),
    })


def test_convlstm_zero_everything_is_a_fixed_point():
    rng = np.random.default_rng(6)
    cell = ConvLSTMCell("r", 1, 2, 3, 3, 1, 1, rng)
    cell.bias.data[:] = 0.0
    x = T.Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32))
    state = cell.init_state(1, 4, 4)
    h, nxt = cell.step(x, state)
    assert np.array_equal(h.data, np.zeros((1, 2, 4, 4), dtype=np.float32))
    assert np.array_equal(nxt.cell.data, np.zeros((1, 2, 4, 4), dtype=np.float32))


def test_convlstm_default_forget_bias_is_one():
    rng = np.random.default_rng(7)
    cell = ConvLSTMCell("r", 1, 3, 3, 3, 1, 1, rng)
    b = cell.bias.data
    np.testing.assert_array_equal(b[3:6], np.ones(3, dtype=np.float32))
    np.testing.assert_array_equal(b[:3], np.zeros(3, dtype=np.float32))
    np.testing.assert_array_equal(b[6:], np.zeros(6, dtype=np.float32))


def test_convlstm_saturated_gates_carry_cell_state():
    rng = np.random.default_rng(8)
    cell = ConvLSTMCell("r", 1, 2, 3, 3, 1, 1, rng)
    k = cell.hidden_channels
    cell.input_kernel.data *= 0.1
    cell.state_kernel.data *= 0.1
    cell.bias.data[:k] = -10.0        # input gate shut
    cell.bias.data[k:2 * k] = 10.0    # forget gate open
    carried = rng.uniform(0.5, 1.5, size=(1, 2, 4, 4)).astype(np.float32)
    carried *= rng.choice([-1.0, 1.0], size=carried.shape).astype(np.float32)
    state = ConvLSTMState(hidden=T.Tensor(np.zeros_like(carried)),
                          cell=T.Tensor(carried.copy()))
    x = T.Tensor(rng.standard_normal((1, 1, 4, 4)).astype(np.float32))
    _, nxt = cell.step(x, state)
    rel = np.abs(nxt.cell.data - carried) / np.abs(carried)
    assert rel.max() < 1e-3


def test_convlstm_single_pixel_matches_scalar_lstm():
    rng = np.random.default_rng(9)
    cell = ConvLSTMCell("r", 1, 1, 1, 1, 1, 1, rng, dtype=np.float64)
    xs = rng.standard_normal(3)
    out = run_sequence(cell, T.Tensor(xs.reshape(1, 3, 1, 1, 1)))

    wx = cell.input_kernel.data[:, 0, 0, 0]
    wh = cell.state_kernel.data[:, 0, 0, 0]
    b = cell.bias.data
    h = c = 0.0
    for t in range(3):
        zi, zf, zg, zo = (wx * xs[t] + wh * h + b)
        c = _sigmoid(zf) * c + _sigmoid(zi) * np.tanh(zg)
        h = _sigmoid(zo) * np.tanh(c)
        assert out.data[0, t, 0, 0, 0] == pytest.approx(h, rel=1e-10)


def test_convlstm_state_geometry_mismatch():
    rng = np.random.default_rng(10)
    cell = ConvLSTMCell("r", 1, 2, 3, 3, 2, 2, rng)
    bad = ConvLSTMState(hidden=T.Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32)),
                        cell=T.Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32)))
    with pytest.raises(DimensionError):
        cell.step(T.Tensor(np.zeros((1, 1, 5, 7), dtype=np.float32)), bad)


def test_run_sequence_single_step_is_one_cell_step():
    rng = np.random.default_rng(11)
    cell = ConvLSTMCell("r", 2, 2, 3, 3, 2, 2, rng)
    x = rng.standard_normal((2, 1, 2, 5, 7)).astype(np.float32)
    seq = run_sequence(cell, T.Tensor(x))
    direct, _ = cell.step(T.Tensor(x[:, 0]), cell.init_state(2, 5, 7))
    np.testing.assert_array_equal(seq.data[:, 0], direct.data)


def test_run_sequence_hidden_geometry_is_time_invariant():
    rng = np.random.default_rng(12)
    cell = ConvLSTMCell("r", 1, 2, 3, 3, 2, 2, rng)
    x = rng.standard_normal((1, 3, 1, 5, 7)).astype(np.float32)
    out = run_sequence(cell, T.Tensor(x))
    assert out.shape == (1, 3, 2, 3, 4)


def test_run_sequence_is_order_sensitive():
    rng = np.random.default_rng(13)
    cell = ConvLSTMCell("r", 1, 2, 3, 3, 1, 1, rng)
    x = rng.standard_normal((1, 3, 1, 4, 4)).astype(np.float32)
    fwd = run_sequence(cell, T.Tensor(x))
    rev = run_sequence(cell, T.Tensor(x[:, ::-1].copy()))
    assert not np.allclose(fwd.data[:, -1], rev.data[:, -1], atol=1e-5)


def test_run_sequence_constant_input_saturates_monotonically():
    rng = np.random.default_rng(14)
    cell = ConvLSTMCell("r", 1, 2, 3, 3, 1, 1, rng)
    frame = rng.standard_normal((1, 1, 1, 4, 4)).astype(np.float32)
    x = np.repeat(frame, 3, axis=1)
    out = run_sequence(cell, T.Tensor(x))
    mags = [np.abs(out.data[0, t]).mean() for t in range(3)]
    assert mags[0] < mags[1] < mags[2]
    assert not np.allclose(out.data[0, 0], out.data[0, 2], atol=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_bptt_matches_finite_differences(seed):
    rng = np.random.default_rng(20 + seed)

    def build(t):
        cell = ConvLSTMCell("r", 1, 1, 3, 3, 2, 2,
                            np.random.default_rng(0), dtype=np.float64)
        cell.input_kernel = t["wx"]
        cell.state_kernel = t["wh"]
        cell.bias = t["b"]
        out = run_sequence(cell, t["x"])
        probe = np.random.default_rng(77).standard_normal(out.shape)
        return T.sum_all(T.mul(out, T.Tensor(probe)))

    check_grad(build, {
        "x": rng.standard_normal((1, 3, 1, 4, 5)) * 0.5,
        "wx": rng.standard_normal((4, 1, 3, 3)) * 0.5,
        "wh": rng.standard_normal((4, 1, 3, 3)) * 0.5,
        "b": rng.standard_normal(4) * 0.2,
    })
