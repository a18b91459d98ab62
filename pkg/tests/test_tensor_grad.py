"""Reverse-mode gradients against central finite differences (64-bit)."""

import numpy as np
import pytest

from gridsight import tensor as T
from gridsight.errors import StateError

from helpers import check_grad, well_separated


def _scalarize(t, probe):
    """Fixed random linear functional so non-scalar outputs become a loss."""
    return T.sum_all(T.mul(t, T.Tensor(probe)))


def test_linear_form_gradient_is_the_fixed_factor():
    rng = np.random.default_rng(0)
    xval = rng.standard_normal((3, 4))
    w = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    loss = T.sum_all(T.mul(w, T.Tensor(xval)))
    loss.backward()
    np.testing.assert_allclose(w.grad, xval, rtol=1e-12)


def test_fused_softmax_ce_gradient_is_probs_minus_onehot():
    rng = np.random.default_rng(1)
    logits_val = rng.standard_normal((4, 6))
    targets = np.array([0, 5, 2, 2])
    logits = T.Tensor(logits_val, requires_grad=True)
    loss = T.softmax_cross_entropy(logits, targets)
    loss.backward()
    probs = T.softmax(T.Tensor(logits_val)).data
    onehot = np.zeros_like(probs)
    onehot[np.arange(4), targets] = 1.0
    np.testing.assert_allclose(logits.grad, (probs - onehot) / 4.0, rtol=1e-10, atol=1e-12)


def test_fanout_accumulates_additively():
    x = T.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    loss = T.sum_all(T.add(x, x))
    loss.backward()
    np.testing.assert_allclose(x.grad, [2.0, 2.0])


def test_backward_before_forward_is_an_error():
    leaf = T.Tensor(np.array(3.0), requires_grad=True)
    with pytest.raises(StateError):
        leaf.backward()


def test_backward_requires_scalar_loss():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    y = T.add(x, x)
    with pytest.raises(StateError):
        y.backward()


def test_no_grad_suppresses_tape():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    with T.no_grad():
        y = T.sum_all(T.relu(x))
    assert y._parents == ()
    with pytest.raises(StateError):
        y.backward()


def test_maxpool_gradient_lands_only_on_argmax():
    rng = np.random.default_rng(5)
    x = T.Tensor(well_separated(rng, (1, 2, 6, 6)), requires_grad=True)
    out, argmax = T.maxpool2d(x, 2, 2, 2, 2)
    T.sum_all(out).backward()
    nonzero = np.flatnonzero(x.grad[0, 0].reshape(-1))
    assert set(nonzero) == set(argmax[0, 0].reshape(-1).tolist())
    assert np.count_nonzero(x.grad) == argmax.size


@pytest.mark.parametrize("seed", range(20))
def test_every_op_matches_finite_differences(seed):
    rng = np.random.default_rng(1000 + seed)

    # conv2d, valid and same, non-unit stride
    spec = T.ConvSpec(3, 2, 3, stride_h=2, stride_w=1,
                      padding="same" if seed % 2 else "valid")
    check_grad(
        lambda t: _conv_probe(t, spec),
        {"x": rng.standard_normal((2, 2, 5, 6)),
         "w": rng.standard_normal((3, 2, 2, 3)),
         "b": rng.standard_normal(3)})

    # maxpool over well-separated values
    check_grad(
        lambda t: T.sum_all(T.mul(T.maxpool2d(t["x"], 2, 2, 2, 2)[0],
                                  T.Tensor(np.ones((1, 2, 2, 3))))),
        {"x": well_separated(rng, (1, 2, 5, 6))})

    # dense
    dprobe = rng.standard_normal((3, 4))
    check_grad(
        lambda t: _scalarize(T.dense(t["x"], t["w"], t["b"]), dprobe),
        {"x": rng.standard_normal((3, 5)),
         "w": rng.standard_normal((5, 4)),
         "b": rng.standard_normal(4)})

    # softmax
    sprobe = rng.standard_normal((2, 5))
    check_grad(lambda t: _scalarize(T.softmax(t["x"]), sprobe),
               {"x": rng.standard_normal((2, 5))})

    # cross-entropy on well-scaled positive inputs
    targets = rng.integers(0, 4, size=3)
    check_grad(lambda t: T.cross_entropy(t["p"], targets),
               {"p": rng.uniform(0.1, 1.0, size=(3, 4))})

    # fused softmax + cross-entropy
    ftargets = rng.integers(0, 5, size=2)
    check_grad(lambda t: T.softmax_cross_entropy(t["x"], ftargets),
               {"x": rng.standard_normal((2, 5))})

    # concat + slice
    cprobe = rng.standard_normal((2, 3))
    check_grad(
        lambda t: _scalarize(T.slice_axis(T.concat([t["a"], t["b"]], 1), 1, 1, 4), cprobe),
        {"a": rng.standard_normal((2, 3)),
         "b": rng.standard_normal((2, 2))})

    # elementwise chain: sigmoid, tanh, relu, add, mul, scale, reshape
    eprobe = rng.standard_normal(12)
    check_grad(
        lambda t: _scalarize(
            T.reshape(T.tanh(T.add(T.sigmoid(t["x"]),
                                   T.scale(T.relu(t["y"]), 0.5))), (12,)),
            eprobe),
        {"x": rng.standard_normal((3, 4)),
         "y": well_separated(rng, (3, 4))})


def _conv_probe(t, spec):
    out = T.conv2d(t["x"], t["w"], t["b"], spec)
    rng = np.random.default_rng(99)
    return _scalarize(out, rng.standard_normal(out.shape))


def test_deep_composition_gradcheck():
    """conv -> pool -> dense -> fused loss, checked end to end."""
    rng = np.random.default_rng(42)
    spec = T.ConvSpec(2, 3, 3, stride_h=1, stride_w=1, padding="same")
    targets = np.array([1, 0])

    def build(t):
        h = T.relu(T.conv2d(t["x"], t["w1"], t["b1"], spec))
        p, _ = T.maxpool2d(h, 2, 2, 2, 2)
        flat = T.flatten_batch(p)
        logits = T.dense(flat, t["w2"], t["b2"])
        return T.softmax_cross_entropy(logits, targets)

    check_grad(build, {
        "x": well_separated(rng, (2, 1, 4, 4)) * 0.3,
        "w1": rng.standard_normal((2, 1, 3, 3)) * 0.5,
        "b1": rng.standard_normal(2) * 0.1,
        "w2": rng.standard_normal((8, 3)) * 0.5,
        "b2": rng.standard_normal(3) * 0.1,
    })
