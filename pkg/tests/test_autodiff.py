import math

import numpy as np
import pytest

from gradcheck import OP_TOL, check_op
from oracles import conv2d_loops, cross_entropy_mp
from rldnet import functional as F
from rldnet.autodiff import Tensor
from rldnet.nn import BatchNorm, LayerSpec, SgdState, build_layer, sgd_step
from rldnet.rld import horizontal_pool


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# conv2d ---------------------------------------------------------------------


def test_conv_identity_1x1(rng):
    x = rng.standard_normal((2, 3, 5, 4))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_ones_sum():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loops(rng, stride, padding):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((4, 2, 3, 3))
    b = rng.standard_normal(4)
    got = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
    np.testing.assert_allclose(got, conv2d_loops(x, w, b, stride, padding), atol=1e-12, rtol=0)


def test_conv_output_shape_formula(rng):
    for h, w, k, s, p in [(7, 6, 3, 2, 1), (8, 8, 5, 1, 2), (9, 4, 1, 3, 0)]:
        out = F.conv2d(Tensor(rng.standard_normal((1, 2, h, w))), Tensor(rng.standard_normal((3, 2, k, k))), None, s, p)
        assert out.shape[2:] == ((h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)


def test_conv_shape_errors(rng):
    with pytest.raises(ValueError, match="channel"):
        F.conv2d(Tensor(rng.standard_normal((1, 2, 5, 5))), Tensor(rng.standard_normal((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="height"):
        F.conv2d(Tensor(rng.standard_normal((1, 1, 2, 5))), Tensor(rng.standard_normal((1, 1, 3, 3))))


# softmax cross-entropy ---------------------------------------------------------


def test_ce_uniform():
    loss = F.softmax_cross_entropy(Tensor([0.0, 0.0]), [1, 0])
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_ce_saturated_no_overflow():
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        loss = F.softmax_cross_entropy(Tensor([1000.0, 0.0]), [1, 0])
    assert loss.item() == pytest.approx(0.0, abs=1e-300)


def test_ce_extended_precision(rng):
    for _ in range(5):
        z = rng.standard_normal(5) * 4
        k = int(rng.integers(5))
        y = np.eye(5)[k]
        assert F.softmax_cross_entropy(Tensor(z), y).item() == pytest.approx(cross_entropy_mp(z, k), abs=1e-10)


def test_ce_rejects_non_one_hot():
    with pytest.raises(ValueError, match="one-hot"):
        F.softmax_cross_entropy(Tensor([0.0, 1.0, 2.0]), [0.5, 0.5, 0.0])
    with pytest.raises(ValueError, match="one-hot"):
        F.softmax_cross_entropy(Tensor([0.0, 1.0]), [1, 1])


def test_ce_positive_unless_certain(rng):
    z = rng.standard_normal((4, 6))
    assert F.cross_entropy(Tensor(z), [0, 1, 2, 3]).item() > 0


def test_softmax_properties(rng):
    for _ in range(20):
        p = F.softmax(rng.standard_normal(7) * 5)
        assert abs(p.sum() - 1) < 1e-12
        assert np.all((p > 0) & (p < 1))


# backward -------------------------------------------------------------------


def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_square(rng):
    data = rng.standard_normal(6)
    x = Tensor(data, requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * data)


def test_backward_accumulates_and_resets(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    y = (x * x).sum()
    y.backward()
    y.backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)
    x.zero_grad()
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_shared_subexpression(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3 * x.data**2)


def test_backward_rejects_non_scalar(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * x).backward()


# finite differences, one per layer kind ------------------------------------------


def _dropout_fixed(x):
    return F.dropout(x, 0.3, True, np.random.default_rng(7))


def _bn_train(x, g, b):
    return F.batch_norm(x, g, b, np.zeros(x.shape[1]), np.ones(x.shape[1]), True)


def _bn_eval(x, g, b):
    return F.batch_norm(x, g, b, np.full(x.shape[1], 0.3), np.full(x.shape[1], 2.0), False)


GRAD_CASES = {
    "conv2d": (lambda x, w, b: F.conv2d(x, w, b, 2, 1), [(2, 3, 7, 6), (4, 3, 3, 3), (4,)]),
    "conv2d_nobias": (lambda x, w: F.conv2d(x, w, None, 1, 0), [(1, 2, 5, 4), (3, 2, 2, 2)]),
    "relu": (F.relu, [(3, 4, 5)]),
    "batchnorm2d_train": (_bn_train, [(4, 3, 2, 3), (3,), (3,)]),
    "batchnorm1d_train": (_bn_train, [(6, 5), (5,), (5,)]),
    "batchnorm_eval": (_bn_eval, [(4, 3, 2, 2), (3,), (3,)]),
    "maxpool2d": (lambda x: F.max_pool2d(x, 2, 2), [(2, 2, 4, 6)]),
    "maxpool2d_overlap": (lambda x: F.max_pool2d(x, 3, 2, 1), [(1, 2, 5, 5)]),
    "gap": (F.global_avg_pool, [(2, 3, 4, 5)]),
    "hp": (horizontal_pool, [(2, 3, 4, 5)]),
    "fc": (F.linear, [(4, 6), (3, 6), (3,)]),
    "dropout": (_dropout_fixed, [(5, 7)]),
    "flatten": (F.flatten, [(2, 3, 2, 2)]),
    "softmax_ce": (lambda z: F.cross_entropy(z, [0, 2, 1, 2]), [(4, 3)]),
    "matmul": (lambda a, b: a @ b, [(3, 4), (4, 2)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_layer_gradients_match_finite_differences(name):
    fn, shapes = GRAD_CASES[name]
    for point in range(10):
        rng = np.random.default_rng(100 + point)
        arrays = [rng.standard_normal(s) for s in shapes]
        err = check_op(fn, *arrays, seed=point)
        assert err < OP_TOL, f"{name} at point {point}: relative error {err:.2e}"


# batch norm -------------------------------------------------------------------


def test_batchnorm_train_statistics(rng):
    bn = BatchNorm(4, dtype=np.float64)
    x = Tensor(rng.standard_normal((16, 4, 3, 3)) * 3 + 5)
    out = bn(x).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)


def test_batchnorm_running_stats_and_eval(rng):
    bn = BatchNorm(2, dtype=np.float64)
    x = rng.standard_normal((8, 2)) * 2 + 1
    bn(Tensor(x))
    np.testing.assert_allclose(bn._buffers["running_mean"], 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(bn._buffers["running_var"], 0.9 + 0.1 * x.var(axis=0, ddof=1))
    bn.eval()
    rm, rv = bn._buffers["running_mean"], bn._buffers["running_var"]
    np.testing.assert_allclose(bn(Tensor(x)).data, (x - rm) / np.sqrt(rv + 1e-5))


# sgd ----------------------------------------------------------------------------


def _param(value, grad):
    p = Tensor(np.array([value], dtype=np.float64), requires_grad=True)
    p.grad = None if grad is None else np.array([grad], dtype=np.float64)
    return p


def test_sgd_single_step():
    p = _param(1.0, 1.0)
    sgd_step({"p": p}, SgdState(0.1, momentum=0.0))
    assert p.data[0] == pytest.approx(0.9)
    assert p.grad is None


def test_sgd_momentum_two_steps():
    p = _param(0.0, 1.0)
    state = SgdState(0.1, momentum=0.9)
    sgd_step({"p": p}, state)
    p.grad = np.array([1.0])
    sgd_step({"p": p}, state)
    assert p.data[0] == pytest.approx(-0.29, abs=1e-12)
    assert state.velocity["p"].shape == p.shape


def test_sgd_zero_grad_fixed_point():
    p = _param(3.0, 0.0)
    sgd_step({"p": p}, SgdState(0.1, momentum=0.0))
    assert p.data[0] == 3.0


def test_sgd_missing_grad_is_error():
    with pytest.raises(RuntimeError, match="no gradient"):
        sgd_step({"w": _param(1.0, None)}, SgdState(0.1))


# dropout --------------------------------------------------------------------------


def test_dropout_p0_identity(rng):
    x = Tensor(rng.standard_normal(10))
    for training in (True, False):
        np.testing.assert_array_equal(F.dropout(x, 0.0, training, rng).data, x.data)


def test_dropout_eval_identity(rng):
    x = Tensor(rng.standard_normal(10))
    np.testing.assert_array_equal(F.dropout(x, 0.5, False, rng).data, x.data)


def test_dropout_preserves_mean():
    out = F.dropout(Tensor(np.ones(10**6)), 0.5, True, np.random.default_rng(0)).data
    assert 0.99 <= out.mean() <= 1.01
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_dropout_deterministic_given_seed():
    spec = LayerSpec("dropout", p=0.5)
    x = Tensor(np.ones((4, 8)))
    a = build_layer(spec, np.random.default_rng(3))(x).data
    b = build_layer(spec, np.random.default_rng(3))(x).data
    np.testing.assert_array_equal(a, b)


def test_dropout_probability_validated():
    with pytest.raises(ValueError):
        LayerSpec("dropout", p=1.0)


def test_layer_spec_validation():
    with pytest.raises(ValueError, match="positive"):
        LayerSpec.conv(3, 0)
    with pytest.raises(ValueError, match="unknown"):
        LayerSpec("attention")
