import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcap import numkit as nk
from dcap.numkit import ShapeError, Tensor
from dcap.numkit.tensor import make_result
from dcap.selftest import primitive_cases

SEEDS = range(5)


def _p(rng, *shape):
    return nk.parameter(rng.normal(size=shape))


# ---- forward examples --------------------------------------------------------

def test_relu_definition():
    assert np.array_equal(nk.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_gap_of_constant_map():
    x = Tensor(np.full((1, 3, 5, 4), 2.5))
    assert np.allclose(nk.global_avg_pool(x).data, 2.5)


def test_conv_identity_center_kernel(f64):
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 6, 5, 3)))
    w = np.zeros((3, 3, 3, 3))
    w[1, 1] = np.eye(3)
    assert np.array_equal(nk.conv2d(x, Tensor(w), pad=1).data, x.data)


def test_conv_matches_direct_loop(f64):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 5, 5, 2))
    w = rng.normal(size=(3, 3, 2, 4))
    b = rng.normal(size=4)
    out = nk.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 3, 3, 4))
    for i in range(3):
        for j in range(3):
            patch = xp[0, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
            ref[0, i, j] = np.einsum("hwc,hwco->o", patch, w) + b
    assert np.allclose(out, ref)


def test_max_pool_floor_drops_trailing_row():
    x = Tensor(np.arange(25, dtype=np.float64).reshape(1, 5, 5, 1))
    out = nk.max_pool2d(x).data[0, :, :, 0]
    assert np.array_equal(out, [[6, 8], [16, 18]])


def test_softmax_is_probability():
    rng = np.random.default_rng(0)
    p = nk.softmax(rng.normal(size=(7, 5)) * 30, axis=-1)
    assert np.all(p >= 0) and np.allclose(p.sum(-1), 1, atol=1e-6)


def test_batchnorm_eval_identity_stats_is_affine(f64):
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 3, 3, 4)))
    g, b = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    out = nk.batch_norm(x, g, b, np.zeros(4), np.ones(4), training=False, eps=0.0)
    assert np.allclose(out.data, x.data * g.data + b.data)


def test_batchnorm_train_normalizes_and_updates_buffers(f64):
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(3.0, 2.0, size=(8, 4, 4, 3)))
    rm, rv = np.zeros(3), np.ones(3)
    out = nk.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, training=True)
    flat = out.data.reshape(-1, 3)
    assert np.allclose(flat.mean(0), 0, atol=1e-10) and np.allclose(flat.var(0), 1, atol=1e-3)
    m = 8 * 16
    xm = x.data.reshape(-1, 3)
    assert np.allclose(rm, 0.1 * xm.mean(0))
    assert np.allclose(rv, 0.9 + 0.1 * xm.var(0) * m / (m - 1))


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 8, 8, 3)).astype(np.float32)
    w = rng.normal(size=(3, 3, 3, 5)).astype(np.float32)
    a = nk.relu(nk.conv2d(Tensor(x), Tensor(w), pad=1)).data
    b = nk.relu(nk.conv2d(Tensor(x), Tensor(w), pad=1)).data
    assert a.tobytes() == b.tobytes()


# ---- shape errors --------------------------------------------------------------

def test_shape_error_names_primitive():
    with pytest.raises(ShapeError, match="matmul"):
        nk.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError, match="add") as info:
        nk.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    assert (3,) in info.value.shapes and (4,) in info.value.shapes
    with pytest.raises(ShapeError, match="conv2d"):
        nk.conv2d(Tensor(np.ones((1, 4, 4, 2))), Tensor(np.ones((3, 3, 3, 1))))


@pytest.mark.filterwarnings("ignore:divide by zero")
def test_debug_finite_mode_raises():
    with nk.debug_finite(), pytest.raises(nk.NonFiniteError):
        nk.log(Tensor([0.0, 1.0]))


# ---- backward examples ---------------------------------------------------------

def test_backward_square():
    w = nk.parameter([1.0, 2.0])
    nk.backward((w * w).sum())
    assert np.array_equal(w.grad, [2.0, 4.0])


def test_nll_gradient_at_equal_logits():
    # oracle: softmax(0, 0) - onehot(0) evaluated by hand with math.exp
    p0 = math.exp(0) / (math.exp(0) + math.exp(0))
    expected = [p0 - 1.0, 1.0 - p0]
    z = nk.parameter([[0.0, 0.0]])
    nk.backward(-nk.log_softmax(z, axis=-1)[0, 0])
    assert np.allclose(z.grad[0], expected)
    assert np.allclose(expected, [-0.5, 0.5])


def test_detached_branch_contributes_nothing():
    w = nk.parameter([1.0, 2.0])
    u = nk.parameter([3.0, 4.0])
    frozen = w.detach()
    nk.backward((frozen * u).sum() + (w * 2.0).sum(), [w, u])
    assert np.array_equal(w.grad, [2.0, 2.0])
    assert np.array_equal(u.grad, [1.0, 2.0])


def test_unreached_parameter_gets_zero_grad():
    w, unused = nk.parameter([1.0]), nk.parameter([5.0, 6.0])
    nk.backward((w * 3.0).sum(), [w, unused])
    assert np.array_equal(unused.grad, [0.0, 0.0])


def test_non_scalar_loss_rejected():
    with pytest.raises(ShapeError, match="backward"):
        nk.backward(nk.parameter([1.0, 2.0]) * 2.0)


def test_graph_is_topologically_ordered():
    a = nk.parameter([1.0])
    b = a * 2.0
    c = b + a
    d = c * b
    order = nk.topological_order(d)
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for parent in node._prev:
            if parent.requires_grad:
                assert pos[id(parent)] < pos[id(node)]


def test_shared_subexpression_accumulates():
    x = nk.parameter([3.0])
    y = x * x
    nk.backward((y + y).sum())
    assert np.allclose(x.grad, [12.0])


# ---- finite-difference checks of every primitive ----------------------------------

@pytest.mark.parametrize("seed", SEEDS)
def test_every_primitive_passes_grad_check(seed, f64):
    cases = primitive_cases(np.random.default_rng(seed))
    assert len(cases) == 27
    for name, (fn, params) in cases.items():
        err = nk.grad_check(fn, params, eps=1e-4, seed=seed)
        assert err < 1e-4, f"{name}: {err:.2e}"


def test_grad_check_quadratic_is_exact(f64):
    w = nk.parameter(np.array([0.3, -1.2, 2.0]))
    err = nk.grad_check(lambda: (w * w).sum() * 0.5 + (w * 3.0).sum(), [w], eps=1e-3)
    assert err < 1e-8


def test_grad_check_skips_kink_coordinate(f64):
    w = nk.parameter(np.array([0.0, 1.0]))  # first coordinate sits on the relu kink
    rep = nk.grad_check_report(lambda: nk.relu(w).sum(), [w], eps=1e-3)
    assert rep.skipped == 1 and rep.checked == 1 and rep.max_error < 1e-10


def test_grad_check_requires_float64_and_valid_eps():
    w = nk.parameter(np.array([1.0], dtype=np.float32))
    with pytest.raises(nk.GradCheckError):
        nk.grad_check(lambda: (w * w).sum(), [w])
    with nk.precision(np.float64):
        v = nk.parameter([1.0])
        with pytest.raises(ValueError):
            nk.grad_check(lambda: (v * v).sum(), [v], eps=0.1)


@pytest.mark.filterwarnings("ignore:divide by zero")
def test_grad_check_rejects_non_finite_loss(f64):
    w = nk.parameter([1.0])
    with pytest.raises(nk.GradCheckError):
        nk.grad_check(lambda: nk.log(w * 0.0).sum(), [w])


def test_grad_check_detects_wrong_gradient(f64):
    w = nk.parameter([0.5, 1.5])

    def broken():
        # forward exp(w).sum() but backward claims a gradient of ones
        value = np.asarray(np.exp(w.data).sum())
        return make_result(value, (w,), lambda g: (g * np.ones(2),), "broken")

    assert nk.grad_check(broken, [w], eps=1e-3) > 0.1


# ---- optimizer -------------------------------------------------------------------

def test_sgd_plain_step():
    w = nk.parameter([1.0])
    w.grad = np.array([0.5])
    nk.SGD([w], lr=1.0, momentum=0.0, nesterov=False, weight_decay=0.0).step()
    assert w.data[0] == pytest.approx(0.5)


def test_sgd_decay_only_step():
    w = nk.parameter([1.0])
    w.grad = np.array([0.0])
    nk.SGD([w], lr=1.0, momentum=0.0, weight_decay=0.0005).step()
    assert w.data[0] == pytest.approx(0.9995)


def _unrolled(nesterov: bool, steps=2, g=1.0, lr=0.1, mu=0.9):
    # hand-written oracle, independent of the SGD class
    w, v = 0.0, 0.0
    for _ in range(steps):
        v = mu * v + g
        w -= lr * ((g + mu * v) if nesterov else v)
    return w


def test_sgd_nesterov_two_steps():
    assert _unrolled(True) == pytest.approx(-0.461)
    w = nk.parameter([0.0])
    opt = nk.SGD([w], lr=0.1, momentum=0.9, nesterov=True, weight_decay=0.0)
    for _ in range(2):
        w.grad = np.array([1.0])
        opt.step()
    assert w.data[0] == pytest.approx(-0.461)


def test_sgd_classical_momentum_two_steps():
    assert _unrolled(False) == pytest.approx(-0.29)
    w = nk.parameter([0.0])
    opt = nk.SGD([w], lr=0.1, momentum=0.9, nesterov=False, weight_decay=0.0)
    for _ in range(2):
        w.grad = np.array([1.0])
        opt.step()
    assert w.data[0] == pytest.approx(-0.29)


def test_functional_sgd_matches_class():
    rng = np.random.default_rng(0)
    a, b = nk.parameter(rng.normal(size=4)), nk.parameter(rng.normal(size=4))
    b.data[:] = a.data
    opt = nk.SGD([a], lr=0.05)
    vel = [np.zeros(4)]
    for _ in range(3):
        g = rng.normal(size=4)
        a.grad = g.copy()
        opt.step()
        nk.sgd_step([b], [g], vel, lr=0.05)
    assert np.allclose(a.data, b.data)


def test_sgd_shape_checks():
    w = nk.parameter([1.0, 2.0])
    with pytest.raises(ShapeError):
        nk.sgd_step([w], [np.ones(3)], [np.zeros(2)], lr=0.1)
    with pytest.raises(ValueError):
        nk.ParamGroup([w], lr=0.0)


def test_multistep_factor():
    assert nk.multistep_factor(0, [10, 20]) == 1.0
    assert nk.multistep_factor(10, [10, 20]) == pytest.approx(0.1)
    assert nk.multistep_factor(25, [10, 20]) == pytest.approx(0.01)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_property(values):
    p = nk.softmax(np.array(values), axis=-1)
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_broadcast_grad_has_parameter_shape(seed):
    rng = np.random.default_rng(seed)
    with nk.precision(np.float64):
        a = nk.parameter(rng.normal(size=(1, 3)))
        b = nk.parameter(rng.normal(size=(4, 1)))
        nk.backward((a * b).sum())
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    assert np.allclose(a.grad, b.data.sum() * np.ones((1, 3)))
