import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedmkgc import numcore as nc
from fedmkgc.numcore import Param, Tensor, grad_check

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def _param(rng, *shape):
    return Param(rng.normal(size=shape))


@pytest.mark.parametrize(
    "name, fn",
    [
        ("add_mul", lambda p, q: ((p * q) + p).sum()),
        ("div", lambda p, q: (p / (q * q + 1.0)).sum()),
        ("pow", lambda p, q: ((p * p + 1.0) ** 1.5).sum()),
        ("exp_log", lambda p, q: nc.log(nc.exp(p) + 1.0).sum()),
        ("sqrt", lambda p, q: nc.sqrt(p * p + 0.5).sum()),
        ("trig", lambda p, q: (nc.sin(p) * nc.cos(q)).sum()),
        ("sigmoid", lambda p, q: nc.sigmoid(p * q).sum()),
        ("matmul", lambda p, q: (p @ q.T).sum()),
        ("mean_axis", lambda p, q: (p.mean(axis=0) * q.mean(axis=0)).sum()),
        ("reshape_transpose", lambda p, q: (p.reshape(-1) * q.T.reshape(-1)).sum()),
        ("concat_split", lambda p, q: sum(t.sum() * (i + 1) for i, t in enumerate(nc.split(nc.concat([p, q], 1), 2, 1)))),
        ("gather", lambda p, q: (nc.gather_rows(p, np.array([0, 2, 0])) * 2.0).sum()),
        ("put_rows", lambda p, q: (nc.put_rows(p, np.array([1]), q[:1] * 3.0) * p).sum()),
        ("log_softmax", lambda p, q: (nc.log_softmax(p, axis=1) * q).sum()),
        ("xent", lambda p, q: nc.softmax_xent(p, np.array([0, 2, 1]))),
        ("kl_student", lambda p, q: nc.kl_div(q, p)),
    ],
)
def test_ops_grad_check(name, fn):
    rng = np.random.default_rng(1)
    p, q = _param(rng, 3, 3), _param(rng, 3, 3)
    assert grad_check(lambda: fn(p, q), p) < 1e-4
    assert grad_check(lambda: fn(p, q), q) < 1e-4


def test_relu_grad_away_from_kink():
    p = Param(np.array([[-1.0, 0.5], [2.0, -0.3]]))
    assert grad_check(lambda: (nc.relu(p) * p).sum(), p) < 1e-6


def test_broadcast_grad_reduces_to_shape():
    p = Param(np.ones((1, 3)))
    x = Tensor(np.arange(6.0).reshape(2, 3))
    (x * p).sum().backward()
    np.testing.assert_allclose(p.grad, [[3.0, 5.0, 7.0]])


def test_shared_node_accumulates():
    p = Param(np.array([2.0]))
    y = p * p
    (y + y).sum().backward()
    np.testing.assert_allclose(p.grad, [8.0])


def test_xent_uniform_is_log_k():
    assert float(nc.softmax_xent(np.zeros(5), 3).data) == pytest.approx(np.log(5), abs=1e-12)


def test_xent_target_out_of_range():
    with pytest.raises(IndexError):
        nc.softmax_xent(np.zeros(4), 4)


def test_xent_empty_logits():
    with pytest.raises(nc.DimensionError):
        nc.softmax_xent(np.zeros((1, 0)), 0)


def test_xent_large_logits_stable():
    out = nc.softmax_xent(np.array([[1e4, 0.0, -1e4]]), [0])
    assert np.isfinite(out.data) and float(out.data) == pytest.approx(0.0, abs=1e-12)


def test_kl_identical_is_zero_and_teacher_detached():
    t = Param(np.array([[0.3, -1.0, 2.0]]))
    s = Param(np.array([[0.3, -1.0, 2.0]]))
    loss = nc.kl_div(t, s)
    assert float(loss.data) == 0.0
    loss.backward()
    assert np.all(t.grad == 0)


def test_grad_check_holds_detached_teacher_fixed():
    t = Param(np.array([[0.1, 0.5, -0.2]]))
    s = Param(np.array([[0.3, -0.4, 0.0]]))
    # the teacher gets no tape gradient, and finite differences agree
    assert grad_check(lambda: nc.kl_div(t, s), t) == 0.0
    assert grad_check(lambda: nc.kl_div(t, s) + nc.kl_div(s, t), s) < 1e-6


def test_grad_check_treats_detach_as_constant():
    x = Param(np.array([0.5, -1.0, 2.0]))
    # d/dx of x * stop(x) is stop(x), not 2x
    assert grad_check(lambda: (x * x.detach()).sum(), x) < 1e-8
    x.zero_grad()
    (x * x.detach()).sum().backward()
    np.testing.assert_array_equal(x.grad, x.data)


def test_kl_two_candidate_hand_value():
    p = np.array([0.7, 0.3])
    q = np.array([0.4, 0.6])
    got = float(nc.kl_div(np.log(p), np.log(q)).data)
    assert got == pytest.approx(float(np.sum(p * np.log(p / q))), abs=1e-12)


def test_matmul_shape_error():
    with pytest.raises(nc.DimensionError):
        nc.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_param_assign_shape_checked():
    p = Param(np.zeros((2, 2)))
    with pytest.raises(nc.DimensionError):
        p.assign(np.zeros(3))


def test_adam_first_step_moves_by_lr():
    p = Param(np.array([1.0, -1.0]))
    p.grad = np.array([0.5, -2.0])
    nc.adam_step(p, lr=0.1)
    np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-7)


def test_adam_minimises_quadratic():
    p = Param(np.array([3.0, -2.0]))
    opt = nc.Adam([p], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        ((p - 1.0) * (p - 1.0)).sum().backward()
        opt.step()
    np.testing.assert_allclose(p.data, [1.0, 1.0], atol=1e-3)


def test_grad_check_flags_wrong_gradient():
    p = Param(np.array([1.0, 2.0]))

    def bad():
        return nc._make((p.data**2).sum(), (p,), lambda g: (g * p.data,))  # should be 2 * p

    assert grad_check(bad, p) > 0.1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_rejects_nonfinite():
    p = Param(np.array([0.0]))
    with pytest.raises(nc.NumericError):
        grad_check(lambda: nc.log(p * 0.0).sum(), p)


def test_substreams_independent_and_repeatable():
    a1 = nc.substream(7, "train").random(4)
    a2 = nc.substream(7, "train").random(4)
    b = nc.substream(7, "eval").random(4)
    np.testing.assert_array_equal(a1, a2)
    assert not np.allclose(a1, b)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 5), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = nc.softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(out, nc.softmax_np(x, axis=1), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_kl_non_negative(a, b):
    assert float(nc.kl_div(a, b).data) >= -1e-12


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (2, 4), elements=finite))
def test_matmul_grad_matches_closed_form(a, b):
    pa, pb = Param(a), Param(b)
    (pa @ pb).sum().backward()
    np.testing.assert_allclose(pa.grad, np.ones((3, 4)) @ b.T, atol=1e-12)
    np.testing.assert_allclose(pb.grad, a.T @ np.ones((3, 4)), atol=1e-12)
