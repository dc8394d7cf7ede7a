import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from melada import autodiff as ad
from oracles import central_difference, rel_error
from graphs import build, check_graph


def test_forward_eval_examples():
    out, _ = ad.forward_eval(lambda x, y: x * y, {"x": 2.0, "y": 3.0})
    assert out.item() == 6.0
    out, _ = ad.forward_eval(lambda x: ad.tanh(x), {"x": 0.0})
    assert out.item() == 0.0
    out, _ = ad.forward_eval(lambda x: ad.grl(x), {"x": 3.7})
    assert out.item() == 3.7


def test_shape_error_names_both_nodes():
    with pytest.raises(ad.ShapeError) as err:
        ad.forward_eval(lambda a, b: a @ b, {"a": np.ones((2, 3)), "b": np.ones((4, 5))})
    msg = str(err.value)
    assert "'a'" in msg and "'b'" in msg
    with pytest.raises(ad.ShapeError):
        ad.forward_eval(lambda a, b: a + b, {"a": np.ones(3), "b": np.ones(4)})


def test_non_finite_is_an_error():
    with pytest.raises(ad.NonFiniteError):
        ad.forward_eval(lambda x: ad.log(x), {"x": 0.0})
    with pytest.raises(ad.NonFiniteError):
        ad.forward_eval(lambda x: x / 0.0, {"x": 1.0})


def test_backward_examples():
    x, y = ad.leaf(2.0), ad.leaf(3.0)
    gx, gy = ad.grad(x * y, [x, y])
    assert (gx.item(), gy.item()) == (3.0, 2.0)

    (g,) = ad.grad(ad.grl(x) + x, [x])
    assert g.item() == 0.0

    (g,) = ad.grad(x * x * x, [x], record=True)
    (h,) = ad.grad(g, [x])
    assert g.item() == 12.0 and h.item() == 12.0


def test_backward_populates_leaf_grads():
    x, y = ad.leaf(2.0, name="x"), ad.leaf(3.0, name="y")
    grads = ad.backward(x * y + x)
    assert x.grad == 4.0 and y.grad == 2.0
    assert set(grads) == {x, y}


def test_loss_must_be_scalar():
    x = ad.leaf(np.ones(3))
    with pytest.raises(ad.GradientError):
        ad.grad(x * 2.0, [x])


def test_second_backward_requires_record():
    x = ad.leaf(2.0)
    (g,) = ad.grad(x * x * x, [x])
    with pytest.raises(ad.GradientError):
        ad.grad(g, [x])


def test_unused_input_gets_zero_gradient():
    x, y = ad.leaf(1.0), ad.leaf(np.ones(2))
    gx, gy = ad.grad(x * 3.0, [x, y])
    assert gx.item() == 3.0
    assert np.array_equal(gy.value, np.zeros(2))


def test_parent_ids_precede_children():
    kind, fn, params, _ = build(1)
    loss = fn({k: ad.leaf(v) for k, v in params.items()})
    for node in ad.topological_order(loss):
        assert all(pid < node.id for pid in node.parent_ids)


def test_repeated_backward_is_stable():
    kind, fn, params, _ = build(5)
    leaves = {k: ad.leaf(v) for k, v in params.items()}
    loss = fn(leaves)
    first = [g.value for g in ad.grad(loss, list(leaves.values()))]
    second = [g.value for g in ad.grad(loss, list(leaves.values()))]
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


@pytest.mark.parametrize("seed", range(0, 100, 7))
def test_gradients_match_finite_differences(seed):
    kind, err = check_graph(seed)
    assert err < 1e-4, (kind, err)


@pytest.mark.parametrize("seed", range(12))
def test_recorded_and_plain_backward_agree(seed):
    _, fn, params, _ = build(seed)
    leaves = {k: ad.leaf(v) for k, v in params.items()}
    loss = fn(leaves)
    plain = ad.grad(loss, list(leaves.values()))
    recorded = ad.grad(loss, list(leaves.values()), record=True)
    for a, b in zip(plain, recorded):
        np.testing.assert_allclose(a.value, b.value, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("seed", [0, 1, 2, 4, 8])
def test_hessian_vector_products(seed):
    """d/dp <grad f(p), v> against central differences of the gradient along v."""
    _, fn, params, sign = build(seed)
    names = list(params)
    rng = np.random.default_rng(seed)
    vs = {k: rng.normal(size=params[k].shape) for k in names}
    leaves = {k: ad.leaf(params[k]) for k in names}
    grads = ad.grad(fn(leaves), [leaves[k] for k in names], record=True)
    dot = None
    for k, g in zip(names, grads):
        term = ad.sum(g * vs[k])
        dot = term if dot is None else dot + term
    hv = ad.grad(dot, [leaves[k] for k in names])

    def grad_at(t):
        p = {k: ad.leaf(params[k] + t * vs[k]) for k in names}
        return [g.value for g in ad.grad(fn(p), [p[k] for k in names])]

    h = 1e-5
    up, down = grad_at(h), grad_at(-h)
    for k, a, u, d in zip(names, hv, up, down):
        numeric = (u - d) / (2 * h)
        assert rel_error(a.value, numeric) < 1e-5 or np.max(np.abs(a.value - numeric)) < 1e-8, k


# -- gradient reversal ----------------------------------------------------------


def test_grl_forward_and_backward():
    x = ad.leaf([1.5, -2.0])
    y = ad.grl(x)
    assert np.array_equal(y.value, np.array([1.5, -2.0]))
    (g,) = ad.grad(ad.sum(y * np.array([1.0, 1.0])), [x])
    assert np.array_equal(g.value, np.array([-1.0, -1.0]))


def test_double_grl_is_identity_gradient():
    rng = np.random.default_rng(0)
    w = rng.normal(size=4)
    x = ad.leaf(rng.normal(size=4))
    (plain,) = ad.grad(ad.sum(ad.tanh(x) * w), [x])
    (twice,) = ad.grad(ad.sum(ad.tanh(ad.grl(ad.grl(x))) * w), [x])
    assert np.array_equal(plain.value, twice.value)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e6, 1e6)))
def test_grl_is_exact(values):
    x = ad.leaf(values)
    y = ad.grl(x)
    assert y.value.tobytes() == values.tobytes()
    up = np.arange(values.size, dtype=np.float64) - 3.5
    (g,) = ad.grad(ad.sum(y * up), [x])
    assert g.value.tobytes() == (-up).tobytes()


# -- second order ---------------------------------------------------------------


def test_second_order_scalar_toy():
    """d/d(omega) of L(theta - alpha dLc/dtheta) with a closed-form inner gradient."""
    alpha, theta0 = 0.3, 0.7

    def outer(omega_val):
        th, om = ad.leaf(theta0), ad.leaf(omega_val)
        lc = ad.tanh(om * th) ** 2.0 + om * om * th
        (g,) = ad.grad(lc, [th], record=True)
        th_new = th - alpha * g
        return (th_new - 2.0) ** 2.0, om

    loss, om = outer(1.3)
    (analytic,) = ad.grad(loss, [om])

    def closed(w):
        t = np.tanh(w * theta0)
        dlc = 2 * t * (1 - t * t) * w + w * w
        return (theta0 - alpha * dlc - 2.0) ** 2

    numeric = central_difference(lambda w: closed(float(w)), np.array(1.3))
    assert abs(analytic.item() - numeric) / abs(numeric) < 1e-3
    assert abs(analytic.item() - numeric) / abs(numeric) < 1e-8


# -- Adam -----------------------------------------------------------------------


def test_adam_first_step_matches_hand_evaluation():
    state = ad.AdamState.zeros_like([np.zeros(1)])
    (p,), state = ad.adam_step([np.zeros(1)], [np.ones(1)], state, lr=2e-4)
    # m_hat = v_hat = 1, so the step is -lr / (1 + eps)
    assert p[0] == pytest.approx(-2e-4 / (1 + 1e-8), rel=1e-12)
    assert p[0] == pytest.approx(-1.9999998e-4, rel=1e-7)
    assert state.t == 1


def test_adam_zero_gradient_leaves_param():
    state = ad.AdamState.zeros_like([np.array([5.0])])
    (p,), _ = ad.adam_step([np.array([5.0])], [np.zeros(1)], state, lr=2e-4)
    assert p[0] == 5.0


def test_adam_is_deterministic():
    rng = np.random.default_rng(3)
    params = [rng.normal(size=(3, 2)), rng.normal(size=4)]
    grads = [rng.normal(size=(3, 2)), rng.normal(size=4)]
    state = ad.AdamState.zeros_like(params)
    a, sa = ad.adam_step(params, grads, state, 1e-3, weight_decay=1e-4)
    b, sb = ad.adam_step(params, grads, state, 1e-3, weight_decay=1e-4)
    for x, y in zip(a + sa.m + sa.v, b + sb.m + sb.v):
        assert x.tobytes() == y.tobytes()


def test_adam_weight_decay_is_coupled():
    p, g, wd = np.array([2.0]), np.array([0.5]), 0.1
    state = ad.AdamState.zeros_like([p])
    coupled, s1 = ad.adam_step([p], [g], state, 1e-2, weight_decay=wd)
    manual, s2 = ad.adam_step([p], [g + wd * p], state, 1e-2)
    assert coupled[0] == manual[0]
    assert np.array_equal(s1.m[0], s2.m[0])


def test_adam_rejects_nonpositive_lr():
    state = ad.AdamState.zeros_like([np.zeros(1)])
    with pytest.raises(ValueError):
        ad.adam_step([np.zeros(1)], [np.ones(1)], state, lr=0.0)


def test_adam_moments_nonnegative_over_steps():
    rng = np.random.default_rng(1)
    opt = ad.Adam(lr=1e-2)
    p = [rng.normal(size=5)]
    for _ in range(20):
        p = opt.step(p, [rng.normal(size=5)])
        assert np.all(opt.state.v[0] >= 0)
    assert opt.state.t == 20
