import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nestrppg import ndmath as nd
from nestrppg.errors import NonFiniteError, ShapeError, ZeroVectorError
from nestrppg.ndmath import Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


# --- svd -------------------------------------------------------------------

def test_svd_diagonal():
    res = nd.svd(np.diag([3.0, 1.0]))
    np.testing.assert_allclose(res.singular_values, [3.0, 1.0], atol=1e-15)


def test_svd_permutation():
    res = nd.svd(np.array([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_allclose(res.singular_values, [1.0, 1.0], atol=1e-15)


def test_svd_reconstruction_8x5():
    a = rng(1).standard_normal((8, 5))
    res = nd.svd(a)
    assert np.linalg.norm(res.reconstruct() - a) / np.linalg.norm(a) <= 1e-10
    assert res.left_vectors.shape == (8, 5) and res.right_vectors.shape == (5, 5)


def test_svd_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        nd.svd(np.array([[1.0, np.nan]]))


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 32), c=st.integers(1, 32), seed=st.integers(0, 2**31 - 1))
def test_svd_invariants(n, c, seed):
    a = rng(seed).standard_normal((n, c))
    res = nd.svd(a)
    r = min(n, c)
    s = res.singular_values
    assert s.shape == (r,)
    assert np.all(s >= 0) and np.all(np.diff(s) <= 0)
    np.testing.assert_allclose(res.left_vectors.T @ res.left_vectors, np.eye(r), atol=1e-10)
    np.testing.assert_allclose(res.right_vectors.T @ res.right_vectors, np.eye(r), atol=1e-10)
    assert np.linalg.norm(res.reconstruct() - a) <= 1e-10 * np.linalg.norm(a)


@pytest.mark.parametrize("seed", range(5))
def test_singular_value_gradient_matches_finite_differences(seed):
    r = rng(seed)
    # well separated spectrum: gaps >= 1e-3
    u, _ = np.linalg.qr(r.standard_normal((7, 4)))
    v, _ = np.linalg.qr(r.standard_normal((4, 4)))
    s = np.array([4.0, 2.5, 1.2, 0.3])
    a = (u * s) @ v.T
    for i in range(4):
        err = nd.grad_check(lambda m, i=i: nd.singular_values(m)[i], a, step=1e-6)
        assert err <= 1e-5


def test_singular_values_degenerate_is_deterministic():
    a = np.eye(4)
    outs = []
    for _ in range(2):
        t = Tensor(a, requires_grad=True)
        nd.singular_values(t).sum().backward()
        outs.append(t.grad.copy())
    assert np.array_equal(outs[0], outs[1])
    np.testing.assert_array_equal(nd.singular_values(Tensor(a)).data, np.ones(4))


# --- cosine ----------------------------------------------------------------

@pytest.mark.parametrize("a,b,expected", [
    ([1, 0], [1, 0], 1.0),
    ([1, 0], [0, 1], 0.0),
    ([1, 2, 3], [2, 4, 6], 1.0),
])
def test_cosine_examples(a, b, expected):
    assert nd.cosine_similarity(a, b).item() == pytest.approx(expected, abs=1e-15)


def test_cosine_zero_vector():
    with pytest.raises(ZeroVectorError):
        nd.cosine_similarity([0.0, 0.0], [1.0, 0.0])


def test_cosine_clamped():
    v = [0.1, 0.2, 0.3]
    c = nd.cosine_similarity(v, v).item()
    assert -1.0 <= c <= 1.0


def test_cosine_gradient():
    fixed = rng(3).standard_normal(6)
    for seed in range(10):
        x = rng(100 + seed).standard_normal(6)
        assert nd.grad_check(lambda t: nd.cosine_similarity(t, fixed), x) <= 1e-5


# --- grad_check itself -----------------------------------------------------

def test_grad_check_quadratic():
    assert nd.analytic_gradient(lambda t: (t * t).sum(), np.array([3.0]))[0] == 6.0
    assert nd.grad_check(lambda t: (t * t).sum(), np.array([3.0]), step=1e-5) <= 1e-6


def test_grad_check_catches_wrong_gradient():
    def bad(t):
        # relu's gradient is right; pretending the function is 2*x is not
        return nd.Tensor(2 * t.data).sum() + (t * 0).sum()
    assert nd.grad_check(bad, np.array([1.0, 2.0])) > 0.5


# --- op gradients ----------------------------------------------------------

OPS = {
    "add_broadcast": lambda t: (t + np.arange(4.0)).sum(),
    "mul_div": lambda t: (t * t / (t * t + 1.0)).sum(),
    "exp_log": lambda t: nd.log(nd.exp(t) + 1.0).mean(),
    "sqrt_abs": lambda t: nd.sqrt(nd.tabs(t) + 0.5).sum(),
    "matmul": lambda t: (t @ t.T).sum(),
    "max_min": lambda t: t.max(axis=1).sum() - t.min(axis=0).sum(),
    "transpose_reshape": lambda t: (t.T.reshape(-1) * np.arange(12.0)).sum(),
    "getitem_concat": lambda t: nd.concat([t[0], t[2] * 2.0], axis=0).sum(),
    "stack": lambda t: (nd.stack([t[1], t[0]], axis=1) ** 2).sum(),
    "logsumexp_masked": lambda t: nd.logsumexp(t, axis=1, mask=np.eye(3, 4) == 0).sum(),
    "pow": lambda t: ((t * t + 1.0) ** 1.5).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    for seed in range(3):
        x = rng(seed).standard_normal((3, 4))
        assert nd.grad_check(OPS[name], x) <= 1e-6, name


def test_conv2d_matches_direct_loop():
    r = rng(4)
    x = r.standard_normal((2, 3, 5, 7))
    w = r.standard_normal((4, 3, 3, 3))
    b = r.standard_normal(4)
    out = nd.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=(2, 1), padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = (5 + 2 - 3) // 2 + 1, 7
    ref = np.zeros((2, 4, ho, wo))
    for n in range(2):
        for o in range(4):
            for i in range(ho):
                for j in range(wo):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, j:j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_with_taps_that_only_see_padding():
    # H=1 with padding 1: kernel rows 0 and 2 multiply zeros everywhere
    r = rng(14)
    x = r.standard_normal((2, 3, 1, 9))
    w = r.standard_normal((4, 3, 3, 3))
    out = nd.conv2d(Tensor(x), Tensor(w), padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 1, 9))
    for n in range(2):
        for o in range(4):
            for j in range(9):
                ref[n, o, 0, j] = np.sum(xp[n, :, 0:3, j:j + 3] * w[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)

    wt = Tensor(w, requires_grad=True)
    nd.conv2d(Tensor(x), wt, padding=1).sum().backward()
    assert np.all(wt.grad[:, :, 0] == 0) and np.all(wt.grad[:, :, 2] == 0)
    assert nd.grad_check(lambda t: (nd.conv2d(Tensor(x), t, padding=1) ** 2).sum(), w) < 1e-6


def test_conv_transpose_is_adjoint_of_conv():
    r = rng(5)
    x = r.standard_normal((2, 3, 5, 7))
    w = r.standard_normal((4, 3, 3, 3))
    y = r.standard_normal(nd.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).shape)
    lhs = np.sum(nd.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data * y)
    # conv_transpose with the same (C_out, C_in) weight is the adjoint map
    back = nd.conv_transpose2d(Tensor(y), Tensor(w), stride=2, padding=1).data
    assert back.shape == x.shape
    rhs = np.sum(x * back)
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), ((1, 2), (0, 1))])
def test_conv_gradients(stride, padding):
    r = rng(6)
    x = r.standard_normal((2, 2, 4, 5))
    w = r.standard_normal((3, 2, 3, 3))
    b = r.standard_normal(3)
    target = r.standard_normal(nd.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).shape)
    assert nd.grad_check(lambda t: (nd.conv2d(t, Tensor(w), Tensor(b), stride, padding) * target).sum(), x) < 1e-6
    assert nd.grad_check(lambda t: (nd.conv2d(Tensor(x), t, Tensor(b), stride, padding) * target).sum(), w) < 1e-6
    assert nd.grad_check(lambda t: (nd.conv2d(Tensor(x), Tensor(w), t, stride, padding) * target).sum(), b) < 1e-6


def test_conv_transpose_gradients():
    r = rng(7)
    x = r.standard_normal((2, 3, 1, 5))
    w = r.standard_normal((3, 2, 1, 2))
    b = r.standard_normal(2)
    target = r.standard_normal((2, 2, 1, 10))
    f = lambda xx, ww, bb: (nd.conv_transpose2d(xx, ww, bb, stride=(1, 2)) * target).sum()
    assert nd.grad_check(lambda t: f(t, Tensor(w), Tensor(b)), x) < 1e-6
    assert nd.grad_check(lambda t: f(Tensor(x), t, Tensor(b)), w) < 1e-6
    assert nd.grad_check(lambda t: f(Tensor(x), Tensor(w), t), b) < 1e-6


def test_batch_norm_gradients_training():
    r = rng(8)
    x = r.standard_normal((4, 3, 2, 3))
    g = r.uniform(0.5, 1.5, 3)
    bta = r.standard_normal(3)
    target = r.standard_normal(x.shape)

    def f(xx, gg, bb):
        return (nd.batch_norm(xx, gg, bb, np.zeros(3), np.ones(3), training=True) * target).sum()

    assert nd.grad_check(lambda t: f(t, Tensor(g), Tensor(bta)), x) < 1e-6
    assert nd.grad_check(lambda t: f(Tensor(x), t, Tensor(bta)), g) < 1e-6
    assert nd.grad_check(lambda t: f(Tensor(x), Tensor(g), t), bta) < 1e-6


def test_batch_norm_eval_uses_running_stats():
    x = rng(9).standard_normal((5, 2, 3))
    rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
    out = nd.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False, eps=0.0)
    np.testing.assert_allclose(out.data, (x - rm[None, :, None]) / np.sqrt(rv)[None, :, None])


def test_avg_pool_and_upsample():
    x = Tensor(np.arange(2 * 1 * 4 * 6, dtype=float).reshape(2, 1, 4, 6))
    pooled = nd.avg_pool2d(x, (2, 3))
    assert pooled.shape == (2, 1, 2, 2)
    assert pooled.data[0, 0, 0, 0] == np.mean([0, 1, 2, 6, 7, 8])
    up = nd.upsample_linear1d(Tensor(np.array([[0.0, 1.0]])), 4)
    np.testing.assert_allclose(up.data, [[0.0, 0.25, 0.75, 1.0]])


# --- tensor invariants -----------------------------------------------------

def test_nonfinite_rejected():
    with pytest.raises(NonFiniteError):
        nd.log(Tensor([0.0]))


def test_grad_has_param_shape_and_leaf_only():
    w = Tensor(rng(0).standard_normal((3, 2)), requires_grad=True)
    h = w * 2.0
    (h @ Tensor(np.ones((2, 1)))).sum().backward()
    assert w.grad.shape == w.shape
    assert h.grad is None


def test_no_grad_builds_no_graph():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with nd.no_grad():
        y = w * 3.0
    assert not y.requires_grad and y._parents == ()


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0], requires_grad=True).backward()


def test_determinism():
    x = rng(11).standard_normal((4, 3))
    a = nd.singular_values(Tensor(x)).data
    b = nd.singular_values(Tensor(x)).data
    assert a.tobytes() == b.tobytes()


# --- adam ------------------------------------------------------------------

def test_adam_zero_gradient():
    p = Tensor(np.array([1.0, -2.0]))
    st_ = nd.AdamState.for_params([p])
    nd.adam_step([p], [np.zeros(2)], st_)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert st_.step_count == 1


def test_adam_first_step():
    p = Tensor(np.array([0.0]))
    st_ = nd.AdamState.for_params([p], lr=0.1)
    nd.adam_step([p], [np.array([4.0])], st_)
    # mhat = 4, vhat = 16 -> -0.1 * 4 / (4 + 1e-8)
    assert p.data[0] == pytest.approx(-0.1 * 4.0 / (4.0 + 1e-8), abs=1e-15)
    assert p.data[0] == pytest.approx(-0.0999999997, abs=1e-10)


def test_adam_two_steps_against_scripted_rule():
    g = np.array([0.5, -3.0])
    p = Tensor(np.array([1.0, 1.0]))
    st_ = nd.AdamState.for_params([p], lr=0.01)
    x, m, v = np.array([1.0, 1.0]), np.zeros(2), np.zeros(2)
    for t in (1, 2):
        nd.adam_step([p], [g], st_)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, x, rtol=0, atol=1e-15)
    assert st_.step_count == 2


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(2))
    with pytest.raises(ShapeError):
        nd.adam_step([p], [np.zeros(3)], nd.AdamState.for_params([p]))
