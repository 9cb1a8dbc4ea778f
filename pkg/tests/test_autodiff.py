import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepfbsde import autodiff as ad


def contract(tape, out, w):
    """Scalar <out, w> so every op can be checked through one scalar root."""
    return tape.record("sum", tape.record("mul", out, w))


def test_forward_examples():
    t = ad.Tape()
    assert np.array_equal(t.record("add", t.leaf([1, 2]), t.leaf([3, 4])).value, [4, 6])
    assert np.array_equal(t.record("relu", t.leaf([-1, 0, 2])).value, [0, 0, 2])
    assert np.array_equal(t.record("matvec", t.leaf(np.eye(2)), t.leaf([5, 7])).value, [5, 7])


def test_backward_examples():
    t = ad.Tape()
    x = t.leaf(3.0)
    assert t.backward(t.record("square", x))[x.index] == pytest.approx(6.0)

    t = ad.Tape()
    w = t.leaf(np.zeros(3))
    adj = t.backward(t.record("dot", w, t.const([1.0, 2.0, 3.0])))
    assert np.array_equal(adj[w.index], [1, 2, 3])

    t = ad.Tape()
    x = t.leaf([-1.0, 2.0])
    adj = t.backward(t.record("sum", t.record("relu", x)))
    assert np.array_equal(adj[x.index], [0, 1])


def test_relu_kink_has_zero_slope():
    t = ad.Tape()
    x = t.leaf([0.0])
    assert t.backward(ad.total(ad.relu(x)))[x.index][0] == 0.0


def test_shape_mismatch_reports_both_shapes():
    t = ad.Tape()
    with pytest.raises(ad.ShapeError, match=r"\(2,\).*\(3,\)"):
        t.record("add", t.leaf(np.ones(2)), t.leaf(np.ones(3)))
    with pytest.raises(ad.ShapeError):
        t.record("matmul", t.leaf(np.ones((2, 3))), t.leaf(np.ones((2, 3))))


def test_non_scalar_root_rejected():
    t = ad.Tape()
    x = t.leaf([1.0, 2.0])
    with pytest.raises(ad.ShapeError):
        t.backward(t.record("square", x))


def test_topological_order_and_frozen_values():
    t = ad.Tape()
    a = t.leaf(np.ones((2, 2)))
    b = a @ a + a
    for i, node in enumerate(t.nodes):
        assert all(p < i for p in node.parents)
    with pytest.raises(ValueError):
        b.value[0, 0] = 5.0


def _rng_arrays(seed, *shapes):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=s) for s in shapes]


def _away_from_kinks(x, margin=1e-3):
    return np.where(np.abs(x) < margin, x + np.sign(x + 1e-300) * 2 * margin, x)


UNARY = {
    "relu": lambda t, x: t.record("relu", x),
    "square": lambda t, x: t.record("square", x),
    "sin": lambda t, x: t.record("sin", x),
    "scale": lambda t, x: t.record("scale", x, c=-1.7),
    "sum0": lambda t, x: t.record("sum", x, axis=0),
    "mean": lambda t, x: t.record("mean", x),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_unary_ops_match_central_differences(name, seed):
    x, w = _rng_arrays(seed, (4, 3), (4, 3))
    x = _away_from_kinks(x)
    op = UNARY[name]

    def f(t, leaf):
        out = op(t, leaf)
        if not out.shape:
            return out
        return contract(t, out, w[0] if out.shape == (3,) else w)

    assert ad.grad_check(f, x, eps=1e-6) < 1e-5


BINARY = {
    "add": ((4, 3), (4, 3), lambda t, a, b: t.record("add", a, b), (4, 3)),
    "sub": ((4, 3), (4, 3), lambda t, a, b: t.record("sub", a, b), (4, 3)),
    "mul": ((4, 3), (4, 3), lambda t, a, b: t.record("mul", a, b), (4, 3)),
    "matmul": ((4, 3), (3, 2), lambda t, a, b: t.record("matmul", a, b), (4, 2)),
    "matvec": ((4, 3), (3,), lambda t, a, b: t.record("matvec", a, b), (4,)),
    "dot": ((5,), (5,), lambda t, a, b: t.record("dot", a, b), ()),
    "rowdot": ((4, 3), (4, 3), lambda t, a, b: t.record("rowdot", a, b), (4,)),
    "scale_rows": ((4, 3), (4,), lambda t, a, b: t.record("scale_rows", a, b), (4, 3)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("wrt", [0, 1])
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_binary_ops_match_central_differences(name, wrt, seed):
    sa, sb, op, so = BINARY[name]
    a, b, w = _rng_arrays(seed, sa, sb, so)

    def f(t, leaf):
        args = (leaf, t.const(b)) if wrt == 0 else (t.const(a), leaf)
        out = op(t, *args)
        return contract(t, out, w) if so else out

    assert ad.grad_check(f, a if wrt == 0 else b, eps=1e-6) < 1e-5


@pytest.mark.parametrize("wrt", [0, 1, 2])
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_affine_matches_central_differences(wrt, seed):
    x, W, b, w = _rng_arrays(seed, (5, 3), (4, 3), (4,), (5, 4))
    args = [x, W, b]

    def f(t, leaf):
        ops = [t.const(a) for a in args]
        ops[wrt] = leaf
        return contract(t, t.record("affine", *ops), w)

    assert ad.grad_check(f, args[wrt], eps=1e-6) < 1e-5


def test_expand_and_rows_gradients():
    w = np.arange(1.0, 7.0)

    def f(t, leaf):
        return contract(t, t.record("expand", leaf, n=6), w)

    assert ad.grad_check(f, np.array(0.3), eps=1e-6) < 1e-8
    x = np.random.default_rng(0).normal(size=(6, 2))
    t = ad.Tape()
    leaf = t.leaf(x)
    adj = t.backward(contract(t, ad.rows(leaf, 1, 3), np.ones((2, 2))))[leaf.index]
    assert np.array_equal(adj, np.r_[np.zeros((1, 2)), np.ones((2, 2)), np.zeros((3, 2))])


def test_square_at_point_with_small_step():
    assert ad.grad_check(lambda t, x: t.record("square", x), np.array(1.5), eps=1e-5) < 1e-6


def test_two_layer_mlp_loss_gradient():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(8, 3))
    W2, b2 = rng.normal(size=(2, 6)), rng.normal(size=2)
    b1 = rng.normal(size=6)
    W1 = rng.normal(size=(6, 3))

    def loss(t, w1):
        h = ad.relu(ad.affine(t.const(X), w1, b1))
        return ad.mean(ad.square(ad.affine(h, W2, b2)))

    assert ad.grad_check(loss, W1, eps=1e-6) < 1e-5


def test_grad_check_step_range():
    with pytest.raises(ValueError):
        ad.grad_check(lambda t, x: t.record("square", x), np.array(1.0), eps=1e-2)


def _two_terms(seed):
    x, w1, w2 = _rng_arrays(seed, (3,), (3,), (3,))

    def grads(alpha, beta):
        t = ad.Tape()
        leaf = t.leaf(x)
        f = contract(t, ad.sin(leaf), w1)
        g = contract(t, ad.square(leaf), w2)
        return t.backward(f * alpha + g * beta)[leaf.index], t, leaf, f, g

    return grads


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), alpha=st.floats(-3, 3), beta=st.floats(-3, 3))
def test_linearity_of_backward(seed, alpha, beta):
    grads = _two_terms(seed)
    combined, t, leaf, f, g = grads(alpha, beta)
    gf = t.backward(f)[leaf.index]
    gg = t.backward(g)[leaf.index]
    np.testing.assert_allclose(combined, alpha * gf + beta * gg, rtol=1e-12, atol=1e-14)


def test_replay_is_bitwise_identical():
    grads = _two_terms(11)
    a = grads(0.7, -1.3)[0]
    b = grads(0.7, -1.3)[0]
    assert a.tobytes() == b.tobytes()


def test_reflected_operators_record_on_tape():
    t = ad.Tape()
    x = t.leaf(np.array([1.0, 2.0]))
    y = np.ones(2) - x
    z = np.eye(2) @ x
    assert np.array_equal(y.value, [0.0, -1.0])
    assert np.array_equal(z.value, [1.0, 2.0])
    assert np.array_equal(t.backward(ad.total(y * 3.0))[x.index], [-3.0, -3.0])


def test_operands_from_other_tape_rejected():
    a, b = ad.Tape(), ad.Tape()
    with pytest.raises(ValueError):
        a.leaf(1.0) + b.leaf(2.0)
