import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stq import tensor as T
from stq.gradcheck import numerical_gradient, relative_error
from stq.tensor import ShapeError, Tensor, backward, custom_grad, forward_op


def test_add_elementwise():
    out = forward_op("add", Tensor([1, 2]), Tensor([3, 4]))
    np.testing.assert_array_equal(out.data, [4, 6])


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3)).astype(np.float32)
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_conv2d_valid_shape():
    out = T.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_array_equal(out.data, 9.0)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros(out.shape)
    for n in range(2):
        for k in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, k, i, j] = (xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[k]).sum()
    np.testing.assert_allclose(out, ref, rtol=1e-12)


@pytest.mark.parametrize(
    "op,args",
    [
        ("add", ((2, 3), (4,))),
        ("matmul", ((2, 3), (2, 3))),
        ("conv2d", ((1, 2, 5, 5), (1, 3, 3, 3))),
    ],
)
def test_shape_mismatch_names_op(op, args):
    tensors = [Tensor(np.zeros(s)) for s in args]
    with pytest.raises(ShapeError, match=op):
        forward_op(op, *tensors)


def test_float32_default():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.array([1.0])).dtype == np.float64


def test_backward_square_sum():
    w = Tensor([1.0, -2.0], requires_grad=True)
    grads = backward(T.sum_(w * w))
    np.testing.assert_array_equal(grads[w], [2.0, -4.0])


def test_backward_constant_root_gives_zero():
    w = Tensor([1.0, -2.0], requires_grad=True)
    grads = backward(Tensor(3.0), leaves=[w])
    np.testing.assert_array_equal(grads[w], [0.0, 0.0])


def test_backward_errors():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(w * 2)
    with T.no_grad():
        root = T.sum_(w * w)
    with pytest.raises(ValueError, match="taping"):
        backward(root)


def test_backward_visits_shared_node_once():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    z = y + y  # y feeds twice
    np.testing.assert_allclose(backward(T.sum_(z))[x], [12.0])


def _two_layer_loss(x, labels, params):
    w1, b1, w2, b2 = params
    h = T.relu(T.matmul(x, w1) + b1)
    return T.cross_entropy(T.matmul(h, w2) + b2, labels)


def test_two_layer_net_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(8, 5)))
    labels = rng.integers(0, 3, size=8)
    arrays = [rng.normal(size=(5, 7)), rng.normal(size=7) * 0.1, rng.normal(size=(7, 3)), rng.normal(size=3) * 0.1]
    params = [Tensor(a, requires_grad=True) for a in arrays]
    grads = backward(_two_layer_loss(x, labels, params))
    work = [a.copy() for a in arrays]
    fd = numerical_gradient(lambda: _two_layer_loss(x, labels, [Tensor(a) for a in work]).item(), work, eps=1e-3)
    # relu kinks: skip hidden units whose pre-activation is within 1e-2 of 0
    pre = x.data @ arrays[0] + arrays[1]
    assert np.abs(pre).min() > 1e-2
    for p, g in zip(params, fd):
        assert relative_error(grads[p], g, floor=1e-6).max() < 1e-4


def _conv_net_loss(x, labels, params, training=True):
    w, g, b, wd, rm, rv = params
    h = T.conv2d(x, w, padding=1)
    h = T.batchnorm(h, g, b, rm.copy(), rv.copy(), training)
    h = T.maxpool2d(T.relu(h), 2)
    h = T.reshape(h, (h.shape[0], -1))
    return T.cross_entropy(T.matmul(h, wd), labels)


def test_conv_bn_pool_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(3, 2, 4, 4)))
    labels = rng.integers(0, 3, size=3)
    arrays = [rng.normal(size=(2, 2, 3, 3)), 1 + 0.1 * rng.normal(size=2), 0.1 * rng.normal(size=2), rng.normal(size=(8, 3))]
    rm, rv = np.zeros(2), np.ones(2)
    params = [Tensor(a, requires_grad=True) for a in arrays]
    grads = backward(_conv_net_loss(x, labels, params + [rm, rv]))
    work = [a.copy() for a in arrays]
    fd = numerical_gradient(
        lambda: _conv_net_loss(x, labels, [Tensor(a) for a in work] + [rm, rv]).item(), work, eps=1e-4
    )
    for p, g in zip(params, fd):
        assert relative_error(grads[p], g, floor=1e-5).max() < 1e-4


def test_abs_and_max_subgradient_conventions():
    x = Tensor([0.0, -1.0], requires_grad=True)
    np.testing.assert_array_equal(backward(T.sum_(T.abs_(x)))[x], [1.0, -1.0])
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([1.0, 3.0], requires_grad=True)
    g = backward(T.sum_(T.maximum(a, b)))
    np.testing.assert_array_equal(g[a], [1.0, 0.0])
    np.testing.assert_array_equal(g[b], [0.0, 1.0])


def test_custom_grad_ste_clip():
    ste = custom_grad(np.sign, lambda g, w: g * (np.abs(w) <= 1))
    for w0, expected in [(0.5, 2.0), (1.5, 0.0)]:
        w = Tensor([w0], requires_grad=True)
        out = ste(w)
        grads = backward(T.sum_(out * 2.0))
        assert grads[w][0] == expected


def test_custom_grad_identity_matches_autodiff():
    ident = custom_grad(lambda x: x, lambda g, x: g)
    w = Tensor([0.3, -0.7], requires_grad=True)
    a = backward(T.sum_(ident(w) * ident(w)))[w]
    b = backward(T.sum_(w * w))[w]
    np.testing.assert_array_equal(a, b)


def test_custom_grad_shape_mismatch():
    bad = custom_grad(lambda x: x, lambda g, x: np.ones(3))
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(T.sum_(bad(w)))


def test_determinism():
    def run():
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(4, 1, 6, 6)).astype(np.float32))
        w = Tensor(rng.normal(size=(3, 1, 3, 3)).astype(np.float32), requires_grad=True)
        loss = T.sum_(T.maxpool2d(T.relu(T.conv2d(x, w)), 2))
        return loss.data.copy(), backward(loss)[w].copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


_UNARY = {"relu": T.relu, "abs": T.abs_, "neg": T.neg}
_BINARY = {"add": T.add, "sub": T.sub, "mul": T.mul, "max": T.maximum, "min": T.minimum}
_KINKED = {"relu", "abs", "max", "min"}


def _random_graph(seed):
    """Random expression over two leaves built from the supported elementwise ops.

    Returns ``build(a, b) -> (root, kink_gap)`` where ``kink_gap`` is the
    smallest distance of any kinked op's input from its kink.
    """
    rng = np.random.default_rng(seed)
    plan = []
    for _ in range(rng.integers(2, 7)):
        if rng.random() < 0.5:
            plan.append(("u", str(rng.choice(list(_UNARY))), 0))
        else:
            plan.append(("b", str(rng.choice(list(_BINARY))), int(rng.integers(0, 2))))

    def build(a, b):
        nodes = [a, b]
        cur = a
        gap = np.inf
        for kind, name, other in plan:
            if kind == "u":
                if name in _KINKED:
                    gap = min(gap, np.abs(cur.data).min())
                cur = _UNARY[name](cur)
            else:
                if name in _KINKED:
                    gap = min(gap, np.abs(cur.data - nodes[other].data).min())
                cur = _BINARY[name](cur, nodes[other])
            nodes.append(cur)
        return T.sum_(T.mul(cur, cur)) + T.sum_(cur), gap

    return build


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_random_graphs_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a0, b0 = rng.normal(size=6), rng.normal(size=6)
    build = _random_graph(seed)
    a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
    root, gap = build(a, b)
    if gap < 1e-2:
        return  # too close to a kink for a step of 1e-3 to be meaningful
    grads = backward(root, leaves=[a, b])
    work = [a0.copy(), b0.copy()]
    fd = numerical_gradient(lambda: build(Tensor(work[0]), Tensor(work[1]))[0].item(), work, eps=1e-3)
    for leaf, g in zip((a, b), fd):
        assert relative_error(grads[leaf], g, floor=1e-6).max() < 1e-4


def test_backward_is_linear():
    rng = np.random.default_rng(5)
    w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    x = Tensor(rng.normal(size=(3, 4)))

    def f():
        return T.sum_(T.relu(T.matmul(x, w)))

    def g():
        return T.sum_(T.mul(w, w))

    ga, gb = backward(f())[w], backward(g())[w]
    combo = backward(T.add(T.mul(f(), 2.5), T.mul(g(), -0.5)))[w]
    np.testing.assert_allclose(combo, 2.5 * ga - 0.5 * gb, rtol=1e-6)
