import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdda import tensor as tc
from kdda.tensor import GraphError, NonFiniteError, ShapeError, Tensor, grad_check, op_forward

seeds = st.integers(0, 2**31 - 1)


def leaf(data):
    return Tensor(data, requires_grad=True)


def away_from_zero(rng, shape, gap=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, x + np.sign(x + 1e-12) * gap, x)


def distinct(rng, shape):
    """Random values whose pairwise gaps are large next to the fd step."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape)


# -- worked examples -----------------------------------------------------

def test_add_example():
    assert op_forward("add", Tensor([1, 2]), Tensor([3, 4])).data.tolist() == [4, 6]


def test_relu_example():
    assert op_forward("relu", Tensor([-1, 0, 2])).data.tolist() == [0, 0, 2]


def test_conv2d_all_ones_window_counts():
    out = op_forward("conv2d", Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3)))).data
    assert out.shape == (1, 3, 3)
    assert out[0, 1, 1] == 9
    assert [out[0, 0, 0], out[0, 0, 2], out[0, 2, 0], out[0, 2, 2]] == [4, 4, 4, 4]
    assert out[0, 0, 1] == 6


def test_backward_sum_gives_ones():
    x = leaf([1.0, 2.0, 3.0])
    x.sum().backward()
    assert x.grad.tolist() == [1, 1, 1]


def test_backward_square():
    x = leaf([2.0])
    tc.reduce_sum(x * x).backward()
    assert x.grad.tolist() == [4.0]


def test_grad_check_exact_for_sum():
    rng = np.random.default_rng(0)
    assert grad_check(lambda t: t.sum(), leaf(rng.standard_normal((3, 4)))) < 1e-10


def test_grad_check_nan_gives_inf():
    x = leaf([-1.0, 2.0])
    assert grad_check(lambda t: tc.log(t).sum(), x) == float("inf")


# -- contracts and errors --------------------------------------------------

def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as err:
        tc.add(Tensor([1, 2]), Tensor([1, 2, 3]))
    assert err.value.op == "add"
    assert err.value.shapes == ((2,), (3,))
    assert "add" in str(err.value) and "(2,)" in str(err.value) and "(3,)" in str(err.value)


@pytest.mark.parametrize(
    "kind,args",
    [
        ("matmul", ((2, 3), (2, 3))),
        ("conv2d", ((2, 5, 5), (1, 3, 3, 3))),
        ("mul", ((2, 2), (3,))),
    ],
)
def test_shape_mismatch_raises(kind, args):
    with pytest.raises(ShapeError):
        op_forward(kind, *(Tensor(np.ones(s)) for s in args))


def test_conv2d_rejects_even_kernel():
    with pytest.raises(ShapeError):
        tc.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))


def test_unknown_op():
    with pytest.raises(ValueError):
        op_forward("fft", Tensor([1.0]))


def test_only_scalar_broadcasting():
    assert tc.mul(Tensor([1.0, 2.0]), 3.0).data.tolist() == [3.0, 6.0]
    with pytest.raises(ShapeError):
        tc.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(GraphError):
        (x * 2.0).backward()


def test_backward_on_detached_graph():
    x = leaf([1.0, 2.0])
    with pytest.raises(GraphError):
        x.sum().detach().backward()
    with pytest.raises(GraphError):
        Tensor([1.0, 2.0]).sum().backward()


def test_overflow_raises_instead_of_propagating():
    with pytest.raises(NonFiniteError):
        tc.exp(Tensor([1000.0]))
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_grad_buffer_iff_requires_grad():
    assert Tensor([1.0]).grad is None
    x = leaf(np.ones((2, 3)))
    assert x.grad.shape == x.shape
    assert x.data.size == np.prod(x.shape)


def test_gradients_accumulate_until_reset():
    x = leaf([1.0, -2.0])
    loss = tc.reduce_sum(x * x)
    loss.backward()
    loss.backward()
    assert x.grad.tolist() == [4.0, -8.0]
    x.zero_grad()
    assert x.grad.tolist() == [0.0, 0.0]


def test_graph_order_is_topological_and_unique():
    x = leaf([1.0, 2.0])
    y = tc.relu(x) * x
    z = tc.reduce_sum(tc.add(y, tc.exp(y)))
    order = tc.graph_order(z)
    position = {id(n): i for i, n in enumerate(order)}
    assert len(position) == len(order)
    for node in order:
        for parent in node._parents:
            assert position[id(parent)] < position[id(node)]


def test_deep_chain_has_no_recursion_limit():
    x = leaf([1.0])
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.sum().backward()
    assert x.grad.tolist() == [1.0]


def test_shared_subexpression_visited_once():
    x = leaf([3.0])
    y = x * x  # used twice below
    tc.reduce_sum(tc.add(y, y)).backward()
    assert x.grad.tolist() == [12.0]


# -- gradient fidelity, one property per op family ---------------------------

ELEMENTWISE = {
    "add": lambda a, b: tc.add(a, b),
    "sub": lambda a, b: tc.sub(a, b),
    "mul": lambda a, b: tc.mul(a, b),
}


@settings(max_examples=100, deadline=None)
@given(seed=seeds, kind=st.sampled_from(sorted(ELEMENTWISE)))
def test_binary_elementwise_grads(seed, kind):
    rng = np.random.default_rng(seed)
    other = Tensor(rng.standard_normal((3, 4)))
    x = leaf(rng.standard_normal((3, 4)))
    w = rng.standard_normal((3, 4))
    assert grad_check(lambda t: tc.reduce_sum(tc.mul(ELEMENTWISE[kind](t, other), w)), x) < 1e-6
    assert grad_check(lambda t: tc.reduce_sum(tc.mul(ELEMENTWISE[kind](other, t), w)), x) < 1e-6


UNARY = {
    "relu": (lambda t: tc.relu(t), away_from_zero),
    "exp": (lambda t: tc.exp(t), lambda r, s: r.standard_normal(s)),
    "log": (lambda t: tc.log(t), lambda r, s: r.uniform(0.5, 2.0, s)),
    "neg": (lambda t: tc.neg(t), lambda r, s: r.standard_normal(s)),
    "clip_min": (lambda t: tc.clip_min(t, 0.0), away_from_zero),
    "reshape": (lambda t: tc.reshape(t, (4, 3)), lambda r, s: r.standard_normal(s)),
    "transpose": (lambda t: tc.transpose(t, (1, 0)), lambda r, s: r.standard_normal(s)),
    "softmax": (lambda t: tc.softmax(t, axis=1), lambda r, s: r.standard_normal(s)),
    "max_along_axis": (lambda t: tc.max_along_axis(t, 1), distinct),
    "reduce_sum": (lambda t: tc.reduce_sum(t, axis=0), lambda r, s: r.standard_normal(s)),
    "reduce_mean": (lambda t: tc.reduce_mean(t, axis=1, keepdims=True), lambda r, s: r.standard_normal(s)),
}


@settings(max_examples=100, deadline=None)
@given(seed=seeds, kind=st.sampled_from(sorted(UNARY)))
def test_unary_grads(seed, kind):
    f, draw = UNARY[kind]
    rng = np.random.default_rng(seed)
    x = leaf(draw(rng, (3, 4)))
    out_shape = f(Tensor(x.data)).shape
    w = rng.standard_normal(out_shape)
    assert grad_check(lambda t: tc.reduce_sum(tc.mul(f(t), w)), x) < 1e-6


@settings(max_examples=100, deadline=None)
@given(seed=seeds)
def test_matmul_and_linear_grads(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng.standard_normal((3, 4)))
    b = leaf(rng.standard_normal((4, 2)))
    bias = leaf(rng.standard_normal(2))
    w = rng.standard_normal((3, 2))
    assert grad_check(lambda t: tc.reduce_sum(tc.mul(tc.matmul(t, Tensor(b.data)), w)), a) < 1e-6
    assert grad_check(lambda t: tc.reduce_sum(tc.mul(tc.matmul(Tensor(a.data), t), w)), b) < 1e-6
    wt = Tensor(b.data.T.copy())
    assert grad_check(lambda t: tc.reduce_sum(tc.mul(tc.linear(Tensor(a.data), wt, t), w)), bias) < 1e-6


@settings(max_examples=100, deadline=None)
@given(seed=seeds, k=st.sampled_from([1, 3, 5]), batched=st.booleans())
def test_conv2d_grads(seed, k, batched):
    rng = np.random.default_rng(seed)
    shape = (2, 2, 5, 6) if batched else (2, 5, 6)
    x = leaf(rng.standard_normal(shape))
    w = leaf(rng.standard_normal((3, 2, k, k)))
    b = leaf(rng.standard_normal(3))
    out_shape = tc.conv2d(Tensor(x.data), Tensor(w.data)).shape
    r = rng.standard_normal(out_shape)

    def loss(xx, ww, bb):
        return tc.reduce_sum(tc.mul(tc.conv2d(xx, ww, bb), r))

    xd, wd, bd = Tensor(x.data), Tensor(w.data), Tensor(b.data)
    assert grad_check(lambda t: loss(t, wd, bd), x) < 1e-6
    assert grad_check(lambda t: loss(xd, t, bd), w) < 1e-6
    assert grad_check(lambda t: loss(xd, wd, t), b) < 1e-6


def test_conv2d_matches_brute_force_sliding_window():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = tc.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((2, 4, 6, 5))
    for n in range(2):
        for o in range(4):
            for i in range(6):
                for j in range(5):
                    want[n, o, i, j] = (xp[n, :, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=seeds, kind=st.sampled_from(["max_pool2d", "avg_pool2d", "upsample2d", "concat"]))
def test_spatial_grads(seed, kind):
    rng = np.random.default_rng(seed)
    x = leaf(distinct(rng, (2, 2, 4, 4)))
    other = Tensor(rng.standard_normal((2, 1, 4, 4)))
    fns = {
        "max_pool2d": tc.max_pool2d,
        "avg_pool2d": tc.avg_pool2d,
        "upsample2d": tc.upsample2d,
        "concat": lambda t: tc.concat([t, other], axis=1),
    }
    f = fns[kind]
    r = rng.standard_normal(f(Tensor(x.data)).shape)
    assert grad_check(lambda t: tc.reduce_sum(tc.mul(f(t), r)), x) < 1e-6


@settings(max_examples=100, deadline=None)
@given(seed=seeds)
def test_composite_grad(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.standard_normal((1, 2, 4, 4)))
    w1 = Tensor(rng.standard_normal((3, 2, 3, 3)))
    w2 = rng.standard_normal((6, 12))

    def f(t):
        h = tc.max_pool2d(tc.relu(tc.conv2d(t, w1)))
        z = tc.matmul(Tensor(w2), tc.reshape(h, (12, 1)))
        return tc.reduce_mean(tc.log(tc.clip_min(tc.softmax(tc.reshape(z, (2, 3)), axis=1), 1e-12)))

    assert grad_check(f, x) < 1e-6


@settings(max_examples=30, deadline=None)
@given(seed=seeds)
def test_gradient_linearity(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.standard_normal(5))
    a, b = rng.standard_normal(5), rng.standard_normal(5)

    def l1():
        return tc.reduce_sum(tc.mul(tc.exp(x), a))

    def l2():
        return tc.reduce_sum(tc.mul(tc.mul(x, x), b))

    tc.add(l1(), l2()).backward()
    joint = x.grad.copy()
    x.zero_grad()
    l1().backward()
    l2().backward()
    np.testing.assert_allclose(joint, x.grad, rtol=1e-12, atol=1e-12)


def test_forward_bit_identical_across_runs():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 2, 8, 8))
    w = rng.standard_normal((4, 2, 3, 3))
    outs = [tc.softmax(tc.conv2d(Tensor(x), Tensor(w)), axis=1).data for _ in range(3)]
    assert all(np.array_equal(outs[0], o) for o in outs[1:])
