import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sslfgvc import losses as L
from sslfgvc import tensor as T
from sslfgvc.tensor import NonFiniteError, Parameter, Tensor, grad_check


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


# -- elementwise ----------------------------------------------------------

def test_relu_values(f64):
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_tanh_zero(f64):
    assert T.tanh(Tensor([0.0])).data.tolist() == [0.0]


def test_mul_values(f64):
    assert T.mul(Tensor([2.0, 3.0]), Tensor([4.0, 5.0])).data.tolist() == [8.0, 15.0]


def test_elementwise_dispatch(f64):
    a, b = Tensor([1.0, 4.0]), Tensor([2.0, 2.0])
    assert T.elementwise("add", a, b).data.tolist() == [3.0, 6.0]
    assert T.elementwise("sub", a, b).data.tolist() == [-1.0, 2.0]
    assert T.elementwise("neg", a).data.tolist() == [-1.0, -4.0]
    assert T.elementwise("scale", a, 0.5).data.tolist() == [0.5, 2.0]
    with pytest.raises(ValueError):
        T.elementwise("cube", a)


def test_shape_mismatch_rejected(f64):
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_scalar_broadcast(f64):
    assert T.mul(Tensor([1.0, 2.0]), Tensor(3.0)).data.tolist() == [3.0, 6.0]


def test_log_of_nonpositive_rejected(f64):
    with pytest.raises(ValueError):
        T.log(Tensor([1.0, 0.0]))
    with pytest.raises(ValueError):
        T.log(Tensor([-2.0]))


def test_non_finite_output_raises(f64):
    with pytest.raises(NonFiniteError):
        T.exp(Tensor([1000.0]))
    with pytest.raises(ZeroDivisionError):
        T.div(Tensor([1.0]), Tensor([0.0]))


# -- matmul / conv -------------------------------------------------------

def test_matmul_identity_and_values(f64):
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(T.matmul(np.eye(2), x).data, x)
    assert T.matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0], [6.0]]).data.tolist() == [[17.0], [39.0]]


def test_matmul_dimension_mismatch(f64):
    with pytest.raises(ValueError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_grad_is_ones_times_bt(f64):
    a = leaf(np.random.default_rng(0).standard_normal((3, 4)))
    b = np.random.default_rng(1).standard_normal((4, 2))
    T.sum_(T.matmul(a, b)).backward()
    assert np.allclose(a.grad, np.ones((3, 2)) @ b.T, rtol=0, atol=1e-14)


def test_conv_identity_kernel(f64):
    x = np.random.default_rng(0).standard_normal((3, 5, 5))
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    assert np.array_equal(T.conv2d(x, w).data, x)


def test_conv_all_ones(f64):
    assert T.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3))).data.tolist() == [[[9.0]]]


def test_conv_is_cross_correlation(f64):
    x = np.arange(9.0).reshape(1, 3, 3)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 0, 0] = 1.0  # picks the top-left input cell without a flip
    assert T.conv2d(x, w).data.item() == 0.0


def test_conv_matches_direct_loop(f64):
    rng = np.random.default_rng(3)
    x, w, b = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((4, 3, 3, 2)), rng.standard_normal(4)
    out = T.conv2d(x, w, b, stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros(out.shape)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, o, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 2] * w[o]).sum() + b[o]
    assert np.allclose(out, ref, rtol=0, atol=1e-12)


def test_conv_non_integral_output(f64):
    with pytest.raises(ValueError):
        T.conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 3, 3)), stride=2)


def test_conv_gradcheck(f64):
    rng = np.random.default_rng(5)
    w = rng.standard_normal((2, 3, 3, 3))
    assert grad_check(lambda t: T.sum_(T.square(T.conv2d(t, w, padding=1))), rng.standard_normal((3, 4, 4))) < 1e-4


# -- reductions ----------------------------------------------------------

def test_softmax_uniform(f64):
    assert np.allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3, rtol=0, atol=1e-15)


def test_global_avg_pool_constant(f64):
    x = np.full((2, 3, 4, 4), 2.5)
    assert np.array_equal(T.global_avg_pool(x).data, np.full((2, 3), 2.5))


def test_log_softmax_value(f64):
    assert T.log_softmax(Tensor([2.0, 1.0, 0.0])).data[0] == pytest.approx(-0.40760596, abs=1e-8)


def test_max_pool_halves(f64):
    x = np.arange(16.0).reshape(1, 4, 4)
    assert T.max_pool2(x).data.tolist() == [[[5.0, 7.0], [13.0, 15.0]]]


def test_max_pool_tie_routes_to_first(f64):
    x = leaf(np.ones((1, 2, 2)))
    T.sum_(T.max_pool2(x)).backward()
    assert x.grad.tolist() == [[[1.0, 0.0], [0.0, 0.0]]]


def test_reduction_dispatch_and_bad_axis(f64):
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert T.reduction("sum", x, 1).data.tolist() == [3.0, 12.0]
    assert T.reduction("max", x, 0).data.tolist() == [3.0, 4.0, 5.0]
    with pytest.raises(ValueError):
        T.reduction("sum", x, 2)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    with T.default_dtype(np.float64):
        assert np.allclose(T.softmax(Tensor(x), axis=1).data.sum(axis=1), 1.0, rtol=0, atol=1e-6)


# -- backward ------------------------------------------------------------

def test_square_sum_grad(f64):
    x = leaf([1.0, -2.0, 3.5])
    T.sum_(x * x).backward()
    assert x.grad.tolist() == [2.0, -4.0, 7.0]


def test_relu_dead_region(f64):
    x = leaf([-1.0, -0.5])
    T.sum_(T.relu(x)).backward()
    assert x.grad.tolist() == [0.0, 0.0]


def test_backward_accumulates(f64):
    x = leaf([1.0, 2.0])
    T.sum_(x * x).backward()
    T.sum_(x * x).backward()
    assert x.grad.tolist() == [4.0, 8.0]


def test_backward_requires_scalar(f64):
    with pytest.raises(ValueError):
        T.backward(leaf([1.0, 2.0]) * 2.0)


def test_composite_net_gradcheck(f64):
    rng = np.random.default_rng(2)
    w = rng.standard_normal((3, 2, 3, 3))
    assert grad_check(lambda t: T.mean(T.relu(T.conv2d(t, w, padding=1))), rng.standard_normal((2, 2, 4, 4))) < 1e-4


def test_linearity_of_backward(f64):
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((3, 4))
    labels = np.array([0, 2, 1])

    def f1(t):
        return L.cross_entropy(t, labels)

    def f2(t):
        return T.sum_(T.tanh(t))

    grads = []
    for fn in (f1, f2, lambda t: f1(t) + f2(t)):
        x = leaf(x0)
        fn(x).backward()
        grads.append(x.grad)
    assert np.allclose(grads[0] + grads[1], grads[2], rtol=0, atol=1e-12)


def test_forward_bitwise_deterministic():
    rng = np.random.default_rng(0)
    x, w = rng.standard_normal((2, 3, 8, 8)).astype(np.float32), rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = T.max_pool2(T.relu(T.conv2d(x, w, padding=1))).data
    b = T.max_pool2(T.relu(T.conv2d(x.copy(), w.copy(), padding=1))).data
    assert a.tobytes() == b.tobytes()


def test_parameter_has_momentum_buffer(f64):
    p = Parameter(np.ones(3), "layer.weight")
    assert p.requires_grad and p.name == "layer.weight" and np.array_equal(p.momentum_buffer, np.zeros(3))


# -- grad_check oracle ---------------------------------------------------

def test_grad_check_linear_is_exact():
    # dyadic inputs and a power-of-two step keep every finite difference exact
    x = np.array([[0.5, -1.25], [3.0, 7.75]])
    assert grad_check(lambda t: T.sum_(t), x, eps=2.0 ** -17) <= 1e-12


def test_grad_check_cubic():
    x = np.random.default_rng(0).standard_normal(6)
    assert grad_check(lambda t: T.sum_(t * t * t), x, 1e-5) < 1e-6


def test_grad_check_cross_entropy():
    x = np.random.default_rng(1).standard_normal((4, 5))
    assert grad_check(lambda t: L.cross_entropy(t, np.array([0, 1, 4, 2])), x, 1e-5) < 1e-4


def test_grad_check_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        grad_check(lambda t: T.sum_(T.exp(t)), np.array([709.78]), eps=0.01)


def test_grad_check_detects_wrong_gradient():
    def bad(t):
        return T._result(t.data.sum() * 2.0, (t,), lambda g: (np.full(t.shape, g),), "bad")
    assert grad_check(bad, np.ones(3)) > 0.1


@pytest.mark.parametrize("seed", range(5))
def test_every_op_passes_gradcheck_on_random_shapes(seed):
    from sslfgvc.verify import _grad_cases

    for name, make in _grad_cases().items():
        f, x = make(np.random.default_rng([99, seed]))
        assert grad_check(f, x, 1e-5) < 1e-4, name
