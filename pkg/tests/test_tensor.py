import numpy as np
import numpy.testing as npt
import pytest

from pointconv import tensor as T
from pointconv.tensor import Tensor


def matmul_oracle(a, b):
    """Triple-loop contraction, 64-bit."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        npt.assert_allclose(T.matmul(a, b).data, [[1, 2], [3, 4]])

    def test_hand_case(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        npt.assert_allclose(out.data, [[11.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(-1, 1, (3, 4))
        b = rng.uniform(-1, 1, (4, 5))
        got = T.matmul(Tensor(a), Tensor(b)).data
        assert np.abs(got - matmul_oracle(a, b)).max() < 1e-6

    def test_shape_mismatch_names_both(self):
        with pytest.raises(T.TensorError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_batch_broadcast(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(2, 3, 4)).astype(np.float32)
        b = rng.normal(size=(1, 4, 5)).astype(np.float32)
        got = T.matmul(Tensor(a), Tensor(b)).data
        npt.assert_allclose(got, a @ b, rtol=1e-6)

    def test_associativity(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            a, b, c = (Tensor(rng.uniform(-1, 1, (4, 4))) for _ in range(3))
            left = T.matmul(T.matmul(a, b), c).data
            right = T.matmul(a, T.matmul(b, c)).data
            assert T.max_rel_diff(left, right) < 1e-5


class TestLinear:
    def test_scalar(self):
        out = T.linear(Tensor([1.0]), Tensor([[1.0]]), Tensor([0.0]))
        npt.assert_allclose(out.data, [1.0])

    def test_identity_weight(self):
        out = T.linear(Tensor([1.0, 2.0]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([3.0, 3.0]))
        npt.assert_allclose(out.data, [4.0, 5.0])

    def test_equals_matmul_broadcast(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 5, 3))
        w = rng.normal(size=(3, 4))
        b = rng.normal(size=4)
        got = T.linear(Tensor(x), Tensor(w), Tensor(b)).data
        want = T.matmul(Tensor(x), Tensor(w)).data + Tensor(b).data
        npt.assert_allclose(got, want, rtol=1e-6)


class TestPointwise:
    def test_relu(self):
        npt.assert_allclose(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_sigmoid_zero(self):
        npt.assert_allclose(T.sigmoid(Tensor([0.0])).data, [0.5])

    def test_mul_broadcast(self):
        out = T.mul(Tensor([2.0]), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        npt.assert_allclose(out.data, [[2.0, 4.0], [6.0, 8.0]])

    def test_div_by_zero_is_error(self):
        with pytest.raises(T.TensorError, match="division by zero"):
            T.div(Tensor([1.0]), Tensor([0.0]))

    def test_broadcast_failure(self):
        with pytest.raises(T.TensorError, match="broadcast"):
            T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestReduce:
    def test_sum_axis(self):
        npt.assert_allclose(T.reduce_sum(Tensor([[1.0, 2.0], [3.0, 4.0]]), axis=1).data, [3.0, 7.0])

    def test_max_tie_break_gradient(self):
        x = Tensor([1.0, 5.0, 5.0], requires_grad=True)
        with T.record():
            y = T.reduce_max(x, axis=0)
            assert y.item() == 5.0
            T.backward(y)
        npt.assert_allclose(x.grad, [0.0, 1.0, 0.0])

    def test_mean(self):
        assert T.reduce_mean(Tensor(np.ones(4))).item() == 1.0

    def test_axis_out_of_range(self):
        with pytest.raises(T.TensorError, match="axis"):
            T.reduce_sum(Tensor(np.zeros((2, 2))), axis=2)


class TestBatchNorm:
    def test_two_point_normalization(self):
        state = T.BatchNormState(1)
        out = T.batch_norm(Tensor([[1.0], [3.0]]), state, train=True)
        npt.assert_allclose(out.data, [[-1.0], [1.0]], atol=1e-4)

    def test_gamma_zero(self):
        state = T.BatchNormState(2)
        state.gamma.data[:] = 0.0
        state.beta.data[:] = 7.0
        out = T.batch_norm(Tensor(np.random.default_rng(0).normal(size=(4, 2))), state, train=True)
        npt.assert_allclose(out.data, 7.0)

    def test_eval_before_train_uses_initial_stats(self):
        state = T.BatchNormState(2)
        x = np.array([[1.0, -2.0], [0.5, 4.0]])
        out = T.batch_norm(Tensor(x), state, train=False)
        npt.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), rtol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(T.TensorError, match="channel"):
            T.batch_norm(Tensor(np.zeros((2, 3))), T.BatchNormState(2), train=True)

    def test_single_sample_train_rejected(self):
        with pytest.raises(T.TensorError, match="2 samples"):
            T.batch_norm(Tensor(np.zeros((1, 3))), T.BatchNormState(3), train=True)

    def test_gradient_vs_finite_differences(self):
        with T.precision("float64"):
            rng = np.random.default_rng(4)
            x = Tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)

            def f(t):
                state = T.BatchNormState(3)
                state.gamma.data[:] = [1.0, 0.5, 2.0]
                state.beta.data[:] = [0.1, -0.2, 0.0]
                return T.reduce_sum(T.mul(T.batch_norm(t, state, train=True), t))

            assert T.gradient_check(f, x) < 1e-4


class TestSoftmaxCrossEntropy:
    def test_uniform_two_way(self):
        loss = T.softmax_cross_entropy(Tensor([[0.0, 0.0]]), np.array([0]))
        npt.assert_allclose(loss.item(), np.log(2.0), rtol=1e-6)

    def test_extreme_logits_stable(self):
        loss = T.softmax_cross_entropy(Tensor([[1000.0, 0.0]]), np.array([0]))
        assert np.isfinite(loss.item()) and loss.item() < 1e-6

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(5)
        with T.precision("float64"):
            z = rng.normal(size=(8, 5))
            labels = rng.integers(0, 5, size=8)
            got = T.softmax_cross_entropy(Tensor(z), labels).item()
            p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
            want = -np.log(p[np.arange(8), labels]).mean()
            npt.assert_allclose(got, want, rtol=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(T.TensorError, match="label"):
            T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_backward_is_softmax_minus_onehot(self):
        with T.precision("float64"):
            rng = np.random.default_rng(6)
            z = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
            labels = np.array([0, 2, 1, 1])
            with T.record():
                T.backward(T.softmax_cross_entropy(z, labels))
            p = np.exp(z.data) / np.exp(z.data).sum(axis=1, keepdims=True)
            onehot = np.eye(3)[labels]
            npt.assert_allclose(z.grad, (p - onehot) / 4, rtol=1e-12)


class TestBackward:
    def test_sum_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with T.record():
            T.backward(T.reduce_sum(x))
        npt.assert_allclose(x.grad, [1.0, 1.0, 1.0])

    def test_square_gradient(self):
        x = Tensor([2.0], requires_grad=True)
        with T.record():
            T.backward(T.reduce_sum(T.mul(x, x)))
        npt.assert_allclose(x.grad, [4.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with T.record():
            with pytest.raises(T.TensorError, match="scalar"):
                T.backward(T.mul(x, x))

    def test_second_backward_raises(self):
        x = Tensor([1.0], requires_grad=True)
        with T.record():
            y = T.reduce_sum(x)
            T.backward(y)
            with pytest.raises(T.TensorError, match="tape"):
                T.backward(y)

    def test_composite_mlp_matches_finite_differences(self):
        with T.precision("float64"):
            rng = np.random.default_rng(7)
            w1 = Tensor(rng.uniform(-1, 1, (3, 4)))
            b1 = Tensor(rng.uniform(-1, 1, 4))
            w2 = Tensor(rng.uniform(-1, 1, (4, 2)))
            b2 = Tensor(rng.uniform(-1, 1, 2))
            x = Tensor(rng.uniform(-2, 2, (5, 3)) + 0.1, requires_grad=True)

            def f(t):
                h = T.relu(T.linear(t, w1, b1))
                return T.reduce_sum(T.sigmoid(T.linear(h, w2, b2)))

            assert T.gradient_check(f, x) < 1e-4


class TestGradientCheck:
    def test_sum_is_exact(self):
        with T.precision("float64"):
            x = Tensor(np.random.default_rng(8).normal(size=5), requires_grad=True)
            assert T.gradient_check(T.reduce_sum, x) < 1e-9

    def test_relu_away_from_kinks(self):
        with T.precision("float64"):
            x = Tensor([0.5, -1.2, 2.0, -0.3], requires_grad=True)
            assert T.gradient_check(lambda t: T.reduce_sum(T.relu(t)), x) < 1e-6

    def test_requires_64bit(self):
        x = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(T.TensorError, match="64-bit"):
            T.gradient_check(T.reduce_sum, x)


@pytest.mark.parametrize(
    "name,f",
    [
        ("matmul", lambda t: T.reduce_sum(T.matmul(t, T.transpose(t, (1, 0))))),
        ("linear", lambda t: T.reduce_sum(T.linear(t, Tensor(np.full((4, 2), 0.3, dtype=np.float64)), Tensor(np.zeros(2, dtype=np.float64))))),
        ("mul", lambda t: T.reduce_sum(T.mul(t, t))),
        ("div", lambda t: T.reduce_sum(T.div(Tensor(np.ones((3, 4), dtype=np.float64)), T.add(T.mul(t, t), Tensor(np.ones((3, 4), dtype=np.float64)))))),
        ("sigmoid", lambda t: T.reduce_sum(T.sigmoid(t))),
        ("mean", lambda t: T.reduce_mean(t)),
        ("max", lambda t: T.reduce_sum(T.reduce_max(t, axis=1))),
        ("concat", lambda t: T.reduce_sum(T.mul(T.concat([t, t], axis=1), T.concat([t, t], axis=1)))),
        ("gather", lambda t: T.reduce_sum(T.mul(T.gather(t, np.array([0, 2, 2, 1])), T.gather(t, np.array([0, 2, 2, 1]))))),
        ("reshape", lambda t: T.reduce_sum(T.mul(T.reshape(t, (2, 6)), T.reshape(t, (2, 6))))),
        ("add", lambda t: T.reduce_sum(T.mul(T.add(t, t), t))),
        ("sub", lambda t: T.reduce_sum(T.mul(T.sub(t, T.mul(t, t)), t))),
        ("neg", lambda t: T.reduce_sum(T.mul(T.neg(t), t))),
        ("scale", lambda t: T.reduce_sum(T.mul(T.scale(t, 2.5), t))),
        ("cast", lambda t: T.reduce_sum(T.mul(T.cast(t, np.float64), t))),
    ],
)
def test_op_gradients_match_finite_differences(name, f):
    with T.precision("float64"):
        rng = np.random.default_rng(abs(hash(name)) % 2**32)
        x = rng.uniform(-2, 2, (3, 4))
        x[np.abs(x) < 0.05] = 0.1  # keep away from relu/max kinks
        assert T.gradient_check(f, Tensor(x, requires_grad=True)) < 1e-4


def test_dropout_train_and_eval():
    rng = np.random.default_rng(9)
    x = Tensor(np.ones((100, 10)))
    out = T.dropout(x, 0.4, rng, train=True)
    kept = out.data != 0
    assert 0.4 < kept.mean() < 0.8
    npt.assert_allclose(out.data[kept], 1.0 / 0.6, rtol=1e-6)
    assert T.dropout(x, 0.4, rng, train=False) is x


def test_reshape_preserves_element_count():
    x = Tensor(np.arange(6, dtype=np.float32))
    y = T.reshape(x, (2, 3))
    assert y.size == x.size
    with pytest.raises(ValueError):
        T.reshape(x, (4, 2))


def test_allocation_tracking():
    with T.track_allocations() as log:
        Tensor(np.zeros((3, 4)))
        Tensor(np.zeros(7))
    assert log.total_elements == 19
    assert log.allocations == 2
    assert log.max_single == 12
