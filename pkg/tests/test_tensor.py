import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from versreid import tensor as T
from versreid.optim import NonFiniteGradientError, SgdMomentumState, cosine_lr, sgd_momentum_step
from versreid.tensor import GradTape, Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float32), requires_grad=True)


def grad_of(fn, *xs):
    leaves = [leaf(x) for x in xs]
    with GradTape() as tape:
        out = fn(*leaves)
    tape.backward(out)
    return [l.grad for l in leaves]


class TestMatmul:
    def test_identity(self):
        x = np.arange(6, dtype=np.float32).reshape(2, 3)
        out = T.matmul(Tensor(np.eye(2)), Tensor(x))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_product(self):
        out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0], [1]]))
        np.testing.assert_array_equal(out.data, [[2], [4]])

    def test_mismatch_names_shapes(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_grad_of_sum_is_row_broadcast_column_sums(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
        (ga, gb) = grad_of(lambda x, y: T.sum(x @ y), a, b)
        np.testing.assert_allclose(ga, np.tile(b.sum(axis=1), (3, 1)), rtol=1e-5)
        np.testing.assert_allclose(gb, np.tile(a.sum(axis=0)[:, None], (1, 5)), rtol=1e-5)
        T.check_gradients(lambda x, y: T.sum(x @ y), [a, b])


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_stabilised(self):
        out = T.softmax_rows(Tensor([[1000.0, 1000.0]])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[0.5, 0.5]])

    def test_ln3(self):
        out = T.softmax_rows(Tensor([[0.0, math.log(3.0)]])).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-7)

    @given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_rows_sum_to_one(self, r, c, seed):
        x = np.random.default_rng(seed).normal(scale=10, size=(r, c))
        s = T.softmax_rows(Tensor(x)).data.sum(axis=-1)
        np.testing.assert_allclose(s, 1.0, atol=1e-6)


class TestBackward:
    def test_square(self):
        (g,) = grad_of(lambda x: x * x, 3.0)
        assert g == pytest.approx(6.0)

    def test_sum_of_softmax_has_zero_grad(self):
        x = np.random.default_rng(1).normal(size=(3, 4))
        (g,) = grad_of(lambda t: T.sum(T.softmax_rows(t)), x)
        np.testing.assert_allclose(g, 0.0, atol=1e-6)

    def test_non_scalar_rejected(self):
        x = leaf(np.ones(3))
        with GradTape() as tape:
            y = x * 2.0
        with pytest.raises(T.ContractError):
            tape.backward(y)

    def test_loss_from_other_tape_rejected(self):
        x = leaf(np.ones(3))
        with GradTape():
            y = T.sum(x)
        with GradTape() as other:
            pass
        with pytest.raises(T.ContractError):
            other.backward(y)

    def test_reverse_execution_order(self):
        order = []
        x = leaf(2.0)
        with GradTape() as tape:
            a = x * 3.0
            b = a + 1.0
            c = T.log(b)
        for node in tape.nodes:
            original = node.backward
            node.backward = (lambda f, n: lambda g: (order.append(n.seq), f(g))[1])(original, node)
        seqs = [n.seq for n in tape.nodes]
        tape.backward(c)
        assert order == sorted(seqs, reverse=True)

    def test_all_reachable_leaves_populated(self):
        a, b, unused = leaf(np.ones((2, 2))), leaf(np.ones((2, 2))), leaf(np.ones(2))
        with GradTape() as tape:
            loss = T.sum(T.take(a, [0, 0]) * b)
        tape.backward(loss)
        assert a.grad is not None and b.grad is not None and unused.grad is None
        np.testing.assert_array_equal(a.grad[1], 0.0)

    def test_no_tape_records_nothing(self):
        x = leaf(np.ones(2))
        y = x * 2.0
        assert y.node is None and not y.requires_grad


def _rand(rng, *shape, lo=None):
    x = rng.normal(size=shape)
    return np.abs(x) + 0.5 if lo else x


OPS = {
    "matmul": (lambda a, b: T.sum((a @ b) * (a @ b)),
               lambda r: [_rand(r, 3, 4), _rand(r, 4, 2)]),
    "batched_matmul": (lambda a, b: T.sum(T.gelu(a @ b)), lambda r: [_rand(r, 2, 3, 4), _rand(r, 4, 2)]),
    "add": (lambda a, b: T.sum((a + b) * (a + b)), lambda r: [_rand(r, 3, 4), _rand(r, 4)]),
    "sub": (lambda a, b: T.sum((a - b) * a), lambda r: [_rand(r, 3, 4), _rand(r, 1, 4)]),
    "mul": (lambda a, b: T.sum(a * b * a), lambda r: [_rand(r, 3, 4), _rand(r, 3, 1)]),
    "div": (lambda a, b: T.sum(a / b), lambda r: [_rand(r, 3, 4), _rand(r, 4, lo=True)]),
    "scale": (lambda a: T.sum(T.scale(a, -2.5) * a), lambda r: [_rand(r, 5)]),
    "reshape": (lambda a: T.sum(T.reshape(a, (6, 2)) @ T.reshape(a, (2, 6))),
                lambda r: [_rand(r, 3, 4)]),
    "transpose": (lambda a: T.sum(T.transpose(a, (1, 2, 0)) * T.transpose(a, (1, 2, 0))[0]),
                  lambda r: [_rand(r, 2, 3, 4)]),
    "concat": (lambda a, b: T.sum(T.concat([a, b, a], axis=1) * T.concat([b, a, b], axis=1)),
               lambda r: [_rand(r, 2, 3), _rand(r, 2, 3)]),
    "slice": (lambda a: T.sum(a[1:, ::2] * a[:-1, 1::2]), lambda r: [_rand(r, 4, 4)]),
    "gather": (lambda a: T.sum(T.take(a, [2, 0, 2]) * T.take(a, [1, 1, 0])),
               lambda r: [_rand(r, 3, 4)]),
    "softmax_rows": (lambda a: T.sum(T.softmax_rows(a) * T.softmax_rows(a)[::-1]),
                     lambda r: [_rand(r, 3, 5)]),
    "layer_norm_rows": (lambda a, g, b: T.sum(T.gelu(T.layer_norm_rows(a, g, b))),
                        lambda r: [_rand(r, 3, 6), _rand(r, 6), _rand(r, 6)]),
    "gelu": (lambda a: T.sum(T.gelu(a)), lambda r: [_rand(r, 4, 3) * 2]),
    "mean": (lambda a: T.sum(T.mean(a, axis=0) * T.mean(a, axis=0))
             + T.sum(T.mean(a, axis=1, keepdims=True) * a) + T.mean(a * a),
             lambda r: [_rand(r, 3, 4)]),
    "sum": (lambda a: T.sum(T.sum(a, axis=1) * T.sum(a, axis=0)[:3]), lambda r: [_rand(r, 3, 4)]),
    "sqdist": (lambda a, b: T.sum(T.sqdist(a, b) * T.sqdist(a, b)), lambda r: [_rand(r, 3, 4),
                                                                            _rand(r, 2, 4)]),
    "log": (lambda a: T.sum(T.log(a)), lambda r: [_rand(r, 3, 3, lo=True)]),
    "exp": (lambda a: T.sum(T.exp(a)), lambda r: [_rand(r, 3, 3)]),
    "sqrt": (lambda a: T.sum(T.sqrt(a)), lambda r: [_rand(r, 3, 3, lo=True)]),
    "abs": (lambda a: T.sum(T.abs(a) * a), lambda r: [_rand(r, 3, 3, lo=True) * np.sign(r.normal(size=(3, 3)))]),
    "relu": (lambda a: T.sum(T.relu(a) * a), lambda r: [_rand(r, 3, 3, lo=True) * np.sign(r.normal(size=(3, 3)))]),
    "broadcast_to": (lambda a: T.sum(T.broadcast_to(a, (3, 2, 4)) * T.broadcast_to(a, (3, 2, 4))),
                     lambda r: [_rand(r, 2, 4)]),
    "l2_normalize": (lambda a: T.sum(T.l2_normalize(a) * T.l2_normalize(a)[::-1]),
                     lambda r: [_rand(r, 3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    fn, make = OPS[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(20):
        T.check_gradients(fn, make(rng))


def test_layer_norm_statistics():
    x = Tensor(np.random.default_rng(3).normal(3.0, 5.0, size=(10, 16)))
    y = T.layer_norm_rows(x).data
    assert np.all(np.abs(y.mean(axis=1)) < 1e-5)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-4)


def test_determinism_bit_identical():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 8)), rng.normal(size=(8, 3))

    def run():
        x, y = leaf(a), leaf(b)
        with GradTape() as tape:
            out = T.sum(T.softmax_rows(T.gelu(x @ y)) * 3.0)
        tape.backward(out)
        return out.data.tobytes(), x.grad.tobytes(), y.grad.tobytes()

    assert run() == run()


def test_float64_replay():
    with T.float64_replay():
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


class TestSgd:
    def test_zero_lr_leaves_params(self):
        p = leaf([1.0, -2.0])
        sgd_momentum_step({"p": p}, {"p": np.array([0.3, 0.4], np.float32)}, SgdMomentumState(0.0))
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_plain_gradient_descent(self):
        p = leaf([1.0])
        sgd_momentum_step({"p": p}, {"p": np.array([0.5], np.float32)},
                          SgdMomentumState(1.0, momentum=0.0, weight_decay=0.0))
        assert p.data[0] == pytest.approx(0.5)

    def test_two_steps_hand_unrolled(self):
        p0, g1, g2, lr, mu, wd = 1.0, 0.5, -0.25, 0.1, 0.9, 1e-4
        v1 = g1 + wd * p0
        p1 = p0 - lr * v1
        v2 = mu * v1 + (g2 + wd * p1)
        p2 = p1 - lr * v2
        p = leaf([p0])
        state = SgdMomentumState(lr, mu, wd)
        sgd_momentum_step({"p": p}, {"p": np.array([g1], np.float32)}, state)
        sgd_momentum_step({"p": p}, {"p": np.array([g2], np.float32)}, state)
        assert p.data[0] == pytest.approx(p2, rel=1e-6)
        assert state.velocity["p"].shape == p.shape

    def test_non_finite_aborts_and_names_param(self):
        p, q = leaf([1.0]), leaf([2.0])
        grads = {"p": np.array([0.1], np.float32), "q": np.array([np.nan], np.float32)}
        with pytest.raises(NonFiniteGradientError, match="'q'"):
            sgd_momentum_step({"p": p, "q": q}, grads, SgdMomentumState(1.0))
        assert p.data[0] == 1.0

    def test_cosine_schedule(self):
        assert cosine_lr(0, 100, 1.0, 10) == pytest.approx(0.1)
        assert cosine_lr(9, 100, 1.0, 10) == pytest.approx(1.0)
        assert cosine_lr(10, 100, 1.0, 10) == pytest.approx(1.0)
        assert cosine_lr(55, 100, 1.0, 10) == pytest.approx(0.5)
        assert cosine_lr(100, 100, 1.0, 10) == pytest.approx(0.0)
