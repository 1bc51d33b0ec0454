import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgm import autodiff as ad
from sgm.autodiff import Adam, AdamState, Tensor, adam_step, backward
from sgm.errors import ContractError, DimensionError
from sgm.gradcheck import check_gradients, relative_error


def fd_grad(f, x: np.ndarray, h=1e-6):
    """Central differences of scalar numpy function ``f`` at ``x``."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        g[idx] = (f(up) - f(down)) / (2 * h)
    return g


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor([[2.0, 0], [0, 3]]))
        np.testing.assert_array_equal(out.data, [[2, 0], [0, 3]])

    def test_row_times_column(self):
        out = ad.matmul(Tensor([[1.0, 2]]), Tensor([[3.0], [4]]))
        np.testing.assert_array_equal(out.data, [[11]])

    def test_gradient_of_sum(self):
        A = Tensor([[1.0, 2], [3, 4]], requires_grad=True)
        B = Tensor([[1.0], [1]])
        backward(ad.sum_all(ad.matmul(A, B)))
        expected = fd_grad(lambda a: (a @ B.data).sum(), A.data)
        np.testing.assert_allclose(expected, [[1, 1], [1, 1]], atol=1e-8)
        np.testing.assert_allclose(A.grad, expected, atol=1e-8)

    def test_shape_mismatch_names_both(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


class TestElementwise:
    def test_tanh_values(self):
        assert ad.tanh(Tensor([0.0])).data[0] == 0.0
        assert abs(ad.tanh(Tensor([1e6])).data[0] - 1.0) <= 1e-12

    def test_tanh_grad(self):
        x = Tensor([0.5], requires_grad=True)
        backward(ad.sum_all(ad.tanh(x)))
        fd = fd_grad(lambda v: np.tanh(v).sum(), x.data)
        np.testing.assert_allclose(fd, [0.786448], atol=1e-6)
        np.testing.assert_allclose(x.grad, fd, rtol=1e-8)

    def test_sigmoid(self):
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5
        big = ad.sigmoid(Tensor([-1e6, 1e6])).data
        assert np.all(np.isfinite(big)) and big[0] == 0.0 and big[1] == 1.0

    def test_mean(self):
        assert ad.mean_all(Tensor([1.0, 2, 3])).item() == 2.0
        x = Tensor(np.random.default_rng(0).uniform(-2, 2, 4), requires_grad=True)
        backward(ad.mean_all(x))
        np.testing.assert_allclose(x.grad, fd_grad(lambda v: v.mean(), x.data), atol=1e-8)
        np.testing.assert_allclose(x.grad, [0.25] * 4)

    def test_broadcast_limits(self):
        m, v = Tensor(np.ones((2, 3))), Tensor(np.ones(3))
        assert (m + v).shape == (2, 3)
        assert (m + 2.0).shape == (2, 3)
        with pytest.raises(DimensionError):
            m + Tensor(np.ones(2))
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) * Tensor(np.ones((3, 2)))


class TestConcat:
    def test_values_and_shape(self):
        np.testing.assert_array_equal(ad.concat_rows(Tensor([1.0, 2]), Tensor([3.0])).data, [1, 2, 3])
        assert ad.concat_rows(Tensor(np.zeros(4)), Tensor(np.zeros(3))).shape == (7,)

    def test_grad_splits(self):
        a, b = Tensor([1.0, 2], requires_grad=True), Tensor([3.0], requires_grad=True)
        backward(ad.sum_all(ad.concat_rows(a, b)))
        np.testing.assert_array_equal(a.grad, [1, 1])
        np.testing.assert_array_equal(b.grad, [1])
        fd = fd_grad(lambda v: np.concatenate([v, b.data]).sum(), a.data)
        np.testing.assert_allclose(a.grad, fd, atol=1e-8)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            ad.concat([Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 2)))])


class TestReduceMaxRows:
    def test_values_and_indices(self):
        vals, idx = ad.reduce_max_rows(Tensor([[2.0, 0], [0, 3]]))
        np.testing.assert_array_equal(vals.data, [2, 3])
        np.testing.assert_array_equal(idx, [0, 1])

    def test_tie_goes_to_lowest_index(self):
        vals, idx = ad.reduce_max_rows(Tensor([[5.0, 5.0]]))
        assert vals.data.tolist() == [5.0] and idx.tolist() == [0]

    def test_gradient_routes_to_argmax(self):
        m = Tensor([[1.0, 4], [2, 2.5]], requires_grad=True)
        backward(ad.sum_all(ad.reduce_max_rows(m)[0]))
        fd = fd_grad(lambda x: x.max(axis=1).sum(), m.data)
        np.testing.assert_allclose(m.grad, fd, atol=1e-8)
        np.testing.assert_array_equal(m.grad, [[0, 1], [0, 1]])

    def test_hand_case_with_tie_in_second_row(self):
        # away from the tie in row 0 the routing is one-hot; the [2, 2] row ties
        m = Tensor([[1.0, 4], [2, 2]], requires_grad=True)
        backward(ad.sum_all(ad.reduce_max_rows(m)[0]))
        np.testing.assert_array_equal(m.grad, [[0, 1], [1, 0]])

    def test_empty(self):
        with pytest.raises(ContractError):
            ad.reduce_max_rows(Tensor(np.zeros((2, 0))))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_one_hot_rows(self, r, c, seed):
        m = Tensor(np.random.default_rng(seed).uniform(-2, 2, (r, c)), requires_grad=True)
        backward(ad.sum_all(ad.reduce_max_rows(m)[0]))
        np.testing.assert_array_equal(m.grad.sum(axis=1), np.ones(r))
        assert set(np.unique(m.grad)) <= {0.0, 1.0}


class TestBackward:
    def test_sum(self):
        x = Tensor([1.0, 2, 3], requires_grad=True)
        backward(ad.sum_all(x))
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_quadratic(self):
        x = Tensor([1.0, 2], requires_grad=True)
        backward(ad.matmul(x, x))
        np.testing.assert_allclose(x.grad, [2, 4])
        np.testing.assert_allclose(x.grad, fd_grad(lambda v: v @ v, x.data), atol=1e-8)

    def test_detached_has_no_grad(self):
        x, y = Tensor([1.0, 2], requires_grad=True), Tensor([3.0, 4])
        backward(ad.sum_all(x * y))
        assert y.grad is None

    def test_repeated_calls_accumulate(self):
        x = Tensor([1.0, 2], requires_grad=True)
        loss = ad.sum_all(ad.tanh(x) * x)
        backward(loss)
        once = x.grad.copy()
        backward(loss)
        np.testing.assert_allclose(x.grad, 2 * once)

    def test_shared_subexpression(self):
        x = Tensor([0.3, -0.7], requires_grad=True)
        y = ad.tanh(x)
        backward(ad.sum_all(y * y + y))
        fd = fd_grad(lambda v: (np.tanh(v) ** 2 + np.tanh(v)).sum(), x.data)
        np.testing.assert_allclose(x.grad, fd, atol=1e-8)

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2], requires_grad=True)
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_tape_is_topological(self):
        x = Tensor([1.0, 2], requires_grad=True)
        loss = ad.sum_all(ad.tanh(x) * ad.sigmoid(x) + x)
        tape = ad.build_tape(loss)
        pos = {id(t): i for i, t in enumerate(tape)}
        assert len(pos) == len(tape)
        for node in tape:
            for p in node._parents:
                assert pos[id(p)] < pos[id(node)]

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            y = ad.tanh(x)
        assert not y.requires_grad and y._parents == ()

    def test_deep_chain_no_recursion_limit(self):
        x = Tensor([0.1], requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0001
        backward(ad.sum_all(y))
        assert np.isfinite(x.grad).all()

    def test_replay_is_bitwise_deterministic(self):
        def run():
            rng = np.random.default_rng(3)
            a = Tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)
            b = Tensor(rng.uniform(-2, 2, (3, 5)), requires_grad=True)
            loss = ad.mean_all(ad.tanh(ad.matmul(a, b)))
            backward(loss)
            return loss.item(), a.grad.tobytes(), b.grad.tobytes()

        assert run() == run()


class TestFiniteDifferences:
    """Every primitive against central differences on random inputs in [-2, 2]."""

    @pytest.mark.parametrize("op", [ad.tanh, ad.sigmoid, ad.normalize_rows, lambda x: ad.scale(x, 1.7)])
    def test_unary(self, op):
        rng = np.random.default_rng(11)
        for _ in range(20):
            x = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
            w = Tensor(rng.standard_normal((3, 4)))
            assert check_gradients(lambda: ad.sum_all(op(x) * w), [x]) <= 1e-4

    def test_binary_broadcast(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            a = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
            v = Tensor(rng.uniform(-2, 2, 4), requires_grad=True)
            s = Tensor(rng.uniform(-2, 2), requires_grad=True)
            f = lambda: ad.sum_all(ad.mul(a - v, v + s) + ad.tanh(s * a))
            assert check_gradients(f, [a, v, s]) <= 1e-4

    def test_relative_error_zero_vectors(self):
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = Tensor([1.0], requires_grad=True)
        p.grad[:] = 1.0
        opt = Adam({"p": p}, lr=0.1)
        opt.step()
        # m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps)
        np.testing.assert_allclose(p.data, [1.0 - 0.1 / (1 + 1e-8)], rtol=0, atol=1e-15)
        assert opt.state.step == 1
        np.testing.assert_array_equal(p.grad, [1.0])

    def test_zero_grad_no_move(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        Adam({"p": p}, lr=0.1).step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_two_identical_steps(self):
        p = Tensor([0.0], requires_grad=True)
        state = AdamState(lr=0.1, first_moment={"p": np.zeros(1)}, second_moment={"p": np.zeros(1)})
        p.grad[:] = 1.0
        adam_step({"p": p}, state)
        v1, d1 = state.second_moment["p"].copy(), -p.data[0]
        adam_step({"p": p}, state)
        v2, d2 = state.second_moment["p"].copy(), -p.data[0] - d1
        np.testing.assert_allclose(v1, [0.001])
        np.testing.assert_allclose(v2, [0.001999])
        assert v2[0] > v1[0]
        # hand trace: m = 0.19, v = 0.001999 -> both bias-corrected to 1
        m_hat, v_hat = 0.19 / (1 - 0.9 ** 2), 0.001999 / (1 - 0.999 ** 2)
        np.testing.assert_allclose(d2, 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8), rtol=1e-12)
        assert d2 <= d1 * (1 + 1e-12)

    def test_missing_grad(self):
        p = Tensor([1.0])
        with pytest.raises(ContractError):
            Adam({"p": p}, lr=0.1).step()
