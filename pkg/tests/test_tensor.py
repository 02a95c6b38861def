import numpy as np
import pytest

from mora import tensor as T


def finite_diff(f, x, h=1e-5):
    """Central finite differences of a scalar function over an ndarray."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
        it.iternext()
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-12)


def loss_through(op_out_fn, *params):
    """Scalar loss contracting the op output with a fixed random cotangent."""
    rng = np.random.default_rng(0)
    out = op_out_fn()
    c = rng.standard_normal(out.shape)

    def run():
        T.reset_tape()
        return (op_out_fn() * c).sum()

    return run


def check_grads(build, params, seeds=range(20), tol=1e-6):
    """For each seed: autodiff grads on every param match finite differences."""
    for seed in seeds:
        tensors = params(np.random.default_rng(seed))
        run = loss_through(lambda: build(*tensors), *tensors)
        T.reset_tape()
        loss = run()
        for t in tensors:
            t.zero_grad()
        T.backward(loss)
        for t in tensors:
            assert t.grad is not None
            fd = finite_diff(lambda: run().item(), t.data)
            assert rel_err(t.grad, fd) < tol, f"seed {seed}"


class TestMatmul:
    def test_identity(self):
        x = T.Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        eye = T.Tensor(np.eye(2))
        assert np.array_equal(T.matmul(eye, x).data, x.data)

    def test_hand_product(self):
        a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = T.Tensor([[0.0], [1.0]])
        assert np.array_equal(T.matmul(a, b).data, [[2.0], [4.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))

    def test_gradient_vs_finite_differences(self):
        check_grads(
            T.matmul,
            lambda rng: (
                T.Tensor(rng.standard_normal((3, 4)), requires_grad=True),
                T.Tensor(rng.standard_normal((4, 2)), requires_grad=True),
            ),
        )


class TestSoftmaxRows:
    def test_uniform_row(self):
        y = T.softmax_rows(T.Tensor([[0.0, 0.0, 0.0]]))
        assert np.allclose(y.data, 1.0 / 3.0, atol=1e-15)

    def test_no_overflow(self):
        y = T.softmax_rows(T.Tensor([[1000.0, 0.0]]))
        assert abs(y.data[0, 0] - 1.0) < 1e-12
        assert abs(y.data[0, 1]) < 1e-12

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        y = T.softmax_rows(T.Tensor(rng.standard_normal((5, 7)) * 10))
        assert np.abs(y.data.sum(axis=1) - 1.0).max() < 1e-12

    def test_nan_input(self):
        with pytest.raises(T.NumericError):
            T.softmax_rows(T.Tensor([[np.nan, 1.0]]))

    def test_gradient_vs_finite_differences(self):
        check_grads(
            T.softmax_rows,
            lambda rng: (T.Tensor(rng.standard_normal((4, 5)), requires_grad=True),),
        )


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = T.Tensor(np.zeros((3, 4)))
        loss = T.cross_entropy(logits, [0, 1, 2], ignore_index=-1)
        assert abs(loss.item() - np.log(4.0)) < 1e-12

    def test_confident_logit_drives_loss_to_zero(self):
        logits = T.Tensor([[1000.0, 0.0, 0.0]])
        loss = T.cross_entropy(logits, [0], ignore_index=-1)
        assert loss.item() < 1e-12

    def test_matches_brute_force_logsumexp(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((5, 7)) * 3
        tgt = rng.integers(0, 7, size=5)
        expected = np.mean(
            [np.log(np.exp(x[t]).sum()) - x[t, tgt[t]] for t in range(5)]
        )
        loss = T.cross_entropy(T.Tensor(x), tgt, ignore_index=-1)
        assert abs(loss.item() - expected) < 1e-10

    def test_ignore_index_excluded(self):
        x = np.zeros((4, 4))
        x[1, 2] = 9.0
        full = T.cross_entropy(T.Tensor(x), [0, 2, 1, 3], ignore_index=-1).item()
        masked = T.cross_entropy(T.Tensor(x), [0, -1, 1, 3], ignore_index=-1).item()
        assert masked > full  # the easy row was dropped from the mean

    def test_all_ignored(self):
        with pytest.raises(T.DegenerateBatchError):
            T.cross_entropy(T.Tensor(np.zeros((2, 3))), [5, 5], ignore_index=5)

    def test_target_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            T.cross_entropy(T.Tensor(np.zeros((2, 3))), [0, 3], ignore_index=-1)

    def test_gradient_vs_finite_differences(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            logits = T.Tensor(rng.standard_normal((6, 5)), requires_grad=True)
            tgt = rng.integers(0, 5, size=6)
            tgt[0] = 3

            def run():
                T.reset_tape()
                return T.cross_entropy(logits, np.where(np.arange(6) == 1, 3, tgt), 3)

            T.reset_tape()
            loss = run()
            logits.zero_grad()
            T.backward(loss)
            fd = finite_diff(lambda: run().item(), logits.data)
            assert rel_err(logits.grad, fd) < 1e-6


class TestBackward:
    def test_sum_gives_ones(self):
        x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        T.reset_tape()
        T.backward(x.sum())
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_composite_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        x = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w = T.Tensor(rng.standard_normal((4, 2)), requires_grad=True)

        def run():
            T.reset_tape()
            y = T.matmul(x, w)
            return (y * y).sum()

        loss = run()
        T.backward(loss)
        for t in (x, w):
            fd = finite_diff(lambda: run().item(), t.data)
            assert rel_err(t.grad, fd) < 1e-6

    def test_frozen_leaf_gets_no_grad(self):
        x = T.Tensor(np.ones((2, 2)), requires_grad=True)
        w = T.Tensor(np.ones((2, 2)), requires_grad=True).freeze()
        T.reset_tape()
        T.backward(T.matmul(x, w).sum())
        assert x.grad is not None
        assert w.grad is None

    def test_non_scalar_root_rejected(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            T.backward(x)

    def test_stale_root_rejected(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        T.reset_tape()
        s = x.sum()
        T.reset_tape()
        with pytest.raises(ValueError, match="active tape"):
            T.backward(s)

    def test_deterministic_gradients(self):
        def one_run():
            rng = np.random.default_rng(5)
            x = T.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
            w = T.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
            T.reset_tape()
            y = T.gelu(T.matmul(x, w))
            T.backward((y * y).sum())
            return x.grad.copy(), w.grad.copy()

        a1, b1 = one_run()
        a2, b2 = one_run()
        assert np.array_equal(a1, a2) and np.array_equal(b1, b2)


class TestPrimitives:
    """Finite-difference checks for every remaining differentiable op."""

    def test_add_broadcast(self):
        check_grads(
            T.add,
            lambda rng: (
                T.Tensor(rng.standard_normal((3, 4)), requires_grad=True),
                T.Tensor(rng.standard_normal(4), requires_grad=True),
            ),
        )

    def test_mul(self):
        check_grads(
            T.mul,
            lambda rng: (
                T.Tensor(rng.standard_normal((3, 4)), requires_grad=True),
                T.Tensor(rng.standard_normal((3, 4)), requires_grad=True),
            ),
        )

    def test_transpose(self):
        check_grads(
            T.transpose,
            lambda rng: (T.Tensor(rng.standard_normal((3, 5)), requires_grad=True),),
        )

    def test_reshape(self):
        check_grads(
            lambda x: T.reshape(x, (2, 6)),
            lambda rng: (T.Tensor(rng.standard_normal((3, 4)), requires_grad=True),),
        )

    def test_narrow(self):
        check_grads(
            lambda x: T.narrow(x, 1, 1, 2),
            lambda rng: (T.Tensor(rng.standard_normal((3, 5)), requires_grad=True),),
        )

    def test_concat(self):
        check_grads(
            lambda a, b: T.concat([a, b], axis=1),
            lambda rng: (
                T.Tensor(rng.standard_normal((3, 2)), requires_grad=True),
                T.Tensor(rng.standard_normal((3, 4)), requires_grad=True),
            ),
        )

    def test_gather_rows(self):
        check_grads(
            lambda t: T.gather_rows(t, [2, 0, 2, 1]),
            lambda rng: (T.Tensor(rng.standard_normal((4, 3)), requires_grad=True),),
        )

    def test_gather_rows_rejects_bad_id(self):
        with pytest.raises(ValueError, match="out of range"):
            T.gather_rows(T.Tensor(np.zeros((2, 3))), [0, 2])

    def test_relu(self):
        # keep samples away from the kink so central differences are valid
        def params(rng):
            x = rng.standard_normal((4, 4))
            x = np.where(np.abs(x) < 1e-3, x + 0.1, x)
            return (T.Tensor(x, requires_grad=True),)

        check_grads(T.relu, params)

    def test_gelu(self):
        check_grads(
            T.gelu,
            lambda rng: (T.Tensor(rng.standard_normal((4, 4)), requires_grad=True),),
        )

    def test_layer_norm(self):
        check_grads(
            T.layer_norm,
            lambda rng: (
                T.Tensor(rng.standard_normal((4, 6)), requires_grad=True),
                T.Tensor(rng.standard_normal(6) + 1.0, requires_grad=True),
            ),
            tol=1e-5,  # eps inside the normalizer inflates FD error slightly
        )

    def test_mean(self):
        check_grads(
            lambda x: T.reshape(x.mean(), (1, 1)),
            lambda rng: (T.Tensor(rng.standard_normal((3, 4)), requires_grad=True),),
        )


class TestMultiHeadAttention:
    def test_causal_masks_future(self):
        rng = np.random.default_rng(0)
        q = rng.standard_normal((5, 6))
        k = rng.standard_normal((5, 6))
        v = rng.standard_normal((5, 6))
        base = T.multi_head_attention(T.Tensor(q), T.Tensor(k), T.Tensor(v), 2, True)
        k2, v2 = k.copy(), v.copy()
        k2[3:] += 1.0
        v2[3:] -= 2.0
        out = T.multi_head_attention(T.Tensor(q), T.Tensor(k2), T.Tensor(v2), 2, True)
        assert np.array_equal(out.data[:3], base.data[:3])

    def test_matches_composed_reference(self):
        # unfused oracle: per-head slices, softmax_rows, concat
        rng = np.random.default_rng(1)
        q, k, v = (rng.standard_normal((4, 6)) for _ in range(3))
        fused = T.multi_head_attention(T.Tensor(q), T.Tensor(k), T.Tensor(v), 3, False)
        cols = []
        for h in range(3):
            qh, kh, vh = q[:, 2 * h : 2 * h + 2], k[:, 2 * h : 2 * h + 2], v[:, 2 * h : 2 * h + 2]
            s = qh @ kh.T / np.sqrt(2.0)
            e = np.exp(s - s.max(axis=1, keepdims=True))
            cols.append((e / e.sum(axis=1, keepdims=True)) @ vh)
        assert np.abs(fused.data - np.concatenate(cols, axis=1)).max() < 1e-12

    @pytest.mark.parametrize("causal", [False, True])
    def test_gradients_vs_finite_differences(self, causal):
        check_grads(
            lambda q, k, v: T.multi_head_attention(q, k, v, 2, causal),
            lambda rng: (
                T.Tensor(rng.standard_normal((4, 4)), requires_grad=True),
                T.Tensor(rng.standard_normal((4, 4)), requires_grad=True),
                T.Tensor(rng.standard_normal((4, 4)), requires_grad=True),
            ),
            seeds=range(10),
        )

    def test_cross_attention_gradients(self):
        # different query/key lengths, as used by the weight generator
        check_grads(
            lambda q, k, v: T.multi_head_attention(q, k, v, 1, False),
            lambda rng: (
                T.Tensor(rng.standard_normal((3, 4)), requires_grad=True),
                T.Tensor(rng.standard_normal((6, 4)), requires_grad=True),
                T.Tensor(rng.standard_normal((6, 4)), requires_grad=True),
            ),
            seeds=range(10),
        )

    def test_shape_validation(self):
        with pytest.raises(ValueError, match="divisible"):
            T.multi_head_attention(
                T.Tensor(np.zeros((2, 5))), T.Tensor(np.zeros((2, 5))),
                T.Tensor(np.zeros((2, 5))), 2, False,
            )
        with pytest.raises(ValueError, match="causal"):
            T.multi_head_attention(
                T.Tensor(np.zeros((2, 4))), T.Tensor(np.zeros((3, 4))),
                T.Tensor(np.zeros((3, 4))), 2, True,
            )


class TestLoraLinearFusion:
    def test_gradients_vs_finite_differences(self):
        from mora.injection import _lora_linear

        check_grads(
            lambda x, w, a, b: _lora_linear(x, w, a, b, 0.5),
            lambda rng: (
                T.Tensor(rng.standard_normal((3, 4)), requires_grad=True),
                T.Tensor(rng.standard_normal((4, 5)), requires_grad=True),
                T.Tensor(rng.standard_normal((4, 2)), requires_grad=True),
                T.Tensor(rng.standard_normal((2, 5)), requires_grad=True),
            ),
            seeds=range(10),
        )

    def test_frozen_base_gets_no_product(self):
        from mora.injection import _lora_linear

        rng = np.random.default_rng(2)
        x = T.Tensor(rng.standard_normal((3, 4)))
        w = T.Tensor(rng.standard_normal((4, 5))).freeze()
        a = T.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        b = T.Tensor(rng.standard_normal((2, 5)), requires_grad=True)
        T.reset_tape()
        T.backward(_lora_linear(x, w, a, b, 1.0).sum())
        assert w.grad is None and a.grad is not None and b.grad is not None
