import numpy as np
import pytest

from densebev import tensor as T
from densebev.diagnostics import attention_checks, detach_check, op_checks
from densebev.suppression import build_attention_mask
from densebev.tensor import Tensor, grad_check, masked_attention, no_grad
from oracles import central_difference


def plain_attention(q, k, v):
    s = q @ k.T / np.sqrt(q.shape[1])
    p = np.exp(s - s.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    return p @ v


class TestBasics:
    def test_matmul_identity(self, rng):
        x = rng.normal(size=(4, 3))
        np.testing.assert_array_equal((Tensor(np.eye(4)) @ Tensor(x)).data, x)

    def test_layernorm_moments(self, rng):
        y = T.layernorm(Tensor(rng.normal(3, 5, size=(6, 16)))).data
        np.testing.assert_allclose(y.mean(1), 0, atol=1e-9)
        np.testing.assert_allclose(y.var(1), 1, atol=1e-4)  # eps = 1e-5 inside the sqrt

    def test_layernorm_moments_without_eps(self, rng):
        y = T.layernorm(Tensor(rng.normal(3, 5, size=(6, 16))), eps=0.0).data
        np.testing.assert_allclose(y.var(1), 1, atol=1e-9)

    def test_concat_backward_splits(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((3, 2)), requires_grad=True)
        out = T.concat([a, b], axis=0)
        T.sum_(out * Tensor(np.arange(10.0).reshape(5, 2))).backward()
        np.testing.assert_array_equal(a.grad, [[0, 1], [2, 3]])
        np.testing.assert_array_equal(b.grad, [[4, 5], [6, 7], [8, 9]])

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ValueError):
            masked_attention(np.ones((2, 3)), np.ones((4, 2)), np.ones((4, 3)))
        with pytest.raises(ValueError):
            masked_attention(np.ones((2, 0)), np.ones((4, 0)), np.ones((4, 3)))
        with pytest.raises(ValueError):
            masked_attention(np.ones((2, 3)), np.ones((2, 3)), np.ones((2, 3)), np.zeros((3, 3), bool))

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        T.sum_(x * x + x).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = T.sum_(x * x)
        assert not y.requires_grad

    def test_deterministic_backward(self, rng):
        q = rng.normal(size=(6, 4))
        grads = []
        for _ in range(2):
            x = Tensor(q.copy(), requires_grad=True)
            T.sum_(masked_attention(x, x, x, heads=2) * Tensor(q)).backward()
            grads.append(x.grad.tobytes())
        assert grads[0] == grads[1]


class TestGradients:
    def test_quadratic_exact(self):
        err = grad_check(lambda x: T.sum_(x * x), np.array([1.0, 2.0, 3.0]))
        assert err <= 1e-8

    def test_every_op(self):
        errors = op_checks(seed=3)
        bad = {k: v for k, v in errors.items() if v > 1e-5}
        assert not bad

    def test_attention_variants(self):
        errors = attention_checks(seed=5)
        assert max(errors.values()) <= 1e-5

    def test_against_independent_central_difference(self, rng):
        W = rng.normal(size=(3, 4))

        def f_np(x):
            h = np.tanh(x @ W)
            return float(np.sum(h * h))

        x0 = rng.normal(size=(2, 3))
        xt = Tensor(x0, requires_grad=True)
        h = T.tanh(xt @ Tensor(W))
        T.sum_(h * h).backward()
        np.testing.assert_allclose(xt.grad, central_difference(f_np, x0), rtol=1e-6, atol=1e-8)


class TestDetach:
    def test_full_stop(self, rng):
        w = Tensor(rng.normal(size=4), requires_grad=True)
        d = T.detach(w)
        out = T.sum_(d * d)
        assert not out.requires_grad
        assert w.grad is None

    def test_partial_path(self, rng):
        w0 = rng.normal(size=4)
        w = Tensor(w0, requires_grad=True)
        T.sum_(w * w + T.detach(w)).backward()
        np.testing.assert_allclose(w.grad, 2 * w0)
        fd = central_difference(lambda x: float(np.sum(x * x)), w0)
        np.testing.assert_allclose(w.grad, fd, atol=1e-8)

    def test_values_pass_through(self, rng):
        x = Tensor(rng.normal(size=(3, 3)))
        assert T.detach(x).data.tobytes() == x.data.tobytes()

    def test_frozen_detach_check(self, rng):
        assert detach_check(rng.normal(size=(3, 2))) <= 1e-8

    def test_tape_replay_mismatch(self):
        tape = T.DetachTape()
        with tape.active():
            T.detach(Tensor(np.ones(2)))
        with pytest.raises(RuntimeError):
            with tape.active():
                T.detach(Tensor(np.ones(3)))


class TestMaskedAttention:
    def test_zero_mask_equals_plain(self, rng):
        q, k, v = (rng.normal(size=(5, 4)) for _ in range(3))
        out = masked_attention(q, k, v, np.zeros((5, 5), bool)).data
        np.testing.assert_allclose(out, plain_attention(q, k, v), atol=1e-12)

    def test_one_hot_limit(self, rng):
        q, k, v = (rng.normal(size=(5, 4)) for _ in range(3))
        mask = np.ones((5, 5), bool)
        mask[2, 3] = False
        out = masked_attention(q, k, v, mask).data
        np.testing.assert_allclose(out[2], v[3], atol=1e-9)
        np.testing.assert_array_equal(out[[0, 1, 3, 4]], 0.0)

    def test_accepts_attention_mask(self, rng):
        q = rng.normal(size=(4, 2))
        m = build_attention_mask([0, 2], 4)
        np.testing.assert_array_equal(masked_attention(q, q, q, m).data, masked_attention(q, q, q, m.bits).data)

    def test_multihead_shares_mask(self, rng):
        q, k, v = (rng.normal(size=(6, 4)) for _ in range(3))
        mask = rng.random((6, 6)) < 0.3
        out = masked_attention(q, k, v, mask, heads=2).data
        for h in range(2):
            sl = slice(2 * h, 2 * h + 2)
            ref = masked_attention(q[:, sl], k[:, sl], v[:, sl], mask).data
            np.testing.assert_allclose(out[:, sl], ref, atol=1e-12)

    def test_suppressed_rows_get_zero_gradient(self, rng):
        n, d = 10, 4
        for _ in range(20):
            keep = np.flatnonzero(rng.random(n) < 0.6)
            mask = build_attention_mask(keep, n)
            x = Tensor(rng.normal(size=(n, d)), requires_grad=True)
            Wq, Wk, Wv = (Tensor(rng.normal(size=(d, d))) for _ in range(3))
            out = masked_attention(x @ Wq, x @ Wk, x @ Wv, mask)
            loss = T.sum_(T.take_rows(out, keep) * Tensor(rng.normal(size=(len(keep), d)))) if len(keep) else None
            if loss is None:
                continue
            loss.backward()
            sup = mask.suppressed_indices()
            assert np.all(x.grad[sup] == 0.0)
            if len(keep):
                assert np.any(x.grad[keep] != 0.0)
