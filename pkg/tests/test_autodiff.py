import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from widin import autodiff as ad
from widin.autodiff import OptimState, Tensor, adamw_step, gradcheck, sgd_step
from widin.errors import NumericalError, ShapeError
from widin.gradsuite import TOLERANCE, primitive_checks

finite = st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)


def matrix(rows=3, cols=4):
    return arrays(np.float64, (rows, cols), elements=finite)


class TestTensor:
    def test_scalars_become_1x1(self):
        assert Tensor(2.5).shape == (1, 1)

    def test_vectors_become_rows(self):
        assert Tensor([1.0, 2.0, 3.0]).shape == (1, 3)

    def test_non_finite_op_output_raises(self):
        with pytest.raises(NumericalError):
            ad.add(Tensor([[1.0, np.nan]]), Tensor([[0.0, 0.0]]))

    def test_backward_needs_scalar(self):
        t = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            ad.scale(t, 2.0).backward()

    def test_fan_out_accumulates(self):
        # f = sum(a * a) through two uses of the same node: df/da = 2a
        a = Tensor(np.array([[1.0, -2.0, 0.5]]), requires_grad=True)
        ad.sum_all(ad.mul(a, a)).backward()
        np.testing.assert_allclose(a.grad, 2 * a.data)

    def test_detach_stops_gradient(self):
        a = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
        ad.sum_all(ad.mul(a, a.detach())).backward()
        np.testing.assert_allclose(a.grad, a.data)


class TestForwardMatchesNumpy:
    @given(matrix(), matrix())
    def test_add_sub_mul(self, a, b):
        np.testing.assert_allclose(ad.add(Tensor(a), Tensor(b)).data, a + b)
        np.testing.assert_allclose(ad.sub(Tensor(a), Tensor(b)).data, a - b)
        np.testing.assert_allclose(ad.mul(Tensor(a), Tensor(b)).data, a * b)

    @given(matrix(3, 5), matrix(5, 2))
    def test_matmul(self, a, b):
        np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, a @ b, atol=1e-12)

    @given(matrix())
    def test_log_softmax_rows_normalize(self, a):
        out = ad.log_softmax(Tensor(a)).data
        np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, rtol=1e-12)

    def test_log_softmax_is_shift_stable(self):
        a = np.array([[1000.0, 1001.0, 1002.0]])
        ref = np.array([[0.0, 1.0, 2.0]]) - math.log(1 + math.e + math.e**2)
        np.testing.assert_allclose(ad.log_softmax(Tensor(a)).data, ref, rtol=1e-12)

    def test_gelu_tanh_form(self):
        z = np.array([[-1.5, 0.0, 0.3, 2.0]])
        ref = [0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v**3))) for v in z[0]]
        np.testing.assert_allclose(ad.gelu(Tensor(z)).data[0], ref, rtol=1e-12)

    def test_gelu_close_to_erf_form(self):
        z = np.linspace(-3, 3, 13)[None, :]
        ref = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in z[0]]
        np.testing.assert_allclose(ad.gelu(Tensor(z)).data[0], ref, atol=1e-3)

    @given(matrix())
    def test_layer_norm_rows(self, a):
        a = a + np.arange(4)  # keep rows non-constant
        out = ad.layer_norm(Tensor(a), Tensor(np.ones((1, 4))), Tensor(np.zeros((1, 4)))).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-9)

    def test_l2_normalize_unit_rows(self, rng):
        out = ad.l2_normalize(Tensor(rng.normal(size=(5, 7)))).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)

    def test_attention_matches_loop(self, rng):
        L, H, D = 3, 2, 4
        q, k, v = (rng.normal(size=(2 * L, D)) for _ in range(3))
        out = ad.attention(Tensor(q), Tensor(k), Tensor(v), L, H).data
        ref = np.zeros_like(out)
        dh = D // H
        for b in range(2):
            rows = slice(b * L, (b + 1) * L)
            for h in range(H):
                cols = slice(h * dh, (h + 1) * dh)
                s = q[rows, cols] @ k[rows, cols].T / math.sqrt(dh)
                p = np.exp(s - s.max(axis=1, keepdims=True))
                p /= p.sum(axis=1, keepdims=True)
                ref[rows, cols] = p @ v[rows, cols]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_cross_entropy_closed_form(self):
        logits = np.array([[2.0, 0.0, -1.0]])
        ref = -(2.0 - math.log(math.exp(2.0) + 1.0 + math.exp(-1.0)))
        assert ad.cross_entropy(Tensor(logits), [0]).item() == pytest.approx(ref, abs=1e-12)

    def test_cross_entropy_temperature(self):
        logits = np.array([[0.2, 0.1]])
        ref = math.log(1.0 + math.exp((0.1 - 0.2) / 0.07))
        assert ad.cross_entropy(Tensor(logits), [0], tau=0.07).item() == pytest.approx(ref, abs=1e-12)

    def test_cross_entropy_rejects_bad_target(self):
        with pytest.raises(IndexError):
            ad.cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_mse(self):
        assert ad.mse_loss(Tensor([[1.0, 3.0]]), [[0.0, 1.0]]).item() == pytest.approx(2.5)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


class TestGradients:
    @pytest.mark.parametrize("name", sorted(primitive_checks(0)))
    def test_primitive(self, name):
        assert primitive_checks(0)[name]() < TOLERANCE

    def test_mse_random_4x4(self, rng):
        p = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        target = rng.normal(size=(4, 4))
        assert gradcheck(lambda: ad.mse_loss(p, target), [p]) < 1e-6

    def test_l2_normalize_then_dot(self, rng):
        p = Tensor(rng.normal(size=(1, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(1, 6)))
        assert gradcheck(lambda: ad.sum_all(ad.mul(ad.l2_normalize(p), w)), [p]) < 1e-6

    def test_matmul_gradient_closed_form(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        w = rng.normal(size=(3, 2))
        ad.sum_all(ad.mul(ad.matmul(a, b), Tensor(w))).backward()
        np.testing.assert_allclose(a.grad, w @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ w, atol=1e-12)

    def test_gradcheck_detects_wrong_gradient(self, rng):
        a = Tensor(rng.normal(size=(2, 2)), requires_grad=True)

        def broken():
            out = ad.sum_all(ad.mul(a, a))
            grad_fn = out._backward
            out._backward = lambda g: tuple(2.0 * x for x in grad_fn(g))  # doubles the true gradient
            return out

        assert gradcheck(broken, [a]) > 0.1

    def test_gradcheck_rejects_eps(self, rng):
        a = Tensor(rng.normal(size=(1, 2)), requires_grad=True)
        with pytest.raises(ValueError):
            gradcheck(lambda: ad.sum_all(a), [a], eps=1e-2)


class TestOptimizers:
    def test_sgd_single_step(self):
        p = Tensor([[1.0]], requires_grad=True)
        sgd_step([p], [np.array([[1.0]])], OptimState.sgd(0.002))
        np.testing.assert_allclose(p.data, [[0.998]])

    def test_sgd_zero_lr(self):
        p = Tensor([[1.5, -2.0]], requires_grad=True)
        sgd_step([p], [np.ones((1, 2))], OptimState.sgd(0.0))
        np.testing.assert_allclose(p.data, [[1.5, -2.0]])

    def test_adamw_first_step(self):
        # bias-corrected m / sqrt(v) is exactly g / |g| on step one
        p = Tensor([[1.0]], requires_grad=True)
        adamw_step([p], [np.array([[1.0]])], OptimState.adamw(1e-4, weight_decay=0.0))
        np.testing.assert_allclose(p.data, [[1.0 - 1e-4 / (1.0 + 1e-8)]], rtol=0, atol=1e-15)

    def test_adamw_decoupled_decay(self):
        p = Tensor([[2.0]], requires_grad=True)
        adamw_step([p], [np.zeros((1, 1))], OptimState.adamw(0.1, weight_decay=0.5))
        np.testing.assert_allclose(p.data, [[2.0 * (1 - 0.05)]])

    def test_adamw_matches_reference_loop(self, rng):
        p = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        ref = p.data.copy()
        m = np.zeros_like(ref)
        v = np.zeros_like(ref)
        state = OptimState.adamw(1e-3, weight_decay=0.01)
        for t in range(1, 6):
            g = rng.normal(size=(2, 3))
            adamw_step([p], [g], state)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref * (1 - 1e-3 * 0.01) - 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, ref, rtol=1e-12)

    def test_grad_shape_mismatch(self):
        p = Tensor([[1.0, 2.0]], requires_grad=True)
        with pytest.raises(ShapeError):
            sgd_step([p], [np.ones((2, 1))], OptimState.sgd(0.1))
