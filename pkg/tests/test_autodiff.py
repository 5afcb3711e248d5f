"""Every VJP is checked against central finite differences.

The checker perturbs each parameter entry of a rebuilt graph; analytic
gradients must match to ~1e-6 absolute at eps=1e-6 in float64. Ops with
kinks (max routing, relu, the quantizer window) are tested at points with
a safety margin from their non-differentiable sets.
"""

import numpy as np
import pytest

from bgnn import autodiff as ad


def fd_gradcheck(build, params, eps=1e-6, atol=5e-6, rtol=1e-5):
    """build() returns a scalar Tensor using `params`; compares grads to FD."""
    for p in params:
        p.grad = None
    loss = build()
    loss.backward()
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.ravel()
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = build().item()
            flat[i] = orig - eps
            lo = build().item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2 * eps)
        np.testing.assert_allclose(
            analytic.ravel(), numeric, atol=atol, rtol=rtol,
            err_msg=f"gradient mismatch for param of shape {p.data.shape}",
        )


def leaf(rng, *shape):
    return ad.Tensor(rng.normal(size=shape), requires_grad=True)


class TestElementwise:
    def test_add_mul_broadcast(self):
        rng = np.random.default_rng(0)
        a = leaf(rng, 3, 4)
        b = leaf(rng, 4)
        c = leaf(rng, 1)
        fd_gradcheck(lambda: ((a * b + c) * a).sum(), [a, b, c])

    def test_power_div(self):
        rng = np.random.default_rng(1)
        a = ad.Tensor(rng.uniform(0.5, 2.0, (3, 3)), requires_grad=True)
        b = ad.Tensor(rng.uniform(0.5, 2.0, (3, 3)), requires_grad=True)
        fd_gradcheck(lambda: (ad.power(a, 3.0) / b).sum(), [a, b])

    def test_exp_log_sqrt_tanh(self):
        rng = np.random.default_rng(2)
        a = ad.Tensor(rng.uniform(0.5, 1.5, (2, 5)), requires_grad=True)
        fd_gradcheck(
            lambda: (ad.exp(a) + ad.log(a) + ad.sqrt(a) + ad.tanh(a)).sum(), [a]
        )

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 4))
        x[np.abs(x) < 0.05] = 0.1
        a = ad.Tensor(x, requires_grad=True)
        fd_gradcheck(lambda: ad.relu(a).sum(), [a])

    def test_prelu_grad_both_inputs(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(5, 3))
        x[np.abs(x) < 0.05] = -0.5
        a = ad.Tensor(x, requires_grad=True)
        s = ad.Tensor(np.array([0.25]), requires_grad=True)
        fd_gradcheck(lambda: (ad.prelu(a, s) * 1.5).sum(), [a, s])


class TestLinalg:
    def test_matmul(self):
        rng = np.random.default_rng(5)
        a = leaf(rng, 3, 4)
        b = leaf(rng, 4, 2)
        fd_gradcheck(lambda: (a @ b).sum(), [a, b])

    def test_matmul_rejects_1d(self):
        with pytest.raises(ValueError):
            ad.matmul(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(3)))

    def test_sum_mean_axes(self):
        rng = np.random.default_rng(6)
        a = leaf(rng, 3, 4)
        fd_gradcheck(
            lambda: (a.sum(axis=0) * a.mean(axis=1).sum()).sum(), [a]
        )

    def test_reshape_concat_getitem(self):
        rng = np.random.default_rng(7)
        a = leaf(rng, 2, 6)
        b = leaf(rng, 2, 3)

        def build():
            c = ad.concat([a.reshape(2, 6), b], axis=1)
            return (c[:, 2:8] * c[:, 0:6]).sum()

        fd_gradcheck(build, [a, b])


class TestRouting:
    def test_max_axis_routing(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(4, 5, 3)) * 3  # well-separated values
        a = ad.Tensor(x, requires_grad=True)
        fd_gradcheck(lambda: ad.tmax(a, axis=1).sum(), [a])

    def test_max_tie_routes_to_first(self):
        a = ad.Tensor(np.array([[2.0, 2.0, 1.0]]), requires_grad=True)
        out = ad.tmax(a, axis=1)
        out.backward(np.array([1.0]))
        assert a.grad.tolist() == [[1.0, 0.0, 0.0]]

    def test_gather_rows_accumulates(self):
        rng = np.random.default_rng(9)
        a = leaf(rng, 4, 3)
        idx = np.array([0, 0, 3, 1])
        fd_gradcheck(lambda: (ad.gather_rows(a, idx) * 2.0).sum(), [a])

    def test_segment_sum(self):
        rng = np.random.default_rng(10)
        a = leaf(rng, 6, 2)
        seg = np.array([0, 0, 1, 1, 1, 3])
        fd_gradcheck(
            lambda: (ad.segment_sum(a, seg, 4) * np.arange(1.0, 5.0)[:, None]).sum(),
            [a],
        )

    def test_segment_sum_empty_segment_is_zero(self):
        a = ad.Tensor(np.ones((2, 3)))
        out = ad.segment_sum(a, np.array([0, 2]), 4)
        assert np.array_equal(out.data[1], np.zeros(3))
        assert np.array_equal(out.data[3], np.zeros(3))


class TestNormalization:
    def test_log_softmax(self):
        rng = np.random.default_rng(11)
        a = leaf(rng, 4, 6)
        w = rng.normal(size=(4, 6))
        fd_gradcheck(lambda: (ad.log_softmax(a) * w).sum(), [a])

    def test_l2_normalize(self):
        rng = np.random.default_rng(12)
        a = ad.Tensor(rng.normal(size=(5, 4)) + 0.5, requires_grad=True)
        w = rng.normal(size=(5, 4))
        fd_gradcheck(lambda: (ad.l2_normalize_rows(a) * w).sum(), [a])

    def test_l2_normalize_zero_row(self):
        x = np.array([[0.0, 0.0], [3.0, 4.0]])
        a = ad.Tensor(x, requires_grad=True)
        out = ad.l2_normalize_rows(a)
        assert np.array_equal(out.data[0], [0.0, 0.0])
        np.testing.assert_allclose(out.data[1], [0.6, 0.8])
        out.backward(np.ones_like(x))
        assert np.array_equal(a.grad[0], [0.0, 0.0])

    def test_batchnorm_composition(self):
        # build BN out of primitives the way the trainer does
        rng = np.random.default_rng(13)
        x = leaf(rng, 8, 3)
        scale = ad.Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
        shift = ad.Tensor(rng.normal(size=3), requires_grad=True)

        def build():
            mu = x.mean(axis=0, keepdims=True)
            var = ((x - mu) * (x - mu)).mean(axis=0, keepdims=True)
            xhat = (x - mu) / ad.sqrt(var + 1e-5)
            y = xhat * scale + shift
            return (y * y).sum()

        fd_gradcheck(build, [x, scale, shift], atol=2e-5)


class TestQuantizers:
    def test_ste_matches_surrogate_fd(self):
        # the estimator's analytic gradient must equal the finite-difference
        # gradient of the clip surrogate, away from the +/-1 kinks and 0
        rng = np.random.default_rng(14)
        x = rng.uniform(-2.0, 2.0, size=(6, 4))
        x[np.abs(np.abs(x) - 1.0) < 0.05] = 0.5
        x[np.abs(x) < 0.05] = 0.5
        w = rng.normal(size=(6, 4))

        surrogate = ad.Tensor(x.copy(), requires_grad=True)
        fd_gradcheck(lambda: (ad.hardtanh(surrogate) * w).sum(), [surrogate])

        hard = ad.Tensor(x.copy(), requires_grad=True)
        (ad.sign_ste(hard) * w).sum().backward()
        np.testing.assert_allclose(hard.grad, w * (np.abs(x) <= 1.0))

    def test_window_is_closed(self):
        a = ad.Tensor(np.array([-1.0, 1.0, 1.0001, -1.0001]), requires_grad=True)
        ad.sign_ste(a).sum().backward()
        assert a.grad.tolist() == [1.0, 1.0, 0.0, 0.0]

    def test_sign_forward_values(self):
        a = ad.Tensor(np.array([-0.3, 0.0, 2.0]))
        assert ad.sign_ste(a).data.tolist() == [-1.0, 1.0, 1.0]
        assert ad.hardtanh(ad.Tensor(np.array([-3.0, 0.25, 3.0]))).data.tolist() == [
            -1.0,
            0.25,
            1.0,
        ]


class TestTapeMechanics:
    def test_grad_accumulates_across_uses(self):
        a = ad.Tensor(np.array([2.0]), requires_grad=True)
        ((a * 3.0) + (a * 5.0)).sum().backward()
        assert a.grad.tolist() == [8.0]

    def test_backward_needs_scalar_or_seed(self):
        a = ad.Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ValueError):
            (a * 1.0).backward()
        (a * 2.0).backward(np.ones((2, 2)))
        assert np.array_equal(a.grad, 2 * np.ones((2, 2)))

    def test_detach_blocks_gradient(self):
        a = ad.Tensor(np.array([3.0]), requires_grad=True)
        (a.detach() * a).sum().backward()
        assert a.grad.tolist() == [3.0]

    def test_constants_collect_no_grad(self):
        a = ad.Tensor(np.array([1.0]))
        b = ad.Tensor(np.array([2.0]), requires_grad=True)
        (a * b).sum().backward()
        assert a.grad is None and b.grad.tolist() == [1.0]

    def test_dropout_eval_identity_train_scales(self):
        rng = np.random.default_rng(15)
        a = ad.Tensor(np.ones((100, 10)), requires_grad=True)
        assert ad.dropout(a, 0.5, rng, training=False) is a
        out = ad.dropout(a, 0.5, rng, training=True)
        vals = np.unique(out.data)
        assert set(vals.tolist()) <= {0.0, 2.0}
        with pytest.raises(ValueError):
            ad.dropout(a, 1.0, rng, training=True)

    def test_diamond_graph_topological_order(self):
        a = ad.Tensor(np.array([1.5]), requires_grad=True)
        b = a * 2.0
        c = a * 3.0
        d = b * c  # d = 6 a^2, dd/da = 12 a
        d.sum().backward()
        assert a.grad.tolist() == [18.0]
