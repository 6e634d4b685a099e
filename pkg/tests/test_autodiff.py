import numpy as np
import pytest

from qvit import autodiff as ad
from qvit import qnn


def finite_difference(f, x, h=1e-5):
    """Central-difference gradient of a scalar-valued f at x (elementwise)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * h)
    return g


def check_grad(build, *leaves, tol=1e-5):
    """Backward gradients vs central finite differences for every leaf."""
    out = build()
    out.backward()
    grads = [leaf.grad.copy() for leaf in leaves]
    for leaf, got in zip(leaves, grads):
        fd = finite_difference(lambda: float(build().data.reshape(())), leaf.data)
        scale = np.maximum(np.abs(fd), 1.0)
        assert np.abs((got - fd) / scale).max() < tol


def sum_all(t):
    ones = ad.constant(np.ones((t.data.shape[-1], 1)))
    if t.data.ndim == 1:
        return ad.matmul(ad.constant(np.ones((1, t.data.shape[0]))),
                         ad.matmul(t if t.data.ndim == 2 else t, ones))
    left = ad.constant(np.ones((1, t.data.shape[0])))
    return ad.matmul(left, ad.matmul(t, ones))


class TestMatmul:
    def test_identity(self):
        x = ad.parameter(np.arange(6.0).reshape(2, 3))
        out = ad.matmul(ad.constant(np.eye(2)), x)
        assert np.array_equal(out.data, x.data)
        sum_all(out).backward()
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_scalar_case_product_rule(self):
        a = ad.parameter([[3.0]])
        b = ad.parameter([[4.0]])
        out = ad.matmul(a, b)
        out.backward()
        assert out.data[0, 0] == 12.0
        assert a.grad[0, 0] == 4.0 and b.grad[0, 0] == 3.0

    def test_random_matches_finite_differences(self, rng):
        a = ad.parameter(rng.normal(size=(3, 4)))
        b = ad.parameter(rng.normal(size=(4, 2)))
        check_grad(lambda: sum_all(ad.matmul(a, b)), a, b, tol=1e-6)


class TestSoftmax:
    def test_equal_values_uniform(self):
        out = ad.softmax_rows(ad.constant([[2.0, 2.0, 2.0, 2.0]]))
        assert np.allclose(out.data, 0.25)

    def test_large_values_stable(self):
        out = ad.softmax_rows(ad.constant([[1000.0, 0.0]]))
        assert np.allclose(out.data, [[1.0, 0.0]])
        assert np.isfinite(out.data).all()

    def test_gradient_matches_finite_differences(self, rng):
        x = ad.parameter(rng.normal(size=(3, 5)))
        w = ad.constant(rng.normal(size=(5, 1)))
        check_grad(lambda: sum_all(ad.matmul(ad.softmax_rows(x), w)), x, tol=1e-6)


class TestElementwise:
    def test_relu_zeroes_negative_gradient(self):
        x = ad.parameter([[-1.0, 2.0, -0.5, 3.0]])
        sum_all(ad.relu(x)).backward()
        assert np.array_equal(x.grad, [[0.0, 1.0, 0.0, 1.0]])

    def test_mse_self_is_zero(self):
        x = ad.parameter([[1.0, 2.0, 3.0]])
        loss = ad.mse_loss(x, x.data.copy())
        loss.backward()
        assert loss.data == 0.0
        assert np.array_equal(x.grad, np.zeros((1, 3)))

    def test_cross_entropy_uniform_logits(self):
        for c in (2, 5, 9):
            loss = ad.softmax_cross_entropy(ad.constant(np.zeros((1, c))), [0])
            assert abs(float(loss.data) - np.log(c)) < 1e-12

    def test_cross_entropy_gradient(self, rng):
        x = ad.parameter(rng.normal(size=(4, 3)))
        labels = [0, 2, 1, 2]
        check_grad(lambda: ad.softmax_cross_entropy(x, labels), x, tol=1e-6)

    def test_add_bias_broadcast(self, rng):
        x = ad.parameter(rng.normal(size=(3, 4)))
        b = ad.parameter(rng.normal(size=4))
        check_grad(lambda: sum_all(ad.add(x, b)), x, b, tol=1e-6)

    def test_scale_and_mean_rows(self, rng):
        x = ad.parameter(rng.normal(size=(5, 3)))
        check_grad(lambda: sum_all(ad.mean_rows(ad.scale(x, 2.5))), x, tol=1e-6)

    def test_layer_norm_rows(self, rng):
        x = ad.parameter(rng.normal(size=(3, 6)))
        w = ad.constant(rng.normal(size=(6, 1)))
        check_grad(lambda: sum_all(ad.matmul(ad.layer_norm_rows(x), w)), x, tol=1e-4)

    def test_add_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.add(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((3, 2))))


class TestGraphMechanics:
    def test_shared_node_accumulates(self):
        x = ad.parameter([[1.0, 2.0]])
        y = ad.add(x, x)
        sum_all(y).backward()
        assert np.array_equal(x.grad, [[2.0, 2.0]])

    def test_diamond_graph(self, rng):
        x = ad.parameter(rng.normal(size=(2, 2)))
        check_grad(lambda: sum_all(ad.add(ad.relu(x), ad.scale(x, 3.0))), x,
                   tol=1e-6)

    def test_backward_requires_seed_for_non_scalar(self):
        x = ad.parameter(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            ad.relu(x).backward()

    def test_grads_accumulate_across_backwards(self):
        x = ad.parameter([[1.0]])
        ad.scale(x, 2.0).backward()
        ad.scale(x, 3.0).backward()
        assert x.grad[0, 0] == 5.0

    def test_no_grad_forward_bit_identical(self, rng):
        x = ad.parameter(rng.normal(size=(4, 4)))
        tracked = ad.softmax_rows(ad.matmul(x, x))
        with ad.no_grad():
            untracked = ad.softmax_rows(ad.matmul(x, x))
            assert untracked._parents == ()
        assert np.array_equal(tracked.data, untracked.data)

    def test_tape_freed_after_backward(self, rng):
        x = ad.parameter(rng.normal(size=(2, 2)))
        y = ad.relu(x)
        out = sum_all(y)
        out.backward()
        assert y._parents == ()


class TestQuantumApply:
    def test_zero_params_zero_tokens_give_ones(self):
        params = ad.parameter(np.zeros(8))
        rows = ad.constant(np.zeros((3, 4)))
        out = ad.quantum_apply(rows, params, qnn.ring_topology(4))
        assert np.allclose(out.data, 1.0, atol=1e-15)

    def test_param_gradient_matches_parameter_shift(self, rng):
        n = 4
        pairs = qnn.ring_topology(n)
        theta = rng.uniform(-np.pi, np.pi, 2 * n)
        params = ad.parameter(theta)
        rows_data = rng.uniform(-np.pi, np.pi, (3, n))
        out = ad.quantum_apply(ad.constant(rows_data), params, pairs)
        sum_all(out).backward()
        spec = qnn.QnnSpec(n, pairs, theta)
        expected = np.zeros(2 * n)
        for k in range(2 * n):
            for row in rows_data:
                expected[k] += qnn.parameter_shift_gradient(row, spec, k).sum()
        assert np.abs(params.grad - expected).max() < 1e-10

    def test_duplicate_rows_double_the_gradient(self, rng):
        n = 4
        pairs = qnn.ring_topology(n)
        theta = rng.uniform(-np.pi, np.pi, 2 * n)
        row = rng.uniform(-np.pi, np.pi, (1, n))

        def grad_for(rows_data):
            params = ad.parameter(theta)
            out = ad.quantum_apply(ad.constant(rows_data), params, pairs)
            sum_all(out).backward()
            return params.grad

        single = grad_for(row)
        double = grad_for(np.vstack([row, row]))
        assert np.allclose(double, 2 * single, atol=1e-12)

    def test_input_gradient_matches_finite_differences(self, rng):
        n = 4
        pairs = qnn.ring_topology(n)
        params = ad.parameter(rng.uniform(-np.pi, np.pi, 2 * n))
        rows = ad.parameter(rng.uniform(-np.pi, np.pi, (2, n)))
        check_grad(lambda: sum_all(ad.quantum_apply(rows, params, pairs)),
                   rows, params, tol=1e-6)
