import math

import numpy as np
import pytest

from scenemotion import tensor as T


def matmul_loops(a, b):
    """Triple-loop matrix product reference for 2-D operands."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def fd_grad(f, x, step=1e-5):
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * step)
    return g


def check_grad(build, x, rtol=1e-3, atol=1e-8):
    """Compare tape gradients of build(Tensor) against central differences."""
    t = T.Tensor(x.copy(), requires_grad=True)
    g = T.Graph()
    with g:
        loss = build(t)
    analytic = g.backward(loss)[t]

    def scalar(arr):
        return build(T.Tensor(arr)).item()

    numeric = fd_grad(scalar, x.copy())
    err = np.abs(analytic - numeric)
    ok = (err <= rtol * np.maximum(np.abs(analytic), np.abs(numeric))) | (err <= atol)
    assert ok.all(), f"grad mismatch: max err {err.max()}"


class TestMatmul:
    def test_identity(self):
        a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(T.Tensor(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_projection(self):
        p = T.Tensor([[1.0, 0.0], [0.0, 0.0]])
        v = T.Tensor([[5.0], [7.0]])
        np.testing.assert_array_equal(T.matmul(p, v).data, [[5.0], [0.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        out = T.matmul(T.Tensor(a), T.Tensor(b)).data
        np.testing.assert_allclose(out, matmul_loops(a, b), atol=1e-12)

    def test_batched_against_loops(self):
        rng = np.random.default_rng(1)
        for shape_a, shape_b in [((8, 8), (8, 8)), ((5, 8, 8), (5, 8, 8)), ((5, 8, 8), (8, 8)), ((2, 3, 4, 5), (1, 3, 5, 6))]:
            a = rng.normal(size=shape_a)
            b = rng.normal(size=shape_b)
            out = T.matmul(T.Tensor(a), T.Tensor(b)).data
            ref = np.matmul(a, b)
            flat_out = out.reshape(-1, out.shape[-2], out.shape[-1])
            flat_ref = ref.reshape(-1, ref.shape[-2], ref.shape[-1])
            ab = np.broadcast_to(a, ref.shape[:-2] + a.shape[-2:]).reshape(flat_ref.shape[0], *a.shape[-2:])
            bb = np.broadcast_to(b, ref.shape[:-2] + b.shape[-2:]).reshape(flat_ref.shape[0], *b.shape[-2:])
            for i in range(flat_ref.shape[0]):
                np.testing.assert_allclose(flat_out[i], matmul_loops(ab[i], bb[i]), atol=1e-12)

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))

    def test_incompatible_batch(self):
        with pytest.raises(T.ShapeError):
            T.matmul(T.Tensor(np.zeros((2, 3, 4))), T.Tensor(np.zeros((3, 4, 5))))


class TestMaskedSoftmax:
    def test_uniform(self):
        out = T.masked_softmax(T.Tensor([0.0, 0.0, 0.0]), [True, True, True])
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_single_valid(self):
        out = T.masked_softmax(T.Tensor([10.0, 0.0]), [True, False])
        np.testing.assert_array_equal(out.data, [1.0, 0.0])

    def test_direct_formula(self):
        logits = np.array([1.0, 2.0, 3.0])
        out = T.masked_softmax(T.Tensor(logits), [True] * 3).data
        ref = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_fully_invalid_rows_are_zero(self):
        logits = np.array([[1.0, 2.0], [5.0, -1.0]])
        out = T.masked_softmax(T.Tensor(logits), [[False, False], [True, True]]).data
        np.testing.assert_array_equal(out[0], [0.0, 0.0])
        assert abs(out[1].sum() - 1.0) < 1e-9

    def test_rows_sum_to_one_and_masked_exact_zero(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(20, 7)) * 5
        valid = rng.random(size=(20, 7)) > 0.4
        valid[0] = False
        valid[1] = [True] + [False] * 6
        out = T.masked_softmax(T.Tensor(logits), valid).data
        assert (out[~valid] == 0.0).all()
        sums = out.sum(axis=-1)
        has_valid = valid.any(axis=-1)
        np.testing.assert_allclose(sums[has_valid], 1.0, atol=1e-9)
        np.testing.assert_array_equal(sums[~has_valid], 0.0)


class TestLayerNorm:
    def test_constant_row(self):
        out = T.layer_norm(T.Tensor([1.0, 1.0, 1.0, 1.0]), T.Tensor(np.ones(4)), T.Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, np.zeros(4), atol=1e-12)

    def test_already_normalized(self):
        out = T.layer_norm(T.Tensor([-1.0, 1.0]), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-5)

    def test_recompute_moments(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 32)) * 3 + 1
        out = T.layer_norm(T.Tensor(x), T.Tensor(np.ones(32)), T.Tensor(np.zeros(32))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)


class TestBackward:
    def test_linear(self):
        w = T.Tensor(np.zeros(3), requires_grad=True)
        g = T.Graph()
        with g:
            loss = T.tsum(w)
        np.testing.assert_array_equal(g.backward(loss)[w], [1.0, 1.0, 1.0])

    def test_quadratic(self):
        w = T.Tensor([1.0, 2.0], requires_grad=True)
        g = T.Graph()
        with g:
            loss = T.tsum(w * w)
        np.testing.assert_array_equal(g.backward(loss)[w], [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        w = T.Tensor([1.0, 2.0], requires_grad=True)
        g = T.Graph()
        with g:
            out = w * 2.0
        with pytest.raises(ValueError, match="scalar"):
            g.backward(out)

    def test_graph_single_use(self):
        w = T.Tensor([1.0], requires_grad=True)
        g = T.Graph()
        with g:
            loss = T.tsum(w)
        g.backward(loss)
        with pytest.raises(RuntimeError):
            g.backward(loss)

    def test_unreachable_leaf_gets_zero(self):
        w = T.Tensor([1.0, 2.0], requires_grad=True)
        u = T.Tensor([3.0], requires_grad=True)
        g = T.Graph()
        with g:
            _ = u * 2.0  # recorded but not connected to the loss
            loss = T.tsum(w)
        table = g.backward(loss)
        np.testing.assert_array_equal(table[u], [0.0])

    def test_accumulates_over_reuse(self):
        w = T.Tensor([2.0], requires_grad=True)
        g = T.Graph()
        with g:
            loss = T.tsum(w * w + w * 3.0)
        np.testing.assert_allclose(g.backward(loss)[w], [7.0])


class TestGradientsMatchFiniteDifferences:
    """Every differentiable op against central differences (step 1e-5)."""

    rng = np.random.default_rng(7)

    def test_matmul(self):
        b = self.rng.normal(size=(4, 3))
        check_grad(lambda t: T.tsum(T.matmul(t, T.Tensor(b)) * 0.7), self.rng.normal(size=(2, 4)))

    def test_matmul_batched(self):
        b = self.rng.normal(size=(3, 4, 2))
        check_grad(lambda t: T.tsum(T.matmul(t, T.Tensor(b))), self.rng.normal(size=(1, 5, 4)))

    def test_elementwise(self):
        x = self.rng.normal(size=(3, 4))
        y = self.rng.normal(size=(4,)) + 3.0
        check_grad(lambda t: T.tsum(t + T.Tensor(y)), x)
        check_grad(lambda t: T.tsum(t - T.Tensor(y)), x)
        check_grad(lambda t: T.tsum(t * T.Tensor(y)), x)
        check_grad(lambda t: T.tsum(t / T.Tensor(y)), x)
        check_grad(lambda t: T.tsum(T.Tensor(y) / (t + 10.0)), x)
        check_grad(lambda t: T.tsum(-t), x)

    def test_unary(self):
        x = self.rng.normal(size=(10,)) * 0.8
        check_grad(lambda t: T.tsum(T.exp(t)), x)
        check_grad(lambda t: T.tsum(T.log(t + 5.0)), x)
        check_grad(lambda t: T.tsum(T.sqrt(t + 5.0)), x)
        check_grad(lambda t: T.tsum(T.softplus(t)), x)
        # keep test points away from the relu/abs kinks
        far = x[np.abs(x) > 0.05]
        check_grad(lambda t: T.tsum(T.relu(t)), far)
        check_grad(lambda t: T.tsum(T.absolute(t)), far)

    def test_huber(self):
        x = np.array([-2.0, -0.6, 0.3, 0.9, 1.7])  # away from |x| == delta
        check_grad(lambda t: T.tsum(T.huber(t, 1.0)), x)

    def test_wrap_angle(self):
        x = np.array([-2.0, -0.5, 0.4, 2.5])  # interior points of the wrap
        check_grad(lambda t: T.tsum(T.huber(T.wrap_angle(t), 1.0)), x)

    def test_reductions(self):
        x = self.rng.normal(size=(3, 5))
        check_grad(lambda t: T.tsum(t * t), x)
        check_grad(lambda t: T.tsum(T.tsum(t, axis=1) * np.arange(3.0)), x)
        check_grad(lambda t: T.tsum(T.tmean(t, axis=0) * np.arange(5.0)), x)
        check_grad(lambda t: T.tsum(T.reduce_max(t, axis=1) * 2.0), x)

    def test_structure(self):
        x = self.rng.normal(size=(2, 3, 4))
        check_grad(lambda t: T.tsum(T.reshape(t, (6, 4)) * 1.5), x)
        check_grad(lambda t: T.tsum(T.transpose(t, (2, 0, 1)) * 0.5), x)
        check_grad(lambda t: T.tsum(T.concat([t, t * 2.0], axis=1)), x)
        check_grad(lambda t: T.tsum(t[1, :, 1:3]), x)
        check_grad(lambda t: T.tsum(T.tile_leading(t, 3) * 0.3), x)

    def test_select_per_column(self):
        x = self.rng.normal(size=(4, 6))
        rows = np.array([0, 3, 1, 2, 2, 0])
        check_grad(lambda t: T.tsum(T.select_per_column(t, rows)), x)

    def test_masked_softmax(self):
        x = self.rng.normal(size=(3, 5))
        valid = np.ones((3, 5), dtype=bool)
        valid[1, 2:] = False
        w = self.rng.normal(size=(3, 5))
        check_grad(lambda t: T.tsum(T.masked_softmax(t, valid) * w), x)

    def test_log_softmax(self):
        x = self.rng.normal(size=(2, 4))
        w = self.rng.normal(size=(2, 4))
        check_grad(lambda t: T.tsum(T.log_softmax(t) * w), x)

    def test_layer_norm(self):
        x = self.rng.normal(size=(3, 8))
        gain = self.rng.normal(size=(8,)) + 1.0
        bias = self.rng.normal(size=(8,))
        w = self.rng.normal(size=(3, 8))
        check_grad(lambda t: T.tsum(T.layer_norm(t, T.Tensor(gain), T.Tensor(bias)) * w), x)
        # and the affine parameters themselves
        xv = T.Tensor(x)
        check_grad(lambda t: T.tsum(T.layer_norm(xv, t, T.Tensor(bias)) * w), gain.copy())
        check_grad(lambda t: T.tsum(T.layer_norm(xv, T.Tensor(gain), t) * w), bias.copy())

    def test_sinusoidal(self):
        x = self.rng.normal(size=(5,)) * 2.0
        w = self.rng.normal(size=(5, 8))
        check_grad(lambda t: T.tsum(T.sinusoidal_embedding(t, 8, 4.0, 256.0) * w), x)


class TestSinusoidalEmbedding:
    def test_zero_value(self):
        out = T.sinusoidal_embedding(T.Tensor([0.0]), 8, 4.0, 256.0).data[0]
        np.testing.assert_array_equal(out[:4], np.zeros(4))
        np.testing.assert_array_equal(out[4:], np.ones(4))

    def test_single_timescale(self):
        v = 1.3
        out = T.sinusoidal_embedding(T.Tensor([v]), 2, 5.0, 9.0).data[0]
        np.testing.assert_allclose(out, [math.sin(v / 5.0), math.cos(v / 5.0)])

    def test_direct_formula(self):
        v = 1.5
        out = T.sinusoidal_embedding(T.Tensor([v]), 8, 4.0, 256.0).data[0]
        scales = 4.0 * (256.0 / 4.0) ** (np.arange(4) / 3.0)
        assert math.isclose(scales[0], 4.0) and math.isclose(scales[-1], 256.0)
        ref = np.concatenate([np.sin(v / scales), np.cos(v / scales)])
        np.testing.assert_allclose(out, ref, atol=1e-15)

    def test_odd_channels_rejected(self):
        with pytest.raises(ValueError):
            T.sinusoidal_embedding(T.Tensor([1.0]), 7, 4.0, 256.0)

    def test_bad_timescales_rejected(self):
        with pytest.raises(ValueError):
            T.sinusoidal_embedding(T.Tensor([1.0]), 4, 10.0, 2.0)


class TestTensorBasics:
    def test_rank_limit(self):
        with pytest.raises(T.ShapeError):
            T.Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_zero_size_rejected(self):
        with pytest.raises(T.ShapeError):
            T.Tensor(np.zeros((0, 3)))

    def test_float64(self):
        t = T.Tensor(np.float32([1, 2]))
        assert t.data.dtype == np.float64

    def test_forward_determinism(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(4, 4))
        b = rng.normal(size=(4, 4))

        def run():
            x = T.matmul(T.Tensor(a), T.Tensor(b))
            x = T.layer_norm(x, T.Tensor(np.ones(4)), T.Tensor(np.zeros(4)))
            x = T.masked_softmax(x, np.ones((4, 4), dtype=bool))
            return T.tsum(x).item()

        assert run() == run()
