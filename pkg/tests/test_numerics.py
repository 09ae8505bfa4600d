import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from supw.numerics import (GradPair, NonFiniteError, add, conv2d, elementwise, gradcheck,
                           instance_norm, mul, numerical_gradient, relu, scale, sigmoid,
                           upsample_bilinear)


def _scalarize(op, *args, weights=None, which=0):
    """Wrap an op as a scalar function of argument ``which`` via a fixed
    random projection of its output."""
    def f(z):
        a = list(args)
        a[which] = z
        out = op(*a)
        w = weights if weights is not None else np.ones_like(out.value)
        return GradPair(np.float64((out.value * w).sum()),
                        lambda g: (out.backward(g * w)[which],))
    return f


class TestConv2d:
    def test_scalar_kernel(self):
        out = conv2d(np.ones((1, 1, 3, 3)), np.full((1, 1, 1, 1), 2.0)).value
        np.testing.assert_array_equal(out, np.full((1, 1, 3, 3), 2.0))

    def test_hand_convolution(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        k = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
        np.testing.assert_array_equal(conv2d(x, k).value, [[[[5.0]]]])

    def test_channel_mismatch_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
            conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))

    @pytest.mark.parametrize("stride,pad,h", [(1, 0, 5), (1, 1, 5), (2, 1, 5), (2, 1, 8), (3, 2, 7)])
    def test_output_dims(self, stride, pad, h):
        out = conv2d(np.zeros((2, 3, h, h + 1)), np.zeros((4, 3, 3, 3)), stride=stride, pad=pad).value
        assert out.shape == (2, 4, (h + 2 * pad - 3) // stride + 1, (h + 1 + 2 * pad - 3) // stride + 1)

    def test_matches_direct_loops(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 2, 6, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = conv2d(x, k, b, stride=2, pad=1).value
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for n in range(2):
            for o in range(3):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        ref[n, o, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * k[o]).sum() + b[o]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
    def test_backward_matches_finite_differences(self, seed, stride, pad):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        w = rng.standard_normal(conv2d(x, k, b, stride, pad).value.shape)
        for which, arg in ((0, x), (1, k), (2, b)):
            f = _scalarize(lambda a, c, d: conv2d(a, c, d, stride, pad), x, k, b, weights=w, which=which)
            rep = gradcheck(f, arg)
            assert rep.passed, rep

    def test_backward_shapes(self):
        x, k, b = np.zeros((2, 3, 8, 8)), np.zeros((4, 3, 3, 3)), np.zeros(4)
        pair = conv2d(x, k, b, stride=2, pad=1)
        grads = pair.backward(np.ones_like(pair.value))
        assert [g.shape for g in grads] == [x.shape, k.shape, b.shape]


class TestInstanceNorm:
    def test_hand_values(self):
        out = instance_norm(np.array([[[[1.0, 2.0, 3.0, 4.0]]]])).value.ravel()
        expected = (np.array([1, 2, 3, 4]) - 2.5) / np.sqrt(1.25)
        np.testing.assert_allclose(out, expected, atol=1e-7)
        np.testing.assert_allclose(out, [-1.342, -0.447, 0.447, 1.342], atol=1e-3)

    def test_constant_channel(self):
        out = instance_norm(np.full((1, 1, 2, 2), 5.0), eps=1e-5).value
        np.testing.assert_array_equal(out, np.zeros((1, 1, 2, 2)))

    def test_idempotent_on_standardized(self):
        x = instance_norm(np.random.default_rng(0).standard_normal((2, 3, 6, 6))).value
        np.testing.assert_allclose(instance_norm(x).value, x, atol=1e-6)

    def test_moments_on_random_inputs(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(2, 7)), int(rng.integers(2, 7)))
            x = rng.standard_normal(shape) * rng.uniform(0.1, 10) + rng.uniform(-5, 5)
            out = instance_norm(x).value
            assert np.abs(out.mean(axis=(2, 3))).max() <= 1e-9
            assert np.abs(out.var(axis=(2, 3)) - 1.0).max() <= 1e-6

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 2, 4, 3))
        w = rng.standard_normal(x.shape)
        rep = gradcheck(_scalarize(lambda a: instance_norm(a, 1e-5), x, weights=w), x)
        assert rep.passed, rep


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(relu([-1.0, 0.0, 2.0]).value, [0, 0, 2])

    def test_sigmoid(self):
        assert sigmoid(0.0).value == 0.5
        big = sigmoid(np.array([-800.0, 800.0])).value
        assert np.all((big >= 0) & (big <= 1)) and np.isfinite(big).all()

    def test_mul(self):
        np.testing.assert_array_equal(mul([2.0, 3.0], [4.0, 5.0]).value, [8, 15])

    def test_dispatch(self):
        np.testing.assert_array_equal(elementwise("add", [1.0], [2.0]).value, [3.0])
        np.testing.assert_array_equal(elementwise("scale", [1.0, 2.0], 3.0).value, [3.0, 6.0])
        with pytest.raises(ValueError):
            elementwise("tanh", [1.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            add(np.zeros(2), np.zeros(3))

    @pytest.mark.parametrize("op,nargs", [(sigmoid, 1), (mul, 2), (add, 2), (lambda a: scale(a, -1.7), 1)])
    def test_gradients(self, op, nargs):
        rng = np.random.default_rng(0)
        args = [rng.standard_normal((3, 4)) for _ in range(nargs)]
        for which in range(nargs):
            rep = gradcheck(_scalarize(op, *args, weights=rng.standard_normal((3, 4)), which=which), args[which])
            assert rep.passed, rep

    def test_relu_gradient_away_from_kink(self):
        x = np.array([-1.0, 0.5, 2.0, -0.3])
        assert gradcheck(_scalarize(relu, x), x).passed

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteError):
            add(np.array([np.inf]), np.array([1.0]))


class TestUpsample:
    def test_identity(self):
        x = np.random.default_rng(0).random((1, 2, 2, 2))
        np.testing.assert_array_equal(upsample_bilinear(x, 2, 2).value, x)

    def test_constant_field(self):
        out = upsample_bilinear(np.full((1, 1, 1, 1), 7.0), 5, 3).value
        np.testing.assert_array_equal(out, np.full((1, 1, 5, 3), 7.0))

    def test_half_pixel_centres(self):
        x = np.array([[[[0.0, 2.0], [0.0, 2.0]]]])
        out = upsample_bilinear(x, 2, 4).value[0, 0]
        np.testing.assert_allclose(out, [[0, 0.5, 1.5, 2], [0, 0.5, 1.5, 2]], atol=1e-15)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 3, 4))
        rep = gradcheck(_scalarize(lambda a: upsample_bilinear(a, 7, 5), x,
                                   weights=rng.standard_normal((1, 2, 7, 5))), x)
        assert rep.passed, rep

    def test_matches_scipy_zoom_free_reference(self):
        # independent formulation: explicit per-pixel sampling
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 5))
        out = upsample_bilinear(x[None, None], 9, 3).value[0, 0]
        ref = np.zeros((9, 3))
        for i in range(9):
            sy = min(max((i + 0.5) * 4 / 9 - 0.5, 0), 3)
            for j in range(3):
                sx = min(max((j + 0.5) * 5 / 3 - 0.5, 0), 4)
                y0, x0 = int(np.floor(sy)), int(np.floor(sx))
                y1, x1 = min(y0 + 1, 3), min(x0 + 1, 4)
                fy, fx = sy - y0, sx - x0
                ref[i, j] = ((1 - fy) * ((1 - fx) * x[y0, x0] + fx * x[y0, x1])
                             + fy * ((1 - fx) * x[y1, x0] + fx * x[y1, x1]))
        np.testing.assert_allclose(out, ref, atol=1e-12)


class TestGradcheck:
    def test_quadratic(self):
        f = lambda z: GradPair(np.float64((z ** 2).sum()), lambda g: (2 * z * g,))
        rep = gradcheck(f, np.array([1.0, 2.0]))
        np.testing.assert_allclose(rep.analytic, [2, 4])
        assert rep.max_rel_error <= 1e-6 and rep.passed

    def test_wrong_backward_fails(self):
        f = lambda z: GradPair(np.float64((z ** 2).sum()), lambda g: (4 * z * g,))
        assert not gradcheck(f, np.array([1.0, 2.0])).passed

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_raises(self):
        f = lambda z: GradPair(np.float64(np.log(z).sum()), lambda g: (g / z,))
        with pytest.raises(NonFiniteError):
            gradcheck(f, np.array([0.0]), h=1e-5)

    def test_numerical_gradient_of_cubic(self):
        g = numerical_gradient(lambda z: float((z ** 3).sum()), np.array([1.0, -2.0]))
        np.testing.assert_allclose(g, [3.0, 12.0], rtol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 6), st.sampled_from([1, 2]), st.sampled_from([0, 1]))
def test_conv_backward_shapes_property(cin, cout, h, stride, pad):
    x = np.ones((1, cin, h, h))
    k = np.ones((cout, cin, 3, 3))
    pair = conv2d(x, k, stride=stride, pad=pad)
    dx, dk = pair.backward(np.ones_like(pair.value))
    assert dx.shape == x.shape and dk.shape == k.shape
