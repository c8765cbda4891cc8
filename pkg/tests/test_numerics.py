"""Test the shared numerical kernels of G-SHDL."""

import sys
import unittest
from pathlib import Path

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

# Add project root to path to import from gshdl
sys.path.insert(0, str(Path(__file__).parent.parent))

from gshdl.errors import ConfigError, DataError, DimensionError, NumericalError, PreconditionError
from gshdl.numerics import (
    OptimizerOptions,
    conv2d_bank,
    conv2d_same,
    derive_seed,
    lbfgs_minimize,
    rng_from_seed,
    sym_eigen,
    window_statistics,
)


def brute_force_conv(image, kernel):
    """Direct summation with a mirrored border."""
    r, s = kernel.shape[0] // 2, kernel.shape[1] // 2
    padded = np.pad(image, ((r, r), (s, s)), mode="reflect")
    out = np.zeros(image.shape, dtype=np.result_type(image, kernel))
    for i in range(image.shape[0]):
        for j in range(image.shape[1]):
            for a in range(-r, r + 1):
                for b in range(-s, s + 1):
                    out[i, j] += kernel[a + r, b + s] * padded[i - a + r, j - b + s]
    return out


finite_floats = st.floats(min_value=-10, max_value=10, allow_nan=False, allow_infinity=False)


class TestConvolution(unittest.TestCase):
    """Test same-size mirrored convolution."""

    def setUp(self):
        self.rng = np.random.default_rng(7)

    def test_identity_kernel(self):
        """A centred unit impulse kernel leaves the image unchanged."""
        image = self.rng.normal(size=(6, 9))
        kernel = np.zeros((3, 3))
        kernel[1, 1] = 1.0
        np.testing.assert_array_equal(conv2d_same(image, kernel), image)

    def test_constant_image(self):
        """A constant image is scaled by the kernel sum, borders included."""
        image = np.full((5, 7), 2.5)
        kernel = self.rng.normal(size=(5, 5))
        np.testing.assert_allclose(conv2d_same(image, kernel), 2.5 * kernel.sum(), atol=1e-12)

    def test_matches_direct_summation(self):
        """Output matches a direct double sum with reflected borders."""
        image = self.rng.normal(size=(8, 6))
        kernel = self.rng.normal(size=(5, 3))
        np.testing.assert_allclose(conv2d_same(image, kernel), brute_force_conv(image, kernel), atol=1e-10)

    def test_complex_kernel(self):
        """Complex kernels convolve their real and imaginary parts separately."""
        image = self.rng.normal(size=(7, 7))
        kernel = self.rng.normal(size=(3, 3)) + 1j * self.rng.normal(size=(3, 3))
        out = conv2d_same(image, kernel)
        np.testing.assert_allclose(out.real, brute_force_conv(image, kernel.real), atol=1e-10)
        np.testing.assert_allclose(out.imag, brute_force_conv(image, kernel.imag), atol=1e-10)

    def test_even_kernel_rejected(self):
        """Even-sized kernels have no centre and are rejected."""
        with self.assertRaises(DimensionError):
            conv2d_same(np.zeros((4, 4)), np.ones((2, 3)))

    def test_non_finite_image_rejected(self):
        """NaN input raises a data error."""
        image = np.zeros((4, 4))
        image[1, 2] = np.nan
        with self.assertRaises(DataError):
            conv2d_same(image, np.ones((3, 3)))

    @settings(max_examples=25, deadline=None)
    @given(
        arrays(np.float64, (5, 6), elements=finite_floats),
        arrays(np.float64, (5, 6), elements=finite_floats),
        finite_floats,
        finite_floats,
    )
    def test_linearity(self, x, y, a, b):
        """conv(a x + b y) = a conv(x) + b conv(y)."""
        kernel = np.arange(9, dtype=np.float64).reshape(3, 3) / 9.0 - 0.4
        left = conv2d_same(a * x + b * y, kernel)
        right = a * conv2d_same(x, kernel) + b * conv2d_same(y, kernel)
        np.testing.assert_allclose(left, right, atol=1e-8)

    def test_bank_matches_per_channel_sum(self):
        """conv2d_bank sums single-plane convolutions over input channels."""
        volume = self.rng.normal(size=(3, 6, 5))
        kernels = self.rng.normal(size=(2, 3, 3, 3))
        out = conv2d_bank(volume, kernels)
        for k in range(2):
            expected = sum(conv2d_same(volume[c], kernels[k, c]) for c in range(3))
            np.testing.assert_allclose(out[k], expected, atol=1e-10)

    def test_bank_correlate_flips(self):
        """Correlation equals convolution with the flipped kernel."""
        volume = self.rng.normal(size=(2, 5, 5))
        kernels = self.rng.normal(size=(1, 2, 3, 3))
        np.testing.assert_allclose(
            conv2d_bank(volume, kernels, correlate=True),
            conv2d_bank(volume, kernels[:, :, ::-1, ::-1]),
            atol=1e-12,
        )

    def test_bank_channel_mismatch(self):
        """Kernel input channels must match the volume."""
        with self.assertRaises(DimensionError):
            conv2d_bank(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)))

    def test_window_statistics_is_gradient(self):
        """window_statistics is the gradient of the correlation response."""
        volume = self.rng.normal(size=(2, 5, 4))
        maps = self.rng.normal(size=(1, 5, 4))
        weights = self.rng.normal(size=(1, 2, 3, 3))
        grad = window_statistics(volume, maps, 3, 3)

        def response(w):
            return float(np.sum(maps * conv2d_bank(volume, w, correlate=True)))

        bumped = weights.copy()
        bumped[0, 1, 2, 0] += 1e-6
        numeric = (response(bumped) - response(weights)) / 1e-6
        self.assertAlmostEqual(numeric, grad[0, 1, 2, 0], places=4)


class TestSymmetricEigen(unittest.TestCase):
    """Test the symmetric eigendecomposition."""

    def test_two_by_two(self):
        """[[2,1],[1,2]] has eigenvalues 3 and 1."""
        values, vectors = sym_eigen(np.array([[2.0, 1.0], [1.0, 2.0]]))
        np.testing.assert_allclose(values, [3.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(vectors[:, 0], [1 / np.sqrt(2), 1 / np.sqrt(2)], atol=1e-12)

    def test_diagonal_sorted_descending(self):
        """Diagonal entries come back sorted descending."""
        values, vectors = sym_eigen(np.diag([1.0, 5.0, 3.0]))
        np.testing.assert_allclose(values, [5.0, 3.0, 1.0])
        np.testing.assert_allclose(np.abs(vectors), np.eye(3)[:, [1, 2, 0]])

    def test_reconstruction_and_orthonormality(self):
        """V diag(values) V^T rebuilds the matrix and V is orthonormal."""
        a = np.random.default_rng(3).normal(size=(8, 8))
        m = a + a.T
        for method in ("lapack", "jacobi"):
            values, vectors = sym_eigen(m, method=method)
            np.testing.assert_allclose(vectors @ np.diag(values) @ vectors.T, m, atol=1e-9)
            np.testing.assert_allclose(vectors.T @ vectors, np.eye(8), atol=1e-10)
            self.assertTrue(np.all(np.diff(values) <= 0))

    def test_jacobi_matches_lapack(self):
        """Both methods agree on values and, after sign normalization, vectors."""
        a = np.random.default_rng(11).normal(size=(6, 6))
        m = a @ a.T
        lv, lV = sym_eigen(m, method="lapack")
        jv, jV = sym_eigen(m, method="jacobi")
        np.testing.assert_allclose(lv, jv, atol=1e-9)
        np.testing.assert_allclose(lV, jV, atol=1e-7)

    def test_asymmetric_rejected(self):
        """Asymmetry above 1e-12 is a precondition violation."""
        m = np.array([[1.0, 2.0], [2.0 + 1e-9, 1.0]])
        with self.assertRaises(PreconditionError):
            sym_eigen(m)

    def test_unknown_method(self):
        """Unknown methods are configuration errors."""
        with self.assertRaises(ConfigError):
            sym_eigen(np.eye(2), method="power")


class TestLbfgs(unittest.TestCase):
    """Test the limited-memory BFGS minimizer."""

    def test_quadratic(self):
        """A convex quadratic converges to the solution of A x = b."""
        rng = np.random.default_rng(0)
        a = rng.normal(size=(5, 5))
        hessian = a @ a.T + 5 * np.eye(5)
        b = rng.normal(size=5)

        def objective(x):
            return 0.5 * x @ hessian @ x - b @ x, hessian @ x - b

        result = lbfgs_minimize(objective, np.zeros(5), OptimizerOptions(max_iterations=200, gradient_tolerance=1e-9))
        self.assertTrue(result.converged)
        np.testing.assert_allclose(result.argmin, np.linalg.solve(hessian, b), atol=1e-7)

    def test_trace_non_increasing(self):
        """Armijo backtracking never accepts an uphill step."""

        def objective(x):
            return float(np.sum(x ** 4) + np.sum(x ** 2)), 4 * x ** 3 + 2 * x

        result = lbfgs_minimize(objective, np.array([3.0, -2.0, 1.0]))
        self.assertTrue(np.all(np.diff(result.trace) <= 1e-15))
        self.assertEqual(result.trace[0], objective(np.array([3.0, -2.0, 1.0]))[0])

    def test_rosenbrock(self):
        """The Rosenbrock valley is followed to (1, 1)."""

        def objective(p):
            x, y = p
            value = (1 - x) ** 2 + 100 * (y - x * x) ** 2
            grad = np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])
            return value, grad

        result = lbfgs_minimize(objective, np.array([-1.2, 1.0]), OptimizerOptions(max_iterations=1000, gradient_tolerance=1e-8))
        np.testing.assert_allclose(result.argmin, [1.0, 1.0], atol=1e-4)

    def test_logistic_regression(self):
        """Regularized logistic regression reaches a zero gradient."""
        rng = np.random.default_rng(5)
        features = rng.normal(size=(60, 3))
        labels = (features @ np.array([1.5, -2.0, 0.5]) + 0.3 * rng.normal(size=60) > 0).astype(float)

        def objective(w):
            z = features @ w
            p = 1 / (1 + np.exp(-z))
            value = np.sum(np.logaddexp(0, z) - labels * z) + 0.5 * w @ w
            return value, features.T @ (p - labels) + w

        result = lbfgs_minimize(objective, np.zeros(3), OptimizerOptions(max_iterations=300, gradient_tolerance=1e-7))
        self.assertTrue(result.converged)
        self.assertLess(np.max(np.abs(objective(result.argmin)[1])), 1e-7)

    def test_non_finite_start(self):
        """A NaN objective at the start raises with the start as last iterate."""
        with self.assertRaises(NumericalError) as ctx:
            lbfgs_minimize(lambda x: (np.nan, np.zeros_like(x)), np.ones(2))
        np.testing.assert_array_equal(ctx.exception.last_iterate, np.ones(2))

    def test_divergence_keeps_last_finite_iterate(self):
        """NaN during the search reports the last finite point."""

        def objective(x):
            if x[0] > 3.0:
                return np.nan, np.array([np.nan])
            return -float(x[0]), np.array([-1.0])

        with self.assertRaises(NumericalError) as ctx:
            lbfgs_minimize(objective, np.zeros(1))
        np.testing.assert_array_equal(ctx.exception.last_iterate, [3.0])

    def test_invalid_options(self):
        """Non-positive options are configuration errors."""
        with self.assertRaises(ConfigError):
            OptimizerOptions(max_iterations=0)
        with self.assertRaises(ConfigError):
            OptimizerOptions(gradient_tolerance=0.0)


class TestSeeds(unittest.TestCase):
    """Test seeded random streams."""

    def test_same_seed_same_stream(self):
        """Equal seed and stream give equal draws."""
        np.testing.assert_array_equal(rng_from_seed(42, 1, 2).random(5), rng_from_seed(42, 1, 2).random(5))

    def test_streams_differ(self):
        """Different sub-streams are independent."""
        self.assertFalse(np.array_equal(rng_from_seed(42, 1).random(5), rng_from_seed(42, 2).random(5)))

    def test_derive_seed(self):
        """Derived seeds are deterministic, distinct and non-negative 63-bit."""
        a = derive_seed(7, 3, 0)
        self.assertEqual(a, derive_seed(7, 3, 0))
        self.assertNotEqual(a, derive_seed(7, 3, 1))
        self.assertTrue(0 <= a < 2 ** 63)


if __name__ == "__main__":
    unittest.main()
