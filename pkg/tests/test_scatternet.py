"""Test the scattering front-end."""

import math
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
from scipy import stats

# Add project root to path to import from gshdl
sys.path.insert(0, str(Path(__file__).parent.parent))

from gshdl.errors import ConfigError, PreconditionError
from gshdl.scatternet import (
    FINEST_XI,
    ScatterConfig,
    build_filter_bank,
    expected_channel_count,
    kernel_size,
    load_features,
    modulus_envelope,
    oriented_phase,
    parametric_log,
    save_features,
    scatter,
    scatter_many,
)


class TestFilterBank(unittest.TestCase):
    """Test band-pass and low-pass construction."""

    @classmethod
    def setUpClass(cls):
        cls.config = ScatterConfig()
        cls.bank = build_filter_bank(cls.config)

    def test_counts_and_sizes(self):
        """Two scales and six orientations give twelve kernels plus the low-pass."""
        self.assertEqual(len(self.bank.bandpass), 12)
        self.assertEqual(self.bank.bandpass[(1, 0)].shape, (15, 15))
        self.assertEqual(self.bank.bandpass[(2, 5)].shape, (31, 31))
        self.assertEqual([kernel_size(j) for j in (1, 2, 3)], [15, 31, 63])

    def test_zero_dc(self):
        """Every band-pass kernel sums to nearly zero."""
        for key, kernel in self.bank.bandpass.items():
            self.assertLessEqual(abs(kernel.sum()), 1e-3 * np.abs(kernel).sum(), msg=str(key))

    def test_lowpass(self):
        """The low-pass window is nonnegative and sums to one."""
        self.assertTrue(np.all(self.bank.lowpass >= 0))
        self.assertAlmostEqual(self.bank.lowpass.sum(), 1.0, delta=1e-10)

    def test_one_sided_support(self):
        """Coarse-scale kernels keep their energy in their orientation's half-plane."""
        size = 64
        fy, fx = np.meshgrid(np.fft.fftfreq(size), np.fft.fftfreq(size), indexing="ij")
        for r, theta in enumerate(self.config.orientations):
            spectrum = np.abs(np.fft.fft2(self.bank.bandpass[(2, r)], s=(size, size))) ** 2
            half = fx * math.cos(math.radians(theta)) + fy * math.sin(math.radians(theta)) > 0
            self.assertGreaterEqual(spectrum[half].sum() / spectrum.sum(), 0.9, msg=f"orientation {theta}")

    def test_grating_selects_matching_orientation(self):
        """A 45 degree grating excites the 45 degree filter most."""
        grating = np.cos(oriented_phase(64, 64, 45.0, FINEST_XI))
        energies = [
            np.mean(modulus_envelope(grating, self.bank.bandpass[(1, r)])[16:48, 16:48] ** 2)
            for r in range(6)
        ]
        self.assertEqual(int(np.argmax(energies)), self.config.orientations.index(45.0))

    def test_fingerprint_stable(self):
        """Rebuilding the bank gives the same fingerprint."""
        self.assertEqual(self.bank.fingerprint(), build_filter_bank(self.config).fingerprint())

    def test_invalid_config(self):
        """Scale counts outside 1..3 and non-positive k are rejected."""
        with self.assertRaises(ConfigError):
            ScatterConfig(num_scales=4)
        with self.assertRaises(ConfigError):
            ScatterConfig(log_k_finest=0.0)


class TestEnvelope(unittest.TestCase):
    """Test modulus envelopes and the parametric log."""

    @classmethod
    def setUpClass(cls):
        cls.bank = build_filter_bank(ScatterConfig())

    def test_zero_image(self):
        """A zero image has a zero envelope."""
        out = modulus_envelope(np.zeros((20, 20)), self.bank.bandpass[(1, 2)])
        np.testing.assert_array_equal(out, 0.0)

    def test_sign_invariance(self):
        """x and -x have identical envelopes."""
        x = np.random.default_rng(1).normal(size=(24, 24))
        psi = self.bank.bandpass[(1, 3)]
        np.testing.assert_allclose(modulus_envelope(x, psi), modulus_envelope(-x, psi), atol=1e-12)

    def test_impulse_response(self):
        """A centred impulse reproduces the kernel magnitude."""
        image = np.zeros((41, 41))
        image[20, 20] = 1.0
        psi = self.bank.bandpass[(1, 1)]
        out = modulus_envelope(image, psi)
        np.testing.assert_allclose(out[13:28, 13:28], np.abs(psi), atol=1e-10)

    def test_log_of_zero(self):
        """log(0 + 1.1) everywhere."""
        out = parametric_log(np.zeros((3, 3)), 1.1)
        np.testing.assert_allclose(out, math.log(1.1), rtol=1e-15)
        self.assertAlmostEqual(out[0, 0], 0.0953101798, places=9)

    def test_log_hits_one(self):
        """U = e - 1.1 maps to exactly 1."""
        u = np.zeros((2, 2))
        u[1, 0] = math.e - 1.1
        self.assertAlmostEqual(parametric_log(u, 1.1)[1, 0], 1.0, places=14)

    def test_log_reduces_skew(self):
        """Heavy right tails are compressed."""
        u = np.random.default_rng(2).lognormal(mean=0.0, sigma=1.0, size=5000)
        self.assertLess(abs(stats.skew(parametric_log(u, 1.1))), abs(stats.skew(u)))

    def test_log_errors(self):
        """k <= 0 is a config error and negative envelopes break the precondition."""
        with self.assertRaises(ConfigError):
            parametric_log(np.zeros(3), 0.0)
        with self.assertRaises(PreconditionError):
            parametric_log(np.array([0.5, -0.1]), 1.1)


class TestScatter(unittest.TestCase):
    """Test full L0/L1/L2 scattering."""

    @classmethod
    def setUpClass(cls):
        cls.config = ScatterConfig()
        cls.bank = build_filter_bank(cls.config)

    def test_channel_count(self):
        """1 + 12 + 36 = 49 channels per input channel for J=2."""
        stack = scatter(np.random.default_rng(0).random((20, 22)), self.bank, self.config)
        self.assertEqual(stack.num_channels, 49)
        self.assertEqual((len(stack.layer0), len(stack.layer1), len(stack.layer2)), (1, 12, 36))
        self.assertEqual(stack.channels().shape, (49, 20, 22))
        self.assertEqual(len(stack.path_index), 49)

    def test_colour_channels_concatenate(self):
        """Three input channels triple the count."""
        stack = scatter(np.random.default_rng(0).random((3, 16, 16)), self.bank, self.config)
        self.assertEqual(stack.num_channels, 3 * 49)

    def test_count_formula(self):
        """6J first-order and 36 (J choose 2) second-order paths per channel."""
        for j in (1, 2, 3):
            self.assertEqual(expected_channel_count(j, 6), 1 + 6 * j + 36 * math.comb(j, 2))
        self.assertEqual(expected_channel_count(2, 6, 3, dual_resolution=True), 294)

    def test_paths_respect_scale_order(self):
        """Second-order paths always move to a coarser scale."""
        stack = scatter(np.zeros((12, 12)), self.bank, self.config)
        for path in stack.path_index:
            if path.layer == 2:
                self.assertGreater(path.scale2, path.scale1)

    def test_constant_image(self):
        """Constant input: L0 keeps it, band-pass channels vanish, j=1 sits at log(k)."""
        stack = scatter(np.full((24, 24), 0.8), self.bank, self.config)
        np.testing.assert_allclose(stack.layer0, 0.8, atol=1e-12)
        for plane, path in zip(stack.layer1, stack.path_index[1:13]):
            if path.scale1 == 1:
                np.testing.assert_allclose(plane, math.log(1.1), atol=1e-3)
            else:
                self.assertLessEqual(np.max(plane), 1e-3 * 0.8)
        self.assertLessEqual(np.max(stack.layer2), 1e-3 * 0.8)

    def test_shift_invariance(self):
        """A 2-pixel shift changes features relatively less than pixels."""
        rng = np.random.default_rng(4)
        texture = rng.random((32, 32))
        shifted = np.roll(texture, 2, axis=1)
        before = scatter(texture, self.bank, self.config).channels()
        after = scatter(shifted, self.bank, self.config).channels()
        feature_change = np.linalg.norm(after - before) / np.linalg.norm(before)
        pixel_change = np.linalg.norm(shifted - texture) / np.linalg.norm(texture)
        self.assertLess(feature_change, pixel_change)

    def test_dual_resolution(self):
        """The half-resolution pass doubles the channels at full size."""
        config = ScatterConfig(dual_resolution=True)
        stack = scatter(np.random.default_rng(0).random((16, 16)), build_filter_bank(config), config)
        self.assertEqual(stack.channels().shape, (98, 16, 16))
        self.assertEqual({p.resolution for p in stack.path_index}, {1, 2})

    def test_mismatched_bank(self):
        """A bank built for other options is rejected."""
        with self.assertRaises(ConfigError):
            scatter(np.zeros((8, 8)), self.bank, ScatterConfig(num_scales=1))

    def test_parallel_matches_serial(self):
        """Thread-pool scattering returns the same stacks in order."""
        images = [np.random.default_rng(i).random((12, 12)) for i in range(3)]
        serial = scatter_many(images, self.bank, self.config)
        parallel = scatter_many(images, self.bank, self.config, workers=3)
        for a, b in zip(serial, parallel):
            np.testing.assert_array_equal(a.channels(), b.channels())

    def test_export(self):
        """Exported features come back as float32-rounded planes with their paths."""
        stack = scatter(np.random.default_rng(0).random((10, 12)), self.bank, self.config)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "features.gshd"
            save_features(path, [stack])
            (loaded,) = load_features(path)
        self.assertEqual(loaded.path_index, stack.path_index)
        np.testing.assert_array_equal(loaded.channels(), stack.channels().astype(np.float32))


if __name__ == "__main__":
    unittest.main()
