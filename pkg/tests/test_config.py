"""Test configuration loading and profiles."""

import sys
import tempfile
import unittest
from pathlib import Path

# Add project root to path to import from gshdl
sys.path.insert(0, str(Path(__file__).parent.parent))

from gshdl.config import build_config, config_snapshot, load_config, with_seed
from gshdl.conv_rbm import LayerSpec
from gshdl.errors import ConfigError

PROJECT_ROOT = Path(__file__).parent.parent


class TestConfig(unittest.TestCase):
    """Test profiles, overrides and validation."""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.dir = Path(self.temp_dir.name)

    def tearDown(self):
        self.temp_dir.cleanup()

    def write(self, text):
        path = self.dir / "config.toml"
        path.write_text(text)
        return path

    def test_desk_defaults(self):
        """The desk profile keeps the reduced layer sizes and no pruning."""
        config = build_config({})
        self.assertEqual(config.profile, "desk")
        self.assertEqual([l.num_filters for l in config.rbm.layers], [32, 24, 16, 8])
        self.assertFalse(config.prune.enabled)
        self.assertIsNone(config.crf.beta)
        self.assertEqual(config.scatter.num_scales, 2)

    def test_full_profile(self):
        """The full profile uses the full layer sizes and pruning."""
        config = build_config({}, profile="full")
        self.assertEqual(
            [(l.num_filters, l.filter_size) for l in config.rbm.layers],
            [(200, 3), (150, 5), (100, 7), (50, 9)],
        )
        self.assertTrue(config.prune.enabled)
        self.assertEqual(config.prior.patch_count, 100000)

    def test_paper_alias(self):
        """"paper" names the full profile."""
        config = build_config({}, profile="paper")
        self.assertEqual(config.profile, "full")
        self.assertEqual(config, build_config({}, profile="full"))

    def test_file_overrides_profile(self):
        """File values win over profile values."""
        path = self.write("[prior]\npatch_count = 50\n\n[[rbm.layers]]\nnum_filters = 4\nfilter_size = 3\n")
        config = load_config(path, profile="full")
        self.assertEqual(config.prior.patch_count, 50)
        self.assertEqual(config.rbm.layers, (LayerSpec(4, 3),))
        self.assertTrue(config.prune.enabled)

    def test_beta_auto(self):
        """beta = "auto" means per-image calibration; numbers are kept."""
        self.assertIsNone(load_config(self.write('[crf]\nbeta = "auto"\n')).crf.beta)
        self.assertEqual(load_config(self.write("[crf]\nbeta = 2.0\n")).crf.beta, 2.0)

    def test_unknown_option(self):
        """Unknown keys and sections are rejected."""
        with self.assertRaises(ConfigError):
            load_config(self.write("[crf]\niteratons = 5\n"))
        with self.assertRaises(ConfigError):
            load_config(self.write("[server]\nport = 1\n"))

    def test_invalid_values(self):
        """Out-of-range values surface as config errors."""
        with self.assertRaises(ConfigError):
            load_config(self.write("[crf]\ndamping = 1.5\n"))
        with self.assertRaises(ConfigError):
            load_config(self.write("[experiment]\nfractions = [0.5, 0.5, 0.5]\n"))
        with self.assertRaises(ConfigError):
            load_config(self.write("[crf]\nfeature_layers = [\"L9\"]\n"))
        with self.assertRaises(ConfigError):
            load_config(self.write("[[rbm.layers]]\nnum_filters = 4\n"))

    def test_unknown_profile(self):
        """Only desk, full and its alias exist."""
        with self.assertRaises(ConfigError):
            build_config({}, profile="cluster")

    def test_missing_file_warns(self):
        """A missing file logs a warning and falls back to defaults."""
        with self.assertLogs("gshdl", level="WARNING"):
            config = load_config(self.dir / "absent.toml")
        self.assertEqual(config, build_config({}))

    def test_malformed_toml(self):
        """Broken TOML is a config error."""
        with self.assertRaises(ConfigError):
            load_config(self.write("[crf\n"))

    def test_repository_config(self):
        """The shipped config.toml is valid for both profiles."""
        desk = load_config(PROJECT_ROOT / "config.toml")
        full = load_config(PROJECT_ROOT / "config.toml", profile="full")
        self.assertEqual(desk.rbm.layers, build_config({}).rbm.layers)
        self.assertEqual(full.rbm.layers[0], LayerSpec(200, 3))

    def test_seed_and_snapshot(self):
        """with_seed replaces the seed; snapshots are plain and omit the password."""
        config = with_seed(build_config({"database": {"password": "secret"}}), 42)
        self.assertEqual(config.experiment.seed, 42)
        snapshot = config_snapshot(config)
        self.assertNotIn("password", snapshot["database"])
        self.assertEqual(snapshot["experiment"]["seed"], 42)
        self.assertIsInstance(snapshot["rbm"]["layers"][0], dict)


if __name__ == "__main__":
    unittest.main()
