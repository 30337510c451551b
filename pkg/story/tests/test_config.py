import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from story.exceptions import ConfigError
from story.schemas.config import Conditioning, HistoryMode, PipelineConfig, build_config, load_config, read_config_file

from .helpers import TINY_FILE


class BuildConfigTests(SimpleTestCase):
    def test_defaults(self):
        config = build_config({})
        self.assertEqual(config.common_dim, 64)
        self.assertEqual(config.fusion_blocks, 4)
        self.assertEqual(config.unet_channels, (32, 64))
        self.assertEqual(config.lambda_, 0.5)
        self.assertEqual(config.timesteps, 1000)
        self.assertEqual(config.sampler_steps, 50)
        self.assertEqual(config.guidance_scale, 5.0)
        self.assertEqual(config.history_mode, HistoryMode.SALIENT)
        self.assertEqual(config.conditioning, Conditioning.FULL)

    def test_lambda_uses_its_file_name(self):
        config = build_config({"lambda": "0.25"})
        self.assertEqual(config.lambda_, 0.25)
        self.assertEqual(config.resolved()["lambda"], 0.25)
        self.assertNotIn("lambda_", config.resolved())

    def test_resolved_config_rebuilds_itself(self):
        config = build_config({"unet_channels": "16,32", "groups": "8", "conditioning": "image_only"})
        self.assertEqual(config.unet_channels, (16, 32))
        self.assertEqual(build_config(config.resolved()), config)

    def test_unknown_keys(self):
        with self.assertRaisesMessage(ConfigError, "learning_rate"):
            build_config({"learning_rate": 1})

    def test_ill_typed_and_inconsistent_values(self):
        bad = [
            {"common_dim": "wide"},
            {"batch_size": 1},
            {"lambda": -1},
            {"patch": 5},
            {"unet_channels": "12,24"},
            {"beta_start": 0.03},
            {"sampler_steps": 20, "timesteps": 10},
            {"history_mode": "loudest"},
            {"common_dim": 10, "fusion_heads": 4},
        ]
        for values in bad:
            with self.assertRaises(ConfigError, msg=str(values)):
                build_config(values)

    def test_exit_code(self):
        self.assertEqual(ConfigError("x").exit_code, 2)

    def test_assignment_is_validated(self):
        config = PipelineConfig()
        with self.assertRaises(ValueError):
            config.frames = 1


class ConfigFileTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, text: str) -> Path:
        path = self.dir / "pipeline.cfg"
        path.write_text(text)
        return path

    def test_file_values_are_typed(self):
        config = load_config(self.write(TINY_FILE))
        self.assertEqual(config.common_dim, 8)
        self.assertEqual(config.unet_channels, (8, 16))
        self.assertEqual(config.guidance_scale, 3.0)
        self.assertEqual(config.checkpoint_every, 1)

    def test_overrides_win_and_none_is_ignored(self):
        config = load_config(self.write(TINY_FILE), overrides={"seed": 7, "common_dim": None})
        self.assertEqual(config.seed, 7)
        self.assertEqual(config.common_dim, 8)

    def test_raw_values_keep_unknown_keys(self):
        values = read_config_file(self.write("# comment\nstories=3\nmystery=1\n"))
        self.assertEqual(values, {"stories": "3", "mystery": "1"})
        with self.assertRaises(ConfigError):
            load_config(self.dir / "pipeline.cfg")

    def test_malformed_lines(self):
        with self.assertRaisesMessage(ConfigError, ":2:"):
            load_config(self.write("seed=1\njust words\n"))

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config(self.dir / "absent.cfg")

    def test_no_file_gives_defaults(self):
        self.assertEqual(load_config(), PipelineConfig())
