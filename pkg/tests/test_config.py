from pathlib import Path

import pytest

from gspcount.config import load_experiment, read_sections
from gspcount.errors import ConfigError
from gspcount.model import ModelConfig

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


class TestLoadExperiment:
    def test_defaults(self):
        cfg = load_experiment()
        assert cfg.model == ModelConfig()
        assert cfg.eval.mode == "full"

    @pytest.mark.parametrize("name", ["default_model.cfg", "experiment.cfg", "smoke.cfg"])
    def test_shipped_configs_parse(self, name):
        load_experiment(CONFIGS / name)

    def test_default_model_config_is_default(self):
        cfg = load_experiment(CONFIGS / "default_model.cfg")
        assert cfg.model.blocks == ModelConfig().blocks
        assert cfg.model.head == "gsp"

    def test_seed_propagates(self):
        cfg = load_experiment(overrides=["experiment.seed=13"])
        assert cfg.model.seed == 13 and cfg.train.seed == 13

    def test_section_seed_wins(self):
        cfg = load_experiment(overrides=["experiment.seed=13", "train.seed=2"])
        assert cfg.model.seed == 13 and cfg.train.seed == 2

    def test_override_beats_file(self):
        cfg = load_experiment(CONFIGS / "smoke.cfg", ["scene.height=80", "train.patch_size=full"])
        assert cfg.scene.height == 80
        assert cfg.train.patch_size is None

    def test_test_sizes(self):
        assert load_experiment(CONFIGS / "smoke.cfg").data.test_sizes == (64, 96)

    @pytest.mark.parametrize("override", ["bogus.key=1", "scene.colour=red", "experiment.seed=x",
                                          "eval.mode=tiled", "eval.patch_size=abc", "data.test_sizes=1,a",
                                          "noequals"])
    def test_invalid(self, override):
        with pytest.raises(ConfigError):
            load_experiment(overrides=[override])

    def test_unknown_section_in_file(self, tmp_path):
        path = tmp_path / "x.cfg"
        path.write_text("[optimizer]\nlr = 1\n")
        with pytest.raises(ConfigError, match="optimizer"):
            read_sections(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            read_sections(tmp_path / "none.cfg")
