import pytest

from exitrack import config as config_mod
from exitrack.config import ConfigError, RunConfig, replace


class TestRoundTrip:
    def test_defaults_round_trip(self):
        cfg = RunConfig().validate()
        assert config_mod.loads(config_mod.dumps(cfg)) == cfg

    def test_partial_file_overrides_defaults(self):
        cfg = config_mod.loads("[exits]\nreuse = none\n[train]\nepochs_stage1 = 3\n")
        assert cfg.exits.reuse == "none"
        assert cfg.train.epochs_stage1 == 3
        assert cfg.backbone.exit_layers == (2, 4, 6)

    def test_tuple_parsing(self):
        cfg = config_mod.loads("[infer]\ntau = 0.25, 0.75\n")
        assert cfg.infer.tau == (0.25, 0.75)

    def test_save_load(self, tmp_path):
        cfg = replace(RunConfig(), train={"distill": "plain"})
        config_mod.save(tmp_path / "c.ini", cfg)
        assert config_mod.load(tmp_path / "c.ini") == cfg


class TestValidation:
    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="section"):
            config_mod.loads("[model]\ndepth = 3\n")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="backbone.width"):
            config_mod.loads("[backbone]\nwidth = 3\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            config_mod.loads("[backbone]\ndepth = six\n")

    @pytest.mark.parametrize("section,update", [
        ("backbone", {"heads": 5}),
        ("backbone", {"exit_layers": (4, 2, 6)}),
        ("backbone", {"exit_layers": (2, 4, 5)}),
        ("backbone", {"patch": 7}),
        ("exits", {"adapter_depths": (2, 1)}),
        ("exits", {"reuse": "sum"}),
        ("exits", {"reuse": "concat"}),
        ("train", {"distill": "maybe"}),
        ("train", {"strategy": "greedy"}),
        ("data", {"levels": 6}),
        ("data", {"target_size_max": 100.0}),
        ("infer", {"tau": (0.5,)}),
    ])
    def test_invalid(self, section, update):
        with pytest.raises(ConfigError):
            replace(RunConfig(), **{section: update})

    def test_concat_allowed_with_adapters_everywhere(self):
        cfg = replace(RunConfig(), exits={"reuse": "concat", "adapter_depths": (2, 1, 1)})
        assert cfg.exits.reuse == "concat"

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            config_mod.load(tmp_path / "nope.ini")
