import pytest

from expomamba import config, model
from expomamba.config import ConfigError


class TestParse:
    def test_lines_and_comments(self):
        raw = config.parse_lines("# header\nlr = 0.001  # trailing\n\nepochs=3\nepochs = 4\n")
        assert raw == {"lr": "0.001", "epochs": "4"}

    def test_bad_line(self):
        with pytest.raises(ConfigError, match=":2:"):
            config.parse_lines("lr = 1\njust words\n", "f.cfg")

    def test_typed_build(self):
        cfg = config.build({"base_channel": "4", "use_fssb": "false", "resolutions": "16, 32",
                            "lr": "3e-4", "out_dir": "runs/a"})
        assert cfg.model.base_channel == 4 and cfg.model.use_fssb is False
        assert cfg.resolutions == (16, 32) and cfg.lr == 3e-4 and cfg.out_dir == "runs/a"

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config keys: bogus"):
            config.build({"bogus": "1"})

    @pytest.mark.parametrize("raw", [{"epochs": "x"}, {"use_hdr": "maybe"}, {"resolutions": ""},
                                     {"resolutions": "8"}, {"tile": "16", "overlap": "8"},
                                     {"patch": "3"}, {"w_l1": "0", "w_ssim": "0", "lambda_over": "0"},
                                     {"da_strength": "-1"}, {"lr": "0"}])
    def test_invalid(self, raw):
        with pytest.raises(ConfigError):
            config.build(raw)


class TestSwitches:
    @pytest.mark.parametrize("switch", model.ABLATION_SWITCHES)
    @pytest.mark.parametrize("value", [True, False])
    def test_every_switch_settable(self, switch, value):
        cfg = config.build({switch: str(value).lower()})
        assert getattr(cfg.model, switch) is value


class TestLoad:
    def test_file_and_overrides(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("epochs = 3\nseed = 1\n", encoding="utf-8")
        cfg = config.load(p, {"seed": "9"})
        assert cfg.epochs == 3 and cfg.seed == 9

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            config.load(tmp_path / "none.cfg")

    def test_dump_roundtrip(self):
        cfg = config.build({"use_da": "true", "resolutions": "16,48", "base_channel": "6"})
        assert config.build(config.parse_lines(config.dump(cfg))) == cfg

    def test_derived_objects(self, tmp_path):
        cfg = config.build({"epochs": "0", "out_dir": str(tmp_path)})
        assert cfg.schedule.total_epochs == 1
        assert cfg.checkpoint_path == tmp_path / "model.xpmb"
        assert cfg.loss_weights.lambda_over == 0.1
        assert cfg.da_params.normalized_value == 0.5

    def test_replace_validates(self):
        with pytest.raises(ConfigError):
            config.replace(config.RunConfig(), batch_size=0)
