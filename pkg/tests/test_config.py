import pytest

from lgad.config import ConfigError, TrainingConfig, parse_config, write_resolved


class TestParseConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("")
        cfg = parse_config(p)
        assert cfg == TrainingConfig()
        assert (cfg.tau, cfg.latent_dim, cfg.epochs) == (0.5, 32, 30)
        assert (cfg.lambda_r, cfg.lambda_i, cfg.lambda_v) == (1.0, 1.0, 1.0)

    def test_range_error_names_key(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("tau=1.5\n")
        with pytest.raises(ConfigError, match="tau"):
            parse_config(p)

    def test_flags_win(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\nepochs = 3\nseed=4  # trailing\n")
        cfg = parse_config(p, {"epochs": "5", "hidden-widths": "32,8"})
        assert (cfg.epochs, cfg.seed, cfg.hidden_widths) == (5, 4, (32, 8))
        text = write_resolved(cfg, tmp_path / "out").read_text()
        assert "epochs=5\n" in text and "hidden_widths=32,8\n" in text

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            parse_config(None, {"bogus": "1"})

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="epochs"):
            parse_config(None, {"epochs": "many"})

    def test_missing_equals(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("epochs 3\n")
        with pytest.raises(ConfigError, match=":1:"):
            parse_config(p)

    def test_mnist_needs_paths(self):
        with pytest.raises(ConfigError, match="mnist"):
            parse_config(None, {"dataset": "mnist-idx"})

    @pytest.mark.parametrize("key,value", [("lambda_i", "-1"), ("latent_dim", "7"), ("lr", "0"),
                                           ("operator", "affine"), ("batch", "0"),
                                           ("block_prob", "2"), ("alpha_init", "inf")])
    def test_ranges(self, key, value):
        with pytest.raises(ConfigError, match=key):
            parse_config(None, {key: value})

    def test_bools(self):
        assert parse_config(None, {"blocked": "yes"}).blocked is True
        with pytest.raises(ConfigError):
            parse_config(None, {"blocked": "maybe"})

    def test_hash_ignores_output_dir(self):
        a = TrainingConfig(output_dir="a")
        b = TrainingConfig(output_dir="b")
        assert a.hash() == b.hash() != TrainingConfig(seed=1).hash()
