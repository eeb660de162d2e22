"""YAML run configuration: strict keys, defaults, round-trip."""

import pytest

from gridlang.config import (ConfigError, DataParams, DecodeParams, RunConfig,
                             dump_config, load_config, parse_config)


class TestParse:
    def test_empty_document_gives_defaults(self):
        cfg = parse_config({})
        assert cfg.model.dim == 128
        assert cfg.decode.beam == 1
        assert cfg.seed == 0

    def test_nested_overrides(self):
        cfg = parse_config({"model": {"dim": 64, "layers": 2},
                            "train": {"iters": 5, "tasks": {"refer": 1.0}},
                            "seed": 7})
        assert cfg.model.dim == 64
        assert cfg.train.iters == 5
        assert cfg.seed == 7

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown top-level"):
            parse_config({"modle": {}})

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config({"model": {"dimension": 64}})

    def test_non_mapping_section_rejected(self):
        with pytest.raises(ConfigError):
            parse_config({"model": [1, 2]})

    def test_non_integer_seed_rejected(self):
        with pytest.raises(ConfigError):
            parse_config({"seed": "zero"})

    def test_image_size_list_becomes_tuple(self):
        cfg = parse_config({"model": {"image_size": [64, 64]}})
        assert cfg.model.image_size == (64, 64)


class TestValidate:
    def test_bad_beam(self):
        with pytest.raises(ConfigError):
            parse_config({"decode": {"beam": 0}})

    def test_budget_beyond_grid(self):
        with pytest.raises(ConfigError):
            parse_config({"decode": {"grid_k": 2, "grid_budget": 5}})

    def test_unknown_training_task(self):
        with pytest.raises(ConfigError, match="unknown training task"):
            parse_config({"train": {"tasks": {"caption": 1.0}}})

    def test_defaults_validate(self):
        RunConfig().validate()


class TestFiles:
    def test_round_trip(self, tmp_path):
        cfg = parse_config({"model": {"dim": 32, "layers": 1},
                            "decode": {"beam": 2}, "seed": 3})
        path = tmp_path / "run.yaml"
        dump_config(cfg, path)
        back = load_config(path)
        assert back.model.dim == 32
        assert back.decode.beam == 2
        assert back.seed == 3
        assert back.model.image_size == (64, 64)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.yaml")

    def test_invalid_yaml(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("model: {dim: [unclosed")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_defaults_present_in_dump(self, tmp_path):
        path = tmp_path / "d.yaml"
        dump_config(RunConfig(), path)
        text = path.read_text()
        assert "grid_k" in text and "mask_tokens_side" in text


class TestSubConfigs:
    def test_decode_defaults(self):
        d = DecodeParams()
        assert d.grid_budget == 0 and d.length_normalize

    def test_data_defaults(self):
        d = DataParams()
        assert d.count > 0 and d.max_shapes >= d.min_shapes
