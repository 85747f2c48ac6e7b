"""Config loading: defaults, overrides, rejection, hashing, builders."""

import pytest

from ctsynth.config import (
    ConfigError,
    SCHEMA,
    build_classifier_spec,
    build_classifier_train_config,
    build_discriminator_spec,
    build_gan_train_config,
    build_generator_spec,
    build_pipeline_config,
    build_segment_config,
    dump_config,
    load_experiment_config,
)


class TestLoading:
    def test_no_file_resolves_every_default(self):
        cfg = load_experiment_config(None)
        for section, keys in SCHEMA.items():
            for key, (_, default) in keys.items():
                assert cfg.values[section][key] == default

    def test_file_overrides_take_effect(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("[data]\nside = 128\n[gan]\nsteps = 75\npaper_faithful = yes\n")
        cfg = load_experiment_config(str(path))
        assert cfg.get("data", "side") == 128
        assert cfg.get("gan", "steps") == 75
        assert cfg.get("gan", "paper_faithful") is True
        assert cfg.get("gan", "batch_size") == SCHEMA["gan"]["batch_size"][1]

    def test_list_values_parse(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("[stress]\nk_values = 10, 30\nseeds = 5\n")
        cfg = load_experiment_config(str(path))
        assert cfg.get("stress", "k_values") == [10, 30]
        assert cfg.get("stress", "seeds") == [5]

    def test_optional_float_empty_means_none(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("[synthesis]\nfloor_snap_hu =\n")
        cfg = load_experiment_config(str(path))
        assert cfg.get("synthesis", "floor_snap_hu") is None

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("[mystery]\nx = 1\n")
        with pytest.raises(ConfigError, match="mystery"):
            load_experiment_config(str(path))

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("[data]\nsidd = 64\n")
        with pytest.raises(ConfigError, match="sidd"):
            load_experiment_config(str(path))

    def test_bad_value_names_the_key(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("[gan]\nsteps = soon\n")
        with pytest.raises(ConfigError, match="gan.steps"):
            load_experiment_config(str(path))

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_experiment_config(str(tmp_path / "absent.cfg"))


class TestHash:
    def test_same_content_same_hash(self, tmp_path):
        a = tmp_path / "a.cfg"
        b = tmp_path / "b.cfg"
        a.write_text("[data]\nside = 96\n")
        b.write_text("[data]\nside = 96\n")
        assert load_experiment_config(str(a)).hash == load_experiment_config(str(b)).hash

    def test_default_config_matches_explicit_default_file(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text(f"[data]\nside = {SCHEMA['data']['side'][1]}\n")
        assert load_experiment_config(str(path)).hash == load_experiment_config(None).hash

    def test_any_change_changes_hash(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("[classifier]\nepochs = 7\n")
        assert load_experiment_config(str(path)).hash != load_experiment_config(None).hash

    def test_dump_is_reloadable_and_hash_stable(self, tmp_path):
        src = tmp_path / "a.cfg"
        src.write_text("[gan]\ncycle_weight = 3.5\n[stress]\nk_values = 10,20\n")
        cfg = load_experiment_config(str(src))
        dumped = tmp_path / "resolved.cfg"
        dumped.write_text(dump_config(cfg))
        assert load_experiment_config(str(dumped)).hash == cfg.hash


class TestBuilders:
    def test_pipeline_and_segment(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text(
            "[data]\nside = 96\nwindow_low = -900\nwindow_high = 500\n"
            "[segmentation]\nerosions = 3\nbins = 128\n"
        )
        cfg = load_experiment_config(str(path))
        pipe = build_pipeline_config(cfg)
        assert pipe.side == 96
        assert pipe.window == (-900.0, 500.0)
        assert pipe.seg.erosions == 3
        assert build_segment_config(cfg).bins == 128

    def test_generator_depth_auto_scales_with_side(self, tmp_path):
        small = tmp_path / "small.cfg"
        small.write_text("[data]\nside = 64\n")
        big = tmp_path / "big.cfg"
        big.write_text("[data]\nside = 256\n")
        assert build_generator_spec(load_experiment_config(str(small))).depth == 4
        assert build_generator_spec(load_experiment_config(str(big))).depth == 6

    def test_generator_arch_override(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("[data]\nside = 64\n[gan]\narch = resnet\ndepth = 3\n")
        spec = build_generator_spec(load_experiment_config(str(path)))
        assert spec.arch == "resnet"
        assert spec.depth == 3

    def test_discriminator_spec(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("[data]\nside = 64\n[gan]\ndisc_depth = 2\ndisc_base_channels = 16\n")
        spec = build_discriminator_spec(load_experiment_config(str(path)))
        assert spec.depth == 2 and spec.base_channels == 16

    def test_paper_faithful_forces_unit_cycle_weight(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("[gan]\ncycle_weight = 10\npaper_faithful = true\n")
        assert build_gan_train_config(load_experiment_config(str(path))).cycle_weight == 1.0

    def test_gan_train_config_fields(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("[gan]\nsteps = 33\nlearning_rate = 1e-3\nseed = 9\n")
        tc = build_gan_train_config(load_experiment_config(str(path)))
        assert tc.steps == 33 and tc.learning_rate == 1e-3 and tc.seed == 9

    def test_classifier_builders_inherit_data_side(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("[data]\nside = 96\n[classifier]\nepochs = 5\n")
        cfg = load_experiment_config(str(path))
        assert build_classifier_spec(cfg).input_side == 96
        assert build_classifier_train_config(cfg).epochs == 5

    def test_classifier_side_override_wins(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("[data]\nside = 96\n[classifier]\ninput_side = 32\n")
        assert build_classifier_spec(load_experiment_config(str(path))).input_side == 32
