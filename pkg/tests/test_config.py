import os

import pytest

from config import (
    Plane,
    config_digest,
    config_to_cfg_text,
    load_config,
    reference_config,
    parse_config_text,
    replace_config,
)
from errors import ConfigError

PRESETS = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "presets")


def test_reference_preset_matches_builtin_config():
    assert load_config(os.path.join(PRESETS, "reference.cfg")) == reference_config()


def test_table_midpoint_preset_widths():
    config = load_config(os.path.join(PRESETS, "table_midpoints.cfg"))
    assert config.pos_corr_sigma ** 2 == pytest.approx(400.0)
    assert config.mom_corr_sigma ** 2 == pytest.approx(8e-6, rel=1e-3)


def test_cfg_text_round_trip(small_config):
    assert parse_config_text(config_to_cfg_text(small_config)) == small_config


def test_efficiency_above_one_names_field():
    text = config_to_cfg_text(reference_config()).replace("eta_filter = 0.56", "eta_filter = 1.2")
    with pytest.raises(ConfigError) as excinfo:
        parse_config_text(text)
    assert "efficiency.eta_filter" in str(excinfo.value)
    assert "efficiency.eta_filter" in excinfo.value.details["fields"]


def test_unknown_key_rejected():
    text = config_to_cfg_text(reference_config()).replace("[run]", "[run]\nsead = 3")
    with pytest.raises(ConfigError, match="run.sead"):
        parse_config_text(text)


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match="camera"):
        parse_config_text("[camera]\ngain = 3\n")


def test_top_level_field_labelled_with_section():
    with pytest.raises(ConfigError) as excinfo:
        replace_config(reference_config(), bin_size=0)
    assert "analysis.bin_size" in excinfo.value.details["fields"]


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "nope.cfg"))


def test_image_size_lower_bound():
    with pytest.raises(ConfigError, match="geometry.image_size"):
        replace_config(reference_config(), geometry={"image_size": 8})


def test_regime_warnings(caplog):
    with caplog.at_level("WARNING"):
        replace_config(reference_config(), mean_photons_per_pixel=0.6)
        replace_config(reference_config(), pos_corr_sigma=300.0)
    messages = " ".join(record.getMessage() for record in caplog.records)
    assert "photon-counting" in messages
    assert "EPR bound" in messages


def test_digest_tracks_seed():
    base = reference_config()
    assert config_digest(base) == config_digest(reference_config())
    assert config_digest(base) != config_digest(replace_config(base, seed=1))


def test_unit_conversions():
    geometry = reference_config().geometry
    assert geometry.near_pixel_scale == pytest.approx(16.0 / 2.44)
    assert geometry.momentum_per_pixel == pytest.approx(1.180e-3, rel=1e-3)
    assert geometry.pixel_scale(Plane.FAR) == geometry.momentum_per_pixel


def test_cell_count():
    assert reference_config().cell_count == 27 * 27
