import numpy as np
import pytest

from config import config_to_cfg_text, reference_config, replace_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    """128x128 frames, ideal detection, envelopes that fit inside the frame."""
    return replace_config(
        reference_config(),
        geometry={"image_size": 128},
        efficiency={"eta_filter": 1.0, "eta_optics": 1.0, "eta_camera": 1.0},
        pump_waist=250.0,
        phase_matching_width=0.12,
        frame_count=4,
        seed=7,
    )


@pytest.fixture
def tiny_config(small_config):
    """Fast pipeline fixture: 64x64 frames, two pairs."""
    return replace_config(small_config, geometry={"image_size": 64}, pump_waist=150.0,
                          phase_matching_width=0.06, frame_count=2)


@pytest.fixture
def reference():
    return reference_config()


@pytest.fixture
def config_file(tmp_path, tiny_config):
    path = tmp_path / "tiny.cfg"
    path.write_text(config_to_cfg_text(tiny_config), encoding="utf-8")
    return str(path)
