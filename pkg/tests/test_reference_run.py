"""Full-size runs at the published operating point; slow, run with `pytest -m slow`."""
import os

import numpy as np
import pytest

from config import Plane, load_config, reference_config, replace_config
from epr_metrics import confidence_interval, epr_products, fit_peak_width, plane_variance, shot_noise_ratio
from handlers.report_stage import efficiency_check
from twin_sim import effective_efficiency, generate_ensemble, predicted_snr
from xcorr import analyze_ensemble, analyze_pair, decorrelated_pairing, summarize_snr

pytestmark = pytest.mark.slow

PRESETS = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "presets")
EXPECTED_WIDTH_PX = {Plane.NEAR: 2.1, Plane.FAR: 2.0}
MIN_SUCCESS = {Plane.NEAR: 0.98, Plane.FAR: 0.99}
DEGREE = {Plane.NEAR: 0.19, Plane.FAR: 0.23}
SAMPLE = 20


@pytest.fixture(scope="module")
def reference_runs():
    config = reference_config(frame_count=200)
    pairs = {plane: generate_ensemble(config, plane, jobs=2) for plane in Plane}
    analyses = {plane: analyze_ensemble(pairs[plane], config.bin_size, jobs=2) for plane in Plane}
    return config, pairs, analyses


def _predicted(config):
    return predicted_snr(config.cell_count, 1, effective_efficiency(config.efficiency),
                         config.mean_photons_per_pixel, config.noise_per_pixel)


def test_far_field_snr_matches_design_formula(reference_runs):
    config, _, analyses = reference_runs
    summary = summarize_snr(analyses[Plane.FAR])
    assert summary.mean_snr == pytest.approx(_predicted(config), rel=0.25)


@pytest.mark.parametrize("plane", list(Plane))
def test_single_pair_success_rate(reference_runs, plane):
    _, _, analyses = reference_runs
    assert summarize_snr(analyses[plane]).success_rate >= MIN_SUCCESS[plane]


@pytest.mark.parametrize("plane", list(Plane))
def test_degree_of_correlation_at_reference_point(reference_runs, plane):
    config, _, analyses = reference_runs
    mean_degree = summarize_snr(analyses[plane]).mean_degree
    assert mean_degree == pytest.approx(DEGREE[plane], abs=0.05)
    check = efficiency_check(mean_degree, effective_efficiency(config.efficiency),
                             config.mean_photons_per_pixel, config.noise_per_pixel)
    assert check["within_band"]


def test_degree_of_correlation_without_accidentals():
    config = reference_config(noise_per_pixel=0.0, frame_count=60)
    eta = effective_efficiency(config.efficiency)
    analyses = analyze_ensemble(generate_ensemble(config, Plane.FAR, jobs=2), config.bin_size, jobs=2)
    assert 0.8 * eta <= summarize_snr(analyses).mean_degree <= eta


@pytest.mark.parametrize("plane", list(Plane))
def test_peak_widths(reference_runs, plane):
    config, pairs, _ = reference_runs
    fits = [fit_peak_width(analyze_pair(pair, config.bin_size, keep_map=True).correlation,
                           plane=plane, frame_index=pair.frame_index)
            for pair in pairs[plane][:SAMPLE]]
    accepted = [fit.sigma_x for fit in fits if fit.converged]
    assert len(accepted) >= SAMPLE // 2
    assert np.median(accepted) == pytest.approx(EXPECTED_WIDTH_PX[plane], rel=0.3)


@pytest.mark.parametrize("plane", list(Plane))
def test_twin_images_are_sub_shot_noise(reference_runs, plane):
    config, pairs, _ = reference_runs
    sample = pairs[plane][:SAMPLE]
    twin = np.mean([shot_noise_ratio(pair, config.bin_size).r for pair in sample])
    control = np.mean([shot_noise_ratio(pair, config.bin_size).r for pair in decorrelated_pairing(sample)])
    assert twin < 0.95
    assert control > twin + 0.05


def test_epr_products_at_table_midpoints():
    config = load_config(os.path.join(PRESETS, "table_midpoints.cfg"))
    records = {}
    for plane in Plane:
        fits = [fit_peak_width(analyze_pair(pair, config.bin_size, keep_map=True).correlation,
                               plane=plane, frame_index=pair.frame_index)
                for pair in generate_ensemble(config, plane, jobs=2)]
        records[plane] = [plane_variance(fit, config.geometry) for fit in fits if fit.converged]
    table = epr_products(records[Plane.NEAR], records[Plane.FAR])
    x_low, x_high = confidence_interval(table.values("x"))
    y_low, _ = confidence_interval(table.values("y"))
    assert x_low > 10.0
    assert x_low <= 0.25 / (400.0 * 8e-6) <= x_high
    assert x_low > 1.0 and y_low > 1.0


def test_heisenberg_limit_for_separable_source():
    """Uncorrelated-in-both-planes source: products cannot exceed one."""
    config = replace_config(
        reference_config(),
        geometry={"image_size": 128, "magnification": 0.25, "focal_length": 30.0},
        efficiency={"eta_filter": 1.0, "eta_optics": 1.0, "eta_camera": 1.0},
        noise_per_pixel=0.0,
        pump_waist=2000.0,
        phase_matching_width=0.5,
        frame_count=40,
    )
    geometry = config.geometry
    config = replace_config(config, pos_corr_sigma=3.0 * geometry.near_pixel_scale,
                            mom_corr_sigma=3.0 * geometry.momentum_per_pixel)
    records = {}
    for plane in Plane:
        fits = [fit_peak_width(analyze_pair(pair, config.bin_size, keep_map=True).correlation,
                               plane=plane, frame_index=pair.frame_index)
                for pair in generate_ensemble(config, plane, jobs=2)]
        records[plane] = [plane_variance(fit, geometry) for fit in fits if fit.converged]
    table = epr_products(records[Plane.NEAR], records[Plane.FAR])
    for axis in ("x", "y"):
        assert np.mean(table.values(axis) <= 1.0) >= 0.95
