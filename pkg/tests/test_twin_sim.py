import math

import numpy as np
import pytest
from scipy import stats

from config import Plane, config_digest, replace_config
from errors import StaleConfigError
from twin_sim import (
    detect_photons,
    effective_efficiency,
    emitted_pair_mean,
    envelope_in_frame_fraction,
    frame_rng,
    generate_ensemble,
    generate_pair,
    min_cells_for_unambiguity,
    predicted_snr,
    raised_cosine_cdf,
    sample_envelope,
    sample_pairs,
)


# ==================== DESIGN FORMULAS ====================

def test_reference_efficiency(reference):
    assert effective_efficiency(reference.efficiency) == pytest.approx(0.56 * 0.64 * 0.74)


def test_predicted_snr_at_reference_point(reference):
    eta = effective_efficiency(reference.efficiency)
    assert predicted_snr(729, 1, eta, 0.15, 0.021) == pytest.approx(6.28, abs=0.02)


def test_predicted_snr_scales_with_sqrt_cells():
    assert predicted_snr(4 * 729, 1, 0.3, 0.15, 0.0) == pytest.approx(2 * predicted_snr(729, 1, 0.3, 0.15, 0.0))


@pytest.mark.parametrize("args", [(0, 1, 0.3, 0.1, 0.0), (729, 1, 0.0, 0.1, 0.0), (729, 1, 0.3, 0.0, 0.0)])
def test_predicted_snr_domain_errors(args):
    with pytest.raises(ValueError):
        predicted_snr(*args)


def test_predicted_snr_published_values():
    assert predicted_snr(729, 900, 0.26, 0.15, 0.021) == pytest.approx(185, rel=0.01)
    assert predicted_snr(729, 1, 0.26, 0.15, 0.021) == pytest.approx(6.2, abs=0.1)
    assert predicted_snr(625, 1, 0.2, 0.37, 0.0) == pytest.approx(5.0)


def test_unambiguity_bound_examples():
    assert min_cells_for_unambiguity(1.0, 1) == 26
    assert min_cells_for_unambiguity(0.2, 625) == 2


def test_unambiguity_bound():
    assert min_cells_for_unambiguity(0.2, 1) == 626
    assert min_cells_for_unambiguity(0.2, 900) == 1
    with pytest.raises(ValueError):
        min_cells_for_unambiguity(0.0, 1)


# ==================== ENVELOPES ====================

def test_raised_cosine_cdf_limits():
    assert raised_cosine_cdf(-2.0, 1.0) == pytest.approx(0.0)
    assert raised_cosine_cdf(0.0, 1.0) == pytest.approx(0.5)
    assert raised_cosine_cdf(5.0, 1.0) == pytest.approx(1.0)


def test_far_envelope_bounded(reference):
    samples = sample_envelope(np.random.default_rng(0), reference, Plane.FAR, 20000)
    assert np.abs(samples).max() <= reference.phase_matching_width
    assert abs(samples.mean()) < 0.01


def test_in_frame_fraction_in_unit_interval(reference):
    for plane in Plane:
        assert 0.0 < envelope_in_frame_fraction(reference, plane) <= 1.0


def test_emitted_pairs_compensate_efficiency(reference):
    ideal = replace_config(reference, efficiency={"eta_filter": 1.0, "eta_optics": 1.0, "eta_camera": 1.0})
    ratio = emitted_pair_mean(reference, Plane.NEAR) / emitted_pair_mean(ideal, Plane.NEAR)
    assert ratio == pytest.approx(1.0 / effective_efficiency(reference.efficiency))


def test_fluency_shared_between_signal_and_idler(reference):
    pairs = emitted_pair_mean(reference, Plane.FAR)
    detected_per_frame = (pairs * effective_efficiency(reference.efficiency)
                          * envelope_in_frame_fraction(reference, Plane.FAR) / reference.geometry.image_size ** 2)
    assert detected_per_frame == pytest.approx(reference.mean_photons_per_pixel / 2.0)


# ==================== PAIRS AND DETECTION ====================

def test_near_pairs_correlated_in_position(small_config):
    signal, idler = sample_pairs(small_config, Plane.NEAR, np.random.default_rng(1), 20000)
    difference = signal - idler
    assert difference.std(axis=0) == pytest.approx([small_config.pos_corr_sigma] * 2, rel=0.05)
    assert signal.std() > 5 * small_config.pos_corr_sigma


def test_far_pairs_anticorrelated_in_momentum(small_config):
    signal, idler = sample_pairs(small_config, Plane.FAR, np.random.default_rng(2), 20000)
    total = signal + idler
    assert np.abs(total.mean(axis=0)).max() < 1e-4
    assert total.std(axis=0) == pytest.approx([small_config.mom_corr_sigma] * 2, rel=0.05)


def test_zero_efficiency_gives_empty_frame():
    coords = np.random.default_rng(3).uniform(0, 32, size=(500, 2))
    frame = detect_photons(coords, 0.0, 0.0, 32, np.random.default_rng(4))
    assert frame.shape == (32, 32)
    assert frame.sum() == 0


def test_off_frame_photons_lost_and_frame_binary():
    coords = np.array([[-0.5, 3.0], [16.0, 2.0], [2.2, 5.7], [2.9, 5.1], [7.0, -3.0]])
    frame = detect_photons(coords, 1.0, 0.0, 16, np.random.default_rng(5))
    assert frame.dtype == np.uint8
    assert frame.sum() == 1
    assert frame[5, 2] == 1


def test_accidentals_rate():
    frame = detect_photons(np.empty((0, 2)), 1.0, 0.1, 200, np.random.default_rng(6))
    assert frame.mean() == pytest.approx(0.1, abs=0.01)


# ==================== FRAMES ====================

def test_generate_pair_is_deterministic(small_config):
    first = generate_pair(small_config, Plane.NEAR, 1)
    second = generate_pair(small_config, Plane.NEAR, 1)
    np.testing.assert_array_equal(first.signal, second.signal)
    np.testing.assert_array_equal(first.idler, second.idler)
    assert first.config_digest == config_digest(small_config)


def test_planes_and_frames_use_independent_streams(small_config):
    near = generate_pair(small_config, Plane.NEAR, 0)
    far = generate_pair(small_config, Plane.FAR, 0)
    other = generate_pair(small_config, Plane.NEAR, 2)
    assert not np.array_equal(near.signal, far.signal)
    assert not np.array_equal(near.signal, other.signal)
    assert frame_rng(1, Plane.NEAR, 0).random() != frame_rng(1, Plane.FAR, 0).random()


def test_frame_statistics_in_photon_counting_regime(small_config):
    pair = generate_pair(small_config, Plane.NEAR, 0)
    assert pair.shape == (128, 128)
    assert set(np.unique(pair.signal)) <= {0, 1}
    occupancy = small_config.mean_photons_per_pixel / 2.0 + small_config.noise_per_pixel
    expected = 1.0 - math.exp(-occupancy)
    for mean in pair.means():
        assert mean == pytest.approx(expected, rel=0.2)


def test_frame_index_out_of_range(small_config):
    with pytest.raises(ValueError):
        generate_pair(small_config, Plane.FAR, small_config.frame_count)


def test_stale_config_rejected(small_config):
    with pytest.raises(StaleConfigError):
        generate_pair(small_config, Plane.NEAR, 0, expected_digest="0" * 64)


def test_ensemble_in_frame_order(tiny_config):
    pairs = generate_ensemble(tiny_config, Plane.FAR)
    assert [pair.frame_index for pair in pairs] == [0, 1]
    assert all(pair.plane is Plane.FAR and not pair.decorrelated for pair in pairs)
    subset = generate_ensemble(tiny_config, Plane.FAR, indices=[1])
    np.testing.assert_array_equal(subset[0].signal, pairs[1].signal)


def test_envelope_samples_follow_their_distributions(reference):
    rng = np.random.default_rng(11)
    far = sample_envelope(rng, reference, Plane.FAR, 5000)[:, 0]
    width = reference.phase_matching_width
    assert stats.kstest(far, lambda u: raised_cosine_cdf(u, width)).pvalue > 1e-3
    near = sample_envelope(rng, reference, Plane.NEAR, 5000)[:, 1]
    assert stats.kstest(near, "norm", args=(0.0, reference.pump_waist)).pvalue > 1e-3
