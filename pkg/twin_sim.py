"""
Monte-Carlo twin-photon frames.

Each frame pair is a pure function of (config, plane, frame_index): pairs are
drawn from the plane envelope, split into signal/idler coordinates with the
configured pair correlation, thinned by the detection efficiency, pixelated,
polluted with accidental counts and binarized.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, List, Optional, Tuple

import numpy as np
from scipy.special import erf

from config import EfficiencyBudget, Plane, SimConfig, config_digest
from constants import UNAMBIGUITY_SIGMAS
from errors import StaleConfigError
from utils import progress

logger = logging.getLogger(__name__)

# Independent random streams per plane, keyed into SeedSequence.spawn_key
PLANE_STREAM = {Plane.NEAR: 0, Plane.FAR: 1}


# ==================== DESIGN FORMULAS ====================

def effective_efficiency(budget: EfficiencyBudget) -> float:
    """Overall detection efficiency eta = filter x optics x camera."""
    return budget.eta_filter * budget.eta_optics * budget.eta_camera


def predicted_snr(cell_count: float, pair_count: float, eta: float, m: float, p_n: float) -> float:
    """Expected binned-peak SNR, sqrt(C K) * eta * m / (m + p_n)."""
    if cell_count < 1 or pair_count < 1:
        raise ValueError("cell_count and pair_count must be >= 1")
    if not 0 < eta <= 1:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    if m < 0 or p_n < 0:
        raise ValueError("m and p_n must be non-negative")
    if m + p_n == 0:
        raise ValueError("m + p_n must be positive")
    return math.sqrt(cell_count * pair_count) * eta * m / (m + p_n)


def min_cells_for_unambiguity(eta: float, pair_count: int) -> int:
    """Smallest C with C * K > (5 / eta)^2 (valid for m >> p_n)."""
    if not 0 < eta <= 1:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    if pair_count < 1:
        raise ValueError("pair_count must be >= 1")
    bound = (UNAMBIGUITY_SIGMAS / eta) ** 2
    return int(math.floor(bound / pair_count)) + 1


# ==================== FRAMES ====================

@dataclass(frozen=True, eq=False)
class ImagePair:
    """Binary signal/idler frames of one simulated exposure."""
    signal: np.ndarray
    idler: np.ndarray
    plane: Plane
    frame_index: int
    config_digest: str
    idler_index: Optional[int] = None

    def __post_init__(self):
        if self.signal.shape != self.idler.shape:
            raise ValueError("signal and idler frames must have the same shape")
        if self.idler_index is None:
            object.__setattr__(self, "idler_index", self.frame_index)

    @property
    def decorrelated(self) -> bool:
        return self.idler_index != self.frame_index

    @property
    def shape(self) -> Tuple[int, int]:
        return self.signal.shape

    def means(self) -> Tuple[float, float]:
        return float(self.signal.mean()), float(self.idler.mean())


def frame_rng(seed: int, plane: Plane, frame_index: int) -> np.random.Generator:
    """Generator for one frame, independent of every other (plane, frame)."""
    sequence = np.random.SeedSequence(seed, spawn_key=(PLANE_STREAM[Plane(plane)], int(frame_index)))
    return np.random.default_rng(sequence)


# ==================== ENVELOPES ====================

def _raised_cosine_primitive(theta: np.ndarray) -> np.ndarray:
    # integral of cos^4
    return 3.0 * theta / 8.0 + np.sin(2.0 * theta) / 4.0 + np.sin(4.0 * theta) / 32.0


def raised_cosine_cdf(u: np.ndarray, half_width: float) -> np.ndarray:
    """CDF of the separable far-field envelope cos^4(pi u / 2w) on |u| < w."""
    theta = np.clip(np.asarray(u, dtype=float) * math.pi / (2.0 * half_width), -math.pi / 2, math.pi / 2)
    return 0.5 + _raised_cosine_primitive(theta) / (3.0 * math.pi / 8.0)


@lru_cache(maxsize=1)
def _raised_cosine_inverse_grid(points: int = 8193) -> Tuple[np.ndarray, np.ndarray]:
    theta = np.linspace(-math.pi / 2, math.pi / 2, points)
    cdf = 0.5 + _raised_cosine_primitive(theta) / (3.0 * math.pi / 8.0)
    return cdf, theta


def sample_envelope(rng: np.random.Generator, config: SimConfig, plane: Plane, size: int) -> np.ndarray:
    """Common pair coordinates (size x 2, physical units) drawn from the plane envelope."""
    if Plane(plane) is Plane.NEAR:
        return rng.normal(0.0, config.pump_waist, size=(size, 2))
    cdf, theta = _raised_cosine_inverse_grid()
    uniform = rng.random((size, 2))
    return np.interp(uniform, cdf, theta) * (2.0 * config.phase_matching_width / math.pi)


def envelope_in_frame_fraction(config: SimConfig, plane: Plane) -> float:
    """Fraction of the envelope falling inside the square frame."""
    half_extent = 0.5 * config.geometry.image_size * config.geometry.pixel_scale(plane)
    if Plane(plane) is Plane.NEAR:
        per_axis = float(erf(half_extent / (config.pump_waist * math.sqrt(2.0))))
    else:
        per_axis = float(
            raised_cosine_cdf(half_extent, config.phase_matching_width)
            - raised_cosine_cdf(-half_extent, config.phase_matching_width)
        )
    return per_axis ** 2


def emitted_pair_mean(config: SimConfig, plane: Plane) -> float:
    """Mean emitted pairs per frame; m counts detected photons per pixel over both frames."""
    eta = effective_efficiency(config.efficiency)
    pixels = config.geometry.image_size ** 2
    return config.mean_photons_per_pixel * pixels / (2.0 * eta * envelope_in_frame_fraction(config, plane))


# ==================== PAIRS AND DETECTION ====================

def sample_pairs(config: SimConfig, plane: Plane, rng: np.random.Generator, n_pairs: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Signal and idler coordinates (physical units) of `n_pairs` emitted pairs.

    Near field: x1 = c + d/2, x2 = c - d/2. Far field: p1 = c + d/2, p2 = -c + d/2,
    so p1 + p2 = d and the idler is recorded unflipped.
    """
    plane = Plane(plane)
    common = sample_envelope(rng, config, plane, n_pairs)
    spread = rng.normal(0.0, config.corr_sigma(plane), size=(n_pairs, 2))
    signal = common + spread / 2.0
    if plane is Plane.NEAR:
        idler = common - spread / 2.0
    else:
        idler = -common + spread / 2.0
    return signal, idler


def to_pixels(coords: np.ndarray, scale: float, image_size: int) -> np.ndarray:
    """Physical (x, y) coordinates to continuous pixel (col, row) coordinates."""
    return np.asarray(coords, dtype=float) / scale + image_size / 2.0


def detect_photons(pixel_coords: np.ndarray, eta: float, p_n: float, image_size: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Thin photons by eta, pixelate (off-frame photons lost), add accidentals, binarize."""
    pixel_coords = np.asarray(pixel_coords, dtype=float).reshape(-1, 2)
    survived = pixel_coords[rng.random(len(pixel_coords)) < eta]
    idx = np.floor(survived).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < image_size), axis=1)
    idx = idx[inside]
    counts = np.bincount(idx[:, 1] * image_size + idx[:, 0], minlength=image_size * image_size)
    if p_n > 0:
        counts = counts + (rng.random(image_size * image_size) < p_n)
    return (counts >= 1).astype(np.uint8).reshape(image_size, image_size)


def _check_sanity(pair: ImagePair, config: SimConfig) -> bool:
    occupancy = config.mean_photons_per_pixel / 2.0 + config.noise_per_pixel
    low = 0.25 * occupancy * effective_efficiency(config.efficiency)
    high = 4.0 * occupancy
    ok = all(low <= mean <= high for mean in pair.means())
    if not ok:
        logger.warning(
            "%s frame %d means %s outside sanity band [%.4f, %.4f]",
            pair.plane.label, pair.frame_index, pair.means(), low, high,
        )
    return ok


def generate_pair(config: SimConfig, plane: Plane, frame_index: int,
                  expected_digest: Optional[str] = None) -> ImagePair:
    """Deterministic twin frames for (config.seed, plane, frame_index)."""
    plane = Plane(plane)
    digest = config_digest(config)
    if expected_digest is not None and expected_digest != digest:
        raise StaleConfigError(
            f"Frame {frame_index} requested for a stale config",
            {"expected": expected_digest, "actual": digest},
        )
    if not 0 <= frame_index < config.frame_count:
        raise ValueError(f"frame_index {frame_index} outside [0, {config.frame_count})")

    rng = frame_rng(config.seed, plane, frame_index)
    size = config.geometry.image_size
    scale = config.geometry.pixel_scale(plane)
    eta = effective_efficiency(config.efficiency)

    n_pairs = int(rng.poisson(emitted_pair_mean(config, plane)))
    signal_xy, idler_xy = sample_pairs(config, plane, rng, n_pairs)
    signal = detect_photons(to_pixels(signal_xy, scale, size), eta, config.noise_per_pixel, size, rng)
    idler = detect_photons(to_pixels(idler_xy, scale, size), eta, config.noise_per_pixel, size, rng)

    pair = ImagePair(signal=signal, idler=idler, plane=plane, frame_index=frame_index, config_digest=digest)
    _check_sanity(pair, config)
    return pair


def _generate_task(task: Tuple[SimConfig, Plane, int]) -> ImagePair:
    config, plane, frame_index = task
    return generate_pair(config, plane, frame_index)


def generate_ensemble(config: SimConfig, plane: Plane, jobs: int = 1,
                      indices: Optional[Iterable[int]] = None) -> List[ImagePair]:
    """K pairs seeded per frame from the master seed, returned in frame order."""
    plane = Plane(plane)
    indices = list(range(config.frame_count) if indices is None else indices)
    logger.info("Generating %d %s pairs (jobs=%d)", len(indices), plane.label, jobs)
    desc = f"simulate {plane.value}"
    if jobs <= 1 or len(indices) <= 1:
        return [generate_pair(config, plane, index) for index in progress(indices, len(indices), desc)]
    tasks = [(config, plane, index) for index in indices]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        results = pool.map(_generate_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs)))
        return list(progress(results, len(tasks), desc))
