"""
Deterministic envelope estimation on a single binary frame.

The envelope (Gaussian pump profile in the near field, sinc-like phase-matching
profile in the far field) is fitted by least squares on 8x8 block averages and
subtracted so that correlations only see the quantum fluctuations.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares
from scipy.stats import chi2

from config import Plane
from constants import (
    FIT_MAX_ITERATIONS,
    FIT_XTOL,
    FLAT_WIDTH_FACTOR,
    FLATNESS_P_VALUE,
    MIN_DETECTIONS,
    PROFILE_BLOCK_SIZE,
    ROLE_IDLER,
    ROLE_SIGNAL,
)
from errors import DegenerateFrameError

logger = logging.getLogger(__name__)

# Integral of the clamped sinc^2 lobe over |t| <= 2, and its std in units of 1/alpha
SINC_LOBE_AREA = 0.950
SINC_LOBE_STD = 0.462


class ProfileKind(str, Enum):
    GAUSSIAN = "gaussian2d"
    SINC_LIKE = "sinclike2d"

    @classmethod
    def for_plane(cls, plane: Plane) -> "ProfileKind":
        return cls.GAUSSIAN if Plane(plane) is Plane.NEAR else cls.SINC_LIKE


@dataclass(frozen=True)
class ProfileModel:
    """Separable envelope B + A * s((x - cx) / wx) * s((y - cy) / wy), in pixels."""
    kind: ProfileKind
    amplitude: float
    center: Tuple[float, float]
    widths: Tuple[float, float]
    baseline: float
    converged: bool = True
    evaluations: int = 0

    def __post_init__(self):
        if min(self.widths) <= 0:
            raise ValueError("profile widths must be positive")
        if self.amplitude < 0 or self.baseline < 0:
            raise ValueError("profile amplitude and baseline must be non-negative")

    @classmethod
    def zero(cls, kind: ProfileKind) -> "ProfileModel":
        return cls(kind=ProfileKind(kind), amplitude=0.0, center=(0.0, 0.0), widths=(1.0, 1.0), baseline=0.0)

    @property
    def params(self) -> np.ndarray:
        return np.array([self.amplitude, self.center[0], self.center[1],
                         self.widths[0], self.widths[1], self.baseline])

    def evaluate(self, shape: Tuple[int, int]) -> np.ndarray:
        """Per-pixel expected occupancy, clamped to [0, 1]."""
        rows, cols = shape
        surface = _profile_surface(self.kind, self.params, np.arange(cols, dtype=float), np.arange(rows, dtype=float))
        return np.clip(surface, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class FluctuationImage:
    """Frame minus its fitted envelope."""
    values: np.ndarray
    model_used: ProfileModel
    plane: Optional[Plane] = None
    role: Optional[str] = None
    frame_index: Optional[int] = None

    @property
    def mean(self) -> float:
        return float(self.values.mean())


def _axis_shape(kind: ProfileKind, u: np.ndarray) -> np.ndarray:
    if kind is ProfileKind.GAUSSIAN:
        return np.exp(-0.5 * u * u)
    # main lobe plus first side lobes only
    return np.where(np.abs(u) <= 2.0, np.sinc(u) ** 2, 0.0)


def _profile_surface(kind: ProfileKind, params: Sequence[float], x: np.ndarray, y: np.ndarray) -> np.ndarray:
    amplitude, cx, cy, wx, wy, baseline = params
    return baseline + amplitude * np.outer(_axis_shape(kind, (y - cy) / wy), _axis_shape(kind, (x - cx) / wx))


def block_average(frame: np.ndarray, block: int = PROFILE_BLOCK_SIZE):
    """Non-overlapping block means plus block-centre coordinates; trailing partial blocks dropped."""
    rows, cols = frame.shape
    n_rows, n_cols = rows // block, cols // block
    trimmed = frame[:n_rows * block, :n_cols * block]
    means = trimmed.reshape(n_rows, block, n_cols, block).mean(axis=(1, 3))
    x_centers = np.arange(n_cols) * block + (block - 1) / 2.0
    y_centers = np.arange(n_rows) * block + (block - 1) / 2.0
    return means, x_centers, y_centers, trimmed


def is_flat(trimmed: np.ndarray, means: np.ndarray, block: int = PROFILE_BLOCK_SIZE) -> bool:
    """True when block-mean scatter is explained by independent pixel noise alone."""
    pixel_var = float(trimmed.var())
    if pixel_var == 0.0 or means.size < 2:
        return True
    dof = means.size - 1
    statistic = dof * float(means.var(ddof=1)) / (pixel_var / block ** 2)
    return float(chi2.sf(statistic, dof)) >= FLATNESS_P_VALUE


def _flat_model(kind: ProfileKind, frame: np.ndarray) -> ProfileModel:
    rows, cols = frame.shape
    return ProfileModel(
        kind=kind,
        amplitude=max(float(frame.mean()), 0.0),
        center=((cols - 1) / 2.0, (rows - 1) / 2.0),
        widths=(FLAT_WIDTH_FACTOR * cols, FLAT_WIDTH_FACTOR * rows),
        baseline=0.0,
    )


def _initial_guess(kind: ProfileKind, means: np.ndarray, x_centers: np.ndarray,
                   y_centers: np.ndarray, block: int) -> np.ndarray:
    """Centroid and second moments of the baseline-removed block means."""
    baseline = max(float(np.percentile(means, 10)), 0.0)
    weights = np.clip(means - baseline, 0.0, None)
    total = float(weights.sum())
    if total <= 0:
        weights = np.ones_like(means)
        total = float(weights.sum())
    col_weights = weights.sum(axis=0)
    row_weights = weights.sum(axis=1)
    cx = float(col_weights @ x_centers / total)
    cy = float(row_weights @ y_centers / total)
    sx = max(float(np.sqrt(col_weights @ (x_centers - cx) ** 2 / total)), 1.0)
    sy = max(float(np.sqrt(row_weights @ (y_centers - cy) ** 2 / total)), 1.0)
    excess = total * block ** 2
    if kind is ProfileKind.GAUSSIAN:
        wx, wy = sx, sy
        amplitude = excess / (2.0 * np.pi * wx * wy)
    else:
        wx, wy = sx / SINC_LOBE_STD, sy / SINC_LOBE_STD
        amplitude = excess / (SINC_LOBE_AREA ** 2 * wx * wy)
    return np.array([amplitude, cx, cy, wx, wy, baseline])


def fit_profile(frame: np.ndarray, kind: ProfileKind, block: int = PROFILE_BLOCK_SIZE) -> ProfileModel:
    """
    Least-squares fit of the envelope to the block-averaged frame.

    Converges when the relative parameter change drops below 1e-6; after
    200 iterations the best-so-far model is returned with converged=False.
    """
    kind = ProfileKind(kind)
    frame = np.asarray(frame, dtype=float)
    if frame.ndim != 2 or frame.size == 0:
        raise DegenerateFrameError("frame must be a non-empty 2-D array")
    detections = int(np.count_nonzero(frame))
    if detections < MIN_DETECTIONS:
        raise DegenerateFrameError(
            f"frame has {detections} detections, at least {MIN_DETECTIONS} required",
            {"detections": detections},
        )

    means, x_centers, y_centers, trimmed = block_average(frame, block)
    if min(means.shape) < 2:
        raise DegenerateFrameError("frame smaller than two fit blocks per side")
    if is_flat(trimmed, means, block):
        logger.debug("Frame is flat at block scale; returning flat %s model", kind.value)
        return _flat_model(kind, frame)

    rows, cols = frame.shape
    lower = np.array([0.0, -cols, -rows, 0.5, 0.5, 0.0])
    upper = np.array([np.inf, 2.0 * cols, 2.0 * rows, FLAT_WIDTH_FACTOR * cols, FLAT_WIDTH_FACTOR * rows, np.inf])
    x0 = np.clip(_initial_guess(kind, means, x_centers, y_centers, block), lower + 1e-9, upper - 1e-9)

    def residual(params: np.ndarray) -> np.ndarray:
        return (_profile_surface(kind, params, x_centers, y_centers) - means).ravel()

    result = least_squares(
        residual, x0, bounds=(lower, upper), method="trf", x_scale="jac",
        xtol=FIT_XTOL, ftol=1e-12, gtol=1e-12, max_nfev=FIT_MAX_ITERATIONS * (len(x0) + 1),
    )
    converged = bool(result.status > 0)
    if not converged:
        logger.warning("%s profile fit did not converge (%s); keeping best-so-far model", kind.value, result.message)

    amplitude, cx, cy, wx, wy, baseline = (float(v) for v in result.x)
    return ProfileModel(
        kind=kind,
        amplitude=max(amplitude, 0.0),
        center=(cx, cy),
        widths=(wx, wy),
        baseline=max(baseline, 0.0),
        converged=converged,
        evaluations=int(result.nfev),
    )


def subtract_profile(frame: np.ndarray, model: ProfileModel, plane: Optional[Plane] = None,
                     role: Optional[str] = None, frame_index: Optional[int] = None) -> FluctuationImage:
    """Fluctuation image = frame - evaluated model."""
    frame = np.asarray(frame, dtype=float)
    values = frame - model.evaluate(frame.shape)
    return FluctuationImage(values=values, model_used=model, plane=plane, role=role, frame_index=frame_index)


def pair_fluctuations(pair, kind: Optional[ProfileKind] = None):
    """Fit and subtract the envelope of both halves of an ImagePair."""
    kind = ProfileKind(kind) if kind is not None else ProfileKind.for_plane(pair.plane)
    signal_model = fit_profile(pair.signal, kind)
    idler_model = fit_profile(pair.idler, kind)
    return (
        subtract_profile(pair.signal, signal_model, pair.plane, ROLE_SIGNAL, pair.frame_index),
        subtract_profile(pair.idler, idler_model, pair.plane, ROLE_IDLER, pair.idler_index),
    )


PROFILE_CSV_HEADER = (
    "frame_index", "role", "kind", "amplitude", "center_x", "center_y",
    "width_x", "width_y", "baseline", "converged",
)


def profile_row(frame_index: int, role: str, model: ProfileModel) -> List[object]:
    return [
        frame_index, role, model.kind.value, model.amplitude, model.center[0], model.center[1],
        model.widths[0], model.widths[1], model.baseline, model.converged,
    ]
