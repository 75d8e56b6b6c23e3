"""
EPR figures of merit: correlation-peak widths, physical variances, the
variance products over every near/far frame combination, and the
sub-shot-noise ratio of the photon-number difference.

Momenta are in hbar/um so hbar is numerically 1 and products are dimensionless.
"""
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import least_squares

from config import OpticsGeometry, Plane
from constants import (
    CONFIDENCE_LEVEL,
    DEFAULT_BIN_SIZE,
    PEAK_BOUND_TOLERANCE,
    PEAK_CENTER_TOLERANCE,
    PEAK_SIGMA_BOUNDS,
    PEAK_WINDOW,
    SUB_PIXEL_SIGMA,
    SUPPORT_FRACTION,
)
from errors import EmptySupportError, InsufficientSamplesError, PlaneMismatchError
from profile_fit import ProfileKind, ProfileModel, fit_profile
from twin_sim import ImagePair
from utils import min_samples_for, nearest_rank_band, parse_bool
from xcorr import CorrelationMap, band_or_range

logger = logging.getLogger(__name__)

AXES = ("x", "y")
UNITS = {Plane.NEAR: "um^2", Plane.FAR: "hbar^2/um^2"}


# ==================== PEAK WIDTHS ====================

@dataclass(frozen=True)
class PeakWidthFit:
    """Separable Gaussian fitted to the unbinned correlation peak (shift pixels)."""
    sigma_x: float
    sigma_y: float
    amplitude: float
    offset: float
    converged: bool
    plane: Optional[Plane] = None
    center: Tuple[float, float] = (0.0, 0.0)
    residual_rms: float = 0.0
    noise_floor: float = 0.0
    frame_index: Optional[int] = None

    def __post_init__(self):
        if self.sigma_x <= 0 or self.sigma_y <= 0:
            raise ValueError("peak widths must be positive")

    @property
    def sub_pixel(self) -> bool:
        return min(self.sigma_x, self.sigma_y) <= SUB_PIXEL_SIGMA

    @property
    def residual_ok(self) -> bool:
        return self.residual_rms < 3.0 * self.noise_floor if self.noise_floor > 0 else True


def _gaussian_peak(params: np.ndarray, dx: np.ndarray, dy: np.ndarray, offset: float = 0.0) -> np.ndarray:
    amplitude, cx, cy, sx, sy = params
    gx = np.exp(-0.5 * ((dx - cx) / sx) ** 2)
    gy = np.exp(-0.5 * ((dy - cy) / sy) ** 2)
    return offset + amplitude * np.outer(gy, gx)


def _at_bound(value: float, low: float, high: float) -> bool:
    return value <= low * (1.0 + PEAK_BOUND_TOLERANCE) or value >= high * (1.0 - PEAK_BOUND_TOLERANCE)


def fit_peak_width(correlation: Union[CorrelationMap, np.ndarray], window: int = PEAK_WINDOW,
                   plane: Optional[Plane] = None, frame_index: Optional[int] = None) -> PeakWidthFit:
    """
    Least-squares separable Gaussian on the window x window region around zero
    shift of an unbinned map. The offset is pinned to the mean of the map
    outside the window. A fit counts as converged only when the optimizer
    stopped cleanly, neither width sits on a bound and the residual stays
    within three times the off-peak noise. Failures are flagged, never raised.
    """
    values = np.asarray(getattr(correlation, "values", correlation), dtype=float)
    plane = Plane(plane) if plane is not None else getattr(correlation, "plane", None)
    rows, cols = values.shape
    half = window // 2
    top, bottom = max(rows // 2 - half, 0), min(rows // 2 + half + 1, rows)
    left, right = max(cols // 2 - half, 0), min(cols // 2 + half + 1, cols)
    patch = values[top:bottom, left:right]
    dy = np.arange(top, bottom) - rows // 2
    dx = np.arange(left, right) - cols // 2

    outside = np.ones(values.shape, dtype=bool)
    outside[top:bottom, left:right] = False
    if outside.any():
        offset = float(values[outside].mean())
        noise_floor = float(values[outside].std())
    else:
        border = np.concatenate([patch[0], patch[-1], patch[1:-1, 0], patch[1:-1, -1]])
        offset = float(np.median(border))
        noise_floor = float(border.std())

    amplitude0 = max(float(values[rows // 2, cols // 2]) - offset, 1e-6)
    excess = float(np.clip(patch - offset, 0.0, None).sum())
    low, high = PEAK_SIGMA_BOUNDS
    sigma0 = float(np.clip(math.sqrt(excess / (2.0 * math.pi * amplitude0)), 0.5, 0.5 * high))

    tol = PEAK_CENTER_TOLERANCE
    lower = np.array([0.0, -tol, -tol, low, low])
    upper = np.array([np.inf, tol, tol, high, high])
    x0 = np.array([amplitude0, 0.0, 0.0, sigma0, sigma0])

    def residual(params: np.ndarray) -> np.ndarray:
        return (_gaussian_peak(params, dx, dy, offset) - patch).ravel()

    result = least_squares(residual, x0, bounds=(lower, upper), method="trf", x_scale="jac",
                           xtol=1e-10, ftol=1e-12, gtol=1e-12, max_nfev=2000)
    amplitude, cx, cy, sx, sy = (float(v) for v in result.x)
    fit = PeakWidthFit(
        sigma_x=sx,
        sigma_y=sy,
        amplitude=amplitude,
        offset=offset,
        converged=False,
        plane=plane,
        center=(cx, cy),
        residual_rms=float(np.sqrt(np.mean(result.fun ** 2))),
        noise_floor=noise_floor,
        frame_index=frame_index,
    )
    pinned = _at_bound(sx, low, high) or _at_bound(sy, low, high)
    converged = bool(result.status > 0) and not pinned and fit.residual_ok
    if not converged:
        logger.warning("Peak width fit rejected for frame %s: %s%s%s", frame_index, result.message,
                       ", width on bound" if pinned else "",
                       "" if fit.residual_ok else ", residual above noise")
    return replace(fit, converged=converged)


WIDTHS_CSV_HEADER = (
    "frame_index", "sigma_x", "sigma_y", "amplitude", "offset",
    "center_x", "center_y", "residual_rms", "noise_floor", "converged", "sub_pixel",
)


def width_row(fit: PeakWidthFit) -> list:
    return [
        fit.frame_index, fit.sigma_x, fit.sigma_y, fit.amplitude, fit.offset,
        fit.center[0], fit.center[1], fit.residual_rms, fit.noise_floor, fit.converged, fit.sub_pixel,
    ]


def width_from_row(row: Dict[str, str], plane: Plane) -> PeakWidthFit:
    """Rebuild a PeakWidthFit from a widths CSV row."""
    return PeakWidthFit(
        sigma_x=float(row["sigma_x"]),
        sigma_y=float(row["sigma_y"]),
        amplitude=float(row["amplitude"]),
        offset=float(row["offset"]),
        converged=parse_bool(row["converged"]),
        plane=Plane(plane),
        center=(float(row["center_x"]), float(row["center_y"])),
        residual_rms=float(row["residual_rms"]),
        noise_floor=float(row["noise_floor"]),
        frame_index=int(row["frame_index"]),
    )


# ==================== VARIANCES ====================

@dataclass(frozen=True)
class VarianceRecord:
    """Per-axis variance of x1 - x2 (near field, um^2) or p1 + p2 (far field, hbar^2/um^2)."""
    plane: Plane
    var_x: float
    var_y: float
    frame_index: Optional[int] = None

    def __post_init__(self):
        if self.var_x <= 0 or self.var_y <= 0:
            raise ValueError("variances must be strictly positive")

    @property
    def unit(self) -> str:
        return UNITS[self.plane]

    def axis(self, name: str) -> float:
        return self.var_x if name == "x" else self.var_y


def _require_plane(fit: PeakWidthFit, plane: Plane) -> None:
    if fit.plane is not plane:
        found = fit.plane.label if fit.plane is not None else "an unlabeled map"
        raise PlaneMismatchError(
            f"{plane.label} variance requested for a width fitted on {found}",
            {"expected": plane.value, "found": fit.plane.value if fit.plane is not None else None},
        )


def position_variance(fit: PeakWidthFit, geometry: OpticsGeometry) -> VarianceRecord:
    """Delta^2 = (sigma_px * pixel_pitch / M)^2 per axis."""
    _require_plane(fit, Plane.NEAR)
    scale = geometry.near_pixel_scale
    return VarianceRecord(Plane.NEAR, (fit.sigma_x * scale) ** 2, (fit.sigma_y * scale) ** 2, fit.frame_index)


def momentum_variance(fit: PeakWidthFit, geometry: OpticsGeometry) -> VarianceRecord:
    """Delta^2 = (sigma_px * (2 pi / lambda) * (pixel_pitch / f))^2 per axis."""
    _require_plane(fit, Plane.FAR)
    scale = geometry.momentum_per_pixel
    return VarianceRecord(Plane.FAR, (fit.sigma_x * scale) ** 2, (fit.sigma_y * scale) ** 2, fit.frame_index)


def plane_variance(fit: PeakWidthFit, geometry: OpticsGeometry) -> VarianceRecord:
    if fit.plane is Plane.FAR:
        return momentum_variance(fit, geometry)
    return position_variance(fit, geometry)


def variance_to_width(variance: float, geometry: OpticsGeometry, plane: Plane) -> float:
    """Inverse conversion: physical variance back to a shift width in pixels."""
    return math.sqrt(variance) / geometry.pixel_scale(plane)


# ==================== PRODUCTS ====================

@dataclass(frozen=True)
class EprProduct:
    axis: str
    value: float
    near_frame: Optional[int]
    far_frame: Optional[int]

    @property
    def violates(self) -> bool:
        return self.value > 1.0


@dataclass(eq=False)
class EprProductTable:
    """All near x far products per axis, stored as dense grids (near-major)."""
    near_frames: List[Optional[int]]
    far_frames: List[Optional[int]]
    grids: Dict[str, np.ndarray]

    def values(self, axis: str) -> np.ndarray:
        return self.grids[axis].ravel()

    def __len__(self) -> int:
        return sum(grid.size for grid in self.grids.values())

    def __iter__(self) -> Iterator[EprProduct]:
        for axis in AXES:
            grid = self.grids[axis]
            for i, near in enumerate(self.near_frames):
                for j, far in enumerate(self.far_frames):
                    yield EprProduct(axis, float(grid[i, j]), near, far)

    def rows(self) -> Iterator[list]:
        for product in self:
            yield [product.axis, product.near_frame, product.far_frame, product.value]


PRODUCTS_CSV_HEADER = ("axis", "near_frame", "far_frame", "value")


def epr_products(near_records: Sequence[VarianceRecord], far_records: Sequence[VarianceRecord]) -> EprProductTable:
    """0.25 / (Delta^2 pos * Delta^2 mom) for every (near, far) frame pair and axis."""
    if not near_records or not far_records:
        raise InsufficientSamplesError(
            "EPR products need at least one near and one far record",
            {"near": len(near_records), "far": len(far_records)},
        )
    for records, plane in ((near_records, Plane.NEAR), (far_records, Plane.FAR)):
        for record in records:
            if record.plane is not plane:
                raise PlaneMismatchError(
                    f"{record.plane.label} record passed where {plane.label} records are expected",
                    {"expected": plane.value, "found": record.plane.value},
                )
    grids = {}
    for axis in AXES:
        near = np.array([record.axis(axis) for record in near_records])
        far = np.array([record.axis(axis) for record in far_records])
        grids[axis] = 0.25 / np.outer(near, far)
    return EprProductTable(
        near_frames=[record.frame_index for record in near_records],
        far_frames=[record.frame_index for record in far_records],
        grids=grids,
    )


def confidence_interval(values: Sequence[float], level: float = CONFIDENCE_LEVEL) -> Tuple[float, float]:
    """Nearest-rank interval dropping (1 - level) / 2 of the values at each end."""
    needed = min_samples_for(level)
    if len(values) < needed:
        raise InsufficientSamplesError(
            f"{len(values)} values cannot support a {level:.0%} interval (need {needed})",
            {"count": len(values), "required": needed},
        )
    return nearest_rank_band(values, level)


def interval_or_range(values: Sequence[float], level: float = CONFIDENCE_LEVEL) -> Tuple[Tuple[float, float], str]:
    """Confidence interval when supported, otherwise the (min, max) range."""
    try:
        return confidence_interval(values, level), "nearest_rank"
    except InsufficientSamplesError:
        return (float(np.min(values)), float(np.max(values))), "range"


# ==================== SHOT-NOISE RATIO ====================

@dataclass(frozen=True)
class ShotNoiseRatio:
    r: float
    plane: Plane
    frame_index: int
    idler_index: Optional[int] = None
    support_cells: int = 0
    uncorrected: Optional[float] = None

    @property
    def sub_shot_noise(self) -> bool:
        return self.r < 1.0


def _superpixel_sums(image: np.ndarray, bin_size: int) -> np.ndarray:
    rows, cols = image.shape[0] // bin_size, image.shape[1] // bin_size
    trimmed = image[:rows * bin_size, :cols * bin_size]
    return trimmed.reshape(rows, bin_size, cols, bin_size).sum(axis=(1, 3))


def shot_noise_ratio(pair: ImagePair, bin_size: int = DEFAULT_BIN_SIZE,
                     models: Optional[Tuple[ProfileModel, ProfileModel]] = None,
                     saturation_correction: bool = True) -> ShotNoiseRatio:
    """
    r = Var(N1 - N2) / (<N1 + N2> - <sum nu1^2 + sum nu2^2>) over superpixels
    inside the fitted envelope support.

    N are superpixel photon counts anchored at the frame origin, nu the fitted
    per-pixel occupancy. The far-field idler is flipped before differencing.
    The nu^2 term is the variance deficit of 0/1 pixels; with
    saturation_correction=False the plain Var / Mean ratio is returned.
    """
    plane = Plane(pair.plane)
    if models is None:
        kind = ProfileKind.for_plane(plane)
        models = (fit_profile(pair.signal, kind), fit_profile(pair.idler, kind))
    signal_model, idler_model = models

    signal = np.asarray(pair.signal, dtype=float)
    idler = np.asarray(pair.idler, dtype=float)
    nu_signal = signal_model.evaluate(signal.shape)
    nu_idler = idler_model.evaluate(idler.shape)
    if plane is Plane.FAR:
        idler = np.flip(idler, axis=(0, 1))
        nu_idler = np.flip(nu_idler, axis=(0, 1))

    counts_signal = _superpixel_sums(signal, bin_size)
    counts_idler = _superpixel_sums(idler, bin_size)
    expected_signal = _superpixel_sums(nu_signal, bin_size)
    expected_idler = _superpixel_sums(nu_idler, bin_size)

    envelope = expected_signal + expected_idler
    support = envelope > SUPPORT_FRACTION * envelope.max() if envelope.size else envelope.astype(bool)
    cells = int(support.sum())
    if cells < 2:
        raise EmptySupportError(
            f"envelope support holds {cells} superpixels for frame {pair.frame_index}",
            {"frame_index": pair.frame_index, "cells": cells},
        )

    difference = (counts_signal - expected_signal) - (counts_idler - expected_idler)
    variance = float(np.var(difference[support], ddof=1))
    total = float(np.mean((counts_signal + counts_idler)[support]))
    deficit = float(np.mean((_superpixel_sums(nu_signal ** 2, bin_size)
                             + _superpixel_sums(nu_idler ** 2, bin_size))[support]))
    if total <= 0.0:
        raise EmptySupportError(f"no detections inside the support of frame {pair.frame_index}",
                                {"frame_index": pair.frame_index})
    uncorrected = variance / total
    denominator = total - deficit if saturation_correction else total
    if denominator <= 0.0:
        raise EmptySupportError(f"saturated support in frame {pair.frame_index}",
                                {"frame_index": pair.frame_index})
    return ShotNoiseRatio(
        r=variance / denominator,
        plane=plane,
        frame_index=pair.frame_index,
        idler_index=pair.idler_index,
        support_cells=cells,
        uncorrected=uncorrected,
    )


@dataclass(frozen=True)
class RatioSummary:
    count: int
    mean: float
    band: Tuple[float, float]
    at_or_above_one: int
    minimum: float = 0.0
    maximum: float = 0.0


def summarize_ratios(values: Sequence[float], level: float = CONFIDENCE_LEVEL) -> RatioSummary:
    if len(values) == 0:
        raise InsufficientSamplesError("no shot-noise ratios to summarize")
    return RatioSummary(
        count=len(values),
        mean=float(np.mean(values)),
        band=band_or_range(values, level),
        at_or_above_one=int(sum(value >= 1.0 for value in values)),
        minimum=float(np.min(values)),
        maximum=float(np.max(values)),
    )


# ==================== REPORT ====================

def variance_table(records: Sequence[VarianceRecord], level: float = CONFIDENCE_LEVEL) -> dict:
    """Per-plane variance bands in the inferred-variances table layout."""
    plane = records[0].plane
    table = {"plane": plane.value, "unit": UNITS[plane], "count": len(records)}
    for axis in AXES:
        band, method = interval_or_range([record.axis(axis) for record in records], level)
        table[axis] = {"band": list(band), "method": method,
                       "mean": float(np.mean([record.axis(axis) for record in records]))}
    return table


def product_summary(table: EprProductTable, level: float = CONFIDENCE_LEVEL) -> dict:
    summary = {}
    for axis in AXES:
        values = table.values(axis)
        interval, method = interval_or_range(values, level)
        summary[axis] = {
            "interval": list(interval),
            "method": method,
            "count": int(values.size),
            "fraction_above_one": float(np.mean(values > 1.0)),
            "median": float(np.median(values)),
        }
    return summary


@dataclass(eq=False)
class EprReport:
    """Everything the EPR stage concludes from one near run and one far run."""
    near_widths: List[PeakWidthFit]
    far_widths: List[PeakWidthFit]
    near_variances: List[VarianceRecord]
    far_variances: List[VarianceRecord]
    products: EprProductTable
    shot_noise: Dict[str, Dict[str, RatioSummary]] = field(default_factory=dict)
    stage_digests: Dict[str, str] = field(default_factory=dict)
    level: float = CONFIDENCE_LEVEL

    def intervals(self) -> Dict[str, Tuple[float, float]]:
        return {axis: interval_or_range(self.products.values(axis), self.level)[0] for axis in AXES}

    def to_dict(self) -> dict:
        def width(fit: PeakWidthFit) -> dict:
            return {
                "frame_index": fit.frame_index, "sigma_x": fit.sigma_x, "sigma_y": fit.sigma_y,
                "amplitude": fit.amplitude, "offset": fit.offset,
                "converged": fit.converged, "sub_pixel": fit.sub_pixel,
            }

        return {
            "level": self.level,
            "widths": {
                Plane.NEAR.value: [width(fit) for fit in self.near_widths],
                Plane.FAR.value: [width(fit) for fit in self.far_widths],
            },
            "variances": {
                Plane.NEAR.value: variance_table(self.near_variances, self.level),
                Plane.FAR.value: variance_table(self.far_variances, self.level),
            },
            "products": product_summary(self.products, self.level),
            "shot_noise": {
                plane: {pairing: {**asdict(summary), "band": list(summary.band)}
                        for pairing, summary in pairings.items()}
                for plane, pairings in self.shot_noise.items()
            },
            "stage_digests": dict(self.stage_digests),
        }
