"""
Normalized cross-correlation of twin fluctuation images, coherence-cell
binning, quantum-peak detection and the decorrelated control.

Map convention: values[dy + S_y, dx + S_x] is the Pearson coefficient between
signal(x + dx, y + dy) and idler(x, y). The true peak sits at zero shift in
both planes once the far-field idler is flipped.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.signal import fftconvolve

from config import Plane, SimConfig, replace_config
from constants import CONFIDENCE_LEVEL, DEFAULT_BIN_SIZE
from errors import DimensionMismatchError, InsufficientSamplesError, PlaneMismatchError
from profile_fit import FluctuationImage, ProfileModel, pair_fluctuations
from twin_sim import (
    ImagePair,
    effective_efficiency,
    generate_ensemble,
    min_cells_for_unambiguity,
    predicted_snr,
)
from utils import min_samples_for, nearest_rank_band

logger = logging.getLogger(__name__)

NORMALIZATION = "PearsonPerShift"

# Relative floor below which a per-shift variance product counts as zero
_VARIANCE_FLOOR = 1e-12

ArrayLike = Union[np.ndarray, FluctuationImage]


# ==================== CORRELATION MAP ====================

@dataclass(frozen=True, eq=False)
class CorrelationMap:
    values: np.ndarray
    flipped_idler: bool
    wrap: bool = True
    plane: Optional[Plane] = None
    normalization: str = NORMALIZATION

    @property
    def max_shift(self) -> Tuple[int, int]:
        """(S_x, S_y)."""
        rows, cols = self.values.shape
        return cols // 2, rows // 2

    def value_at(self, dx: int, dy: int) -> float:
        sx, sy = self.max_shift
        return float(self.values[dy + sy, dx + sx])

    def header(self) -> dict:
        rows, cols = self.values.shape
        return {
            "rows": rows,
            "cols": cols,
            "dtype": "float64",
            "byte_order": "little",
            "normalization": self.normalization,
            "flipped_idler": self.flipped_idler,
            "wrap": self.wrap,
            "plane": self.plane.value if self.plane is not None else None,
        }

    def to_rows(self) -> List[Tuple[int, int, float]]:
        """One (shift_x, shift_y, value) row per shift."""
        sx, sy = self.max_shift
        rows, cols = self.values.shape
        return [
            (col - sx, row - sy, float(self.values[row, col]))
            for row in range(rows) for col in range(cols)
        ]


def flip_for_plane(plane: Plane) -> bool:
    """Far-field idlers are correlated as N2(-p)."""
    return Plane(plane) is Plane.FAR


def _values_and_plane(image: ArrayLike) -> Tuple[np.ndarray, Optional[Plane]]:
    if isinstance(image, FluctuationImage):
        return np.asarray(image.values, dtype=float), image.plane
    return np.asarray(image, dtype=float), None


def _shift_range(length: int) -> np.ndarray:
    limit = max(length // 2 - 1, 0)
    return np.arange(-limit, limit + 1)


def _cyclic_pearson(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    rows, cols = a.shape
    a0 = a - a.mean()
    b0 = b - b.mean()
    denom = math.sqrt(float((a0 * a0).mean()) * float((b0 * b0).mean()))
    if denom == 0.0:
        return np.zeros((rows, cols))
    cov = np.fft.irfft2(np.fft.rfft2(a0) * np.conj(np.fft.rfft2(b0)), s=(rows, cols)) / a.size
    return cov / denom


def _overlap_pearson(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pearson over the overlap region of every linear shift, lag-indexed like a 'full' correlation."""
    a0 = a - a.mean()
    b0 = b - b.mean()
    ones = np.ones_like(a0)

    def correlate(x, y):
        return fftconvolve(x, y[::-1, ::-1], mode="full")

    n = np.rint(correlate(ones, ones))
    sum_a = correlate(a0, ones)
    sum_b = correlate(ones, b0)
    sum_aa = correlate(a0 * a0, ones)
    sum_bb = correlate(ones, b0 * b0)
    sum_ab = correlate(a0, b0)

    cov = sum_ab / n - sum_a * sum_b / n ** 2
    var_a = np.clip(sum_aa / n - (sum_a / n) ** 2, 0.0, None)
    var_b = np.clip(sum_bb / n - (sum_b / n) ** 2, 0.0, None)
    denom = np.sqrt(var_a * var_b)
    floor = _VARIANCE_FLOOR * max(float(a0.var() * b0.var()) ** 0.5, np.finfo(float).tiny)
    out = np.zeros_like(cov)
    np.divide(cov, denom, out=out, where=denom > floor)
    return out


def cross_correlate(s: ArrayLike, i: ArrayLike, flip_idler: bool, wrap: bool = True) -> CorrelationMap:
    """
    Pearson correlation coefficient at every shift in [-S, S]^2, S = size // 2 - 1.

    wrap=True correlates cyclically (every shift overlaps the whole frame);
    wrap=False restricts each coefficient to the linear overlap region.
    """
    a, signal_plane = _values_and_plane(s)
    b, idler_plane = _values_and_plane(i)
    if a.ndim != 2 or b.ndim != 2 or a.shape != b.shape:
        raise DimensionMismatchError(
            f"signal {a.shape} and idler {b.shape} must be 2-D with equal dimensions",
            {"signal": list(a.shape), "idler": list(b.shape)},
        )
    if min(a.shape) < 2:
        raise DimensionMismatchError("frames must be at least 2x2", {"shape": list(a.shape)})

    plane = signal_plane or idler_plane
    if signal_plane is not None and idler_plane is not None and signal_plane != idler_plane:
        raise PlaneMismatchError(
            f"cannot correlate {signal_plane.label} signal with {idler_plane.label} idler",
            {"signal": signal_plane.value, "idler": idler_plane.value},
        )
    if plane is not None and flip_idler != flip_for_plane(plane):
        raise PlaneMismatchError(
            f"{plane.label} requires flip_idler={flip_for_plane(plane)}",
            {"plane": plane.value, "flip_idler": flip_idler},
        )

    if flip_idler:
        b = np.flip(b, axis=(0, 1))
    rows, cols = a.shape
    row_shifts, col_shifts = _shift_range(rows), _shift_range(cols)
    if wrap:
        full = _cyclic_pearson(a, b)
        values = full[np.ix_(row_shifts % rows, col_shifts % cols)]
    else:
        full = _overlap_pearson(a, b)
        values = full[np.ix_(row_shifts + rows - 1, col_shifts + cols - 1)]
    return CorrelationMap(
        values=np.clip(values, -1.0, 1.0),
        flipped_idler=bool(flip_idler),
        wrap=wrap,
        plane=plane,
    )


# ==================== BINNING AND PEAK ====================

@dataclass(frozen=True, eq=False)
class BinnedMap:
    """Block sums of a correlation map; `center` is the block holding zero shift."""
    values: np.ndarray
    bin_size: int
    center: Tuple[int, int]


def _block_layout(length: int, bin_size: int) -> Tuple[int, int, int]:
    zero = length // 2
    start = zero - bin_size // 2
    if start < 0 or start + bin_size > length:
        raise ValueError(f"bin_size {bin_size} does not fit a map of width {length}")
    before = start // bin_size
    first = start - before * bin_size
    count = (length - first) // bin_size
    return first, count, before


def bin_map(correlation: Union[CorrelationMap, np.ndarray], bin_size: int) -> BinnedMap:
    """Non-overlapping block sums anchored so zero shift is a block centre; partial blocks dropped."""
    if bin_size < 1:
        raise ValueError("bin_size must be >= 1")
    values = np.asarray(getattr(correlation, "values", correlation), dtype=float)
    row_first, row_count, row_center = _block_layout(values.shape[0], bin_size)
    col_first, col_count, col_center = _block_layout(values.shape[1], bin_size)
    window = values[row_first:row_first + row_count * bin_size, col_first:col_first + col_count * bin_size]
    blocks = window.reshape(row_count, bin_size, col_count, bin_size).sum(axis=(1, 3))
    return BinnedMap(values=blocks, bin_size=bin_size, center=(row_center, col_center))


@dataclass(frozen=True)
class PeakStats:
    block: Tuple[int, int]
    shift: Tuple[int, int]
    value: float
    snr: float
    infinite: bool
    is_expected_position: bool


def detect_peak(binned: Union[BinnedMap, np.ndarray]) -> PeakStats:
    """
    Highest block and its SNR against the std of every other block.

    Ties go to the block nearest the expected (zero-shift) block, then to the
    lexicographically smallest (row, col).
    """
    if isinstance(binned, BinnedMap):
        values, center, bin_size = binned.values, binned.center, binned.bin_size
    else:
        values = np.asarray(binned, dtype=float)
        center, bin_size = (values.shape[0] // 2, values.shape[1] // 2), 1
    if values.ndim != 2 or min(values.shape) < 3:
        raise ValueError("peak detection needs at least 3x3 blocks")

    peak_value = values.max()
    candidates = np.argwhere(values == peak_value)
    row, col = min(
        ((int(r), int(c)) for r, c in candidates),
        key=lambda rc: ((rc[0] - center[0]) ** 2 + (rc[1] - center[1]) ** 2, rc[0], rc[1]),
    )

    others = np.delete(values.ravel(), row * values.shape[1] + col)
    noise = float(np.std(others))
    value = float(peak_value)
    infinite = noise == 0.0 and value > 0.0
    if infinite:
        snr = math.inf
    elif noise == 0.0:
        snr = 0.0
    else:
        snr = max(value / noise, 0.0)
    return PeakStats(
        block=(row, col),
        shift=((col - center[1]) * bin_size, (row - center[0]) * bin_size),
        value=value,
        snr=snr,
        infinite=infinite,
        is_expected_position=(row, col) == tuple(center),
    )


def degree_of_correlation(correlation: Union[CorrelationMap, np.ndarray], cell: int) -> float:
    """Sum of map values over the cell x cell window centred on zero shift."""
    if cell < 1:
        raise ValueError("cell must be >= 1")
    values = np.asarray(getattr(correlation, "values", correlation), dtype=float)
    rows, cols = values.shape
    top = max(rows // 2 - cell // 2, 0)
    left = max(cols // 2 - cell // 2, 0)
    return float(values[top:top + cell, left:left + cell].sum())


# ==================== ENSEMBLES ====================

def decorrelated_pairing(ensemble: Sequence[ImagePair]) -> List[ImagePair]:
    """Signal of frame i with the idler of frame (i + 1) mod K."""
    count = len(ensemble)
    if count < 2:
        raise InsufficientSamplesError("decorrelated pairing needs at least two frames", {"count": count})
    paired = []
    for index, pair in enumerate(ensemble):
        partner = ensemble[(index + 1) % count]
        paired.append(ImagePair(
            signal=pair.signal,
            idler=partner.idler,
            plane=pair.plane,
            frame_index=pair.frame_index,
            config_digest=pair.config_digest,
            idler_index=partner.frame_index,
        ))
    return paired


@dataclass(eq=False)
class PairAnalysis:
    """Single-pair detection results: binned peak, unbinned peak and degree of correlation."""
    frame_index: int
    idler_index: int
    plane: Plane
    peak: PeakStats
    unbinned_peak: PeakStats
    degree: float
    signal_model: ProfileModel
    idler_model: ProfileModel
    correlation: Optional[CorrelationMap] = field(default=None, repr=False)

    @property
    def decorrelated(self) -> bool:
        return self.idler_index != self.frame_index

    @property
    def success(self) -> bool:
        return self.peak.is_expected_position


def analyze_pair(pair: ImagePair, bin_size: int = DEFAULT_BIN_SIZE, keep_map: bool = False,
                 wrap: bool = True) -> PairAnalysis:
    signal, idler = pair_fluctuations(pair)
    correlation = cross_correlate(signal, idler, flip_idler=flip_for_plane(pair.plane), wrap=wrap)
    return PairAnalysis(
        frame_index=pair.frame_index,
        idler_index=pair.idler_index,
        plane=pair.plane,
        peak=detect_peak(bin_map(correlation, bin_size)),
        unbinned_peak=detect_peak(correlation.values),
        degree=degree_of_correlation(correlation, bin_size),
        signal_model=signal.model_used,
        idler_model=idler.model_used,
        correlation=correlation if keep_map else None,
    )


def _analyze_task(task: Tuple[ImagePair, int, bool, bool]) -> PairAnalysis:
    pair, bin_size, keep_map, wrap = task
    return analyze_pair(pair, bin_size, keep_map, wrap)


def analyze_ensemble(pairs: Sequence[ImagePair], bin_size: int = DEFAULT_BIN_SIZE, jobs: int = 1,
                     keep_map: bool = False, wrap: bool = True) -> List[PairAnalysis]:
    """Per-pair analyses in input order."""
    if jobs <= 1 or len(pairs) <= 1:
        return [analyze_pair(pair, bin_size, keep_map, wrap) for pair in pairs]
    tasks = [(pair, bin_size, keep_map, wrap) for pair in pairs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_analyze_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


def _check_plane(items: Iterable, plane: Plane) -> None:
    for item in items:
        if Plane(item.plane) is not plane:
            raise PlaneMismatchError(
                f"frame {item.frame_index} belongs to {Plane(item.plane).label}, expected {plane.label}",
                {"frame_index": item.frame_index, "plane": Plane(item.plane).value},
            )


def success_rate(ensemble: Sequence[Union[ImagePair, PairAnalysis]], plane: Plane,
                 bin_size: int = DEFAULT_BIN_SIZE) -> float:
    """Fraction of pairs whose binned peak sits in the expected block."""
    plane = Plane(plane)
    if not ensemble:
        raise InsufficientSamplesError("success rate needs at least one pair")
    _check_plane(ensemble, plane)
    analyses = [item if isinstance(item, PairAnalysis) else analyze_pair(item, bin_size) for item in ensemble]
    return sum(analysis.success for analysis in analyses) / len(analyses)


@dataclass(frozen=True)
class SnrSummary:
    count: int
    mean_snr: float
    band: Tuple[float, float]
    infinite: int
    successes: int
    mean_degree: float

    @property
    def failures(self) -> int:
        return self.count - self.successes

    @property
    def success_rate(self) -> float:
        return self.successes / self.count if self.count else 0.0


def band_or_range(values: Sequence[float], level: float = CONFIDENCE_LEVEL) -> Tuple[float, float]:
    """Nearest-rank band, or (min, max) when too few values support the level."""
    if len(values) < min_samples_for(level):
        return float(min(values)), float(max(values))
    return nearest_rank_band(values, level)


def summarize_snr(analyses: Sequence[PairAnalysis], level: float = CONFIDENCE_LEVEL) -> SnrSummary:
    if not analyses:
        raise InsufficientSamplesError("no analyses to summarize")
    finite = [a.peak.snr for a in analyses if not a.peak.infinite]
    return SnrSummary(
        count=len(analyses),
        mean_snr=float(np.mean(finite)) if finite else math.inf,
        band=band_or_range(finite, level) if finite else (math.inf, math.inf),
        infinite=len(analyses) - len(finite),
        successes=sum(a.success for a in analyses),
        mean_degree=float(np.mean([a.degree for a in analyses])),
    )


# ==================== MULTI-PAIR AND SWEEPS ====================

def accumulated_peak(pairs: Sequence[ImagePair], plane: Plane, bin_size: int = DEFAULT_BIN_SIZE,
                     wrap: bool = True) -> PeakStats:
    """
    Peak of the summed correlation maps of K pairs after ensemble-mean subtraction.

    This is the multi-image averaging method; its SNR grows as sqrt(K).
    """
    plane = Plane(plane)
    if len(pairs) < 2:
        raise InsufficientSamplesError("accumulation needs at least two pairs", {"count": len(pairs)})
    _check_plane(pairs, plane)
    mean_signal = np.zeros(pairs[0].shape)
    mean_idler = np.zeros(pairs[0].shape)
    for pair in pairs:
        mean_signal += pair.signal
        mean_idler += pair.idler
    mean_signal /= len(pairs)
    mean_idler /= len(pairs)

    flip = flip_for_plane(plane)
    total = None
    for pair in pairs:
        values = cross_correlate(pair.signal - mean_signal, pair.idler - mean_idler,
                                 flip_idler=flip, wrap=wrap).values
        total = values if total is None else total + values
    return detect_peak(bin_map(total, bin_size))


@dataclass(frozen=True)
class SweepPoint:
    image_size: int
    cell_count: int
    pair_count: int
    success_rate: float
    mean_snr: float
    predicted_snr: float
    min_cells: int

    def as_row(self) -> list:
        return [self.image_size, self.cell_count, self.pair_count, self.success_rate,
                self.mean_snr, self.predicted_snr, self.min_cells, self.cell_count >= self.min_cells]


SWEEP_CSV_HEADER = (
    "image_size", "cell_count", "pair_count", "success_rate",
    "mean_snr", "predicted_snr", "min_cells", "above_bound",
)


def unambiguity_sweep(config: SimConfig, image_sizes: Iterable[int], plane: Plane,
                      jobs: int = 1) -> List[SweepPoint]:
    """Single-pair success rate versus coherence-cell count at fixed efficiency."""
    plane = Plane(plane)
    eta = effective_efficiency(config.efficiency)
    points = []
    for size in image_sizes:
        sized = replace_config(config, geometry={"image_size": int(size)})
        analyses = analyze_ensemble(generate_ensemble(sized, plane, jobs=jobs), sized.bin_size, jobs=jobs)
        summary = summarize_snr(analyses)
        point = SweepPoint(
            image_size=int(size),
            cell_count=sized.cell_count,
            pair_count=1,
            success_rate=summary.success_rate,
            mean_snr=summary.mean_snr,
            predicted_snr=predicted_snr(sized.cell_count, 1, eta, sized.mean_photons_per_pixel,
                                        sized.noise_per_pixel),
            min_cells=min_cells_for_unambiguity(eta, 1),
        )
        logger.info("Sweep %s N=%d C=%d: success %.3f", plane.label, point.image_size,
                    point.cell_count, point.success_rate)
        points.append(point)
    return points


# ==================== TABLE ROWS ====================

ANALYSIS_CSV_HEADER = (
    "frame_index", "idler_index", "pairing", "peak_row", "peak_col", "shift_x", "shift_y",
    "peak_value", "snr", "snr_infinite", "success", "unbinned_value", "unbinned_snr",
    "unbinned_success", "degree_of_correlation", "signal_converged", "idler_converged", "status",
)
STATUS_OK = "ok"


def analysis_row(analysis: PairAnalysis) -> list:
    peak, unbinned = analysis.peak, analysis.unbinned_peak
    return [
        analysis.frame_index, analysis.idler_index,
        "decorrelated" if analysis.decorrelated else "twin",
        peak.block[0], peak.block[1], peak.shift[0], peak.shift[1],
        peak.value, peak.snr, peak.infinite, peak.is_expected_position,
        unbinned.value, unbinned.snr, unbinned.is_expected_position,
        analysis.degree, analysis.signal_model.converged, analysis.idler_model.converged,
        STATUS_OK,
    ]


def failed_analysis_row(frame_index: int, idler_index: int, status: str) -> list:
    """Row for a pair that could not be analyzed: indices, pairing and status only, success false."""
    row: list = [None] * len(ANALYSIS_CSV_HEADER)
    row[0], row[1] = frame_index, idler_index
    row[2] = "decorrelated" if idler_index != frame_index else "twin"
    for column in ("snr_infinite", "success", "unbinned_success"):
        row[ANALYSIS_CSV_HEADER.index(column)] = False
    row[-1] = status
    return row
