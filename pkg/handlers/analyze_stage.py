"""analyze: per-frame peak statistics, peak widths and shot-noise ratios for each plane."""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from config import Plane
from constants import (
    ACCUMULATED_REPORT_PATTERN,
    ANALYSIS_CSV_PATTERN,
    EXIT_OK,
    MAPS_DIR,
    OVERLAP_CYCLIC,
    OVERLAP_MODES,
    PROFILES_CSV_PATTERN,
    ROLE_IDLER,
    ROLE_SIGNAL,
    TOOL_VERSION,
    WIDTHS_CSV_PATTERN,
)
from database.run_store import RunManifest, RunStore
from epr_metrics import (
    WIDTHS_CSV_HEADER,
    PeakWidthFit,
    ShotNoiseRatio,
    fit_peak_width,
    shot_noise_ratio,
    width_row,
)
from errors import DegenerateFrameError, EmptySupportError, ManifestError
from handlers.simulate_stage import simulate_digest_key
from profile_fit import PROFILE_CSV_HEADER, profile_row
from twin_sim import ImagePair, effective_efficiency, predicted_snr
from utils import digest_json, format_interval, progress
from xcorr import (
    ANALYSIS_CSV_HEADER,
    PairAnalysis,
    accumulated_peak,
    analysis_row,
    analyze_pair,
    decorrelated_pairing,
    failed_analysis_row,
    summarize_snr,
)

logger = logging.getLogger(__name__)

ANALYSIS_HEADER = ANALYSIS_CSV_HEADER + (
    "shot_noise_ratio", "shot_noise_uncorrected", "support_cells", "stage_digest",
)
WIDTHS_HEADER = WIDTHS_CSV_HEADER + ("stage_digest",)
PROFILES_HEADER = PROFILE_CSV_HEADER + ("stage_digest",)
MAP_CSV_HEADER = ("shift_x", "shift_y", "value")
STATUS_DEGENERATE = "degenerate"


@dataclass(eq=False)
class FrameResult:
    frame_index: int
    idler_index: int
    analysis: Optional[PairAnalysis]
    width: Optional[PeakWidthFit] = None
    ratio: Optional[ShotNoiseRatio] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.analysis is not None


def analyze_digest_key(plane: Plane) -> str:
    return f"analyze:{Plane(plane).value}"


def analyze_digest(manifest: RunManifest, plane: Plane, overlap: str = OVERLAP_CYCLIC) -> str:
    """Digest of everything the analyze stage reads; stable across reruns."""
    key = simulate_digest_key(plane)
    if key not in manifest.stage_digests:
        raise ManifestError(f"Manifest has no {key} digest; run simulate first", {"stage": key})
    return digest_json({
        "stage": "analyze",
        "plane": Plane(plane).value,
        "ensemble": manifest.stage_digests[key],
        "bin_size": manifest.config.bin_size,
        "overlap": overlap,
        "tool_version": TOOL_VERSION,
    })


def analyze_frame(pair: ImagePair, bin_size: int, keep_map: bool = False, wrap: bool = True) -> FrameResult:
    """Correlation statistics, peak width (twin pairs) and shot-noise ratio of one pair."""
    try:
        analysis = analyze_pair(pair, bin_size, keep_map=True, wrap=wrap)
    except DegenerateFrameError as exc:
        logger.warning("Skipping %s frame %d: %s", pair.plane.label, pair.frame_index, exc)
        return FrameResult(pair.frame_index, pair.idler_index, analysis=None, error=str(exc))
    width = None
    if not pair.decorrelated:
        width = fit_peak_width(analysis.correlation, plane=pair.plane, frame_index=pair.frame_index)
    try:
        ratio = shot_noise_ratio(pair, bin_size, models=(analysis.signal_model, analysis.idler_model))
    except EmptySupportError as exc:
        logger.warning("No shot-noise ratio for %s frame %d: %s", pair.plane.label, pair.frame_index, exc)
        ratio = None
    if not keep_map:
        analysis.correlation = None
    return FrameResult(pair.frame_index, pair.idler_index, analysis=analysis, width=width, ratio=ratio)


def _frame_task(task: Tuple[ImagePair, int, bool, bool]) -> FrameResult:
    return analyze_frame(*task)


def analyze_frames(pairs: Sequence[ImagePair], bin_size: int, jobs: int = 1, keep_map: bool = False,
                   desc: Optional[str] = None, wrap: bool = True) -> List[FrameResult]:
    """Results in frame order regardless of completion order."""
    tasks = [(pair, bin_size, keep_map, wrap) for pair in pairs]
    if jobs <= 1 or len(tasks) <= 1:
        return [_frame_task(task) for task in progress(tasks, len(tasks), desc)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        results = pool.map(_frame_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs)))
        return list(progress(results, len(tasks), desc))


def _analysis_rows(results: Sequence[FrameResult], digest: str) -> List[list]:
    rows = []
    for result in results:
        if not result.ok:
            rows.append(failed_analysis_row(result.frame_index, result.idler_index, STATUS_DEGENERATE)
                        + [None, None, 0, digest])
            continue
        ratio = result.ratio
        rows.append(analysis_row(result.analysis) + [
            ratio.r if ratio else None,
            ratio.uncorrected if ratio else None,
            ratio.support_cells if ratio else 0,
            digest,
        ])
    return rows


def _export_maps(store: RunStore, plane: Plane, results: Sequence[FrameResult]) -> None:
    for position, result in enumerate(results):
        correlation = result.analysis.correlation
        name = f"{plane.value}_map_{result.analysis.frame_index:04d}"
        store.write_grid(name, correlation.values, correlation.header())
        if position == 0:
            store.write_table(f"{MAPS_DIR}/{name}.csv", MAP_CSV_HEADER, correlation.to_rows())


def accumulated_report(pairs: Sequence[ImagePair], manifest: RunManifest, plane: Plane,
                       wrap: bool = True) -> Dict:
    """Peak of the K summed twin maps against the K-pair design SNR."""
    config = manifest.config
    peak = accumulated_peak(pairs, plane, config.bin_size, wrap=wrap)
    predicted = predicted_snr(config.cell_count, len(pairs), effective_efficiency(config.efficiency),
                              config.mean_photons_per_pixel, config.noise_per_pixel)
    return {
        "plane": Plane(plane).value,
        "pair_count": len(pairs),
        "snr": peak.snr,
        "snr_infinite": peak.infinite,
        "predicted_snr": predicted,
        "success": peak.is_expected_position,
        "block": list(peak.block),
        "shift": list(peak.shift),
    }


def analyze_plane(store: RunStore, manifest: RunManifest, plane: Plane, jobs: int = 1,
                  export_maps: bool = False, overlap: str = OVERLAP_CYCLIC) -> RunManifest:
    plane = Plane(plane)
    if overlap not in OVERLAP_MODES:
        raise ValueError(f"overlap must be one of {OVERLAP_MODES}, got {overlap}")
    wrap = overlap == OVERLAP_CYCLIC
    bin_size = manifest.config.bin_size
    digest = analyze_digest(manifest, plane, overlap)
    pairs = store.load_ensemble(plane, manifest.config)

    twin = analyze_frames(pairs, bin_size, jobs, keep_map=export_maps, desc=f"analyze {plane.value}", wrap=wrap)
    control = []
    if len(pairs) >= 2:
        control = analyze_frames(decorrelated_pairing(pairs), bin_size, jobs,
                                 desc=f"control {plane.value}", wrap=wrap)
    analyzed = [result for result in twin if result.ok]
    failed = len(twin) - len(analyzed)

    store.write_table(ANALYSIS_CSV_PATTERN.format(plane=plane.value), ANALYSIS_HEADER,
                      _analysis_rows(twin + control, digest))
    store.write_table(PROFILES_CSV_PATTERN.format(plane=plane.value), PROFILES_HEADER, [
        profile_row(result.frame_index, role, model) + [digest]
        for result in analyzed
        for role, model in ((ROLE_SIGNAL, result.analysis.signal_model), (ROLE_IDLER, result.analysis.idler_model))
    ])
    store.write_table(WIDTHS_CSV_PATTERN.format(plane=plane.value), WIDTHS_HEADER,
                      [width_row(result.width) + [digest] for result in analyzed])
    if export_maps:
        _export_maps(store, plane, analyzed)
    if len(pairs) >= 2:
        store.write_report(ACCUMULATED_REPORT_PATTERN.format(plane=plane.value),
                           accumulated_report(pairs, manifest, plane, wrap))

    if failed:
        print(f"⚠️ {plane.label}: {failed}/{len(twin)} frame(s) too sparse to analyze")
    if analyzed:
        summary = summarize_snr([result.analysis for result in analyzed])
        print(f"✅ {plane.label}: success {summary.successes}/{len(twin)} "
              f"({summary.successes / len(twin):.3f}), mean SNR {summary.mean_snr:.2f} "
              f"{format_interval(summary.band)}, degree of correlation {summary.mean_degree:.3f}")
    control_ok = [result.analysis for result in control if result.ok]
    if control_ok:
        control_summary = summarize_snr(control_ok)
        print(f"   decorrelated control: success {control_summary.successes}/{len(control)}, "
              f"degree of correlation {control_summary.mean_degree:.3f}")
    return store.record_stage(manifest, analyze_digest_key(plane), digest)


def cmd_analyze(run_dir: str, jobs: int = 1, export_maps: bool = False,
                planes: Optional[Sequence[str]] = None, overlap: str = OVERLAP_CYCLIC) -> int:
    """Analyze every plane of a simulated run (or the selected ones)."""
    store = RunStore(run_dir)
    manifest = store.read_manifest()
    selected = [Plane(plane) for plane in planes] if planes else list(manifest.planes)
    for plane in selected:
        manifest = analyze_plane(store, manifest, plane, jobs, export_maps, overlap)
    return EXIT_OK
