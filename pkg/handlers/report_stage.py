"""report: per-plane summary of an analyzed run, compared against the design formulas."""
import logging
import math
from typing import Dict, List, Optional, Sequence

import numpy as np

from config import Plane
from constants import ACCUMULATED_REPORT_PATTERN, ANALYSIS_CSV_PATTERN, EXIT_OK, REPORT_FILE
from database.run_store import RunManifest, RunStore
from epr_metrics import summarize_ratios
from errors import StorageError
from handlers.analyze_stage import analyze_digest_key
from twin_sim import effective_efficiency, min_cells_for_unambiguity, predicted_snr
from utils import digest_json, format_interval, parse_bool
from xcorr import STATUS_OK, band_or_range

logger = logging.getLogger(__name__)


def _optional_float(raw: Optional[str]) -> Optional[float]:
    return float(raw) if raw not in (None, "") else None


def pairing_summary(rows: Sequence[Dict[str, str]]) -> Dict:
    """Statistics of one pairing (twin or decorrelated) from analysis table rows."""
    analyzed = [row for row in rows if row.get("status", STATUS_OK) == STATUS_OK]
    finite = [float(row["snr"]) for row in analyzed if not parse_bool(row["snr_infinite"])]
    degrees = [float(row["degree_of_correlation"]) for row in analyzed]
    ratios = [value for value in (_optional_float(row.get("shot_noise_ratio")) for row in analyzed)
              if value is not None]
    successes = sum(parse_bool(row["success"]) for row in analyzed)
    summary = {
        "count": len(rows),
        "failed": len(rows) - len(analyzed),
        "successes": successes,
        "success_rate": successes / len(rows),
        "unbinned_success_rate": sum(parse_bool(row["unbinned_success"]) for row in analyzed) / len(rows),
        "infinite_snr": len(analyzed) - len(finite),
        "mean_snr": float(np.mean(finite)) if finite else math.inf,
        "snr_band": list(band_or_range(finite)) if finite else None,
        "mean_degree": float(np.mean(degrees)) if degrees else math.nan,
        "degree_band": list(band_or_range(degrees)) if degrees else None,
        "shot_noise": None,
    }
    if ratios:
        ratio_summary = summarize_ratios(ratios)
        summary["shot_noise"] = {
            "count": ratio_summary.count,
            "mean": ratio_summary.mean,
            "band": list(ratio_summary.band),
            "at_or_above_one": ratio_summary.at_or_above_one,
        }
    return summary


def efficiency_check(mean_degree: float, eta: float, m: float, p_n: float) -> Dict:
    """
    Degree of correlation against eta. Noise counts dilute the coincidences to
    eta * m / (m + p_n), so the accepted band runs from 0.8 of that up to eta.
    """
    diluted = eta * m / (m + p_n)
    return {
        "mean_degree": mean_degree,
        "eta": eta,
        "diluted_eta": diluted,
        "ratio": mean_degree / eta,
        "within_band": bool(0.8 * diluted <= mean_degree <= eta),
    }


def plane_report(store: RunStore, manifest: RunManifest, plane: Plane) -> Dict:
    plane = Plane(plane)
    name = ANALYSIS_CSV_PATTERN.format(plane=plane.value)
    if not store.has_file(name):
        raise StorageError(f"{plane.label} of {store.name} has not been analyzed", {"path": store.path(name)})
    rows = store.read_table(name)
    twin = [row for row in rows if row["pairing"] == "twin"]
    control = [row for row in rows if row["pairing"] == "decorrelated"]

    config = manifest.config
    eta = effective_efficiency(config.efficiency)
    predicted = predicted_snr(config.cell_count, 1, eta, config.mean_photons_per_pixel, config.noise_per_pixel)
    twin_summary = pairing_summary(twin)
    accumulated = ACCUMULATED_REPORT_PATTERN.format(plane=plane.value)
    return {
        "plane": plane.value,
        "stage_digest": manifest.stage_digests.get(analyze_digest_key(plane)),
        "cell_count": config.cell_count,
        "eta": eta,
        "predicted_snr": predicted,
        "measured_over_predicted": twin_summary["mean_snr"] / predicted,
        "min_cells_for_unambiguity": min_cells_for_unambiguity(eta, 1),
        "efficiency_check": efficiency_check(twin_summary["mean_degree"], eta, config.mean_photons_per_pixel,
                                             config.noise_per_pixel),
        "twin": twin_summary,
        "decorrelated": pairing_summary(control) if control else None,
        "accumulated": store.read_report(accumulated) if store.has_file(accumulated) else None,
    }


def _print_plane(report: Dict) -> None:
    twin = report["twin"]
    print(f"{Plane(report['plane']).label}: success {twin['successes']}/{twin['count']}, "
          f"SNR {twin['mean_snr']:.2f} {format_interval(twin['snr_band'])} "
          f"(predicted {report['predicted_snr']:.2f}), degree {twin['mean_degree']:.3f} vs eta {report['eta']:.3f}")
    if twin["shot_noise"]:
        shot = twin["shot_noise"]
        print(f"   r = {shot['mean']:.3f} {format_interval(shot['band'])}, r >= 1 in {shot['at_or_above_one']} frames")
    control = report["decorrelated"]
    if control and control["shot_noise"]:
        print(f"   decorrelated: success {control['successes']}/{control['count']}, "
              f"r = {control['shot_noise']['mean']:.3f}")
    accumulated = report.get("accumulated")
    if accumulated:
        print(f"   {accumulated['pair_count']} pairs accumulated: SNR {accumulated['snr']:.1f} "
              f"(predicted {accumulated['predicted_snr']:.1f})")


def cmd_report(run_dir: str, planes: Optional[Sequence[str]] = None) -> int:
    store = RunStore(run_dir)
    manifest = store.read_manifest()
    selected: List[Plane] = [Plane(plane) for plane in planes] if planes else list(manifest.planes)
    reports = {plane.value: plane_report(store, manifest, plane) for plane in selected}
    report = {"run": store.name, "tool_version": manifest.tool_version, "planes": reports}
    store.write_report(REPORT_FILE, report)
    store.record_stage(manifest, "report", digest_json(report))
    for plane_data in reports.values():
        _print_plane(plane_data)
    return EXIT_OK
