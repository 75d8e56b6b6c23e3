"""epr: variance products over every near/far frame combination and shot-noise statistics."""
import logging
from typing import Dict, List, Optional, Tuple

from config import Plane
from constants import (
    ANALYSIS_CSV_PATTERN,
    CONFIDENCE_LEVEL,
    EPR_PRODUCTS_FILE,
    EPR_REPORT_FILE,
    EXIT_OK,
    TOOL_VERSION,
    WIDTHS_CSV_PATTERN,
)
from database.run_store import RunManifest, RunStore
from epr_metrics import (
    PRODUCTS_CSV_HEADER,
    EprReport,
    PeakWidthFit,
    RatioSummary,
    epr_products,
    plane_variance,
    summarize_ratios,
    width_from_row,
)
from errors import InsufficientSamplesError, PlaneMismatchError, StorageError
from handlers.analyze_stage import analyze_digest_key
from utils import digest_json, format_interval

logger = logging.getLogger(__name__)


def _open_plane_run(run_dir: str, plane: Plane) -> Tuple[RunStore, RunManifest]:
    store = RunStore(run_dir)
    manifest = store.read_manifest()
    if plane not in manifest.planes:
        found = ", ".join(p.label for p in manifest.planes) or "no plane"
        raise PlaneMismatchError(
            f"{run_dir} holds {found}; a {plane.label} run is required",
            {"run": run_dir, "expected": plane.value, "found": [p.value for p in manifest.planes]},
        )
    if analyze_digest_key(plane) not in manifest.stage_digests:
        raise StorageError(f"{plane.label} of {run_dir} has not been analyzed", {"run": run_dir})
    return store, manifest


def load_widths(store: RunStore, plane: Plane) -> List[PeakWidthFit]:
    """Accepted peak-width fits of a run's twin pairs: converged and within the noise floor."""
    fits = [width_from_row(row, plane) for row in store.read_table(WIDTHS_CSV_PATTERN.format(plane=plane.value))]
    accepted = [fit for fit in fits if fit.converged and fit.residual_ok]
    if len(accepted) < len(fits):
        logger.warning("Dropping %d rejected %s width fits", len(fits) - len(accepted), plane.label)
    if not accepted:
        raise InsufficientSamplesError(f"No accepted {plane.label} width fits in {store.run_dir}")
    sub_pixel = sum(fit.sub_pixel for fit in accepted)
    if sub_pixel:
        logger.warning("%d %s width fits are sub-pixel", sub_pixel, plane.label)
    return accepted


def load_ratio_summaries(store: RunStore, plane: Plane) -> Dict[str, RatioSummary]:
    rows = store.read_table(ANALYSIS_CSV_PATTERN.format(plane=plane.value))
    summaries = {}
    for pairing in ("twin", "decorrelated"):
        values = [float(row["shot_noise_ratio"]) for row in rows
                  if row["pairing"] == pairing and row["shot_noise_ratio"] not in ("", None)]
        if values:
            summaries[pairing] = summarize_ratios(values)
    return summaries


def cmd_epr(near_dir: str, far_dir: str, out_dir: Optional[str] = None, level: float = CONFIDENCE_LEVEL) -> int:
    """EprReport JSON and the products CSV, written to out_dir (default: the far-field run)."""
    near_store, near_manifest = _open_plane_run(near_dir, Plane.NEAR)
    far_store, far_manifest = _open_plane_run(far_dir, Plane.FAR)

    near_widths = load_widths(near_store, Plane.NEAR)
    far_widths = load_widths(far_store, Plane.FAR)
    near_variances = [plane_variance(fit, near_manifest.config.geometry) for fit in near_widths]
    far_variances = [plane_variance(fit, far_manifest.config.geometry) for fit in far_widths]
    products = epr_products(near_variances, far_variances)

    digests = {
        "near": near_manifest.stage_digests[analyze_digest_key(Plane.NEAR)],
        "far": far_manifest.stage_digests[analyze_digest_key(Plane.FAR)],
    }
    digest = digest_json({"stage": "epr", **digests, "level": level, "tool_version": TOOL_VERSION})
    report = EprReport(
        near_widths=near_widths,
        far_widths=far_widths,
        near_variances=near_variances,
        far_variances=far_variances,
        products=products,
        shot_noise={
            Plane.NEAR.value: load_ratio_summaries(near_store, Plane.NEAR),
            Plane.FAR.value: load_ratio_summaries(far_store, Plane.FAR),
        },
        stage_digests={**digests, "epr": digest},
        level=level,
    )

    out_store = RunStore(out_dir, create=True) if out_dir else far_store
    out_store.write_report(EPR_REPORT_FILE, report.to_dict())
    out_store.write_table(EPR_PRODUCTS_FILE, PRODUCTS_CSV_HEADER + ("stage_digest",),
                          (row + [digest] for row in products.rows()))
    if out_store.has_manifest():
        out_store.record_stage(out_store.read_manifest(), "epr", digest)

    for axis, interval in report.intervals().items():
        violated = int((products.values(axis) > 1.0).sum())
        print(f"EPR product {axis}: {level:.0%} interval {format_interval(interval)} "
              f"({violated}/{products.values(axis).size} combinations > 1)")
    for plane, summaries in report.shot_noise.items():
        twin = summaries.get("twin")
        if twin:
            print(f"{Plane(plane).label}: r min {twin.minimum:.3f}, mean {twin.mean:.3f}, "
                  f"r >= 1 in {twin.at_or_above_one}/{twin.count} frames")
    return EXIT_OK
