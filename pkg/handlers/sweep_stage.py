"""sweep: single-pair success rate against the coherence-cell count."""
import logging
from typing import Optional, Sequence

from config import Plane
from constants import EXIT_OK, SWEEP_FILE
from database.run_store import RunStore
from handlers.simulate_stage import resolve_config
from twin_sim import effective_efficiency
from xcorr import SWEEP_CSV_HEADER, unambiguity_sweep

logger = logging.getLogger(__name__)

DEFAULT_SWEEP_SIZES = (66, 99, 143, 198, 275, 385)


def cmd_sweep(config_path: Optional[str], out_dir: str, image_sizes: Sequence[int] = DEFAULT_SWEEP_SIZES,
              plane: str = Plane.FAR.value, jobs: int = 1, seed: Optional[int] = None,
              frame_count: Optional[int] = None) -> int:
    """Vary the frame size (thus C) at fixed efficiency and write sweep.csv."""
    config = resolve_config(config_path, seed, frame_count)
    plane = Plane(plane)
    store = RunStore(out_dir, create=True)
    points = unambiguity_sweep(config, image_sizes, plane, jobs=jobs)
    store.write_table(SWEEP_FILE, SWEEP_CSV_HEADER, [point.as_row() for point in points])

    eta = effective_efficiency(config.efficiency)
    print(f"{plane.label} sweep at eta={eta:.3f}, {config.frame_count} pairs per size "
          f"(bound C > {points[0].min_cells - 1 if points else 'n/a'})")
    for point in points:
        marker = "✅" if point.success_rate >= 0.99 else "  "
        print(f"{marker} N={point.image_size:4d} C={point.cell_count:5d} success {point.success_rate:.3f} "
              f"SNR {point.mean_snr:.2f} (predicted {point.predicted_snr:.2f})")
    return EXIT_OK
