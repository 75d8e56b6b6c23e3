"""simulate: write seeded twin-image ensembles for the requested planes."""
import logging
from typing import Optional, Sequence

from config import Plane, SimConfig, load_config, reference_config, replace_config
from constants import EXIT_OK
from database.run_store import RunManifest, RunStore
from twin_sim import effective_efficiency, generate_ensemble, predicted_snr

logger = logging.getLogger(__name__)


def resolve_config(config_path: Optional[str], seed: Optional[int] = None,
                   frame_count: Optional[int] = None) -> SimConfig:
    """Config file (or the reference preset) with command-line overrides applied."""
    config = load_config(config_path) if config_path else reference_config()
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if frame_count is not None:
        overrides["frame_count"] = frame_count
    return replace_config(config, **overrides) if overrides else config


def simulate_digest_key(plane: Plane) -> str:
    return f"simulate:{Plane(plane).value}"


def cmd_simulate(config_path: Optional[str], out_dir: str, jobs: int = 1, seed: Optional[int] = None,
                 planes: Optional[Sequence[str]] = None, frame_count: Optional[int] = None) -> int:
    """Generate both ensembles (or the selected plane) and the run manifest. Idempotent per seed."""
    config = resolve_config(config_path, seed, frame_count)
    selected = [Plane(plane) for plane in planes] if planes else list(Plane)
    store = RunStore(out_dir, create=True)
    manifest = RunManifest(config=config, planes=selected)

    eta = effective_efficiency(config.efficiency)
    print(f"Run {store.name}: N={config.geometry.image_size}, K={config.frame_count}, "
          f"C={config.cell_count}, eta={eta:.3f}, seed={config.seed}")
    print(f"Predicted single-pair SNR: "
          f"{predicted_snr(config.cell_count, 1, eta, config.mean_photons_per_pixel, config.noise_per_pixel):.2f}")

    digests = {}
    for plane in selected:
        pairs = generate_ensemble(config, plane, jobs=jobs)
        digests[simulate_digest_key(plane)] = store.write_ensemble(config, plane, pairs)
        print(f"✅ {plane.label}: {2 * len(pairs)} frames written")

    store.write_manifest(manifest.model_copy(update={"stage_digests": digests}))
    logger.info("Manifest written to %s", store.run_dir)
    return EXIT_OK
