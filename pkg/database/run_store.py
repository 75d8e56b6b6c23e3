"""Run directory storage: PGM frames, ensemble sidecars, manifest, CSV tables and map grids"""
import logging
import os
import re
from datetime import datetime, timezone
from functools import lru_cache
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from config import Plane, SimConfig, config_digest
from constants import (
    ENSEMBLE_SIDECAR_PATTERN,
    FRAME_FILE_PATTERN,
    MANIFEST_FILE,
    MAPS_DIR,
    ROLE_IDLER,
    ROLE_SIGNAL,
    TOOL_VERSION,
)
from errors import CorruptFrameError, ManifestError, MissingFramesError, StorageError
from twin_sim import ImagePair
from utils import digest_bytes, read_csv, read_json, write_csv, write_json

logger = logging.getLogger(__name__)

_PGM_HEADER = re.compile(rb"\AP5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")


# ==================== PGM FRAMES ====================

def encode_pgm(frame: np.ndarray) -> bytes:
    """Binary frame as PGM P5 bytes with maxval 1."""
    frame = np.asarray(frame)
    rows, cols = frame.shape
    header = f"P5\n{cols} {rows}\n1\n".encode("ascii")
    return header + (frame != 0).astype(np.uint8).tobytes()


def decode_pgm(payload: bytes, source: str = "<pgm>") -> np.ndarray:
    """Parse PGM P5 bytes (8-bit samples) into a uint8 array of 0/1 values."""
    match = _PGM_HEADER.match(payload)
    if not match:
        raise CorruptFrameError(f"{source} is not a binary PGM (P5) file", {"path": source})
    cols, rows, maxval = (int(group) for group in match.groups())
    if not 0 < maxval < 256:
        raise CorruptFrameError(f"{source} has unsupported maxval {maxval}", {"path": source})
    body = payload[match.end():]
    if len(body) != rows * cols:
        raise CorruptFrameError(
            f"{source} holds {len(body)} samples, expected {rows * cols}",
            {"path": source, "expected": rows * cols, "found": len(body)},
        )
    frame = np.frombuffer(body, dtype=np.uint8).reshape(rows, cols)
    return (frame > 0).astype(np.uint8)


def write_pgm(path: str, frame: np.ndarray) -> str:
    """Write a frame and return the SHA-256 of the file bytes."""
    payload = encode_pgm(frame)
    try:
        with open(path, "wb") as f:
            f.write(payload)
    except OSError as exc:
        raise StorageError(f"Cannot write {path}: {exc}", {"path": path}) from exc
    return digest_bytes(payload)


def read_pgm(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as exc:
        raise CorruptFrameError(f"Cannot read {path}: {exc}", {"path": path}) from exc
    return decode_pgm(payload, source=path)


# ==================== MANIFEST ====================

class RunManifest(BaseModel):
    """Reproducibility record of a run directory."""
    model_config = ConfigDict(extra="forbid")

    config: SimConfig
    created_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    tool_version: str = TOOL_VERSION
    stage_digests: Dict[str, str] = Field(default_factory=dict)
    planes: List[Plane] = Field(default_factory=list)

    @property
    def config_digest(self) -> str:
        return config_digest(self.config)


class RunStore:
    """Reads and writes every artifact of one run directory."""

    def __init__(self, run_dir: str, create: bool = False):
        self.run_dir = run_dir
        if create:
            try:
                os.makedirs(run_dir, exist_ok=True)
            except OSError as exc:
                raise StorageError(f"Cannot create run directory {run_dir}: {exc}", {"path": run_dir}) from exc
        elif not os.path.isdir(run_dir):
            raise StorageError(f"Run directory not found: {run_dir}", {"path": run_dir})

    def path(self, *parts: str) -> str:
        return os.path.join(self.run_dir, *parts)

    @property
    def name(self) -> str:
        return os.path.basename(os.path.normpath(self.run_dir))

    # ==================== MANIFEST ====================

    def has_manifest(self) -> bool:
        return os.path.exists(self.path(MANIFEST_FILE))

    def read_manifest(self) -> RunManifest:
        """Load and validate the manifest; every stage calls this before reading prior outputs."""
        data = read_json(self.path(MANIFEST_FILE))
        if data is None:
            raise ManifestError(f"No manifest in {self.run_dir}", {"path": self.path(MANIFEST_FILE)})
        try:
            return RunManifest.model_validate(data)
        except ValidationError as exc:
            raise ManifestError(
                f"Invalid manifest in {self.run_dir}",
                {"path": self.path(MANIFEST_FILE), "errors": [err["msg"] for err in exc.errors()]},
            ) from exc

    def write_manifest(self, manifest: RunManifest) -> str:
        return write_json(self.path(MANIFEST_FILE), manifest.model_dump(mode="json"))

    def record_stage(self, manifest: RunManifest, stage: str, digest: str) -> RunManifest:
        """Store a stage digest and persist the manifest."""
        updated = manifest.model_copy(update={"stage_digests": {**manifest.stage_digests, stage: digest}})
        self.write_manifest(updated)
        return updated

    # ==================== FRAMES ====================

    def frame_path(self, plane: Plane, role: str, index: int) -> str:
        return self.path(FRAME_FILE_PATTERN.format(plane=Plane(plane).value, role=role, index=index))

    def sidecar_path(self, plane: Plane) -> str:
        return self.path(ENSEMBLE_SIDECAR_PATTERN.format(plane=Plane(plane).value))

    def write_ensemble(self, config: SimConfig, plane: Plane, pairs: Sequence[ImagePair]) -> str:
        """Write every pair as two PGM files plus the sidecar; returns the sidecar digest."""
        plane = Plane(plane)
        files = {}
        for pair in pairs:
            for role, frame in ((ROLE_SIGNAL, pair.signal), (ROLE_IDLER, pair.idler)):
                path = self.frame_path(plane, role, pair.frame_index)
                files[os.path.basename(path)] = write_pgm(path, frame)
        sidecar = {
            "plane": plane.value,
            "config": config.model_dump(mode="json"),
            "config_digest": config_digest(config),
            "seed": config.seed,
            "frame_count": len(pairs),
            "image_size": config.geometry.image_size,
            "files": files,
        }
        logger.info("Wrote %d %s frames to %s", 2 * len(pairs), plane.label, self.run_dir)
        return write_json(self.sidecar_path(plane), sidecar)

    def read_sidecar(self, plane: Plane) -> Dict[str, Any]:
        data = read_json(self.sidecar_path(plane))
        if data is None:
            raise MissingFramesError(
                f"No {Plane(plane).label} ensemble in {self.run_dir}",
                {"path": self.sidecar_path(plane), "plane": Plane(plane).value},
            )
        return data

    def load_ensemble(self, plane: Plane, config: SimConfig) -> List[ImagePair]:
        """Read frames back in index order, checking presence, shape and digests."""
        plane = Plane(plane)
        sidecar = self.read_sidecar(plane)
        digest = config_digest(config)
        if sidecar.get("config_digest") != digest:
            raise ManifestError(
                f"{plane.label} ensemble was generated from a different config",
                {"expected": digest, "found": sidecar.get("config_digest")},
            )
        count = int(sidecar["frame_count"])
        missing = sorted({
            index for index in range(count) for role in (ROLE_SIGNAL, ROLE_IDLER)
            if not os.path.exists(self.frame_path(plane, role, index))
        })
        if missing:
            raise MissingFramesError(
                f"{len(missing)} {plane.label} frame(s) missing: {missing}",
                {"plane": plane.value, "missing": missing},
            )

        size = config.geometry.image_size
        expected = sidecar.get("files", {})
        pairs = []
        for index in range(count):
            frames = {}
            for role in (ROLE_SIGNAL, ROLE_IDLER):
                path = self.frame_path(plane, role, index)
                frame = read_pgm(path)
                name = os.path.basename(path)
                if frame.shape != (size, size):
                    raise CorruptFrameError(f"{path} is {frame.shape}, expected {(size, size)}", {"path": path})
                if name in expected and digest_bytes(encode_pgm(frame)) != expected[name]:
                    raise CorruptFrameError(f"{path} does not match its recorded digest", {"path": path})
                frames[role] = frame
            pairs.append(ImagePair(
                signal=frames[ROLE_SIGNAL], idler=frames[ROLE_IDLER],
                plane=plane, frame_index=index, config_digest=digest,
            ))
        return pairs

    # ==================== TABLES AND REPORTS ====================

    def write_table(self, name: str, header: Sequence[str], rows) -> str:
        return write_csv(self.path(name), header, rows)

    def read_table(self, name: str) -> List[Dict[str, str]]:
        return read_csv(self.path(name))

    def has_file(self, name: str) -> bool:
        return os.path.exists(self.path(name))

    def write_report(self, name: str, data: Any) -> str:
        return write_json(self.path(name), data)

    def read_report(self, name: str) -> Any:
        data = read_json(self.path(name))
        if data is None:
            raise StorageError(f"Missing {name} in {self.run_dir}", {"path": self.path(name)})
        return data

    # ==================== MAP GRIDS ====================

    def write_grid(self, name: str, values: np.ndarray, header: Dict[str, Any]) -> str:
        """Raw float64 little-endian grid plus a JSON header next to it."""
        directory = self.path(MAPS_DIR)
        os.makedirs(directory, exist_ok=True)
        payload = np.ascontiguousarray(values, dtype="<f8").tobytes()
        try:
            with open(os.path.join(directory, f"{name}.f64"), "wb") as f:
                f.write(payload)
        except OSError as exc:
            raise StorageError(f"Cannot write grid {name}: {exc}", {"path": directory}) from exc
        write_json(os.path.join(directory, f"{name}.json"), {**header, "sha256": digest_bytes(payload)})
        return digest_bytes(payload)

    def read_grid(self, name: str) -> np.ndarray:
        directory = self.path(MAPS_DIR)
        header = read_json(os.path.join(directory, f"{name}.json"))
        if header is None:
            raise StorageError(f"Missing grid header {name}", {"path": directory})
        path = os.path.join(directory, f"{name}.f64")
        try:
            with open(path, "rb") as f:
                payload = f.read()
        except OSError as exc:
            raise StorageError(f"Cannot read grid {name}: {exc}", {"path": path}) from exc
        if header.get("sha256") and digest_bytes(payload) != header["sha256"]:
            raise StorageError(f"Grid {name} does not match its header digest", {"path": path})
        return np.frombuffer(payload, dtype="<f8").reshape(header["rows"], header["cols"])


@lru_cache(maxsize=64)
def get_store(run_dir: str) -> RunStore:
    """Get or create the cached store for an existing run directory"""
    return RunStore(run_dir)
