"""
FastAPI results API for twin-image EPR runs (read-only)
"""
import io
import os
import sys
from datetime import datetime
from typing import Any, Dict, List

from dotenv import load_dotenv
from fastapi import Depends, FastAPI, HTTPException
from fastapi.responses import StreamingResponse
from pydantic import BaseModel

# Add parent directory to path for imports
current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
sys.path.insert(0, parent_dir)

from config import Plane
from constants import ANALYSIS_CSV_PATTERN, EPR_REPORT_FILE, MANIFEST_FILE, REPORT_FILE, TOOL_VERSION
from database.run_store import RunStore, get_store
from errors import StorageError
from utils import csv_text

load_dotenv()

app = FastAPI(
    title="Twin-image EPR results",
    description="Read-only access to simulated and analyzed runs",
    version=TOOL_VERSION,
)


def get_runs_dir() -> str:
    return os.getenv("TWIN_EPR_RUNS_DIR", "runs")


class RunSummary(BaseModel):
    name: str
    planes: List[str]
    stages: List[str]
    created_at: str
    tool_version: str


# ==================== HELPERS ====================

def _open_run(run: str, runs_dir: str) -> RunStore:
    """Resolve a run name inside the runs directory (no path traversal)."""
    if not run or run != os.path.basename(run) or run.startswith("."):
        raise HTTPException(status_code=404, detail=f"Run {run} not found")
    path = os.path.join(runs_dir, run)
    if not os.path.exists(os.path.join(path, MANIFEST_FILE)):
        raise HTTPException(status_code=404, detail=f"Run {run} not found")
    return get_store(path)


def _plane(plane: str) -> Plane:
    try:
        return Plane(plane)
    except ValueError:
        raise HTTPException(status_code=404, detail=f"Unknown plane {plane}")


def _read(store: RunStore, name: str) -> Any:
    if not store.has_file(name):
        raise HTTPException(status_code=404, detail=f"{name} not available for run {store.name}")
    try:
        return store.read_report(name)
    except StorageError as e:
        raise HTTPException(status_code=500, detail=str(e))


def _analysis_rows(store: RunStore, plane: Plane) -> List[Dict[str, str]]:
    name = ANALYSIS_CSV_PATTERN.format(plane=plane.value)
    if not store.has_file(name):
        raise HTTPException(status_code=404, detail=f"{plane.label} of run {store.name} has not been analyzed")
    return store.read_table(name)


# ==================== RUNS ====================

@app.get("/api/runs", response_model=List[RunSummary])
async def list_runs(runs_dir: str = Depends(get_runs_dir)):
    """List every run directory that holds a manifest"""
    if not os.path.isdir(runs_dir):
        return []
    runs = []
    for name in sorted(os.listdir(runs_dir)):
        if not os.path.exists(os.path.join(runs_dir, name, MANIFEST_FILE)):
            continue
        try:
            manifest = get_store(os.path.join(runs_dir, name)).read_manifest()
        except StorageError:
            continue
        runs.append(RunSummary(
            name=name,
            planes=[plane.value for plane in manifest.planes],
            stages=sorted(manifest.stage_digests),
            created_at=manifest.created_at,
            tool_version=manifest.tool_version,
        ))
    return runs


@app.get("/api/runs/{run}/manifest")
async def get_manifest(run: str, runs_dir: str = Depends(get_runs_dir)):
    store = _open_run(run, runs_dir)
    try:
        return store.read_manifest().model_dump(mode="json")
    except StorageError as e:
        raise HTTPException(status_code=500, detail=str(e))


@app.get("/api/runs/{run}/summary")
async def get_summary(run: str, runs_dir: str = Depends(get_runs_dir)):
    """Report produced by the report stage"""
    return _read(_open_run(run, runs_dir), REPORT_FILE)


@app.get("/api/runs/{run}/epr")
async def get_epr_report(run: str, runs_dir: str = Depends(get_runs_dir)):
    return _read(_open_run(run, runs_dir), EPR_REPORT_FILE)


# ==================== ANALYSIS ====================

@app.get("/api/runs/{run}/analysis/{plane}")
async def get_analysis(run: str, plane: str, pairing: str = "all", runs_dir: str = Depends(get_runs_dir)):
    """Per-frame analysis rows, optionally filtered to twin or decorrelated pairs"""
    rows = _analysis_rows(_open_run(run, runs_dir), _plane(plane))
    if pairing != "all":
        rows = [row for row in rows if row["pairing"] == pairing]
    return {"success": True, "data": rows, "count": len(rows)}


@app.get("/api/runs/{run}/analysis/{plane}/export")
async def export_analysis(run: str, plane: str, runs_dir: str = Depends(get_runs_dir)):
    """Download the analysis table as CSV"""
    plane_enum = _plane(plane)
    rows = _analysis_rows(_open_run(run, runs_dir), plane_enum)
    header = list(rows[0].keys()) if rows else []
    buffer = io.StringIO(csv_text(header, ([row[key] for key in header] for row in rows)))
    filename = f"{run}_{ANALYSIS_CSV_PATTERN.format(plane=plane_enum.value)}"
    return StreamingResponse(buffer, media_type="text/csv", headers={
        "Content-Disposition": f"attachment; filename={filename}"
    })


# ==================== HEALTH CHECK ====================

@app.get("/health")
async def health_check():
    """Health check endpoint"""
    return {"status": "healthy", "timestamp": datetime.now().isoformat()}


# ==================== RUN SERVER ====================

if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
