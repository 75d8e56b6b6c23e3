import glob
import json
import os
import re

import pytest

from cli import main
from config import config_to_cfg_text, replace_config
from constants import EXIT_CONFIG, EXIT_OK, EXIT_PLANE_MISMATCH, EXIT_STORAGE
from handlers.report_stage import efficiency_check
from utils import read_csv, read_json


def _error(capsys):
    lines = [line for line in capsys.readouterr().err.splitlines() if line.startswith("{")]
    return json.loads(lines[-1])


def _run(config_file, out_dir, *extra):
    assert main(["simulate", "--config", config_file, "--out", out_dir, *extra]) == EXIT_OK
    assert main(["analyze", out_dir]) == EXIT_OK
    return out_dir


# ==================== SIMULATE ====================

def test_simulate_writes_frames_and_manifest(config_file, tmp_path):
    out = str(tmp_path / "run")
    assert main(["simulate", "--config", config_file, "--out", out]) == EXIT_OK
    assert len(glob.glob(os.path.join(out, "*.pgm"))) == 8
    manifest = read_json(os.path.join(out, "manifest.json"))
    assert set(manifest["stage_digests"]) == {"simulate:near", "simulate:far"}
    assert manifest["planes"] == ["near", "far"]


def test_single_frame_run(config_file, tmp_path):
    out = str(tmp_path / "run")
    assert main(["simulate", "--config", config_file, "--out", out, "--frames", "1"]) == EXIT_OK
    assert len(glob.glob(os.path.join(out, "*.pgm"))) == 4


def test_efficiency_above_one_exits_with_config_error(config_file, tmp_path, capsys):
    with open(config_file, encoding="utf-8") as f:
        text = re.sub(r"eta_filter = .*", "eta_filter = 1.2", f.read())
    bad = tmp_path / "bad.cfg"
    bad.write_text(text, encoding="utf-8")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "run")]) == EXIT_CONFIG
    error = _error(capsys)
    assert error["error"] == "ConfigError"
    assert "efficiency.eta_filter" in error["details"]["fields"]
    assert not glob.glob(str(tmp_path / "run" / "*.pgm"))


# ==================== ANALYZE ====================

def test_analyze_writes_tables_with_stage_digest(config_file, tmp_path):
    out = _run(config_file, str(tmp_path / "run"))
    manifest = read_json(os.path.join(out, "manifest.json"))
    for plane in ("near", "far"):
        rows = read_csv(os.path.join(out, f"{plane}_analysis.csv"))
        assert [row["pairing"] for row in rows] == ["twin", "twin", "decorrelated", "decorrelated"]
        assert {row["stage_digest"] for row in rows} == {manifest["stage_digests"][f"analyze:{plane}"]}
        assert len(read_csv(os.path.join(out, f"{plane}_widths.csv"))) == 2
        assert len(read_csv(os.path.join(out, f"{plane}_profiles.csv"))) == 4


def test_single_frame_has_no_control_rows(config_file, tmp_path):
    out = _run(config_file, str(tmp_path / "run"), "--frames", "1", "--plane", "far")
    rows = read_csv(os.path.join(out, "far_analysis.csv"))
    assert [row["pairing"] for row in rows] == ["twin"]
    assert not os.path.exists(os.path.join(out, "near_analysis.csv"))


def test_export_maps(config_file, tmp_path):
    out = str(tmp_path / "run")
    main(["simulate", "--config", config_file, "--out", out, "--plane", "near"])
    assert main(["analyze", out, "--export-maps"]) == EXIT_OK
    maps = os.path.join(out, "maps")
    assert os.path.exists(os.path.join(maps, "near_map_0001.f64"))
    header = read_json(os.path.join(maps, "near_map_0000.json"))
    assert header["normalization"] == "PearsonPerShift"
    assert header["rows"] == 63
    assert len(read_csv(os.path.join(maps, "near_map_0000.csv"))) == 63 * 63


def test_linear_overlap_option(config_file, tmp_path):
    cyclic = _run(config_file, str(tmp_path / "cyclic"), "--plane", "far")
    linear = str(tmp_path / "linear")
    assert main(["simulate", "--config", config_file, "--out", linear, "--plane", "far"]) == EXIT_OK
    assert main(["analyze", linear, "--overlap", "linear", "--export-maps"]) == EXIT_OK
    assert read_json(os.path.join(linear, "maps", "far_map_0000.json"))["wrap"] is False
    digests = [read_json(os.path.join(out, "manifest.json"))["stage_digests"]["analyze:far"]
               for out in (cyclic, linear)]
    assert digests[0] != digests[1]


def test_unknown_overlap_rejected(config_file, tmp_path):
    with pytest.raises(SystemExit):
        main(["analyze", str(tmp_path / "run"), "--overlap", "spherical"])


def test_sparse_frames_do_not_abort_analyze(tiny_config, tmp_path, capsys):
    sparse = replace_config(tiny_config, mean_photons_per_pixel=0.002, noise_per_pixel=0.0)
    path = tmp_path / "sparse.cfg"
    path.write_text(config_to_cfg_text(sparse), encoding="utf-8")
    out = _run(str(path), str(tmp_path / "run"), "--plane", "near")
    rows = read_csv(os.path.join(out, "near_analysis.csv"))
    assert {row["status"] for row in rows} == {"degenerate"}
    assert {row["success"] for row in rows} == {"false"}
    assert read_csv(os.path.join(out, "near_widths.csv")) == []
    assert "too sparse" in capsys.readouterr().out

    assert main(["report", out]) == EXIT_OK
    twin = read_json(os.path.join(out, "report.json"))["planes"]["near"]["twin"]
    assert twin["failed"] == twin["count"] == 2
    assert twin["success_rate"] == 0.0


def test_accumulated_peak_reported(config_file, tmp_path):
    out = _run(config_file, str(tmp_path / "run"), "--plane", "far")
    accumulated = read_json(os.path.join(out, "far_accumulated.json"))
    assert accumulated["pair_count"] == 2
    assert accumulated["predicted_snr"] > 0
    assert main(["report", out]) == EXIT_OK
    assert read_json(os.path.join(out, "report.json"))["planes"]["far"]["accumulated"] == accumulated


def test_no_accumulated_peak_for_single_pair(config_file, tmp_path):
    out = _run(config_file, str(tmp_path / "run"), "--frames", "1", "--plane", "far")
    assert not os.path.exists(os.path.join(out, "far_accumulated.json"))


def test_corrupt_frame_exits_with_storage_error(config_file, tmp_path, capsys):
    out = str(tmp_path / "run")
    main(["simulate", "--config", config_file, "--out", out])
    with open(os.path.join(out, "far_signal_0001.pgm"), "wb") as f:
        f.write(b"P5\n64 64\n1\n\x00\x01")
    assert main(["analyze", out]) == EXIT_STORAGE
    error = _error(capsys)
    assert error["error"] == "CorruptFrameError"
    assert error["details"]["path"].endswith("far_signal_0001.pgm")


def test_missing_frame_exits_with_storage_error(config_file, tmp_path, capsys):
    out = str(tmp_path / "run")
    main(["simulate", "--config", config_file, "--out", out])
    os.remove(os.path.join(out, "near_idler_0000.pgm"))
    assert main(["analyze", out, "--plane", "near"]) == EXIT_STORAGE
    assert _error(capsys)["details"]["missing"] == [0]


def test_analyze_without_run(tmp_path):
    assert main(["analyze", str(tmp_path / "nothing")]) == EXIT_STORAGE


def test_reruns_are_byte_identical(config_file, tmp_path):
    outputs = []
    for parent in ("a", "b"):
        out = _run(config_file, str(tmp_path / parent / "run"))
        assert main(["report", out]) == EXIT_OK
        outputs.append(out)
    for name in ("near_analysis.csv", "far_widths.csv", "report.json", "near_signal_0001.pgm"):
        with open(os.path.join(outputs[0], name), "rb") as first, open(os.path.join(outputs[1], name), "rb") as second:
            assert first.read() == second.read(), name


# ==================== REPORT ====================

def test_report_compares_against_prediction(config_file, tmp_path, capsys):
    out = _run(config_file, str(tmp_path / "run"))
    assert main(["report", out]) == EXIT_OK
    report = read_json(os.path.join(out, "report.json"))
    near = report["planes"]["near"]
    assert near["cell_count"] == 25
    assert near["predicted_snr"] > 0
    assert near["twin"]["count"] == 2
    assert near["decorrelated"]["count"] == 2
    assert near["stage_digest"] == read_json(os.path.join(out, "manifest.json"))["stage_digests"]["analyze:near"]
    assert "report" in read_json(os.path.join(out, "manifest.json"))["stage_digests"]
    assert "predicted" in capsys.readouterr().out


def test_report_before_analyze(config_file, tmp_path):
    out = str(tmp_path / "run")
    main(["simulate", "--config", config_file, "--out", out])
    assert main(["report", out]) == EXIT_STORAGE


def test_efficiency_band_accounts_for_accidentals():
    eta = 0.56 * 0.64 * 0.74
    diluted = efficiency_check(0.200, eta, 0.15, 0.021)
    assert diluted["diluted_eta"] == pytest.approx(eta * 0.15 / 0.171)
    assert diluted["within_band"]
    assert not efficiency_check(0.18, eta, 0.15, 0.021)["within_band"]
    assert not efficiency_check(0.27, eta, 0.15, 0.021)["within_band"]
    assert not efficiency_check(0.200, eta, 0.15, 0.0)["within_band"]
    assert efficiency_check(0.22, eta, 0.15, 0.0)["ratio"] == pytest.approx(0.22 / eta)


# ==================== EPR ====================

@pytest.fixture
def plane_runs(config_file, tmp_path):
    near = _run(config_file, str(tmp_path / "near"), "--plane", "near", "--frames", "1")
    far = _run(config_file, str(tmp_path / "far"), "--plane", "far", "--frames", "1")
    return near, far


def test_epr_single_pair_runs(plane_runs, tmp_path):
    near, far = plane_runs
    out = str(tmp_path / "epr")
    assert main(["epr", near, far, "--out", out]) == EXIT_OK
    rows = read_csv(os.path.join(out, "epr_products.csv"))
    assert [row["axis"] for row in rows] == ["x", "y"]
    report = read_json(os.path.join(out, "epr_report.json"))
    for axis in ("x", "y"):
        product = report["products"][axis]
        assert product["method"] == "range"
        assert product["interval"][0] == product["interval"][1]
    assert report["stage_digests"]["epr"] == rows[0]["stage_digest"]


def test_epr_defaults_to_far_run(plane_runs):
    near, far = plane_runs
    assert main(["epr", near, far]) == EXIT_OK
    assert os.path.exists(os.path.join(far, "epr_report.json"))
    assert "epr" in read_json(os.path.join(far, "manifest.json"))["stage_digests"]


def test_epr_with_two_near_runs(plane_runs, capsys):
    near, _ = plane_runs
    assert main(["epr", near, near]) == EXIT_PLANE_MISMATCH
    assert _error(capsys)["error"] == "PlaneMismatchError"


# ==================== SWEEP ====================

def test_sweep_writes_one_row_per_size(config_file, tmp_path):
    out = str(tmp_path / "sweep")
    assert main(["sweep", "--config", config_file, "--out", out, "--sizes", "44,66",
                 "--plane", "near", "--frames", "2"]) == EXIT_OK
    rows = read_csv(os.path.join(out, "sweep.csv"))
    assert [int(row["cell_count"]) for row in rows] == [16, 36]
    assert all(row["min_cells"] == "26" for row in rows)
