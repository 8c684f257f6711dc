import json
import os

import numpy as np
import pytest

from pcmd.arrayio import read_array
from pcmd.cli import main
from pcmd.config import PipelineConfig
from pcmd.errors import ConfigError


def tiny_config(out_dir, noise=True, air=5.0e4):
    """Miniature but complete pipeline configuration (seconds, not minutes)."""
    return {
        "output_dir": str(out_dir),
        "seed": 101,
        "noise": noise,
        "materials": ["polyethylene", "pvc"],
        "geometry": {"mode": "parallel", "n_views": 45, "n_channels": 48, "spacing_cm": 0.4},
        "grid": {"n_x": 48, "n_y": 48, "pixel_cm": 0.4},
        "spectrum": {"kvp": 120.0, "e_min": 40.0, "n_bins": 8},
        "dose": {"air_counts_total": air},
        "phantom": {"disks": [
            {"center": [0.0, 0.0], "radius": 7.0, "water_density": 1.0},
            {"center": [3.0, 0.0], "radius": 1.6, "water_density_excess": 0.05},
        ]},
        "calibration": {"order": 4, "points_per_axis": [9, 9],
                        "domain": [[0.0, 40.0], [0.0, 5.0]],
                        "repeats": 20, "air_counts_total": 1.0e6, "noise": False},
        "mle": {"grid_points": [21, 21], "n_iter": 25, "sigma": 1000.0},
        "mace": {"rho": 0.8, "n_iter": 8, "sigma": 0.1, "mle_init_iters": 8},
        "prior": {"kind": "gaussian", "std": [2.0, 2.0]},
        "recon": {"mono_kev": 70.0, "window_center": 1000.0, "window_width": 200.0},
        "rois": [
            {"label": "background", "center": [-2.5, -2.5], "radius": 1.2},
            {"label": "insert", "center": [3.0, 0.0], "radius": 1.0},
        ],
        "cnr": {"target": "insert", "background": "background"},
    }


def write_config(tmp_path, cfg):
    path = tmp_path / "pipeline.json"
    path.write_text(json.dumps(cfg))
    return str(path)


# --- validation ---

def test_missing_required_key_is_path_qualified(tmp_path):
    cfg = tiny_config(tmp_path / "out")
    del cfg["phantom"]["disks"][0]["radius"]
    with pytest.raises(ConfigError, match=r"phantom\.disks\[0\]\.radius"):
        PipelineConfig(cfg)


def test_unknown_material_is_reported(tmp_path):
    cfg = tiny_config(tmp_path / "out")
    cfg["materials"] = ["polyethylene", "kryptonite"]
    with pytest.raises(ConfigError, match=r"materials\[1\]"):
        PipelineConfig(cfg)


def test_disk_requires_exactly_one_composition(tmp_path):
    cfg = tiny_config(tmp_path / "out")
    cfg["phantom"]["disks"][0]["fractions"] = [1.0, 0.0]
    with pytest.raises(ConfigError, match="exactly one of"):
        PipelineConfig(cfg)


def test_cnr_labels_must_resolve(tmp_path):
    cfg = tiny_config(tmp_path / "out")
    cfg["cnr"]["target"] = "nonexistent"
    with pytest.raises(ConfigError, match=r"cnr\.target"):
        PipelineConfig(cfg)


def test_mace_rho_bounds(tmp_path):
    cfg = tiny_config(tmp_path / "out")
    cfg["mace"]["rho"] = 1.5
    with pytest.raises(ConfigError, match=r"mace\.rho"):
        PipelineConfig(cfg)


def test_prior_validation_is_recursive(tmp_path):
    cfg = tiny_config(tmp_path / "out")
    cfg["prior"] = {"kind": "compose", "parts": [{"kind": "gaussian", "std": [1.0]}]}
    with pytest.raises(ConfigError, match=r"prior\.parts\[0\]\.std"):
        PipelineConfig(cfg)


def test_bad_json_reports_file(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        PipelineConfig.from_file(str(path))


# --- CLI end to end ---

def test_cli_exit_codes(tmp_path):
    cfg = tiny_config(tmp_path / "out")
    cfg["mace"]["rho"] = 2.0
    bad = write_config(tmp_path, cfg)
    assert main(["simulate", "--config", bad]) == 2
    assert not (tmp_path / "out").exists()  # validation precedes any output
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == 2
    # numeric failure: order-4 fit with too few calibration points
    cfg = tiny_config(tmp_path / "out2")
    cfg["calibration"]["points_per_axis"] = [3, 3]
    few = write_config(tmp_path, cfg)
    assert main(["calibrate", "--config", few]) == 3


def test_full_pipeline_is_deterministic_given_seeds(tmp_path):
    stats = []
    for run in ("a", "b"):
        cfg = tiny_config(tmp_path / run)
        cfg["mle"]["n_iter"] = 10  # keep the double run quick
        cfg["mace"]["n_iter"] = 4
        cfg["mace"]["mle_init_iters"] = 4
        path = tmp_path / f"p_{run}.json"
        path.write_text(json.dumps(cfg))
        assert main(["pipeline", "--config", str(path)]) == 0
        stats.append((tmp_path / run / "stats.csv").read_bytes())
    assert stats[0] == stats[1]


def test_threads_flag_is_accepted(tmp_path):
    cfg = tiny_config(tmp_path / "out")
    path = write_config(tmp_path, cfg)
    assert main(["simulate", "--config", path, "--threads", "1"]) == 0


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    out = tmp / "out"
    path = tmp / "pipeline.json"
    path.write_text(json.dumps(tiny_config(out)))
    assert main(["pipeline", "--config", str(path)]) == 0
    return out, str(path)


def test_pipeline_outputs_exist_with_expected_shapes(pipeline_dir):
    out, _ = pipeline_dir
    t, labels = read_array(out / "transmission.pcmd")
    assert t.shape == (45, 48, 8) and labels == ["view", "channel", "bin"]
    p, _ = read_array(out / "pathlengths_true.pcmd")
    assert p.shape == (45, 48, 2)
    for method in ("mle", "mace"):
        d, _ = read_array(out / f"pathlengths_{method}.pcmd")
        assert d.shape == (45, 48, 2)
        assert (out / f"decompose_{method}.log.jsonl").exists()
    for name in ("image_mle_polyethylene.pcmd", "image_mace_pvc.pcmd",
                 "mono70_mle.pcmd", "mono70_mace.pcmd", "mono70_mace.png"):
        assert (out / name).exists()
    assert (out / "stats.csv").exists()


def test_stats_csv_has_cnr_rows_for_both_methods(pipeline_dir):
    out, _ = pipeline_dir
    lines = (out / "stats.csv").read_text().strip().splitlines()
    assert lines[0] == "image,label,mean,std"
    cnr_lines = [l for l in lines if l.split(",")[1].startswith("cnr:")]
    assert {l.split(",")[0] for l in cnr_lines} == {"mono70_mle", "mono70_mace"}


def test_decompose_log_reports_iterations_and_rate(pipeline_dir):
    out, _ = pipeline_dir
    records = [json.loads(l) for l in
               (out / "decompose_mle.log.jsonl").read_text().splitlines()]
    summary = records[-1]
    assert summary["iterations"] == 25
    assert summary["rows"] == 45 * 48
    assert summary["seconds_per_row"] > 0


def test_mace_log_has_equilibrium_residuals(pipeline_dir):
    out, _ = pipeline_dir
    records = [json.loads(l) for l in
               (out / "decompose_mace.log.jsonl").read_text().splitlines()]
    residuals = [r["equilibrium_residual"] for r in records if "equilibrium_residual" in r]
    assert len(residuals) == 8
    assert all(np.isfinite(residuals))


def test_pipeline_resumes_from_manifests(pipeline_dir, capsys):
    out, config_path = pipeline_dir
    before = (out / "stats.csv").read_bytes()
    assert main(["pipeline", "--config", config_path]) == 0
    printed = capsys.readouterr().out
    assert printed.count("up to date, skipping") == 6
    assert (out / "stats.csv").read_bytes() == before


def test_same_seed_reproduces_noisy_outputs(tmp_path):
    for run in ("a", "b"):
        cfg = tiny_config(tmp_path / run)
        path = tmp_path / f"cfg_{run}.json"
        path.write_text(json.dumps(cfg))
        assert main(["simulate", "--config", str(path)]) == 0
    ta, _ = read_array(tmp_path / "a" / "transmission.pcmd")
    tb, _ = read_array(tmp_path / "b" / "transmission.pcmd")
    assert ta.tobytes() == tb.tobytes()


def test_seed_override_changes_noisy_outputs(tmp_path):
    cfg = tiny_config(tmp_path / "out")
    path = write_config(tmp_path, cfg)
    assert main(["simulate", "--config", path]) == 0
    ta, _ = read_array(tmp_path / "out" / "transmission.pcmd")
    assert main(["simulate", "--config", path, "--seed", "777"]) == 0
    tb, _ = read_array(tmp_path / "out" / "transmission.pcmd")
    assert not np.array_equal(ta, tb)


def test_noise_off_runs_are_bitwise_identical(tmp_path):
    cfg = tiny_config(tmp_path / "out", noise=False)
    path = write_config(tmp_path, cfg)
    assert main(["simulate", "--config", path]) == 0
    ta = (tmp_path / "out" / "transmission.pcmd").read_bytes()
    assert main(["simulate", "--config", path, "--seed", "9"]) == 0
    tb = (tmp_path / "out" / "transmission.pcmd").read_bytes()
    assert ta == tb


def test_decompose_rejects_mismatched_calibration(tmp_path):
    cfg = tiny_config(tmp_path / "out")
    path = write_config(tmp_path, cfg)
    assert main(["simulate", "--config", path]) == 0
    cfg6 = tiny_config(tmp_path / "out")
    cfg6["spectrum"]["n_bins"] = 6
    path6 = tmp_path / "six.json"
    path6.write_text(json.dumps(cfg6))
    assert main(["calibrate", "--config", str(path6)]) == 0
    assert main(["decompose", "--config", path, "--method", "mle"]) == 2


def test_reconstruct_without_decompose_fails_cleanly(tmp_path):
    cfg = tiny_config(tmp_path / "empty")
    path = write_config(tmp_path, cfg)
    assert main(["reconstruct", "--config", path]) == 2


def test_shipped_low_contrast_config_is_valid():
    root = os.path.join(os.path.dirname(__file__), "..", "configs", "low_contrast.json")
    cfg = PipelineConfig.from_file(root)
    assert cfg.geometry().n_rays == 360 * 256
    assert cfg.spectrum().n_bins == 8
    assert len(cfg.phantom().disks) == 4
    assert cfg.cnr_pair == ("insert_1p010", "background")
    assert cfg.mace_config().sigma == 0.08
