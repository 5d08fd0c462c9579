import json

import pytest

from molmap import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from services.storage import load_map, load_rois, load_table


@pytest.fixture
def small_config(tmp_path):
    config = {
        "n": 16,
        "psf": {"confocal_fwhm": 2.0, "sted_fwhm": 0.8},
        "t_confocal": 2000,
        "t_sted": 200,
        "md": 4,
        "alpha": 0.2,
        "scan": {"n_sim": 40},
        "experiment": {"replicates": 2},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path


def test_simulate_is_deterministic(tmp_path, small_config, capsys):
    assert main(["simulate", "--config", str(small_config), "--seed", "3", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["simulate", "--config", str(small_config), "--seed", "3", "--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("ground_truth.json", "confocal.json", "sted.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert "confocal: " in capsys.readouterr().out


def test_pipeline_writes_the_molecular_map(tmp_path, small_config):
    out = tmp_path / "run"
    assert main(["pipeline", "--config", str(small_config), "--out", str(out)]) == EXIT_OK
    mmap = load_map(out / "map.json")
    rois = load_rois(out / "rois.json")
    assert mmap.rois.ids == rois.ids
    assert mmap.alpha == 0.2
    table = load_table(out / "map.csv")
    assert "covered" in table.columns and len(table) == mmap.M
    assert (out / "density.pgm").exists() and (out / "labels.csv").exists()


def test_segment_then_count_from_files(tmp_path, small_config):
    out = tmp_path / "run"
    args = ["--config", str(small_config), "--out", str(out)]
    assert main(["simulate"] + args) == EXIT_OK
    assert main(["segment"] + args) == EXIT_OK
    assert main(["count"] + args + ["--truth", str(out / "ground_truth.json")]) == EXIT_OK
    assert load_map(out / "map.json").M == len(load_rois(out / "rois.json"))


def test_invalid_config_exits_with_config_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"md": 9}))
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_data_errors_exit_with_data_code(tmp_path, small_config):
    assert main(["segment", "--config", str(small_config), "--out", str(tmp_path),
                 "--sted", str(tmp_path / "missing.json")]) == EXIT_DATA

    gt = tmp_path / "gt.json"
    gt.write_text(json.dumps({"n": 8, "molecules": []}))
    config = json.loads(small_config.read_text())
    config["ground_truth"] = str(gt)
    mismatched = tmp_path / "mismatch.json"
    mismatched.write_text(json.dumps(config))
    assert main(["simulate", "--config", str(mismatched), "--out", str(tmp_path)]) == EXIT_DATA


def test_unknown_experiment_is_rejected(tmp_path, small_config):
    assert main(["experiment", "nope", "--config", str(small_config), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_power_sum_experiment_writes_tables(tmp_path, small_config):
    assert main(["experiment", "figure4", "--config", str(small_config), "--out", str(tmp_path)]) == EXIT_OK
    summary = load_table(tmp_path / "figure4_summary.csv")
    assert summary["order"].tolist() == [1, 2, 3, 4]
    assert len(load_table(tmp_path / "figure4_replicates.csv")) == 2


@pytest.mark.slow
def test_count_estimates_are_centered(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"experiment": {"replicates": 200}}))
    assert main(["experiment", "figure5", "--config", str(config), "--out", str(tmp_path)]) == EXIT_OK
    summary = load_table(tmp_path / "figure5_summary.csv").set_index("t").loc[10_000]
    assert abs(summary["median_N_hat"] / 10 - 1) < 0.1
    assert summary["coverage"] >= 0.85
