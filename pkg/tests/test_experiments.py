import math

import pytest

from handlers.experiments import run_coverage, run_figure4, run_figure5, run_figure6, run_figure7
from utils.config import PipelineConfig


def _config(replicates, **experiment):
    return PipelineConfig(experiment={"replicates": replicates, **experiment})


def test_figure5_reports_both_pulse_numbers():
    summary = run_figure5(_config(2))["summary"]
    assert summary["t"].tolist() == [1_000, 10_000]
    assert {"median_N_hat", "hyperbola_fraction", "ks_distance"} <= set(summary.columns)


def test_figure6_runs_equal_and_unequal_pairs():
    result = run_figure6(_config(2, figure6_distances=[2.0]))
    assert set(result["replicates"]["pair"]) == {"5+5", "5+20"}
    assert len(result["replicates"]) == 2 * 2 * 2


@pytest.mark.slow
def test_power_sums_are_unbiased():
    summary = run_figure4(_config(300))["summary"].set_index("order")
    assert abs(summary.loc[1, "relative_bias"]) < 0.02
    assert abs(summary.loc[2, "relative_bias"]) < 0.05


@pytest.mark.slow
def test_count_and_brightness_follow_the_hyperbola():
    summary = run_figure5(_config(300))["summary"].set_index("t")
    row = summary.loc[10_000]
    assert 9 <= row["median_N_hat"] <= 11
    assert row["hyperbola_fraction"] >= 0.9


@pytest.mark.slow
def test_detector_number_limits_the_count():
    cfg = _config(100, figure7_counts=[40, 150], figure7_md=[4, 8])
    bias = run_figure7(cfg)["summary"].set_index(["md", "N"])["median_bias"]
    assert abs(bias[(4, 40)]) < 0.1
    assert bias[(4, 150)] < -0.2
    assert abs(bias[(8, 150)]) < 0.1


@pytest.mark.slow
def test_close_pairs_are_counted_from_one_fwhm():
    summary = run_figure6(_config(100, figure6_distances=[1.0, 1.5, 2.0]))["summary"]
    # the small cluster next to a four times brighter one needs two FWHM
    checked = summary[(summary["pair"] == "5+5") | (summary["distance_fwhm"] >= 2.0)]
    assert len(checked) == 3 * 2 + 2
    for _, row in checked.iterrows():
        assert row["mean_lower"] <= row["mean_N_hat"] <= row["mean_upper"]
        assert abs(row["relative_error"]) < 0.15


@pytest.mark.slow
def test_all_intervals_cover_jointly():
    replicates = 300
    summary = run_coverage(PipelineConfig(alpha=0.1, experiment={"replicates": replicates}))["summary"].iloc[0]
    mc_error = math.sqrt(0.9 * 0.1 / replicates)
    assert summary["coverage"] >= 0.9 - 3 * mc_error
