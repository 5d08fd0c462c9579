"""
Replicate studies of the counting and segmentation stages.

Each study simulates many independent replicates, one seed per replicate,
and writes a per-replicate CSV (histogram data) and a summary CSV to the
output directory. Plotting is left to external tools.
"""
import argparse
import math
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Tuple

import numpy as np
import pandas as pd
from scipy.stats import kstest

from handlers.commands import count_regions, prepare_calibration, segment_image
from services import storage
from services.counting import (
    bias_threshold,
    confidence_intervals,
    enlarge_regions,
    estimate_counts,
    standardized_error,
    truth_counts,
)
from services.hybridize import Region, RoiSet
from services.model import gaussian_psf, psf_power_sums
from services.phantoms import build_phantom, filaments, pair, single
from services.scan import Box
from services.simulator import simulate_image, simulate_pair
from services.transform import invert_pixels
from utils.config import PipelineConfig
from utils.errors import ConfigError
from utils.logger import logger
from utils.parallel import parallel_map

# Desk-scale settings of the single-cluster studies
CLUSTER_N = 32
CLUSTER_P = 0.02
FIGURE4_COUNT, FIGURE4_T = 20, 10_000
FIGURE5_COUNT, FIGURE5_T = 10, (1_000, 10_000)
FIGURE6_N, FIGURE6_T = 48, 3000
FIGURE6_PAIRS = ((5, 5), (5, 20))
FIGURE7_T = 20_000


def register_experiment_handlers(subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser) -> None:
    p = subparsers.add_parser("experiment", parents=[common], help="run a replicate study")
    p.add_argument("name", help=f"one of {', '.join(EXPERIMENTS)}")
    p.set_defaults(handler=lambda cfg, args: cmd_experiment(args.name, cfg))


def _point_rois(n: int, centers) -> RoiSet:
    """One-pixel regions, each validated by its own 1x1 box."""
    regions = []
    for rid, (row, col) in enumerate(centers, 1):
        mask = np.zeros((n, n), dtype=bool)
        mask[row, col] = True
        mask.setflags(write=False)
        regions.append(Region(id=rid, mask=mask, boxes=(Box(row, col, 1, 1),), segments=()))
    return RoiSet(n=n, regions=tuple(regions))


def _cluster_replicate(index: int, cfg: PipelineConfig, count: int, t: int, md: int) -> Dict:
    """Count one stacked cluster in the middle of the grid."""
    seed = cfg.seed + index
    gt = single(CLUSTER_N, count, CLUSTER_P)
    psf = gaussian_psf(cfg.psf.confocal_fwhm)
    image = simulate_image(gt, psf, t, md, seed, cfg.background_rate)
    center = tuple(gt.positions()[0]) if count else ((CLUSTER_N - 1) // 2,) * 2
    regions = enlarge_regions(_point_rois(CLUSTER_N, [center]), 2.0 * cfg.psf.confocal_fwhm)
    counts = estimate_counts(image, regions, psf_power_sums(psf, 2), cfg.background_rate)
    est = confidence_intervals(counts, image, cfg.counting_alpha, 1)[0]
    return {
        "replicate": index, "seed": seed, "t": t, "md": md, "N": count, "N_hat": est.N_hat, "p_hat": est.p_hat,
        "sigma": est.sigma, "lower": est.ci[0], "upper": est.ci[1],
        "covered": bool(est.ci[0] <= count <= est.ci[1]),
        "z": standardized_error(est, count) if count else math.nan,
    }


def _power_sum_replicate(index: int, cfg: PipelineConfig) -> Dict:
    seed = cfg.seed + index
    gt = single(CLUSTER_N, FIGURE4_COUNT, CLUSTER_P)
    image = simulate_image(gt, gaussian_psf(cfg.psf.confocal_fwhm), FIGURE4_T, cfg.md, seed)
    s, _ = invert_pixels(image.frequencies())
    row = {"replicate": index, "seed": seed}
    for k in range(1, cfg.md + 1):
        row[f"S{k}_hat"] = float(s[..., k - 1].sum())
    return row


def run_figure4(cfg: PipelineConfig) -> Dict[str, pd.DataFrame]:
    """Image-wide power sum estimates of one cluster against their true values."""
    H = psf_power_sums(gaussian_psf(cfg.psf.confocal_fwhm), cfg.md)
    reps = pd.DataFrame(parallel_map(partial(_power_sum_replicate, cfg=cfg), range(cfg.experiment.replicates)))
    rows = []
    for k in range(1, cfg.md + 1):
        truth = FIGURE4_COUNT * CLUSTER_P ** k * H.order(k)
        mean = reps[f"S{k}_hat"].mean()
        rows.append({"order": k, "truth": truth, "mean": mean, "sd": reps[f"S{k}_hat"].std(),
                     "relative_bias": mean / truth - 1.0})
    return {"replicates": reps, "summary": pd.DataFrame(rows)}


def run_figure5(cfg: PipelineConfig) -> Dict[str, pd.DataFrame]:
    """Joint distribution of count and brightness estimates for one cluster, per pulse number."""
    rows, summary = [], []
    for t in FIGURE5_T:
        task = partial(_cluster_replicate, cfg=cfg, count=FIGURE5_COUNT, t=t, md=cfg.md)
        reps = pd.DataFrame(parallel_map(task, range(cfg.experiment.replicates)))
        product = reps["N_hat"] * reps["p_hat"]
        z = reps["z"].dropna()
        summary.append({
            "t": t, "N": FIGURE5_COUNT, "median_N_hat": reps["N_hat"].median(),
            "median_p_hat": reps["p_hat"].median(),
            "identified_fraction": float(np.mean(np.isfinite(reps["N_hat"]))),
            "hyperbola_fraction": float(np.mean(np.abs(product / (FIGURE5_COUNT * CLUSTER_P) - 1.0) < 0.05)),
            "coverage": reps["covered"].mean(),
            "ks_distance": float(kstest(z, "norm").statistic) if len(z) else math.nan,
        })
        rows.append(reps)
    return {"replicates": pd.concat(rows, ignore_index=True), "summary": pd.DataFrame(summary)}


def _pair_replicate(index: int, cfg: PipelineConfig, counts: Tuple[int, int], distance_px: float) -> List[Dict]:
    seed = cfg.seed + index
    gt = pair(FIGURE6_N, counts[0], counts[1], distance_px, CLUSTER_P)
    psf = gaussian_psf(cfg.psf.confocal_fwhm)
    image = simulate_image(gt, psf, FIGURE6_T, cfg.md, seed, cfg.background_rate)
    positions = gt.positions()
    centers = [tuple(positions[0]), tuple(positions[-1])]
    regions = enlarge_regions(_point_rois(FIGURE6_N, centers), 2.0 * cfg.psf.confocal_fwhm)
    estimated = estimate_counts(image, regions, psf_power_sums(psf, 2), cfg.background_rate)
    estimates = confidence_intervals(estimated, image, cfg.counting_alpha, 2)
    return [
        {"replicate": index, "pair": f"{counts[0]}+{counts[1]}", "distance_fwhm": distance_px / cfg.psf.confocal_fwhm,
         "cluster": est.region_id, "N": truth, "N_hat": est.N_hat, "lower": est.ci[0], "upper": est.ci[1]}
        for est, truth in zip(estimates, counts)
    ]


def run_figure6(cfg: PipelineConfig) -> Dict[str, pd.DataFrame]:
    """
    Two clusters at shrinking distance, the region border on the midline.

    Means are taken over identified replicates; the median is robust to the
    heavy upper tail of N-hat at this pulse number.
    """
    rows = []
    for counts in FIGURE6_PAIRS:
        for d in cfg.experiment.figure6_distances:
            task = partial(_pair_replicate, cfg=cfg, counts=counts, distance_px=d * cfg.psf.confocal_fwhm)
            for result in parallel_map(task, range(cfg.experiment.replicates)):
                rows.extend(result)
    reps = pd.DataFrame(rows)
    finite = reps[np.isfinite(reps["N_hat"])]
    keys = ["pair", "distance_fwhm", "cluster"]
    summary = finite.groupby(keys).agg(
        N=("N", "first"), mean_N_hat=("N_hat", "mean"), median_N_hat=("N_hat", "median"),
        mean_lower=("lower", "mean"), mean_upper=("upper", "mean")).reset_index()
    identified = reps.groupby(keys)["N_hat"].apply(lambda v: float(np.mean(np.isfinite(v))))
    summary = summary.merge(identified.rename("identified_fraction").reset_index(), on=keys)
    summary["relative_error"] = summary["median_N_hat"] / summary["N"] - 1.0
    return {"replicates": reps, "summary": summary}


def run_figure7(cfg: PipelineConfig) -> Dict[str, pd.DataFrame]:
    """Median count estimate against the true count for several detector numbers."""
    rows = []
    for md in cfg.experiment.figure7_md:
        for count in cfg.experiment.figure7_counts:
            logger.info(f"Count sweep md={md} N={count}")
            task = partial(_cluster_replicate, cfg=cfg, count=count, t=FIGURE7_T, md=md)
            rows.extend(parallel_map(task, range(cfg.experiment.replicates)))
    reps = pd.DataFrame(rows)
    summary = reps.groupby(["md", "N"]).agg(median_N_hat=("N_hat", "median")).reset_index()
    summary["median_bias"] = summary["median_N_hat"] / summary["N"] - 1.0
    summary["bias_threshold"] = summary["md"].map(bias_threshold)
    return {"replicates": reps, "summary": summary}


def _pipeline_replicate(index: int, cfg: PipelineConfig, cal) -> Dict:
    seed = cfg.seed + index
    run = cfg.model_copy(update={"seed": seed})
    gt = build_phantom(run.phantom, run.n, run.psf.confocal_fwhm, seed)
    confocal, sted = simulate_pair(
        gt, gaussian_psf(run.psf.confocal_fwhm, mode="confocal"), gaussian_psf(run.psf.sted_fwhm, mode="sted"),
        run.t_confocal, run.t_sted, run.md, seed, run.background_rate)
    rois = segment_image(run, sted, cal)
    mmap = count_regions(run, confocal, rois)
    truth = truth_counts(gt, rois)
    covered = [e.ci[0] <= truth[e.region_id] <= e.ci[1] for e in mmap.estimates]
    return {
        "replicate": index, "seed": seed, "M": mmap.M, "molecules": gt.count,
        "empty_regions": sum(1 for v in truth.values() if v == 0),
        "covered_all": all(covered), "covered_fraction": float(np.mean(covered)) if covered else 1.0,
    }


def run_coverage(cfg: PipelineConfig) -> Dict[str, pd.DataFrame]:
    """Joint coverage of segmentation and intervals over full pipeline replicates."""
    cal = prepare_calibration(cfg, cfg.t_sted)
    task = partial(_pipeline_replicate, cfg=cfg, cal=cal)
    reps = pd.DataFrame(parallel_map(task, range(cfg.experiment.replicates)))
    coverage = reps["covered_all"].mean()
    summary = pd.DataFrame([{
        "alpha": cfg.alpha, "replicates": len(reps), "coverage": coverage,
        "mc_error": math.sqrt(coverage * (1.0 - coverage) / len(reps)),
        "false_region_rate": float(np.mean(reps["empty_regions"] > 0)),
        "mean_M": reps["M"].mean(),
    }])
    return {"replicates": reps, "summary": summary}


def _segmentation_replicate(index: int, cfg: PipelineConfig, t: int, cal) -> Dict:
    seed = cfg.seed + index
    gt = filaments(n=cfg.n, count=max(2, cfg.n // 16), seed=seed)
    sted = simulate_image(gt, gaussian_psf(cfg.psf.sted_fwhm, mode="sted"), t, cfg.md, seed, cfg.background_rate)
    run = cfg.model_copy(update={"seed": seed})
    rois = segment_image(run, sted, cal)
    truth = truth_counts(gt, rois)
    diameters = [math.sqrt(r.area) / cfg.psf.sted_fwhm for r in rois]
    return {
        "t": t, "replicate": index, "regions": len(rois),
        "boxes": sum(len(r.boxes) for r in rois),
        "empty_regions": sum(1 for v in truth.values() if v == 0),
        "diameters": diameters,
    }


def run_segmentation(cfg: PipelineConfig) -> Dict[str, pd.DataFrame]:
    """Region counts and sizes on filament phantoms for increasing pulse counts."""
    rows = []
    for t in cfg.experiment.segmentation_t:
        cal = prepare_calibration(cfg, t)
        rows.extend(parallel_map(partial(_segmentation_replicate, cfg=cfg, t=t, cal=cal),
                                 range(cfg.experiment.replicates)))
    diameters = pd.DataFrame([
        {"t": r["t"], "replicate": r["replicate"], "diameter_fwhm": d} for r in rows for d in r["diameters"]
    ], columns=["t", "replicate", "diameter_fwhm"])
    reps = pd.DataFrame([{k: v for k, v in r.items() if k != "diameters"} for r in rows])
    summary = reps.groupby("t").agg(mean_regions=("regions", "mean"), mean_boxes=("boxes", "mean"),
                                    false_region_rate=("empty_regions", lambda v: float(np.mean(v > 0))))
    return {"replicates": reps, "diameters": diameters, "summary": summary.reset_index()}


EXPERIMENTS: Dict[str, Callable[[PipelineConfig], Dict[str, pd.DataFrame]]] = {
    "figure4": run_figure4,
    "figure5": run_figure5,
    "figure6": run_figure6,
    "figure7": run_figure7,
    "coverage": run_coverage,
    "segmentation": run_segmentation,
}


def cmd_experiment(name: str, cfg: PipelineConfig) -> Dict[str, Path]:
    """
    Run a named replicate study and write its tables.

    Args:
        name: Study name, a key of EXPERIMENTS
        cfg: Pipeline configuration

    Returns:
        Paths of the written CSV files keyed by table name

    Raises:
        ConfigError: for an unknown study name
    """
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}, expected one of {', '.join(EXPERIMENTS)}")
    logger.info(f"Running experiment {name} with {cfg.experiment.replicates} replicates")
    tables = EXPERIMENTS[name](cfg)
    digest = cfg.config_hash()
    return {
        key: storage.save_table(table, cfg.output_dir / f"{name}_{key}.csv", digest)
        for key, table in tables.items()
    }
