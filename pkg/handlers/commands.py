"""
Command handlers for the molmap CLI.
Handles simulate, segment, count and pipeline.
"""
import argparse
import hashlib
import json
from pathlib import Path
from typing import Dict, Optional

from services import storage
from services.counting import (
    MolecularMap,
    build_molecular_map,
    confidence_intervals,
    enlarge_regions,
    estimate_background,
    estimate_counts,
    truth_counts,
)
from services.hybridize import RoiSet, hybridize
from services.model import GroundTruth, gaussian_psf, psf_power_sums
from services.phantoms import build_phantom
from services.scan import (
    ScanCalibration,
    box_system_hash,
    build_box_system,
    calibrate_quantiles,
    default_scales,
    prune_minimal,
    select_significant,
)
from services.simulator import CoincidenceImage, simulate_pair
from services.watershed import watershed
from utils.config import PipelineConfig, settings
from utils.errors import DataError
from utils.logger import logger


def register_command_handlers(subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser) -> None:
    """
    Register the pipeline commands.

    Args:
        subparsers: Subparser collection of the main parser
        common: Parent parser carrying --config, --seed and --out
    """
    p = subparsers.add_parser("simulate", parents=[common], help="simulate confocal and STED images")
    p.set_defaults(handler=lambda cfg, args: cmd_simulate(cfg))

    p = subparsers.add_parser("segment", parents=[common], help="hybrid segmentation of a STED image")
    p.add_argument("--sted", type=Path, help="STED image header (default <out>/sted.json)")
    p.set_defaults(handler=lambda cfg, args: cmd_segment(cfg, args.sted))

    p = subparsers.add_parser("count", parents=[common], help="count molecules in validated regions")
    p.add_argument("--confocal", type=Path, help="confocal image header (default <out>/confocal.json)")
    p.add_argument("--rois", type=Path, help="region file (default <out>/rois.json)")
    p.add_argument("--truth", type=Path, help="ground truth JSON for the coverage column")
    p.set_defaults(handler=lambda cfg, args: cmd_count(cfg, args.confocal, args.rois, args.truth))

    p = subparsers.add_parser("pipeline", parents=[common], help="simulate, segment and count")
    p.set_defaults(handler=lambda cfg, args: cmd_pipeline(cfg))


def load_ground_truth(cfg: PipelineConfig) -> GroundTruth:
    """Ground truth from the configured file, or the configured phantom."""
    if cfg.ground_truth is not None:
        gt = storage.load_ground_truth(cfg.ground_truth)
        if gt.n != cfg.n:
            raise DataError(f"ground truth grid {gt.n} does not match n={cfg.n}")
        return gt
    return build_phantom(cfg.phantom, cfg.n, cfg.psf.confocal_fwhm, cfg.seed)


def _calibration_key(cfg: PipelineConfig, t: int, box_hash: str) -> str:
    payload = {
        "n": cfg.n, "t": t, "md": cfg.md, "alpha": cfg.segmentation_alpha, "boxes": box_hash,
        "background": cfg.scan_background, "fwhm": cfg.psf.sted_fwhm, "n_sim": cfg.scan.n_sim,
        "seed": cfg.scan.calibration_seed,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def box_system(cfg: PipelineConfig):
    scales = cfg.scan.scales or default_scales(cfg.n, cfg.psf.sted_fwhm)
    return build_box_system(cfg.n, [tuple(s) for s in scales], stride=1 if cfg.scan.full_stride else None)


def prepare_calibration(cfg: PipelineConfig, t: int, use_cache: bool = True) -> ScanCalibration:
    """
    Scan test calibration for the configured box system, from the cache when possible.

    Args:
        cfg: Pipeline configuration
        t: Pulses per pixel of the STED image
        use_cache: Read and write MOLMAP_CACHE_DIR

    Returns:
        ScanCalibration
    """
    boxes = box_system(cfg)
    box_hash = box_system_hash(boxes)
    path = settings.CACHE_DIR / f"calibration_{_calibration_key(cfg, t, box_hash)}.json"
    if use_cache:
        cached = storage.load_calibration(path)
        if cached is not None and cached.matches(cfg.n, t, box_hash, cfg.psf.sted_fwhm, cfg.scan_background):
            logger.info(f"Using cached calibration {path}")
            return cached
    psf = gaussian_psf(cfg.psf.sted_fwhm, mode="sted")
    cal = calibrate_quantiles(cfg.n, boxes, t, cfg.scan_background, cfg.segmentation_alpha,
                              cfg.scan.n_sim, cfg.scan.calibration_seed, psf, md=cfg.md)
    if use_cache:
        try:
            storage.save_calibration(cal, path)
        except OSError as e:
            logger.warning(f"Cannot cache calibration at {path}: {e}")
    return cal


def segment_image(cfg: PipelineConfig, sted: CoincidenceImage,
                  cal: Optional[ScanCalibration] = None) -> RoiSet:
    """
    Scan test, watershed and hybridization of one STED image.

    Returns:
        Validated RoiSet
    """
    if sted.n != cfg.n:
        raise DataError(f"STED image has side {sted.n}, config expects n={cfg.n}")
    psf = gaussian_psf(cfg.psf.sted_fwhm, mode="sted")
    boxes = box_system(cfg)
    if cal is None:
        cal = prepare_calibration(cfg, sted.t)
    if not cal.matches(sted.n, sted.t, box_system_hash(boxes), psf.fwhm_px, cfg.scan_background):
        raise DataError("scan calibration does not match the image, PSF, background or box system")
    selected = prune_minimal(select_significant(sted, psf, boxes, cal, cfg.scan_background))

    ws = cfg.watershed
    smooth_fwhm = ws.smooth_fwhm if ws.smooth_fwhm is not None else max(cfg.psf.sted_fwhm, 1.0)
    background = sted.t * cfg.scan_background if ws.use_mask else None
    seg = watershed(sted.one_photon, smooth_fwhm, hmin=ws.hmin, background=background)
    return hybridize(selected, seg)


def count_regions(cfg: PipelineConfig, confocal: CoincidenceImage, rois: RoiSet) -> MolecularMap:
    """
    Counts and simultaneous confidence intervals for every region.

    Returns:
        MolecularMap tagged with the config hash
    """
    if confocal.n != rois.n:
        raise DataError(f"confocal image side {confocal.n} does not match the region map side {rois.n}")
    if confocal.md != cfg.md:
        logger.warning(f"Image has md={confocal.md}, config says md={cfg.md}; using the image")
    if len(rois) == 0:
        logger.info("No validated regions, empty molecular map")
        return build_molecular_map(rois, [], cfg.alpha, cfg.config_hash())

    psf = gaussian_psf(cfg.psf.confocal_fwhm)
    H = psf_power_sums(psf, 2)
    c = cfg.counting
    eps_px = c.eps_px if c.eps_px is not None else cfg.psf.confocal_fwhm
    regions = enlarge_regions(rois, eps_px)
    if c.estimate_background:
        smooth_fwhm = c.background_smooth_fwhm or 2.0 * cfg.psf.confocal_fwhm
        background = estimate_background(confocal, smooth_fwhm, c.background_quantile)
    else:
        background = confocal.background_rate
    counts = estimate_counts(confocal, regions, H, background)
    estimates = confidence_intervals(counts, confocal, cfg.counting_alpha, len(counts))
    mmap = build_molecular_map(rois, estimates, cfg.alpha, cfg.config_hash())
    logger.info(f"Molecular map with {mmap.M} regions")
    return mmap


def cmd_simulate(cfg: PipelineConfig) -> Dict[str, Path]:
    """
    Write ground truth, confocal and STED images to the output directory.

    Returns:
        Paths keyed by "ground_truth", "confocal", "sted"
    """
    out = cfg.output_dir
    digest = cfg.config_hash()
    gt = load_ground_truth(cfg)
    confocal, sted = simulate_pair(
        gt,
        gaussian_psf(cfg.psf.confocal_fwhm, mode="confocal"),
        gaussian_psf(cfg.psf.sted_fwhm, mode="sted"),
        cfg.t_confocal, cfg.t_sted, cfg.md, cfg.seed, cfg.background_rate,
    )
    logger.info(f"Simulated {gt.count} molecules on a {gt.n}x{gt.n} grid")
    return {
        "ground_truth": storage.save_ground_truth(gt, out / "ground_truth.json", digest),
        "confocal": storage.save_image(confocal, out / "confocal.json", cfg.image_format, digest),
        "sted": storage.save_image(sted, out / "sted.json", cfg.image_format, digest),
    }


def cmd_segment(cfg: PipelineConfig, sted_file: Optional[Path] = None) -> Dict[str, Path]:
    """
    Segment a STED image and write the region map.

    Returns:
        Paths keyed by "rois", "labels"
    """
    out = cfg.output_dir
    sted = storage.load_image(sted_file or out / "sted.json")
    if sted.mode != "sted":
        logger.warning(f"Segmenting an image recorded in {sted.mode} mode")
    rois = segment_image(cfg, sted)
    digest = cfg.config_hash()
    path = storage.save_rois(rois, out / "rois.json", digest)
    labels = storage.save_labels_csv(rois.labels(), out / "labels.csv", digest)
    return {"rois": path, "labels": labels}


def cmd_count(cfg: PipelineConfig, confocal_file: Optional[Path] = None, roi_file: Optional[Path] = None,
              truth_file: Optional[Path] = None) -> Dict[str, Path]:
    """
    Count molecules in every region and write the molecular map.

    Args:
        cfg: Pipeline configuration
        confocal_file: Confocal image header
        roi_file: Region JSON
        truth_file: Optional ground truth; adds truth and coverage columns

    Returns:
        Paths keyed by "map", "table", "density"
    """
    out = cfg.output_dir
    confocal = storage.load_image(confocal_file or out / "confocal.json")
    rois = storage.load_rois(roi_file or out / "rois.json")
    mmap = count_regions(cfg, confocal, rois)

    truth_file = truth_file or cfg.ground_truth
    truth = truth_counts(storage.load_ground_truth(truth_file), rois) if truth_file else None
    digest = cfg.config_hash()
    return {
        "map": storage.save_map(mmap, out / "map.json"),
        "table": storage.save_table(storage.map_table(mmap, truth), out / "map.csv", digest),
        "density": storage.write_pgm(storage.density_image(mmap), out / "density.pgm"),
    }


def cmd_pipeline(cfg: PipelineConfig) -> Dict[str, Path]:
    """Simulate, segment and count in one run; the table carries the coverage column."""
    paths = cmd_simulate(cfg)
    paths.update(cmd_segment(cfg, paths["sted"]))
    paths.update(cmd_count(cfg, paths["confocal"], paths["rois"], paths["ground_truth"]))
    return paths
