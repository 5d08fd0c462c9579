"""
File formats of the pipeline.

Ground truth, coincidence images, scan calibrations, region sets and
molecular maps are written as JSON with optional CSV, binary or PGM
companions. JSON and CSV writers embed the run's config hash; every reader raises
DataError on malformed input.
"""
import json
import math
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd
from PIL import Image
from pydantic import ValidationError

from services.counting import CountEstimate, MolecularMap
from services.hybridize import Region, RoiSet
from services.model import GroundTruth
from services.scan import Box, ScanCalibration
from services.simulator import CoincidenceImage
from utils.errors import DataError
from utils.logger import logger

IMAGE_FORMATS = ("json", "csv", "bin")


def _write_json(path: Path, payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, allow_nan=False))
    logger.info(f"Wrote {path}")
    return path


def _read_json(path: Path) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"Cannot read {path}: {e}") from e


def _finite_or_none(value: float) -> Optional[float]:
    return float(value) if math.isfinite(value) else None


def _or(value: Optional[float], default: float) -> float:
    return default if value is None else float(value)


# Ground truth

def save_ground_truth(gt: GroundTruth, path: Path, config_hash: Optional[str] = None) -> Path:
    """Molecules with 1-based (x = row, y = column) positions."""
    payload = gt.model_dump(mode="json")
    payload["molecules"] = list(payload["molecules"])
    payload["config_hash"] = config_hash
    return _write_json(path, payload)


def load_ground_truth(path: Path) -> GroundTruth:
    data = _read_json(path)
    data.pop("config_hash", None)
    try:
        return GroundTruth(**data)
    except (TypeError, ValidationError) as e:
        raise DataError(f"Invalid ground truth {path}: {e}") from e


# Coincidence images

def save_image(image: CoincidenceImage, path: Path, fmt: str = "json",
               config_hash: Optional[str] = None) -> Path:
    """
    Write a coincidence image.

    Args:
        image: Image to write
        path: Header path, ending in .json
        fmt: "json" keeps the planes inline under "planes", "csv" writes one
            CSV per plane listed under "plane_files", "bin" writes
            little-endian int64 planes next to the header
        config_hash: Provenance hash

    Returns:
        Path of the JSON header
    """
    if fmt not in IMAGE_FORMATS:
        raise DataError(f"unknown image format {fmt!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": fmt, "n": image.n, "md": image.md, "t": image.t, "mode": image.mode,
        "background_rate": image.background_rate, "config_hash": config_hash,
    }
    if fmt == "json":
        header["planes"] = image.counts.tolist()
    elif fmt == "csv":
        planes = []
        for k, plane in enumerate(image.counts):
            name = f"{path.stem}_Y{k}.csv"
            np.savetxt(path.parent / name, plane, fmt="%d", delimiter=",",
                       header=f"config_hash={config_hash}")
            planes.append(name)
        header["plane_files"] = planes
    else:
        name = f"{path.stem}.bin"
        image.counts.astype("<i8").tofile(path.parent / name)
        header["data"] = name
    return _write_json(path, header)


def load_image(path: Path) -> CoincidenceImage:
    """
    Read a coincidence image written by save_image.

    Raises:
        DataError: on missing companions, wrong shapes or inconsistent counts
    """
    path = Path(path)
    header = _read_json(path)
    try:
        n, md, fmt = int(header["n"]), int(header["md"]), header.get("format", "json")
        shape = (md + 1, n, n)
        if fmt == "json":
            counts = np.asarray(header["planes"], dtype=np.int64)
        elif fmt == "csv":
            counts = np.stack([np.loadtxt(path.parent / name, delimiter=",", dtype=np.int64, ndmin=2)
                               for name in header["plane_files"]])
        elif fmt == "bin":
            counts = np.fromfile(path.parent / header["data"], dtype="<i8")
            if counts.size != np.prod(shape):
                raise DataError(f"{header['data']} holds {counts.size} values, expected {np.prod(shape)}")
            counts = counts.reshape(shape)
        else:
            raise DataError(f"unknown image format {fmt!r}")
        return CoincidenceImage(n=n, md=md, t=int(header["t"]), mode=header["mode"], counts=counts,
                                background_rate=float(header.get("background_rate", 0.0)))
    except (KeyError, TypeError, ValueError, OSError) as e:
        raise DataError(f"Invalid coincidence image {path}: {e}") from e


# Scan calibration cache

def save_calibration(cal: ScanCalibration, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cal.model_dump_json())
    logger.info(f"Cached calibration at {path}")
    return path


def load_calibration(path: Path) -> Optional[ScanCalibration]:
    """Cached calibration, or None when absent or unreadable."""
    path = Path(path)
    if not path.exists():
        return None
    try:
        return ScanCalibration.model_validate_json(path.read_text())
    except (OSError, ValidationError) as e:
        logger.warning(f"Ignoring broken calibration cache {path}: {e}")
        return None


# Region sets

def write_pgm(labels: np.ndarray, path: Path) -> Path:
    """16-bit binary PGM; provenance lives in the JSON file that names it."""
    labels = np.asarray(labels)
    if labels.max(initial=0) > 65535 or labels.min(initial=0) < 0:
        raise DataError("PGM values must lie in [0, 65535]")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels.astype(np.uint16)).save(path, format="PPM")
    return path


def read_pgm(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.array(im).astype(np.int64)
    except OSError as e:
        raise DataError(f"Cannot read label map {path}: {e}") from e


def save_rois(rois: RoiSet, path: Path, config_hash: Optional[str] = None) -> Path:
    """
    Write a RoiSet as a label PGM plus JSON metadata.

    Args:
        rois: Validated regions
        path: JSON path; the PGM shares its stem

    Returns:
        Path of the JSON file
    """
    path = Path(path)
    pgm = write_pgm(rois.labels(), path.with_suffix(".pgm"))
    payload = {
        "n": rois.n,
        "labels": pgm.name,
        "config_hash": config_hash,
        "regions": [
            {"id": r.id, "boxes": [[b.row, b.col, b.h1, b.h2] for b in r.boxes], "segments": list(r.segments)}
            for r in rois
        ],
    }
    return _write_json(path, payload)


def load_rois(path: Path) -> RoiSet:
    """
    Read a RoiSet written by save_rois.

    Raises:
        DataError: if the label map and metadata disagree
    """
    path = Path(path)
    data = _read_json(path)
    try:
        n = int(data["n"])
        labels = read_pgm(path.parent / data["labels"])
        if labels.shape != (n, n):
            raise DataError(f"label map has shape {labels.shape}, expected {(n, n)}")
        regions = []
        for entry in data["regions"]:
            mask = labels == int(entry["id"])
            mask.setflags(write=False)
            regions.append(Region(
                id=int(entry["id"]), mask=mask,
                boxes=tuple(Box(*map(int, b)) for b in entry["boxes"]),
                segments=tuple(int(s) for s in entry["segments"]),
            ))
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"Invalid region file {path}: {e}") from e
    rois = RoiSet(n=n, regions=tuple(regions))
    if not rois.is_valid():
        raise DataError(f"{path}: regions overlap or miss their validating box")
    return rois


def save_labels_csv(labels: np.ndarray, path: Path, config_hash: Optional[str] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, labels, fmt="%d", delimiter=",", header=f"config_hash={config_hash}")
    return path


# Molecular maps

def map_to_dict(mmap: MolecularMap) -> Dict[str, Any]:
    """JSON-ready form; non-finite numbers become null."""
    segments = []
    for region, est in zip(mmap.rois, mmap.estimates):
        segments.append({
            "id": region.id,
            "pixels": region.pixels().tolist(),
            "boxes": [[b.row, b.col, b.h1, b.h2] for b in region.boxes],
            "merged_segments": list(region.segments),
            "N_hat": _finite_or_none(est.N_hat),
            "p_hat": _finite_or_none(est.p_hat),
            "sigma": _finite_or_none(est.sigma),
            "ci": [est.ci[0], _finite_or_none(est.ci[1])],
            "t": est.t,
            "md": est.md,
            "flags": list(est.flags),
            "degenerate_pixels": est.degenerate_pixels,
        })
    return {"n": mmap.rois.n, "alpha": mmap.alpha, "M": mmap.M,
            "config_hash": mmap.config_hash, "segments": segments}


def map_from_dict(data: Dict[str, Any]) -> MolecularMap:
    n = int(data["n"])
    regions, estimates = [], []
    for seg in data["segments"]:
        mask = np.zeros((n, n), dtype=bool)
        pixels = np.asarray(seg["pixels"], dtype=int).reshape(-1, 2)
        mask[pixels[:, 0], pixels[:, 1]] = True
        mask.setflags(write=False)
        regions.append(Region(
            id=int(seg["id"]), mask=mask,
            boxes=tuple(Box(*map(int, b)) for b in seg["boxes"]),
            segments=tuple(int(s) for s in seg.get("merged_segments", ())),
        ))
        estimates.append(CountEstimate(
            region_id=int(seg["id"]),
            N_hat=_or(seg["N_hat"], math.inf),
            p_hat=_or(seg["p_hat"], math.nan),
            sigma=_or(seg["sigma"], math.inf),
            ci=(float(seg["ci"][0]), _or(seg["ci"][1], math.inf)),
            t=int(seg["t"]), md=int(seg["md"]),
            flags=tuple(seg["flags"]),
            degenerate_pixels=int(seg.get("degenerate_pixels", 0)),
        ))
    return MolecularMap(rois=RoiSet(n=n, regions=tuple(regions)), estimates=tuple(estimates),
                        alpha=float(data["alpha"]), config_hash=data.get("config_hash"))


def save_map(mmap: MolecularMap, path: Path) -> Path:
    return _write_json(path, map_to_dict(mmap))


def load_map(path: Path) -> MolecularMap:
    data = _read_json(path)
    try:
        return map_from_dict(data)
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise DataError(f"Invalid molecular map {path}: {e}") from e


def map_table(mmap: MolecularMap, truth: Optional[Dict[int, int]] = None) -> pd.DataFrame:
    """One row per segment: estimate and interval, plus truth and coverage when known."""
    rows = []
    for est in mmap.estimates:
        row = {"segment": est.region_id, "N_hat": est.N_hat, "lower": est.ci[0], "upper": est.ci[1]}
        if truth is not None:
            true_n = truth.get(est.region_id, 0)
            row["truth"] = true_n
            row["covered"] = bool(est.ci[0] <= true_n <= est.ci[1])
        rows.append(row)
    columns = ["segment", "N_hat", "lower", "upper"] + (["truth", "covered"] if truth is not None else [])
    return pd.DataFrame(rows, columns=columns)


def save_table(table: pd.DataFrame, path: Path, config_hash: Optional[str] = None) -> Path:
    """CSV with a leading config hash comment line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={config_hash}\n")
        table.to_csv(f, index=False)
    logger.info(f"Wrote {path}")
    return path


def load_table(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, comment="#")
    except (OSError, pd.errors.ParserError) as e:
        raise DataError(f"Cannot read table {path}: {e}") from e


def density_image(mmap: MolecularMap) -> np.ndarray:
    """Shade of every region proportional to N_hat / area, scaled to 16 bit."""
    density = np.zeros((mmap.rois.n, mmap.rois.n))
    for region, est in zip(mmap.rois, mmap.estimates):
        if math.isfinite(est.N_hat):
            density[region.mask] = est.N_hat / region.area
    peak = density.max(initial=0.0)
    if peak <= 0:
        return np.zeros(density.shape, dtype=np.int64)
    return np.round(density / peak * 65535).astype(np.int64)
