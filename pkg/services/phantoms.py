"""
Built-in ground truths for simulations and replicate studies.
"""
import math
from typing import Optional

import numpy as np

from services.model import GroundTruth
from utils.errors import InvalidArgumentError

PHANTOMS = ("clusters", "filaments")
# Random stream of phantom layouts, separate from the image streams 0-2
LAYOUT_STREAM = 3


def _layout_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, LAYOUT_STREAM]))


def clusters(n: int = 64, confocal_fwhm: float = 4.0, count: int = 18, seed: int = 0,
             max_molecules: int = 15, brightness=(0.01, 0.03), scatter: float = 0.5) -> GroundTruth:
    """
    Compact clusters on a jittered grid, at least 1.5 confocal FWHM apart.

    Args:
        n: Grid side length
        confocal_fwhm: Confocal FWHM in pixels, sets the minimal spacing
        count: Number of clusters
        seed: Layout seed
        max_molecules: Molecules per cluster are drawn from 1..max_molecules
        brightness: Range of the per-cluster brightness
        scatter: Standard deviation of molecule positions around the center

    Returns:
        GroundTruth
    """
    if count < 1:
        raise InvalidArgumentError("need at least one cluster")
    rng = _layout_rng(seed)
    margin = 1.5 * confocal_fwhm
    side = math.ceil(math.sqrt(count))
    spacing = (n - 2 * margin) / side
    if spacing < 1.5 * confocal_fwhm:
        raise InvalidArgumentError(f"{count} clusters do not fit a {n}x{n} grid at FWHM {confocal_fwhm}")
    jitter = (spacing - 1.5 * confocal_fwhm) / 2
    cells = rng.choice(side * side, size=count, replace=False)
    points, p = [], []
    for cell in sorted(cells):
        row = margin + (cell // side + 0.5) * spacing + rng.uniform(-jitter, jitter)
        col = margin + (cell % side + 0.5) * spacing + rng.uniform(-jitter, jitter)
        size = int(rng.integers(1, max_molecules + 1))
        pc = rng.uniform(*brightness)
        offsets = rng.normal(0.0, scatter, size=(size, 2))
        for dr, dc in offsets:
            points.append((float(np.clip(row + dr, 0, n - 1)), float(np.clip(col + dc, 0, n - 1))))
            p.append(pc)
    return GroundTruth.from_points(n, points, p)


def filaments(n: int = 64, count: int = 4, seed: int = 0, step: float = 1.0,
              density: float = 0.6, p: float = 0.02, stiffness: float = 0.3) -> GroundTruth:
    """
    Curvilinear structures from smoothed random walks.

    The heading changes by a Gaussian increment of sd stiffness per step;
    every step places a molecule with probability density.
    """
    if count < 1:
        raise InvalidArgumentError("need at least one filament")
    rng = _layout_rng(seed)
    points = []
    for _ in range(count):
        row, col = rng.uniform(0.2 * n, 0.8 * n, size=2)
        heading = rng.uniform(0, 2 * math.pi)
        turn = 0.0
        for _ in range(2 * n):
            # heading follows an AR(1) turn rate so the walk stays smooth
            turn = 0.8 * turn + rng.normal(0.0, stiffness)
            heading += turn * 0.2
            row += step * math.cos(heading)
            col += step * math.sin(heading)
            if not (0 <= row <= n - 1 and 0 <= col <= n - 1):
                break
            if rng.random() < density:
                points.append((row, col))
    return GroundTruth.from_points(n, points, p)


def single(n: int, N: int, p: float, center: Optional[tuple] = None) -> GroundTruth:
    """N molecules stacked on one pixel, the grid center by default."""
    if N < 0:
        raise InvalidArgumentError("N must be non-negative")
    if center is None:
        center = ((n - 1) // 2, (n - 1) // 2)
    return GroundTruth.from_points(n, [center] * N, p)


def pair(n: int, N1: int, N2: int, distance_px: float, p: float) -> GroundTruth:
    """Two stacked clusters on the middle row, distance_px apart."""
    mid = (n - 1) / 2
    left = (mid, mid - distance_px / 2)
    right = (mid, mid + distance_px / 2)
    return GroundTruth.from_points(n, [left] * N1 + [right] * N2, p)


def build_phantom(name: str, n: int, confocal_fwhm: float, seed: int) -> GroundTruth:
    """Named phantom used by the pipeline configuration."""
    if name == "clusters":
        return clusters(n=n, confocal_fwhm=confocal_fwhm, count=_cluster_count(n, confocal_fwhm), seed=seed)
    if name == "filaments":
        return filaments(n=n, count=max(2, n // 16), seed=seed)
    raise InvalidArgumentError(f"unknown phantom {name!r}, expected one of {PHANTOMS}")


def _cluster_count(n: int, confocal_fwhm: float) -> int:
    # 18 clusters on the 64 pixel reference grid, scaled with the area
    side = max(1, int((n - 3 * confocal_fwhm) // (1.5 * confocal_fwhm * 1.7)))
    return min(18 * max(1, (n // 64) ** 2), side * side)
