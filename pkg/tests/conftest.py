"""
Shared fixtures and brute-force oracles.
"""
import itertools
import math

import numpy as np
import pytest

from services.hybridize import RoiSet
from services.model import GroundTruth, gaussian_psf
from services.scan import Box
from services.simulator import CoincidenceImage, expected_probabilities
from utils.config import settings


@pytest.fixture(autouse=True)
def isolated_dirs(tmp_path, monkeypatch):
    """Keep calibration caches and outputs inside the test's temp dir."""
    monkeypatch.setattr(settings, "CACHE_DIR", tmp_path / "cache")
    monkeypatch.setattr(settings, "OUTPUT_DIR", tmp_path / "output")
    monkeypatch.setattr(settings, "THREADS", 1)
    return tmp_path


@pytest.fixture
def confocal_psf():
    return gaussian_psf(4.0, mode="confocal")


@pytest.fixture
def sted_psf():
    return gaussian_psf(0.8, mode="sted")


def detector_oracle(eps, md):
    """
    Exact D_0..D_md at one pixel by enumerating which markers emit and
    which detector every emitted photon hits.
    """
    eps = list(eps)
    D = np.zeros(md + 1)
    for emitted in itertools.product((0, 1), repeat=len(eps)):
        p_emit = math.prod(e if x else 1 - e for e, x in zip(eps, emitted))
        k = sum(emitted)
        if k == 0:
            D[0] += p_emit
            continue
        for hits in itertools.product(range(md), repeat=k):
            D[len(set(hits))] += p_emit / md ** k
    return D


def noiseless_image(gt: GroundTruth, psf, md: int, t: int = 10 ** 12) -> CoincidenceImage:
    """Counts rounded from the exact probabilities at a huge pulse number."""
    D = expected_probabilities(gt, psf, md)
    counts = np.floor(np.moveaxis(D, -1, 0) * t).astype(np.int64)
    counts[0] = t - counts[1:].sum(axis=0)
    return CoincidenceImage(n=gt.n, md=md, t=t, mode=psf.mode, counts=counts)


def roiset_is_valid(rois: RoiSet, boxes) -> bool:
    """Pixel-by-pixel check: pairwise disjoint regions, each holding a whole input box."""
    boxes = list(boxes)
    pixel_sets = [set(map(tuple, r.pixels())) for r in rois]
    for a, b in itertools.combinations(pixel_sets, 2):
        if a & b:
            return False
    for pixels in pixel_sets:
        whole = [
            all((row, col) in pixels
                for row in range(box.row, box.row + box.h1)
                for col in range(box.col, box.col + box.h2))
            for box in boxes
        ]
        if not any(whole):
            return False
    return True


def random_instance(rng: np.random.Generator, n: int = 24, segments: int = 20, boxes: int = 30):
    """Voronoi segmentation with holes plus random boxes."""
    k = int(rng.integers(1, segments + 1))
    seeds = rng.integers(0, n, size=(k, 2))
    rows, cols = np.indices((n, n))
    dist = (rows[None] - seeds[:, 0, None, None]) ** 2 + (cols[None] - seeds[:, 1, None, None]) ** 2
    labels = np.argmin(dist, axis=0) + 1
    labels[rng.random((n, n)) < 0.15] = 0
    box_list = []
    for _ in range(int(rng.integers(0, boxes + 1))):
        h1, h2 = rng.integers(1, 6, size=2)
        row = int(rng.integers(0, n - h1 + 1))
        col = int(rng.integers(0, n - h2 + 1))
        box_list.append(Box(row, col, int(h1), int(h2)))
    return labels, box_list
