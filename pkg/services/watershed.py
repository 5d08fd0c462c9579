"""
Watershed segmentation of the STED one-photon image.
"""
import math
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from scipy import ndimage as ndi
from skimage import measure, morphology, segmentation

from services.model import FWHM_TO_SIGMA
from utils.errors import InvalidArgumentError
from utils.logger import logger


@dataclass(frozen=True)
class Segmentation:
    """Label map: 0 = unassigned, 1..K = disjoint 4-connected segments."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def ids(self) -> List[int]:
        return [int(v) for v in np.unique(self.labels) if v > 0]

    def __len__(self) -> int:
        return len(self.ids)

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label

    def segments(self) -> Dict[int, np.ndarray]:
        return {label: self.mask(label) for label in self.ids}


def smooth(image: np.ndarray, fwhm: float) -> np.ndarray:
    """Gaussian smoothing with a normalized kernel of the given FWHM."""
    image = np.asarray(image, dtype=float)
    if fwhm <= 0:
        return image.copy()
    return ndi.gaussian_filter(image, sigma=fwhm * FWHM_TO_SIGMA, mode="reflect")


def foreground_mask(smoothed: np.ndarray, fwhm: float, background: float) -> np.ndarray:
    """Pixels whose smoothed intensity exceeds background + 2 noise sd."""
    sigma = max(fwhm * FWHM_TO_SIGMA, 1e-3)
    # variance of a Poisson field after smoothing with a unit-mass Gaussian
    noise_sd = math.sqrt(max(background, 1.0) / (4.0 * math.pi * sigma ** 2))
    return smoothed > background + 2.0 * noise_sd


def watershed(image: np.ndarray, smooth_fwhm: float, hmin: Optional[float] = None,
              background: Optional[float] = None) -> Segmentation:
    """
    Flood the inverted, smoothed image from its h-maxima.

    Args:
        image: Non-negative 2-D intensity image (counts per pixel)
        smooth_fwhm: FWHM of the Gaussian pre-smoothing in pixels
        hmin: Dynamic below which maxima are suppressed; default 2 sqrt(max)
        background: Expected background counts per pixel; when given,
            basins are limited to the foreground mask

    Returns:
        Segmentation
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise InvalidArgumentError("watershed needs a 2-D image")
    if np.any(image < 0):
        raise InvalidArgumentError("watershed needs a non-negative image")
    smoothed = smooth(image, smooth_fwhm)
    if hmin is None:
        hmin = 2.0 * math.sqrt(max(smoothed.max(), 0.0))

    if background is None:
        mask = np.ones_like(smoothed, dtype=bool)
    else:
        mask = foreground_mask(smoothed, smooth_fwhm, background)
    if not mask.any():
        return Segmentation(labels=np.zeros(image.shape, dtype=np.int64))

    if hmin > 0:
        peaks = morphology.h_maxima(smoothed, hmin).astype(bool)
    else:
        peaks = morphology.local_maxima(smoothed).astype(bool)
    peaks &= mask

    # every foreground component gets at least one seed, at its brightest pixel
    components = measure.label(mask, connectivity=1)
    for comp in range(1, components.max() + 1):
        inside = components == comp
        if not np.any(peaks & inside):
            idx = np.argmax(np.where(inside, smoothed, -np.inf))
            peaks.flat[idx] = True

    markers = measure.label(peaks, connectivity=1)
    labels = segmentation.watershed(-smoothed, markers=markers, mask=mask, connectivity=1)
    labels, _, _ = segmentation.relabel_sequential(labels)
    logger.debug(f"Watershed: {markers.max()} seeds, hmin={hmin:.3g}")
    return Segmentation(labels=labels)
