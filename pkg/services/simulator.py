"""
Synthetic confocal and STED coincidence images.

Each pixel is an independent multinomial sample of size t over the exact
probabilities D_0..D_md of k active detectors, computed from the full
Poisson binomial emission distribution of every marker at that pixel.
"""
from dataclasses import dataclass

import numpy as np

from services.model import PSF, GroundTruth, detection_field
from services.transform import detector_weights, poisson_binomial_batch
from utils.errors import DataError, InvalidArgumentError
from utils.logger import logger

MODES = ("confocal", "sted")


@dataclass(frozen=True)
class CoincidenceImage:
    """Counts Y^0..Y^md of k active detectors out of t pulses, shape (md + 1, n, n)."""

    n: int
    md: int
    t: int
    mode: str
    counts: np.ndarray
    background_rate: float = 0.0

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.shape != (self.md + 1, self.n, self.n):
            raise DataError(f"count planes have shape {counts.shape}, expected {(self.md + 1, self.n, self.n)}")
        if not np.issubdtype(counts.dtype, np.integer):
            raise DataError("counts must be integers")
        if np.any(counts < 0):
            raise DataError("counts must be non-negative")
        if np.any(counts.sum(axis=0) != self.t):
            raise DataError(f"counts do not add up to t={self.t} at every pixel")
        if self.mode not in MODES:
            raise DataError(f"unknown mode {self.mode!r}")
        counts = counts.astype(np.int64)
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def one_photon(self) -> np.ndarray:
        """Y^1 plane, the image used for segmentation."""
        return self.counts[1]

    def frequencies(self) -> np.ndarray:
        """Relative frequencies D-hat, shape (n, n, md + 1)."""
        return np.moveaxis(self.counts, 0, -1) / self.t


def pixel_generator(seed: int, stream: int, index: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream, pixel index)."""
    if seed < 0:
        raise InvalidArgumentError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, index])))


def expected_probabilities(gt: GroundTruth, psf: PSF, md: int,
                           background_rate: float = 0.0) -> np.ndarray:
    """
    Exact detector probabilities per pixel.

    Background is a single-photon pseudo-emitter with eps = background_rate
    at every pixel.

    Returns:
        Array of shape (n, n, md + 1)
    """
    if md < 2:
        raise InvalidArgumentError(f"md must be >= 2, got {md}")
    if not 0 <= background_rate < 1:
        raise InvalidArgumentError(f"background rate must lie in [0, 1), got {background_rate}")
    n = gt.n
    eps = detection_field(gt, psf).flat()
    if background_rate > 0:
        eps = np.hstack([eps, np.full((n * n, 1), background_rate)])
    count = eps.shape[1]
    Q = poisson_binomial_batch(eps) if count else np.ones((n * n, 1))
    w = detector_weights(md, max(count, md)).w[:, :count + 1]
    D = Q @ w.T
    return np.clip(D, 0.0, 1.0).reshape(n, n, md + 1)


def _sample(D: np.ndarray, t: int, seed: int, stream: int) -> np.ndarray:
    n = D.shape[0]
    md = D.shape[-1] - 1
    flat = D.reshape(-1, md + 1)
    counts = np.zeros_like(flat, dtype=np.int64)
    for idx, p in enumerate(flat):
        if p[0] >= 1.0:
            counts[idx, 0] = t
            continue
        p = p / p.sum()
        counts[idx] = pixel_generator(seed, stream, idx).multinomial(t, p)
    return np.moveaxis(counts.reshape(n, n, md + 1), -1, 0)


def simulate_image(gt: GroundTruth, psf: PSF, t: int, md: int, seed: int,
                   background_rate: float = 0.0) -> CoincidenceImage:
    """
    Simulate one coincidence image of the ground truth.

    Args:
        gt: Ground truth markers
        psf: Point spread function; its mode labels the image
        t: Pulses per pixel
        md: Number of detectors
        seed: Non-negative seed; pixel substreams derive from (seed, mode, pixel)
        background_rate: Single-photon background per pulse

    Returns:
        CoincidenceImage
    """
    if t < 1:
        raise InvalidArgumentError(f"t must be >= 1, got {t}")
    D = expected_probabilities(gt, psf, md, background_rate)
    counts = _sample(D, t, seed, MODES.index(psf.mode))
    logger.debug(f"Simulated {psf.mode} image n={gt.n} md={md} t={t} with {gt.count} molecules")
    return CoincidenceImage(n=gt.n, md=md, t=t, mode=psf.mode, counts=counts,
                            background_rate=background_rate)


def simulate_pair(gt: GroundTruth, psf_confocal: PSF, psf_sted: PSF, t_confocal: int,
                  t_sted: int, md: int, seed: int, background_rate: float = 0.0):
    """
    Image the same sample once in confocal and once in STED mode.

    Returns:
        Tuple (confocal, sted) of independent CoincidenceImages
    """
    if t_confocal < 1 or t_sted < 1:
        raise InvalidArgumentError("both pulse counts must be >= 1")
    if psf_sted.fwhm_px >= psf_confocal.fwhm_px:
        raise InvalidArgumentError("the STED PSF must be narrower than the confocal PSF")
    psf_confocal = PSF(kernel=psf_confocal.kernel, fwhm_px=psf_confocal.fwhm_px, mode="confocal")
    psf_sted = PSF(kernel=psf_sted.kernel, fwhm_px=psf_sted.fwhm_px, mode="sted")
    confocal = simulate_image(gt, psf_confocal, t_confocal, md, seed, background_rate)
    sted = simulate_image(gt, psf_sted, t_sted, md, seed, background_rate)
    return confocal, sted


def sample_pixel_per_molecule(eps, md: int, t: int, rng: np.random.Generator) -> np.ndarray:
    """
    Per-pulse reference path: every marker emits independently, every photon
    picks a detector uniformly, and the number of distinct detectors is counted.

    Returns:
        Counts Y^0..Y^md at one pixel
    """
    eps = np.asarray(eps, dtype=float)
    emitted = rng.random((t, eps.size)) < eps
    detector = rng.integers(0, md, size=(t, eps.size))
    active = np.zeros((t, md), dtype=bool)
    rows, cols = np.nonzero(emitted)
    active[rows, detector[rows, cols]] = True
    return np.bincount(active.sum(axis=1), minlength=md + 1)
