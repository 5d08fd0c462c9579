"""
Multiscale scan test on the STED one-photon image.

Every box B_{x,h} gets a local statistic <Y - t*lambda, Phi_B> / sd, where
Phi_B is a PSF-adapted probe: a smooth bump on the box, deconvolved by the
PSF with a Tikhonov floor. Critical values come from Monte-Carlo replicates
of molecule-free images, so the same probes are used for calibration and
testing and the family-wise error of the selection is held at alpha.
"""
import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache, partial
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel
from scipy.signal import correlate

from services.model import PSF
from services.simulator import CoincidenceImage
from utils.errors import InvalidArgumentError
from utils.logger import logger
from utils.parallel import parallel_map

TIKHONOV = 1e-3
Scale = Tuple[int, int]


@dataclass(frozen=True, order=True)
class Box:
    """Rectangle with 0-based top-left corner (row, col) and side lengths (h1, h2)."""

    row: int
    col: int
    h1: int
    h2: int

    @property
    def scale(self) -> Scale:
        return self.h1, self.h2

    @property
    def area(self) -> int:
        return self.h1 * self.h2

    @property
    def slices(self) -> Tuple[slice, slice]:
        return slice(self.row, self.row + self.h1), slice(self.col, self.col + self.h2)

    def inside(self, n: int) -> bool:
        return (self.row >= 0 and self.col >= 0 and self.h1 >= 1 and self.h2 >= 1
                and self.row + self.h1 <= n and self.col + self.h2 <= n)

    def contains(self, other: "Box") -> bool:
        return (self.row <= other.row and self.col <= other.col
                and other.row + other.h1 <= self.row + self.h1
                and other.col + other.h2 <= self.col + self.h2)

    def mask(self, n: int) -> np.ndarray:
        m = np.zeros((n, n), dtype=bool)
        m[self.slices] = True
        return m


@dataclass(frozen=True)
class BoxSet:
    """Selected boxes with their local statistics."""

    boxes: Tuple[Box, ...] = ()
    statistics: Tuple[float, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)

    def statistic(self, box: Box) -> float:
        if not self.statistics:
            return 0.0
        return self.statistics[self.boxes.index(box)]

    def subset(self, keep: Iterable[int]) -> "BoxSet":
        keep = list(keep)
        stats = tuple(self.statistics[i] for i in keep) if self.statistics else ()
        return BoxSet(boxes=tuple(self.boxes[i] for i in keep), statistics=stats)


def default_scales(n: int, sted_fwhm: float) -> List[Scale]:
    """Dyadic square scales from the STED FWHM up to n/4."""
    h = 2 ** max(0, math.ceil(math.log2(max(sted_fwhm, 1.0))))
    scales = []
    while h <= max(n // 4, 1):
        scales.append((h, h))
        h *= 2
    return scales or [(1, 1)]


def build_box_system(n: int, scales: Sequence[Scale], stride: Optional[int] = None) -> List[Box]:
    """
    All translates of every scale.

    Args:
        n: Image side length
        scales: Side-length pairs (h1, h2)
        stride: Fixed stride; None uses max(1, min(h) // 2) per scale

    Returns:
        List of boxes, grouped by scale
    """
    if not scales:
        raise InvalidArgumentError("at least one scale is required")
    boxes = []
    for h1, h2 in scales:
        if not (1 <= h1 <= n and 1 <= h2 <= n):
            raise InvalidArgumentError(f"scale ({h1}, {h2}) does not fit an image of side {n}")
        step = stride if stride else max(1, min(h1, h2) // 2)
        for row in range(0, n - h1 + 1, step):
            for col in range(0, n - h2 + 1, step):
                boxes.append(Box(row, col, h1, h2))
    return boxes


def box_system_hash(boxes: Iterable[Box]) -> str:
    payload = ";".join(f"{b.row},{b.col},{b.h1},{b.h2}" for b in sorted(boxes))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def scale_penalty(n: int, scale: Scale) -> float:
    """omega_h = sqrt(2 log(n^2 / (h1 h2)))."""
    return math.sqrt(2.0 * math.log(n * n / (scale[0] * scale[1])))


@lru_cache(maxsize=128)
def _probe_kernel(h1: int, h2: int, kernel_bytes: bytes, shape: Tuple[int, int]) -> Tuple[np.ndarray, int]:
    kernel = np.frombuffer(kernel_bytes, dtype=float).reshape(shape)
    r = max(shape) // 2
    margin = 2 * r
    size = (h1 + 2 * margin + 2 * r, h2 + 2 * margin + 2 * r)
    bump = np.zeros(size)
    window = np.outer(np.sin(np.pi * (np.arange(h1) + 0.5) / h1),
                      np.sin(np.pi * (np.arange(h2) + 0.5) / h2))
    off = margin + r
    bump[off:off + h1, off:off + h2] = window
    psf = np.zeros(size)
    kr, kc = shape
    psf[:kr, :kc] = kernel
    psf = np.roll(psf, (-(kr // 2), -(kc // 2)), axis=(0, 1))
    psf_hat = np.fft.fft2(psf)
    tau = TIKHONOV * np.abs(psf_hat).max()
    probe_hat = np.fft.fft2(bump) * np.conj(psf_hat) / (np.abs(psf_hat) ** 2 + tau ** 2)
    probe = np.real(np.fft.ifft2(probe_hat))[r:r + h1 + 2 * margin, r:r + h2 + 2 * margin]
    probe /= np.linalg.norm(probe)
    probe.setflags(write=False)
    return probe, margin


def probe_kernel(psf: PSF, scale: Scale) -> Tuple[np.ndarray, int]:
    """
    Probe Phi for a box of the given scale, on the box plus a margin.

    Returns:
        Tuple (probe, margin): unit-norm probe of shape (h1 + 2m, h2 + 2m)
        whose box part starts at offset m
    """
    return _probe_kernel(scale[0], scale[1], psf.kernel.tobytes(), psf.kernel.shape)


def _statistic_map(one_photon: np.ndarray, psf: PSF, scale: Scale, t: int, background: float) -> np.ndarray:
    probe, margin = probe_kernel(psf, scale)
    centered = np.pad(one_photon - t * background, margin)
    inside = np.pad(np.ones_like(one_photon, dtype=float), margin)
    raw = correlate(centered, probe, mode="valid")
    norm2 = correlate(inside, probe ** 2, mode="valid")
    variance = max(t * background * (1.0 - background), 1.0)
    return raw / np.sqrt(variance * np.maximum(norm2, 1e-12))


def scale_statistics(image: CoincidenceImage, psf: PSF, scale: Scale, background: float) -> np.ndarray:
    """
    Local statistics of every translate of one scale.

    Returns:
        Array (n - h1 + 1, n - h2 + 1) indexed by the top-left corner
    """
    return _statistic_map(image.one_photon.astype(float), psf, scale, image.t, background)


def probe_statistic(image: CoincidenceImage, psf: PSF, box: Box, background: float) -> float:
    """Standardized probe statistic of one box."""
    if not box.inside(image.n):
        raise InvalidArgumentError(f"{box} lies outside the {image.n}x{image.n} image")
    return float(scale_statistics(image, psf, box.scale, background)[box.row, box.col])


def _group_by_scale(boxes: Iterable[Box]) -> Dict[Scale, Tuple[np.ndarray, np.ndarray, List[Box]]]:
    groups: Dict[Scale, List[Box]] = {}
    for b in boxes:
        groups.setdefault(b.scale, []).append(b)
    return {
        scale: (np.array([b.row for b in bs]), np.array([b.col for b in bs]), bs)
        for scale, bs in groups.items()
    }


class ScanCalibration(BaseModel):
    """Monte-Carlo critical values of the penalized maximum statistic."""

    n: int
    t: int
    md: int
    alpha: float
    background: float
    box_hash: str
    n_sim: int
    seed: int
    psf_fwhm: float
    # None when alpha is too small for n_sim replicates to certify
    c: Optional[float]
    penalties: Dict[str, float]
    null_maxima: List[float]

    @staticmethod
    def scale_key(scale: Scale) -> str:
        return f"{scale[0]}x{scale[1]}"

    def critical_value(self, scale: Scale) -> float:
        """c_{h, alpha} = c + omega_h."""
        if self.c is None:
            return math.inf
        return self.c + self.penalties[self.scale_key(scale)]

    def matches(self, n: int, t: int, box_hash: str, psf_fwhm: float, background: float) -> bool:
        """True when the null maxima were drawn for these image, PSF and background settings."""
        return (self.n == n and self.t == t and self.box_hash == box_hash
                and math.isclose(self.psf_fwhm, psf_fwhm) and math.isclose(self.background, background))


def _null_maximum(index: int, n: int, groups, t: int, background: float, seed: int, psf: PSF) -> float:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 2, index])))
    one_photon = rng.binomial(t, background, size=(n, n)).astype(float)
    best = -math.inf
    for scale, (rows, cols, _) in groups.items():
        stats = _statistic_map(one_photon, psf, scale, t, background)[rows, cols]
        best = max(best, float(stats.max()) - scale_penalty(n, scale))
    return best


def critical_constant(maxima: np.ndarray, alpha: float) -> Optional[float]:
    """Smallest c with empirical P(max >= c) <= alpha; None if alpha * n_sim < 1."""
    maxima = np.sort(np.asarray(maxima, dtype=float))
    if alpha * maxima.size < 1:
        return None
    q = float(np.quantile(maxima, 1.0 - alpha, method="higher"))
    if np.mean(maxima >= q) > alpha:
        q = float(np.nextafter(q, math.inf))
    return q


def calibrate_quantiles(n: int, boxes: Sequence[Box], t: int, background: float, alpha: float,
                        n_sim: int, seed: int, psf: PSF, md: int = 4) -> ScanCalibration:
    """
    Simulate molecule-free images and take the (1 - alpha) quantile of the
    penalized maximum statistic.

    Args:
        n: Image side length
        boxes: Box system
        t: Pulses per pixel of the STED image
        background: Declared single-photon background per pulse
        alpha: Family-wise error level
        n_sim: Number of null replicates
        seed: Non-negative seed
        psf: STED PSF
        md: Detector count, recorded in the calibration key

    Returns:
        ScanCalibration
    """
    if not 0 < alpha < 1:
        raise InvalidArgumentError(f"alpha must lie in (0, 1), got {alpha}")
    if n_sim < 1:
        raise InvalidArgumentError("n_sim must be >= 1")
    if n_sim < 1000:
        logger.warning(f"Calibrating with only {n_sim} null replicates")
    groups = _group_by_scale(boxes)
    task = partial(_null_maximum, n=n, groups=groups, t=t, background=background, seed=seed, psf=psf)
    maxima = np.array(parallel_map(task, range(n_sim)))
    c = critical_constant(maxima, alpha)
    if c is None:
        logger.warning(f"alpha={alpha} is below 1/n_sim; every critical value is infinite")
    penalties = {ScanCalibration.scale_key(s): scale_penalty(n, s) for s in groups}
    logger.info(f"Calibrated scan test: {len(groups)} scales, {len(boxes)} boxes, c={c}")
    return ScanCalibration(
        n=n, t=t, md=md, alpha=alpha, background=background, box_hash=box_system_hash(boxes),
        n_sim=n_sim, seed=seed, psf_fwhm=psf.fwhm_px, c=c, penalties=penalties,
        null_maxima=maxima.tolist(),
    )


def select_significant(image: CoincidenceImage, psf: PSF, boxes: Sequence[Box],
                       cal: ScanCalibration, background: Optional[float] = None) -> BoxSet:
    """
    Boxes whose statistic reaches the critical value of their scale.

    Args:
        background: Per-pulse background of the scan, the image's own rate by default

    Raises:
        InvalidArgumentError: if the calibration was made for other settings
    """
    background = image.background_rate if background is None else background
    if not cal.matches(image.n, image.t, box_system_hash(boxes), psf.fwhm_px, background):
        raise InvalidArgumentError("calibration does not match the image, PSF, background or box system")
    selected, stats = [], []
    for scale, (rows, cols, members) in _group_by_scale(boxes).items():
        critical = cal.critical_value(scale)
        if math.isinf(critical):
            continue
        values = scale_statistics(image, psf, scale, cal.background)[rows, cols]
        for idx in np.flatnonzero(values >= critical):
            selected.append(members[idx])
            stats.append(float(values[idx]))
    logger.info(f"Selected {len(selected)} of {len(boxes)} boxes")
    return BoxSet(boxes=tuple(selected), statistics=tuple(stats))


def prune_minimal(selected: BoxSet) -> BoxSet:
    """Keep only the boxes that strictly contain no other selected box."""
    if len(selected) == 0:
        return selected
    b = np.array([(x.row, x.col, x.row + x.h1, x.col + x.h2) for x in selected.boxes])
    keep = []
    for i, (r0, c0, r1, c1) in enumerate(b):
        inner = (b[:, 0] >= r0) & (b[:, 1] >= c0) & (b[:, 2] <= r1) & (b[:, 3] <= c1)
        inner[i] = False
        # equal boxes do not count as strictly contained
        same = (b[:, 0] == r0) & (b[:, 1] == c0) & (b[:, 2] == r1) & (b[:, 3] == c1)
        if not np.any(inner & ~same):
            keep.append(i)
    return selected.subset(keep)
