"""
Physical ground truth of the imaged sample and the fields derived from it:
markers with brightness, the point spread function, per-marker detection
probabilities and PSF power sums.
"""
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from utils.errors import InvalidArgumentError, InvalidModelError

# Kernel values below this fraction of the peak are truncated to zero
PSF_TRUNCATION = 1e-6
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


class Molecule(BaseModel):
    """One marker: 1-based grid position (x = row, y = column) and brightness."""

    model_config = ConfigDict(frozen=True)

    x: int
    y: int
    p: float

    @field_validator("p")
    @classmethod
    def check_brightness(cls, v: float) -> float:
        if not 0 < v < 0.5:
            raise ValueError(f"brightness {v} outside (0, 0.5)")
        return v


class GroundTruth(BaseModel):
    """The sample being imaged: markers on an n x n grid."""

    model_config = ConfigDict(frozen=True)

    n: int
    molecules: Tuple[Molecule, ...] = ()

    @model_validator(mode="after")
    def check_positions(self) -> "GroundTruth":
        for m in self.molecules:
            if not (1 <= m.x <= self.n and 1 <= m.y <= self.n):
                raise ValueError(f"molecule at ({m.x}, {m.y}) is off the {self.n}x{self.n} grid")
        return self

    @property
    def count(self) -> int:
        return len(self.molecules)

    def positions(self) -> np.ndarray:
        """0-based (row, column) array of shape (N, 2)."""
        if not self.molecules:
            return np.zeros((0, 2), dtype=int)
        return np.array([(m.x - 1, m.y - 1) for m in self.molecules], dtype=int)

    def brightness(self) -> np.ndarray:
        return np.array([m.p for m in self.molecules], dtype=float)

    def scaled(self, factor: float) -> "GroundTruth":
        """Same positions, every brightness multiplied by factor."""
        return GroundTruth(
            n=self.n,
            molecules=tuple(Molecule(x=m.x, y=m.y, p=m.p * factor) for m in self.molecules),
        )

    def translated(self, drow: int, dcol: int) -> "GroundTruth":
        return GroundTruth(
            n=self.n,
            molecules=tuple(Molecule(x=m.x + drow, y=m.y + dcol, p=m.p) for m in self.molecules),
        )

    @classmethod
    def from_points(cls, n: int, points, brightness) -> "GroundTruth":
        """
        Build a ground truth from continuous 0-based (row, column) points.

        Args:
            n: Grid side length
            points: Iterable of (row, column) floats
            brightness: Scalar or per-point brightness

        Returns:
            GroundTruth with every point snapped to its closest grid point
        """
        points = list(points)
        p = np.broadcast_to(np.asarray(brightness, dtype=float), (len(points),))
        molecules = []
        for (row, col), pj in zip(points, p):
            x, y = snap_position(row, col, n)
            molecules.append(Molecule(x=x, y=y, p=float(pj)))
        return cls(n=n, molecules=tuple(molecules))


def snap_position(row: float, col: float, n: int) -> Tuple[int, int]:
    """
    Snap a continuous 0-based position to the closest grid point.

    Returns:
        1-based (x, y) pair

    Raises:
        InvalidArgumentError: if the snapped point lies off the grid
    """
    x = int(math.floor(row + 0.5)) + 1
    y = int(math.floor(col + 0.5)) + 1
    if not (1 <= x <= n and 1 <= y <= n):
        raise InvalidArgumentError(f"position ({row}, {col}) lies outside the {n}x{n} grid")
    return x, y


@dataclass(frozen=True)
class PSF:
    """Discrete point spread function on an odd-sized support, peak at the center."""

    kernel: np.ndarray
    fwhm_px: float
    mode: str = "confocal"

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=float)
        if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
            raise InvalidArgumentError(f"PSF kernel must be 2-D with odd sides, got {k.shape}")
        if k.min() < 0 or k.max() > 1:
            raise InvalidArgumentError("PSF kernel values must lie in [0, 1]")
        if k[self.center] != k.max():
            raise InvalidArgumentError("PSF kernel maximum must sit at the center")
        if self.fwhm_px <= 0:
            raise InvalidArgumentError("PSF FWHM must be positive")
        if self.mode not in ("confocal", "sted"):
            raise InvalidArgumentError(f"unknown PSF mode {self.mode!r}")
        k.setflags(write=False)
        object.__setattr__(self, "kernel", k)

    @property
    def center(self) -> Tuple[int, int]:
        return self.kernel.shape[0] // 2, self.kernel.shape[1] // 2

    @property
    def radius(self) -> int:
        return max(self.center)

    @property
    def sigma(self) -> float:
        return self.fwhm_px * FWHM_TO_SIGMA


def default_support(fwhm_px: float) -> int:
    """Smallest odd support keeping every kernel value >= PSF_TRUNCATION."""
    if fwhm_px <= 0:
        raise InvalidArgumentError("FWHM must be positive")
    sigma = fwhm_px * FWHM_TO_SIGMA
    radius = int(math.floor(sigma * math.sqrt(-2.0 * math.log(PSF_TRUNCATION))))
    return 2 * max(radius, 1) + 1


def gaussian_psf(fwhm_px: float, support: int = None, mode: str = "confocal") -> PSF:
    """
    Peak-normalized Gaussian PSF.

    Args:
        fwhm_px: Full width at half maximum in pixels
        support: Odd side length of the kernel; defaults to default_support
        mode: "confocal" or "sted"

    Returns:
        PSF with kernel(center) = 1
    """
    if fwhm_px <= 0:
        raise InvalidArgumentError(f"FWHM must be positive, got {fwhm_px}")
    if support is None:
        support = default_support(fwhm_px)
    if support < 3 or support % 2 == 0:
        raise InvalidArgumentError(f"support must be odd and >= 3, got {support}")
    sigma = fwhm_px * FWHM_TO_SIGMA
    offsets = np.arange(support) - support // 2
    r2 = offsets[:, None] ** 2 + offsets[None, :] ** 2
    kernel = np.exp(-r2 / (2.0 * sigma ** 2))
    kernel[kernel < PSF_TRUNCATION] = 0.0
    return PSF(kernel=kernel, fwhm_px=float(fwhm_px), mode=mode)


@dataclass(frozen=True)
class DetectionField:
    """Per-marker detection probabilities, eps[j, row, col] = p_j * h(x - x_psi(j))."""

    eps: np.ndarray

    @property
    def n(self) -> int:
        return self.eps.shape[1]

    @property
    def count(self) -> int:
        return self.eps.shape[0]

    def pixel(self, row: int, col: int) -> np.ndarray:
        """Detection probabilities of every marker at one pixel."""
        return self.eps[:, row, col]

    def flat(self) -> np.ndarray:
        """Pixels along the first axis: shape (n*n, N), row-major."""
        return self.eps.reshape(self.count, self.n * self.n).T

    def one_photon_rate(self) -> np.ndarray:
        """Noiseless g(x) = 1 - prod_j (1 - eps_j(x)), the chance of any detection."""
        if self.count == 0:
            return np.zeros((self.n, self.n))
        return 1.0 - np.prod(1.0 - self.eps, axis=0)


def detection_field(gt: GroundTruth, psf: PSF) -> DetectionField:
    """
    Detection probabilities of every marker at every pixel.

    Raises:
        InvalidModelError: if any p_j * h(0) reaches 1
    """
    n = gt.n
    eps = np.zeros((gt.count, n, n))
    peak = psf.kernel.max()
    cr, cc = psf.center
    kr, kc = psf.kernel.shape
    for j, ((row, col), p) in enumerate(zip(gt.positions(), gt.brightness())):
        if p * peak >= 1.0:
            raise InvalidModelError(f"detection probability {p * peak} of molecule {j} is not below 1")
        r0, r1 = max(row - cr, 0), min(row - cr + kr, n)
        c0, c1 = max(col - cc, 0), min(col - cc + kc, n)
        eps[j, r0:r1, c0:c1] = p * psf.kernel[r0 - row + cr:r1 - row + cr, c0 - col + cc:c1 - col + cc]
    eps.setflags(write=False)
    return DetectionField(eps=eps)


def expected_one_photon(gt: GroundTruth, psf: PSF) -> np.ndarray:
    """Noiseless probability of at least one detection per pulse."""
    return detection_field(gt, psf).one_photon_rate()


@dataclass(frozen=True)
class PsfPowerSums:
    """H[l - 1] = sum_i h(x_i)^l, location independent."""

    H: np.ndarray

    @property
    def lmax(self) -> int:
        return len(self.H)

    def order(self, l: int) -> float:
        return float(self.H[l - 1])


def psf_power_sums(psf: PSF, lmax: int) -> PsfPowerSums:
    """Power sums of the kernel over its whole support for orders 1..lmax."""
    if lmax < 2:
        raise InvalidArgumentError(f"lmax must be >= 2, got {lmax}")
    k = psf.kernel[psf.kernel > 0]
    H = np.array([np.sum(k ** l) for l in range(1, lmax + 1)])
    return PsfPowerSums(H=H)
