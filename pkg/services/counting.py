"""
Molecule counting on validated regions from confocal coincidence data.

Per pixel the detector frequencies are background corrected and inverted to
power sums; region sums of s_1 and s_2 give the number and brightness
estimates, and a delta-method variance gives simultaneous confidence
intervals.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage as ndi
from scipy.linalg import block_diag
from scipy.stats import norm
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from services.hybridize import RoiSet
from services.model import GroundTruth, PsfPowerSums
from services.simulator import CoincidenceImage
from services.transform import invert_pixels
from services.watershed import smooth
from utils.errors import InvalidArgumentError, MolmapError
from utils.logger import logger

GRADIENT_STEP = 1e-6
# Counts above which the truncated transform visibly under-counts
BIAS_THRESHOLDS = {2: 10, 3: 20, 4: 40, 5: 70, 6: 100, 7: 125, 8: 150}


class NonFiniteStencilError(MolmapError):
    """The finite-difference stencil left the domain where Psi is finite."""


@dataclass(frozen=True)
class EnlargedRegion:
    """Region R and its enlargement R_eps used for counting."""

    region_id: int
    base: np.ndarray
    mask: np.ndarray
    eps_px: float
    # validated regions are certified to hold at least one marker
    validated: bool = True


@dataclass(frozen=True)
class RegionCounts:
    """Point estimates of one region plus what the interval step needs."""

    region_id: int
    N_hat: float
    p_hat: float
    sum_s1: float
    sum_s2: float
    n_pixels: int
    degenerate_pixels: int
    identified: bool
    validated: bool
    D: np.ndarray = field(repr=False)
    E: np.ndarray = field(repr=False)
    H: PsfPowerSums = field(repr=False)


@dataclass(frozen=True)
class CountEstimate:
    """Final per-region count with its simultaneous confidence interval."""

    region_id: int
    N_hat: float
    p_hat: float
    sigma: float
    ci: Tuple[float, float]
    t: int
    md: int
    flags: Tuple[str, ...] = ()
    degenerate_pixels: int = 0


@dataclass(frozen=True)
class MolecularMap:
    """Regions with their count estimates and the global error level."""

    rois: RoiSet
    estimates: Tuple[CountEstimate, ...]
    alpha: float
    config_hash: Optional[str] = None

    @property
    def M(self) -> int:
        return len(self.estimates)

    def estimate(self, region_id: int) -> CountEstimate:
        for e in self.estimates:
            if e.region_id == region_id:
                return e
        raise KeyError(region_id)


def enlarge_regions(rois: RoiSet, eps_px: float) -> List[EnlargedRegion]:
    """
    Dilate every region by Euclidean distance eps_px, stopping at the
    equidistant frontier between regions so the enlargements stay disjoint.
    """
    if eps_px < 0:
        raise InvalidArgumentError(f"eps_px must be non-negative, got {eps_px}")
    if len(rois) == 0:
        return []
    dist = np.stack([ndi.distance_transform_edt(~r.mask) for r in rois])
    order = np.sort(dist, axis=0)
    nearest = np.argmin(dist, axis=0)
    second = order[1] if len(rois) > 1 else np.full(order[0].shape, np.inf)
    claimable = (order[0] <= eps_px) & (order[0] < second)
    out = []
    for idx, r in enumerate(rois):
        mask = (claimable & (nearest == idx)) | r.mask
        out.append(EnlargedRegion(region_id=r.id, base=r.mask, mask=mask, eps_px=eps_px))
    return out


def estimate_background(image: CoincidenceImage, smooth_fwhm: float, quantile: float = 0.05) -> float:
    """
    Single-photon background per pulse: a low quantile of the heavily
    smoothed one-photon rate image.
    """
    rate = smooth(image.one_photon / image.t, smooth_fwhm)
    value = max(float(np.quantile(rate, quantile)), 0.0)
    logger.info(f"Estimated background rate {value:.3g} per pulse")
    return value


def corrected_frequencies(image: CoincidenceImage, background: float) -> np.ndarray:
    """Relative frequencies with the background moved from D_1 to D_0."""
    D = image.frequencies().copy()
    D[..., 1] -= background
    D[..., 0] += background
    return D


def _ratio(H: PsfPowerSums, A, B):
    return H.order(2) / H.order(1) ** 2 * A ** 2 / B


def psi(D: np.ndarray, H: PsfPowerSums) -> float:
    """N-hat as a function of the region's detector probabilities, shape (pixels, md + 1)."""
    s, _ = invert_pixels(D)
    A, B = s[:, 0].sum(), s[:, 1].sum()
    if B <= 0:
        return math.inf
    return float(_ratio(H, A, B))


def estimate_counts(image: CoincidenceImage, regions: Sequence[EnlargedRegion],
                    H: PsfPowerSums, background: float) -> List[RegionCounts]:
    """
    Plug-in count and brightness estimates for every enlarged region.

    Args:
        image: Confocal coincidence image
        regions: Enlarged regions
        H: PSF power sums of the confocal PSF
        background: Single-photon background per pulse

    Returns:
        One RegionCounts per region, in input order
    """
    D_all = corrected_frequencies(image, background)
    E_all = image.frequencies()
    out = []
    for region in regions:
        if not region.mask.any():
            raise InvalidArgumentError(f"region {region.region_id} has no pixels")
        D = D_all[region.mask]
        s, degenerate = invert_pixels(D)
        A, B = float(s[:, 0].sum()), float(s[:, 1].sum())
        identified = B > 0 and A > 0
        if identified:
            N_hat = float(_ratio(H, A, B))
            p_hat = H.order(1) * B / (H.order(2) * A)
        else:
            N_hat, p_hat = math.inf, math.nan
            logger.warning(f"Region {region.region_id}: no two-photon excess, count not identified")
        if degenerate.any():
            logger.debug(f"Region {region.region_id}: {int(degenerate.sum())} degenerate pixels")
        out.append(RegionCounts(
            region_id=region.region_id, N_hat=N_hat, p_hat=p_hat, sum_s1=A, sum_s2=B,
            n_pixels=int(region.mask.sum()), degenerate_pixels=int(degenerate.sum()),
            identified=identified, validated=region.validated, D=D, E=E_all[region.mask], H=H,
        ))
    return out


def _central_difference(D: np.ndarray, H: PsfPowerSums, step: float) -> np.ndarray:
    md = D.shape[1] - 1
    s, degenerate = invert_pixels(D)
    A, B = s[:, 0].sum(), s[:, 1].sum()
    grad = np.zeros((D.shape[0], md))
    for k in range(1, md + 1):
        values = []
        for sign in (1.0, -1.0):
            shifted = D.copy()
            shifted[:, k] += sign * step
            shifted[:, 0] -= sign * step
            s_shift, _ = invert_pixels(shifted)
            # only the perturbed pixel changes, so the region sums move by its own difference
            B_new = B + s_shift[:, 1] - s[:, 1]
            A_new = A + s_shift[:, 0] - s[:, 0]
            if np.any(B_new <= 0):
                raise NonFiniteStencilError(f"stencil of order {k} leaves the identified domain")
            values.append(_ratio(H, A_new, B_new))
        grad[:, k - 1] = (values[0] - values[1]) / (2.0 * step)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteStencilError("non-finite difference quotient")
    grad[degenerate] = 0.0
    return grad


def gradient_psi(D: np.ndarray, H: PsfPowerSums, step: float = GRADIENT_STEP) -> np.ndarray:
    """
    Central finite-difference gradient of Psi with one Richardson step.

    The step shrinks tenfold, up to three times, while the stencil is not finite.

    Args:
        D: Detector probabilities of the region's pixels, shape (pixels, md + 1)
        H: PSF power sums
        step: Initial step

    Returns:
        Gradient with respect to D_1..D_md per pixel, shape (pixels, md)

    Raises:
        NonFiniteStencilError: if every step size fails
    """
    D = np.asarray(D, dtype=float)
    for attempt in Retrying(stop=stop_after_attempt(4),
                            retry=retry_if_exception_type(NonFiniteStencilError),
                            reraise=True):
        with attempt:
            h = step / 10 ** (attempt.retry_state.attempt_number - 1)
            if attempt.retry_state.attempt_number > 1:
                logger.debug(f"Retrying gradient with step {h:.0e}")
            coarse = _central_difference(D, H, h)
            fine = _central_difference(D, H, h / 2)
            return (4.0 * fine - coarse) / 3.0


def multinomial_covariance(E: np.ndarray) -> np.ndarray:
    """Covariance of the frequencies of orders 1..md for one pixel and one pulse."""
    E = np.asarray(E, dtype=float)[1:]
    return np.diag(E) - np.outer(E, E)


def region_covariance(E: np.ndarray) -> np.ndarray:
    """Block diagonal covariance over the pixels of a region."""
    return block_diag(*[multinomial_covariance(e) for e in E])


def delta_variance(grad: np.ndarray, E: np.ndarray) -> float:
    """grad^T Sigma_R grad without forming the block diagonal matrix."""
    e = np.asarray(E, dtype=float)[:, 1:]
    return float(np.sum(np.sum(grad ** 2 * e, axis=1) - np.sum(grad * e, axis=1) ** 2))


def bias_threshold(md: int) -> int:
    return BIAS_THRESHOLDS.get(md, BIAS_THRESHOLDS[max(BIAS_THRESHOLDS)])


def confidence_intervals(estimates: Sequence[RegionCounts], image: CoincidenceImage, alpha: float,
                         M: int) -> List[CountEstimate]:
    """
    Simultaneous intervals for the counts of M regions.

    The delta-method standard error is applied to 1/N-hat, which is linear
    in the two-photon sum, and the bounds are mapped back:
    N-hat / (1 + r) <= N <= N-hat / (1 - r) with r = z sigma-hat / (sqrt(t) N-hat).
    The upper bound is infinite once r >= 1. Validated regions hold at
    least one marker, so both bounds are floored at 1 there.

    Args:
        estimates: Output of estimate_counts on the same image
        image: Confocal coincidence image
        alpha: Level spent on counting, shared by the M intervals
        M: Number of intervals

    Returns:
        One CountEstimate per input, in input order
    """
    if M < 1:
        raise InvalidArgumentError(f"M must be >= 1, got {M}")
    if not 0 < alpha < 1:
        raise InvalidArgumentError(f"alpha must lie in (0, 1), got {alpha}")
    z = float(norm.ppf(1.0 - alpha / (2 * M)))
    root_t = math.sqrt(image.t)
    threshold = bias_threshold(image.md)
    out = []
    for est in estimates:
        flags = []
        if est.degenerate_pixels:
            flags.append("degenerate-pixels")
        if not est.identified:
            flags.append("non-identified")
            out.append(CountEstimate(
                region_id=est.region_id, N_hat=est.N_hat, p_hat=est.p_hat, sigma=math.inf,
                ci=(1.0, math.inf), t=image.t, md=image.md, flags=tuple(flags),
                degenerate_pixels=est.degenerate_pixels,
            ))
            continue
        try:
            grad = gradient_psi(est.D, est.H)
            sigma = math.sqrt(max(delta_variance(grad, est.E), 0.0))
            lower, upper = reciprocal_bounds(est.N_hat, z * sigma / root_t)
        except NonFiniteStencilError:
            logger.warning(f"Region {est.region_id}: unstable gradient, upper bound dropped")
            flags.append("gradient-unstable")
            sigma, lower, upper = math.inf, 0.0, math.inf
        if est.validated:
            lower, upper = max(lower, 1.0), max(upper, 1.0)
        if est.N_hat > threshold:
            flags.append("bias-warning")
            logger.warning(f"Region {est.region_id}: N-hat {est.N_hat:.1f} above the md={image.md} "
                           f"bias threshold {threshold}")
        out.append(CountEstimate(
            region_id=est.region_id, N_hat=est.N_hat, p_hat=est.p_hat, sigma=sigma,
            ci=(lower, upper), t=image.t, md=image.md, flags=tuple(flags),
            degenerate_pixels=est.degenerate_pixels,
        ))
    return out


def reciprocal_bounds(N_hat: float, half_width: float) -> Tuple[float, float]:
    """Bounds 1/N-hat +/- half_width / N-hat^2 on the 1/N scale, mapped back to counts."""
    r = half_width / N_hat
    upper = N_hat / (1.0 - r) if r < 1.0 else math.inf
    return N_hat / (1.0 + r), upper


def standardized_error(estimate: CountEstimate, N: float) -> float:
    """
    sqrt(t) (1/N - 1/N-hat) / (sigma-hat / N-hat^2), the statistic the
    intervals invert. Written on the count scale this is
    sqrt(t) (N-hat - N) / sigma-hat scaled by N-hat / N.
    """
    if N <= 0:
        raise InvalidArgumentError(f"N must be positive, got {N}")
    if not (0 < estimate.sigma < math.inf and math.isfinite(estimate.N_hat)):
        return math.nan
    return math.sqrt(estimate.t) * (estimate.N_hat - N) * estimate.N_hat / (N * estimate.sigma)


def build_molecular_map(rois: RoiSet, estimates: Sequence[CountEstimate], alpha: float,
                        config_hash: Optional[str] = None) -> MolecularMap:
    """
    Join regions and estimates.

    Raises:
        InvalidArgumentError: if the region ids do not match one to one
    """
    ids = [e.region_id for e in estimates]
    if sorted(ids) != sorted(rois.ids) or len(set(ids)) != len(ids):
        raise InvalidArgumentError(f"estimate ids {ids} do not match region ids {rois.ids}")
    by_id = {e.region_id: e for e in estimates}
    return MolecularMap(rois=rois, estimates=tuple(by_id[i] for i in rois.ids), alpha=alpha,
                        config_hash=config_hash)


def truth_counts(gt: GroundTruth, rois: RoiSet) -> Dict[int, int]:
    """True number of markers inside every base region."""
    positions = gt.positions()
    counts = {}
    for r in rois:
        if len(positions) == 0:
            counts[r.id] = 0
        else:
            counts[r.id] = int(r.mask[positions[:, 0], positions[:, 1]].sum())
    return counts
