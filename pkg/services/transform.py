"""
Combinatorial core linking marker emission probabilities to detector counts.

The map T = A o g sends power sums s_k = sum_j eps_j^k to the probabilities
D_1..D_md of exactly k active detectors: g turns power sums into the
truncated emission probabilities Q~_k through the iterated sums S_k, and the
upper triangular matrix A splits k emitted photons over md detectors.

Every array function accepts leading pixel axes; the last axis indexes the
order (k = 1, 2, ...) or, for detector probabilities, D_0..D_md.
"""
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy.linalg import solve_triangular

from utils.errors import DegeneratePixelError, InvalidArgumentError, NonInvertibleInputError

# Largest photon order computed through Stirling numbers; higher orders use
# the occupancy recurrence, which gives the same values
STIRLING_MAX = 20


@lru_cache(maxsize=None)
def stirling2(j: int, i: int) -> int:
    """Stirling number of the second kind S(j, i)."""
    if j < 0 or i < 0:
        raise InvalidArgumentError(f"Stirling numbers need non-negative arguments, got ({j}, {i})")
    if i > j:
        return 0
    if j == 0:
        return 1
    if i == 0:
        return 0
    return i * stirling2(j - 1, i) + stirling2(j - 1, i - 1)


@dataclass(frozen=True)
class DetectorWeights:
    """w[i, j]: probability that j photons activate exactly i of md detectors."""

    md: int
    jmax: int
    w: np.ndarray

    def matrix(self) -> np.ndarray:
        """Upper triangular A = (w[p, q])_{p, q = 1..md}."""
        return np.triu(self.w[1:self.md + 1, 1:self.md + 1])


@lru_cache(maxsize=64)
def detector_weights(md: int, jmax: int) -> DetectorWeights:
    """
    Photon splitting weights for md equally likely detectors.

    Args:
        md: Number of detectors, at least 2
        jmax: Largest photon count, at least md

    Returns:
        DetectorWeights with w of shape (md + 1, jmax + 1)
    """
    if md < 2:
        raise InvalidArgumentError(f"md must be >= 2, got {md}")
    if jmax < md:
        raise InvalidArgumentError(f"jmax must be >= md, got jmax={jmax}, md={md}")
    w = np.zeros((md + 1, jmax + 1))
    w[0, 0] = 1.0
    for j in range(1, min(jmax, STIRLING_MAX) + 1):
        for i in range(1, min(j, md) + 1):
            w[i, j] = float(Fraction(
                stirling2(j, i) * math.factorial(md - 1),
                math.factorial(md - i) * md ** (j - 1),
            ))
    # One more photon either hits an active detector or wakes a new one
    for j in range(STIRLING_MAX + 1, jmax + 1):
        i = np.arange(1, md + 1)
        w[1:, j] = w[1:, j - 1] * i / md + w[:-1, j - 1] * (md - i + 1) / md
    w.setflags(write=False)
    return DetectorWeights(md=md, jmax=jmax, w=w)


@dataclass(frozen=True)
class EmissionDistribution:
    """Q[k]: probability that exactly k photons are emitted after one pulse."""

    Q: np.ndarray


def poisson_binomial_batch(eps: np.ndarray) -> np.ndarray:
    """
    Poisson binomial probabilities for many pixels at once.

    Args:
        eps: Array of shape (pixels, N) with entries in [0, 1)

    Returns:
        Array of shape (pixels, N + 1)
    """
    eps = np.atleast_2d(np.asarray(eps, dtype=float))
    if np.any(eps < 0) or np.any(eps >= 1):
        raise InvalidArgumentError("emission probabilities must lie in [0, 1)")
    npix, count = eps.shape
    Q = np.zeros((npix, count + 1))
    Q[:, 0] = 1.0
    # Fold in one Bernoulli at a time
    for j in range(count):
        e = eps[:, j:j + 1]
        Q[:, 1:j + 2] = Q[:, 1:j + 2] * (1.0 - e) + Q[:, 0:j + 1] * e
        Q[:, 0:1] *= 1.0 - e
    return Q


def poisson_binomial(eps) -> EmissionDistribution:
    """Emitted-photon-count distribution at one pixel."""
    eps = np.asarray(eps, dtype=float).reshape(1, -1)
    return EmissionDistribution(Q=poisson_binomial_batch(eps)[0])


def s_to_S(s: np.ndarray, kmax: int) -> np.ndarray:
    """
    Iterated sums S_1..S_kmax over distinct ordered index tuples.

    S_0 = 1 and S_k = sum_{j=1}^{k} (-1)^(j+1) (k-1)!/(k-j)! s_j S_{k-j}.
    """
    s = np.asarray(s, dtype=float)
    if kmax > s.shape[-1]:
        raise InvalidArgumentError(f"kmax={kmax} exceeds the {s.shape[-1]} available power sums")
    S = [np.ones(s.shape[:-1])]
    for k in range(1, kmax + 1):
        acc = np.zeros(s.shape[:-1])
        for j in range(1, k + 1):
            coef = (-1) ** (j + 1) * math.factorial(k - 1) / math.factorial(k - j)
            acc = acc + coef * s[..., j - 1] * S[k - j]
        S.append(acc)
    return np.stack(S[1:], axis=-1)


def _S_to_s(S: np.ndarray, kmax: int) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    S_full = [np.ones(S.shape[:-1])] + [S[..., k] for k in range(kmax)]
    s = []
    for k in range(1, kmax + 1):
        acc = S_full[k]
        for j in range(1, k):
            coef = (-1) ** (j + 1) * math.factorial(k - 1) / math.factorial(k - j)
            acc = acc - coef * s[j - 1] * S_full[k - j]
        s.append(acc * (-1) ** (k + 1) / math.factorial(k - 1))
    return np.stack(s, axis=-1)


def S_to_s(S: np.ndarray, kmax: int) -> np.ndarray:
    """
    Power sums s_1..s_kmax from iterated sums, the inverse of s_to_S.

    Raises:
        NonInvertibleInputError: if S_1 <= 0 and kmax >= 2
    """
    S = np.asarray(S, dtype=float)
    if kmax > S.shape[-1]:
        raise InvalidArgumentError(f"kmax={kmax} exceeds the {S.shape[-1]} available iterated sums")
    if kmax >= 2 and np.any(S[..., 0] <= 0):
        raise NonInvertibleInputError("S_1 must be positive to recover power sums")
    return _S_to_s(S, kmax)


def _g(s: np.ndarray, md: int) -> np.ndarray:
    """Truncated emission probabilities Q~_1..Q~_md."""
    S = s_to_S(s, md)
    Q = []
    for k in range(1, md + 1):
        acc = np.zeros(S.shape[:-1])
        for j in range(0, md - k + 1):
            acc = acc + (-1) ** j / math.factorial(j) * S[..., j + k - 1]
        Q.append(acc / math.factorial(k))
    return np.stack(Q, axis=-1)


def forward_T(s: np.ndarray, md: int) -> np.ndarray:
    """
    Detector probabilities D_0..D_md from power sums s_1..s_md.

    Orders above md are truncated; the result is exact when at most md
    markers contribute.
    """
    s = np.asarray(s, dtype=float)
    if s.shape[-1] < md:
        raise InvalidArgumentError(f"need {md} power sums, got {s.shape[-1]}")
    A = detector_weights(md, md).matrix()
    Q = _g(s[..., :md], md)
    D = Q @ A.T
    D0 = 1.0 - D.sum(axis=-1, keepdims=True)
    return np.concatenate([D0, D], axis=-1)


def invert_pixels(D: np.ndarray):
    """
    Apply T^-1 to detector probabilities of many pixels.

    Args:
        D: Array (..., md + 1) holding D_0..D_md per pixel

    Returns:
        Tuple (s, degenerate): power sums (..., md), zero where the
        recovered S_1 is not positive, and the boolean degenerate mask
    """
    D = np.asarray(D, dtype=float)
    md = D.shape[-1] - 1
    if md < 2:
        raise InvalidArgumentError("need at least two detector orders")
    lead = D.shape[:-1]
    rhs = D[..., 1:].reshape(-1, md).T
    A = detector_weights(md, md).matrix()
    Q = solve_triangular(A, rhs, lower=False).T.reshape(lead + (md,))
    # Back substitution from the highest order: Q~_md * md! = S_md
    S = [None] * (md + 1)
    for k in range(md, 0, -1):
        acc = math.factorial(k) * Q[..., k - 1]
        for j in range(1, md - k + 1):
            acc = acc - (-1) ** j / math.factorial(j) * S[j + k]
        S[k] = acc
    S = np.stack(S[1:], axis=-1)
    degenerate = ~(S[..., 0] > 0)
    safe = np.where(degenerate[..., None], 1.0, S)
    s = _S_to_s(safe, md)
    s[degenerate] = 0.0
    return s, degenerate


def inverse_T(D) -> np.ndarray:
    """
    Power sums s_1..s_md at one pixel from D_0..D_md.

    Raises:
        DegeneratePixelError: if the recovered S_1 is not positive
    """
    s, degenerate = invert_pixels(np.asarray(D, dtype=float)[None, :])
    if degenerate[0]:
        raise DegeneratePixelError("recovered S_1 is not positive; pixel carries no photons")
    return s[0]


def gamma_map(eps: np.ndarray) -> np.ndarray:
    """Largest single-marker detection probability per pixel, the bias proxy."""
    eps = np.asarray(eps)
    if eps.shape[0] == 0:
        return np.zeros(eps.shape[1:])
    return eps.max(axis=0)
