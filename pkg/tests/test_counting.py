import math

import numpy as np
import pytest
from scipy.linalg import block_diag
from scipy.stats import kstest

from services.counting import (
    CountEstimate,
    EnlargedRegion,
    bias_threshold,
    build_molecular_map,
    confidence_intervals,
    delta_variance,
    reciprocal_bounds,
    standardized_error,
    enlarge_regions,
    estimate_background,
    estimate_counts,
    gradient_psi,
    multinomial_covariance,
    psi,
    region_covariance,
    truth_counts,
)
from services.hybridize import Region, RoiSet
from services.model import GroundTruth, gaussian_psf, psf_power_sums
from services.phantoms import single
from services.scan import Box
from services.simulator import CoincidenceImage, expected_probabilities, simulate_image
from tests.conftest import noiseless_image
from utils.errors import InvalidArgumentError


def _point_roiset(n, *centers):
    regions = []
    for rid, (row, col) in enumerate(centers, 1):
        mask = np.zeros((n, n), dtype=bool)
        mask[row, col] = True
        regions.append(Region(id=rid, mask=mask, boxes=(Box(row, col, 1, 1),), segments=(rid,)))
    return RoiSet(n=n, regions=tuple(regions))


def _whole(n, rid=1):
    mask = np.ones((n, n), dtype=bool)
    return EnlargedRegion(region_id=rid, base=mask, mask=mask, eps_px=0.0)


def _flat(D):
    return D.reshape(-1, D.shape[-1])


def test_psi_is_exact_on_expected_probabilities(confocal_psf):
    H = psf_power_sums(confocal_psf, 2)
    gt = single(32, 3, 0.02)
    D = _flat(expected_probabilities(gt, confocal_psf, 4))
    assert psi(D, H) == pytest.approx(3.0, rel=1e-8)


@pytest.mark.parametrize("factor", [0.25, 0.5, 2.0])
def test_psi_ignores_brightness_scale(confocal_psf, factor):
    H = psf_power_sums(confocal_psf, 2)
    gt = single(32, 3, 0.02).scaled(factor)
    D = _flat(expected_probabilities(gt, confocal_psf, 4))
    assert psi(D, H) == pytest.approx(3.0, rel=1e-7)


def test_estimate_counts_on_noiseless_image(confocal_psf):
    H = psf_power_sums(confocal_psf, 2)
    image = noiseless_image(single(32, 3, 0.02), confocal_psf, 4)
    (est,) = estimate_counts(image, [_whole(32)], H, background=0.0)
    assert est.identified
    assert est.N_hat == pytest.approx(3.0, rel=1e-4)
    assert est.p_hat == pytest.approx(0.02, rel=1e-4)
    assert est.n_pixels == 32 * 32


def test_enlarge_regions_by_distance():
    rois = _point_roiset(16, (8, 8))
    (same,) = enlarge_regions(rois, 0.0)
    np.testing.assert_array_equal(same.mask, rois.regions[0].mask)
    (grown,) = enlarge_regions(rois, 2.0)
    assert grown.mask.sum() == 13
    assert grown.base[8, 8] and grown.mask[6, 8] and not grown.mask[6, 7]
    with pytest.raises(InvalidArgumentError):
        enlarge_regions(rois, -1.0)


def test_enlarged_regions_stay_disjoint():
    rois = _point_roiset(16, (8, 5), (8, 9))
    a, b = enlarge_regions(rois, 3.0)
    assert not (a.mask & b.mask).any()
    # the equidistant column belongs to nobody
    assert not a.mask[8, 7] and not b.mask[8, 7]
    assert a.mask[8, 6] and b.mask[8, 8]


def test_enlarge_empty_roiset():
    assert enlarge_regions(RoiSet(n=8), 2.0) == []


def _cluster_probabilities():
    psf = gaussian_psf(2.0)
    gt = single(16, 3, 0.05)
    return _flat(expected_probabilities(gt, psf, 4)), psf_power_sums(psf, 2), gt, psf


def test_gradient_matches_plain_difference_quotient():
    D, H, _, _ = _cluster_probabilities()
    grad = gradient_psi(D, H)
    delta = 1e-5
    for pixel in np.flatnonzero(D[:, 1] > 1e-3)[:5]:
        for k in (1, 2):
            up, down = D.copy(), D.copy()
            up[pixel, k] += delta
            up[pixel, 0] -= delta
            down[pixel, k] -= delta
            down[pixel, 0] += delta
            quotient = (psi(up, H) - psi(down, H)) / (2 * delta)
            assert grad[pixel, k - 1] == pytest.approx(quotient, rel=1e-3, abs=1e-6 * np.abs(grad).max())


def test_gradient_is_orthogonal_to_brightness_scaling():
    D, H, gt, psf = _cluster_probabilities()
    grad = gradient_psi(D, H)
    h = 1e-4
    up = _flat(expected_probabilities(gt.scaled(1 + h), psf, 4))
    down = _flat(expected_probabilities(gt.scaled(1 - h), psf, 4))
    direction = (up - down)[:, 1:] / (2 * h)
    assert abs(np.sum(grad * direction)) <= 1e-4 * np.sum(np.abs(grad * direction))


def test_multinomial_covariance():
    E = np.array([0.7, 0.2, 0.08, 0.02])
    cov = multinomial_covariance(E)
    np.testing.assert_allclose(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() >= -1e-15
    np.testing.assert_allclose(cov @ np.ones(3), E[1:] * (1 - E[1:].sum()))


def test_delta_variance_matches_block_diagonal_product():
    rng = np.random.default_rng(0)
    E = rng.dirichlet(np.ones(5), size=6)
    grad = rng.normal(size=(6, 4))
    cov = region_covariance(E)
    np.testing.assert_allclose(cov, block_diag(*[multinomial_covariance(e) for e in E]))
    assert delta_variance(grad, E) == pytest.approx(grad.ravel() @ cov @ grad.ravel())


def _cluster_image(confocal_psf, seed=0, t=100_000):
    gt = single(32, 5, 0.02)
    return gt, simulate_image(gt, confocal_psf, t=t, md=4, seed=seed)


def test_confidence_interval_on_simulated_cluster(confocal_psf):
    H = psf_power_sums(confocal_psf, 2)
    gt, image = _cluster_image(confocal_psf)
    regions = enlarge_regions(_point_roiset(32, (15, 15)), 8.0)
    counts = estimate_counts(image, regions, H, background=0.0)
    (one,) = confidence_intervals(counts, image, alpha=0.1, M=1)
    (many,) = confidence_intervals(counts, image, alpha=0.1, M=10)
    assert one.ci[0] <= one.N_hat <= one.ci[1]
    assert one.ci[0] >= 1.0
    assert 0 < one.sigma < math.inf
    assert many.ci[1] - many.N_hat > one.ci[1] - one.N_hat
    assert one.t == image.t and one.md == 4
    assert "non-identified" not in one.flags


def test_non_identified_region_gets_trivial_interval():
    counts = np.array([800, 100, 100, 0, 0], dtype=np.int64).reshape(5, 1, 1)
    image = CoincidenceImage(n=1, md=4, t=1000, mode="confocal", counts=counts)
    H = psf_power_sums(gaussian_psf(2.0), 2)
    (est,) = estimate_counts(image, [_whole(1)], H, background=0.0)
    assert not est.identified and est.N_hat == math.inf
    (ci,) = confidence_intervals([est], image, alpha=0.1, M=1)
    assert ci.ci == (1.0, math.inf)
    assert "non-identified" in ci.flags


def test_confidence_interval_argument_checks(confocal_psf):
    _, image = _cluster_image(confocal_psf, t=1000)
    with pytest.raises(InvalidArgumentError):
        confidence_intervals([], image, alpha=0.1, M=0)
    with pytest.raises(InvalidArgumentError):
        confidence_intervals([], image, alpha=1.5, M=1)


def test_background_estimate():
    psf = gaussian_psf(4.0)
    quiet = simulate_image(GroundTruth(n=64), psf, t=3000, md=4, seed=0)
    assert estimate_background(quiet, 8.0) == 0.0
    noisy = simulate_image(GroundTruth(n=64), psf, t=3000, md=4, seed=0, background_rate=0.002)
    assert estimate_background(noisy, 8.0) == pytest.approx(0.002, rel=0.2)


def test_bias_threshold():
    assert bias_threshold(2) == 10
    assert bias_threshold(4) == 40
    assert bias_threshold(8) == 150


def test_build_molecular_map_checks_ids():
    rois = _point_roiset(8, (2, 2), (5, 5))
    estimates = [_estimate(2), _estimate(1)]
    mmap = build_molecular_map(rois, estimates, alpha=0.1)
    assert [e.region_id for e in mmap.estimates] == [1, 2]
    assert mmap.M == 2 and mmap.estimate(2).region_id == 2
    with pytest.raises(InvalidArgumentError):
        build_molecular_map(rois, estimates[:1], alpha=0.1)
    empty = build_molecular_map(RoiSet(n=8), [], alpha=0.1)
    assert empty.M == 0


def _estimate(rid):
    return CountEstimate(region_id=rid, N_hat=2.0, p_hat=0.01, sigma=1.0, ci=(1.0, 3.0), t=100, md=4)


def test_truth_counts():
    gt = single(16, 3, 0.02)
    rois = _point_roiset(16, (7, 7), (2, 2))
    assert truth_counts(gt, rois) == {1: 3, 2: 0}
    assert truth_counts(GroundTruth(n=16), rois) == {1: 0, 2: 0}


def test_reciprocal_bounds():
    lower, upper = reciprocal_bounds(10.0, 2.0)
    assert lower == pytest.approx(10.0 / 1.2) and upper == pytest.approx(10.0 / 0.8)
    assert lower < 10.0 < upper
    assert reciprocal_bounds(10.0, 10.0) == (5.0, math.inf)


def test_validated_region_bounds_start_at_one(confocal_psf):
    # a one-pixel region sees a small share of the marker's light, so N-hat < 1
    H = psf_power_sums(confocal_psf, 2)
    image = noiseless_image(single(32, 1, 0.02), confocal_psf, 4)
    base = _point_roiset(32, (15, 15)).regions[0].mask
    validated = EnlargedRegion(region_id=1, base=base, mask=base, eps_px=0.0)
    unvalidated = EnlargedRegion(region_id=2, base=base, mask=base, eps_px=0.0, validated=False)
    counts = estimate_counts(image, [validated, unvalidated], H, background=0.0)
    assert counts[0].N_hat < 1.0
    floored, free = confidence_intervals(counts, image, alpha=0.05, M=2)
    assert floored.ci == (1.0, 1.0)
    assert free.ci[0] < 1.0 and free.ci[0] <= free.N_hat <= free.ci[1]


def test_standardized_error_uses_the_reciprocal_scale():
    est = CountEstimate(region_id=1, N_hat=12.0, p_hat=0.02, sigma=50.0, ci=(9.0, 16.0), t=10_000, md=4)
    expected = math.sqrt(10_000) * (1 / 10 - 1 / 12) / (50.0 / 12 ** 2)
    assert standardized_error(est, 10) == pytest.approx(expected)
    assert standardized_error(est, 12) == 0.0
    blank = CountEstimate(region_id=1, N_hat=math.inf, p_hat=math.nan, sigma=math.inf, ci=(1.0, math.inf),
                          t=100, md=4)
    assert math.isnan(standardized_error(blank, 3))
    with pytest.raises(InvalidArgumentError):
        standardized_error(est, 0)


def test_gradient_along_the_ones_direction_is_finite():
    D, H, _, _ = _cluster_probabilities()
    grad = gradient_psi(D, H)
    along = grad.sum(axis=1)
    assert np.all(np.isfinite(along))
    pixel = int(np.argmax(D[:, 1]))
    delta = 1e-5
    up, down = D.copy(), D.copy()
    up[pixel, 1:] += delta
    up[pixel, 0] -= D.shape[1] * delta - delta
    down[pixel, 1:] -= delta
    down[pixel, 0] += D.shape[1] * delta - delta
    quotient = (psi(up, H) - psi(down, H)) / (2 * delta)
    assert along[pixel] == pytest.approx(quotient, rel=1e-3)


def test_background_estimate_ignores_clusters():
    psf = gaussian_psf(4.0)
    gt = GroundTruth.from_points(64, [(16, 16)] * 5 + [(40, 44)] * 8, 0.02)
    image = simulate_image(gt, psf, t=3000, md=4, seed=1, background_rate=0.002)
    assert estimate_background(image, 8.0) == pytest.approx(0.002, rel=0.2)


def test_few_detectors_under_count_large_clusters(confocal_psf):
    H = psf_power_sums(confocal_psf, 2)
    image = noiseless_image(single(32, 150, 0.02), confocal_psf, 4)
    regions = enlarge_regions(_point_roiset(32, (15, 15)), 8.0)
    (est,) = estimate_counts(image, regions, H, background=0.0)
    assert est.N_hat < 150 * 0.9


@pytest.mark.slow
def test_standardized_estimates_are_close_to_normal(confocal_psf):
    H = psf_power_sums(confocal_psf, 2)
    gt = single(32, 10, 0.02)
    regions = enlarge_regions(_point_roiset(32, (15, 15)), 8.0)
    z = []
    for seed in range(500):
        image = simulate_image(gt, confocal_psf, t=10_000, md=4, seed=seed)
        (est,) = confidence_intervals(estimate_counts(image, regions, H, 0.0), image, alpha=0.05, M=1)
        z.append(standardized_error(est, 10))
    assert not any(math.isnan(v) for v in z)
    assert kstest(z, "norm").statistic < 0.08
