import numpy as np
import pytest

from services.hybridize import hybridize
from services.scan import Box, BoxSet, prune_minimal
from services.watershed import Segmentation
from tests.conftest import random_instance, roiset_is_valid

N = 16


def _labels(*blocks):
    """Label map from (row0, row1, col0, col1) blocks, labelled 1, 2, ... in order."""
    labels = np.zeros((N, N), dtype=np.int64)
    for label, (r0, r1, c0, c1) in enumerate(blocks, 1):
        labels[r0:r1, c0:c1] = label
    return Segmentation(labels=labels)


def _block(r0, r1, c0, c1):
    mask = np.zeros((N, N), dtype=bool)
    mask[r0:r1, c0:c1] = True
    return mask


def test_segment_containing_a_box_is_kept():
    seg = _labels((2, 6, 2, 6))
    rois = hybridize(BoxSet(boxes=(Box(3, 3, 2, 2),)), seg)
    assert len(rois) == 1
    np.testing.assert_array_equal(rois.regions[0].mask, _block(2, 6, 2, 6))
    assert rois.regions[0].boxes == (Box(3, 3, 2, 2),)


def test_segment_without_box_is_dropped():
    seg = _labels((2, 6, 2, 6), (10, 14, 10, 14))
    rois = hybridize(BoxSet(boxes=(Box(3, 3, 2, 2),)), seg)
    assert len(rois) == 1
    np.testing.assert_array_equal(rois.regions[0].mask, _block(2, 6, 2, 6))


def test_segment_is_merged_with_an_overlapping_box():
    seg = _labels((2, 6, 2, 6))
    box = Box(4, 4, 4, 4)
    rois = hybridize(BoxSet(boxes=(box,)), seg)
    assert len(rois) == 1
    np.testing.assert_array_equal(rois.regions[0].mask, _block(2, 6, 2, 6) | box.mask(N))


def test_smallest_merge_is_chosen():
    seg = _labels((4, 8, 4, 8))
    small, large = Box(2, 4, 3, 3), Box(6, 7, 4, 4)
    rois = hybridize(BoxSet(boxes=(large, small)), seg)
    assert len(rois) == 1
    np.testing.assert_array_equal(rois.regions[0].mask, _block(4, 8, 4, 8) | small.mask(N))
    assert rois.regions[0].boxes == (small,)


def test_shared_box_merges_both_segments():
    seg = _labels((2, 6, 2, 6), (2, 6, 6, 10))
    box = Box(3, 4, 2, 4)
    rois = hybridize(BoxSet(boxes=(box,)), seg)
    assert len(rois) == 1
    region = rois.regions[0]
    np.testing.assert_array_equal(region.mask, _block(2, 6, 2, 10))
    assert region.segments == (1, 2)


def test_neighbour_needing_a_merge_avoids_the_extra_box():
    seg = _labels((2, 6, 2, 6), (2, 6, 6, 10))
    own, shared = Box(0, 0, 3, 3), Box(3, 4, 2, 4)
    rois = hybridize(BoxSet(boxes=(own, shared)), seg)
    assert len(rois) == 1
    np.testing.assert_array_equal(rois.regions[0].mask, _block(2, 6, 2, 10))
    assert rois.regions[0].area == 32


def test_bridge_box_joins_both_segments():
    seg = _labels((2, 6, 2, 6), (2, 6, 8, 12))
    inside, bridge = Box(3, 3, 2, 2), Box(4, 5, 2, 4)
    rois = hybridize(BoxSet(boxes=(inside, bridge), statistics=(10.0, 5.0)), seg)
    assert rois.is_valid()
    assert len(rois) == 1
    assert rois.regions[0].segments == (1, 2)


def test_box_touching_a_validated_region_merges_into_it():
    seg = _labels((2, 6, 2, 6), (8, 12, 8, 12))
    first, second = Box(4, 4, 4, 4), Box(6, 7, 3, 2)
    # the first segment grows over (6, 7); the second box then reaches that region
    rois = hybridize(BoxSet(boxes=(first, second), statistics=(10.0, 5.0)), seg)
    assert rois.is_valid()
    assert len(rois) == 1
    region = rois.regions[0]
    assert region.segments == (1, 2)
    assert region.mask[2, 2] and region.mask[11, 11] and region.mask[8, 7]


def test_no_boxes_gives_empty_roiset():
    rois = hybridize(BoxSet(), _labels((2, 6, 2, 6)))
    assert len(rois) == 0
    assert rois.labels().sum() == 0


def test_region_ids_follow_position():
    seg = _labels((10, 14, 10, 14), (2, 6, 2, 6))
    boxes = BoxSet(boxes=(Box(11, 11, 2, 2), Box(3, 3, 2, 2)))
    rois = hybridize(boxes, seg)
    assert rois.ids == [1, 2]
    assert rois.regions[0].mask[2, 2] and rois.regions[1].mask[10, 10]


@pytest.mark.parametrize("seed", range(5))
def test_random_instances_are_valid(seed):
    rng = np.random.default_rng(seed)
    for _ in range(100):
        labels, boxes = random_instance(rng)
        pruned = prune_minimal(BoxSet(boxes=tuple(boxes)))
        rois = hybridize(pruned, Segmentation(labels=labels))
        assert roiset_is_valid(rois, pruned.boxes)
        assert rois.is_valid()


FIXED_INSTANCES = [
    ([(2, 6, 2, 6)], [Box(3, 3, 2, 2)]),
    ([(2, 6, 2, 6), (10, 14, 10, 14)], [Box(3, 3, 2, 2)]),
    ([(4, 8, 4, 8)], [Box(6, 7, 4, 4), Box(2, 4, 3, 3)]),
    ([(2, 6, 2, 6), (2, 6, 6, 10)], [Box(3, 4, 2, 4)]),
    ([(2, 6, 2, 6), (2, 6, 6, 10)], [Box(0, 0, 3, 3), Box(3, 4, 2, 4)]),
    ([(2, 6, 2, 6), (2, 6, 8, 12)], [Box(3, 3, 2, 2), Box(4, 5, 2, 4)]),
    ([(2, 6, 2, 6), (8, 12, 8, 12)], [Box(4, 4, 4, 4), Box(6, 7, 3, 2)]),
]


@pytest.mark.parametrize("blocks, boxes", FIXED_INSTANCES)
def test_removing_a_box_never_revives_a_segment(blocks, boxes):
    seg = _labels(*blocks)
    kept = {s for r in hybridize(BoxSet(boxes=tuple(boxes)), seg) for s in r.segments}
    for i in range(len(boxes)):
        fewer = tuple(b for j, b in enumerate(boxes) if j != i)
        survivors = {s for r in hybridize(BoxSet(boxes=fewer), seg) for s in r.segments}
        assert survivors <= kept
