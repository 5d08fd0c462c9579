"""
Hybrid segmentation: validate each watershed segment with a selected box.

A segment containing a box is kept. Otherwise it is merged with the box that
gives the smallest region, first among boxes touching no other segment,
then together with the neighboring segment sharing the box, and finally
into an already validated region the box touches. Every resulting region
contains a whole box, so a box-level guarantee that each box holds a marker
carries over to the regions, and regions stay disjoint.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from services.scan import Box, BoxSet
from services.watershed import Segmentation
from utils.logger import logger


@dataclass(frozen=True)
class Region:
    """One validated region with the boxes validating it and the segments merged into it."""

    id: int
    mask: np.ndarray
    boxes: Tuple[Box, ...]
    segments: Tuple[int, ...]

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def pixels(self) -> np.ndarray:
        """0-based (row, column) pairs."""
        return np.argwhere(self.mask)


@dataclass(frozen=True)
class RoiSet:
    """Disjoint validated regions on an n x n grid."""

    n: int
    regions: Tuple[Region, ...] = ()

    def __len__(self) -> int:
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)

    @property
    def ids(self) -> List[int]:
        return [r.id for r in self.regions]

    def labels(self) -> np.ndarray:
        out = np.zeros((self.n, self.n), dtype=np.int64)
        for r in self.regions:
            out[r.mask] = r.id
        return out

    def is_valid(self) -> bool:
        """Regions pairwise disjoint and each containing one of its boxes."""
        cover = np.zeros((self.n, self.n), dtype=int)
        for r in self.regions:
            cover += r.mask
            if not r.boxes or not any(r.mask[b.slices].all() for b in r.boxes):
                return False
        return bool(cover.max(initial=0) <= 1)


def _bbox_key(mask: np.ndarray) -> Tuple[int, int]:
    rows, cols = np.nonzero(mask)
    return int(rows.min()), int(cols.min())


class _Hybridizer:
    """Segment/box incidence state for one hybridization run."""

    def __init__(self, boxes: BoxSet, seg: Segmentation):
        self.n = seg.n
        self.boxes = list(boxes.boxes)
        self.stats = list(boxes.statistics) if boxes.statistics else [0.0] * len(self.boxes)
        self.territory = seg.labels.copy()
        self.owner = np.zeros_like(self.territory)
        self.regions: Dict[int, dict] = {}
        self.next_id = 1
        self.dropped: List[int] = []

    def _touching(self, wmask: np.ndarray) -> List[int]:
        return [i for i, b in enumerate(self.boxes) if wmask[b.slices].any()]

    def _finalize(self, mask: np.ndarray, boxes: List[Box], segments: List[int],
                  merge_into: Optional[List[int]] = None) -> None:
        if merge_into:
            rid = min(merge_into)
            for other in merge_into:
                info = self.regions.pop(other)
                mask = mask | info["mask"]
                boxes = info["boxes"] + boxes
                segments = info["segments"] + segments
        else:
            rid = self.next_id
            self.next_id += 1
        self.regions[rid] = {"mask": mask, "boxes": boxes, "segments": segments}
        self.owner[mask] = rid
        # box pixels leave every other segment's territory right away
        self.territory[mask] = 0

    def _self_sufficient(self, label: int, wmask: np.ndarray, touching: List[int]) -> bool:
        """True if some box lies inside the segment or touches no other segment."""
        for i in touching:
            box = self.boxes[i]
            if wmask[box.slices].all():
                return True
            if not (set(np.unique(self.territory[box.slices])) - {0, label}):
                return True
        return False

    def order(self) -> List[int]:
        """
        Processing order: segments that can only be validated together with a
        neighbor come first, then by decreasing box statistic and label.
        """
        keys = {}
        for label in np.unique(self.territory):
            if label == 0:
                continue
            label = int(label)
            wmask = self.territory == label
            touching = self._touching(wmask)
            if not touching:
                self.dropped.append(label)
                continue
            strength = max(self.stats[i] for i in touching)
            keys[label] = (self._self_sufficient(label, wmask, touching), -strength, label)
        return sorted(keys, key=keys.get)

    def validate(self, label: int, done: set) -> None:
        wmask = self.territory == label
        if not wmask.any():
            self.dropped.append(label)
            return
        touching = self._touching(wmask)
        if not touching:
            self.dropped.append(label)
            return

        contained = [self.boxes[i] for i in touching if wmask[self.boxes[i].slices].all()]
        if contained:
            self._finalize(wmask, contained, [label])
            return

        exclusive, shared, into_region = [], [], []
        for i in touching:
            box = self.boxes[i]
            bmask = box.mask(self.n)
            others = set(np.unique(self.territory[box.slices])) - {0, label}
            regions = sorted(set(np.unique(self.owner[box.slices])) - {0})
            if regions:
                merged = wmask | bmask
                for rid in regions:
                    merged = merged | self.regions[rid]["mask"]
                into_region.append((merged, box, [], regions))
            elif not others:
                exclusive.append((wmask | bmask, box, [], None))
            else:
                for other in sorted(others):
                    merged = wmask | bmask | (self.territory == other)
                    shared.append((merged, box, [int(other)], None))

        for tier in (exclusive, shared, into_region):
            if tier:
                mask, box, partners, regions = min(
                    tier, key=lambda c: (int(c[0].sum()), _bbox_key(c[0]), c[1]))
                done.update(partners)
                self._finalize(mask, [box], [label] + partners, regions)
                return


def hybridize(boxes: BoxSet, seg: Segmentation) -> RoiSet:
    """
    Merge pruned boxes with a disjoint segmentation into validated regions.

    Args:
        boxes: Pruned selected boxes, with statistics for ordering
        seg: Disjoint segmentation

    Returns:
        RoiSet; empty when there are no boxes
    """
    if len(boxes) == 0:
        return RoiSet(n=seg.n)
    state = _Hybridizer(boxes, seg)
    done: set = set()
    for label in state.order():
        if label in done:
            continue
        done.add(label)
        state.validate(label, done)

    regions = []
    for new_id, rid in enumerate(sorted(state.regions, key=lambda r: _bbox_key(state.regions[r]["mask"])), 1):
        info = state.regions[rid]
        mask = info["mask"].copy()
        mask.setflags(write=False)
        regions.append(Region(
            id=new_id,
            mask=mask,
            boxes=tuple(dict.fromkeys(info["boxes"])),
            segments=tuple(sorted(set(info["segments"]))),
        ))
    logger.info(f"Hybridization: {len(seg)} segments, {len(boxes)} boxes -> "
                f"{len(regions)} regions ({len(state.dropped)} segments dropped)")
    return RoiSet(n=seg.n, regions=tuple(regions))
