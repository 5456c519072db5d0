"""Contrastive sample construction from unlabeled volumes.

Two strategies: cubes cropped at per-class centers located from pseudo-labels
(anatomical-aware), and corresponding through-plane partitions across roughly
aligned subjects (region-aware). Both emit a ContrastiveBatch whose first
half of views belongs to the student branch and second half to the teacher.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import AugmentRanges, apply_transform, sample_transform
from .losses import ContrastiveBatch
from .model import segment


class DegeneratePseudoLabelsError(RuntimeError):
    """Raised when pseudo-labels contain no foreground to sample from."""


@dataclass(frozen=True)
class AacsConfig:
    cubes: int = 8              # K
    cube_edge: int = 12
    classes: int = 4

    def __post_init__(self):
        if self.cubes < self.classes:
            raise ValueError(f"need K >= C; got K={self.cubes}, C={self.classes}")


@dataclass(frozen=True)
class RacsConfig:
    partitions: int = 4         # S, along the z axis
    temperature: float = 0.1


def compute_pseudo_labels(student, volume):
    """Per-voxel argmax of the student decoder on one volume."""
    return segment(student, np.asarray(volume))


def anatomical_centers(labels, classes):
    """Rounded center of mass per class; absent classes are omitted."""
    labels = np.asarray(labels)
    centers = {}
    for c in range(classes):
        coords = np.argwhere(labels == c)
        if coords.size:
            centers[c] = tuple(int(v) for v in np.round(coords.mean(axis=0)))
    return centers


def _clamp_center(center, edge, extents):
    half = edge // 2
    return tuple(int(np.clip(c, half, e - (edge - half)))
                 for c, e in zip(center, extents))


def _crop(volume, center, edge):
    half = edge // 2
    sl = tuple(slice(c - half, c - half + edge) for c in center)
    return volume[sl]


def aacs_batch(volumes, pseudo_labels, cfg, seed,
               ranges=AugmentRanges(), temperature=0.1):
    """K cubes (one per present class center, rest at random foreground),
    each augmented into a student view and a teacher view.

    Every anchor has exactly one positive (the other view of its cube) and
    the 2(K-1) views of the other cubes as negatives.
    """
    volumes = [np.asarray(v) for v in volumes]
    pseudo_labels = [np.asarray(l) for l in pseudo_labels]
    extents = volumes[0].shape
    rng = np.random.default_rng(seed)

    # (volume index, center) slots: class coverage first, then random foreground
    slots = []
    for c in range(cfg.classes):
        for vi in rng.permutation(len(volumes)):
            centers = anatomical_centers(pseudo_labels[vi], cfg.classes)
            if c in centers:
                slots.append((int(vi), centers[c]))
                break
        if len(slots) == cfg.cubes:
            break
    foreground = [np.argwhere(pl != 0) for pl in pseudo_labels]
    if all(len(f) == 0 for f in foreground):
        raise DegeneratePseudoLabelsError(
            "pseudo-labels contain no foreground voxels")
    while len(slots) < cfg.cubes:
        vi = int(rng.integers(0, len(volumes)))
        if len(foreground[vi]) == 0:
            continue
        pick = foreground[vi][int(rng.integers(0, len(foreground[vi])))]
        slots.append((vi, tuple(int(x) for x in pick)))
    slots = slots[:cfg.cubes]

    k = cfg.cubes
    student_views, teacher_views = [], []
    for ci, (vi, center) in enumerate(slots):
        center = _clamp_center(center, cfg.cube_edge, extents)
        cube = _crop(volumes[vi], center, cfg.cube_edge)
        for view, bucket in ((0, student_views), (1, teacher_views)):
            spec = sample_transform(rng.integers(0, 2 ** 63), ranges)
            out, _ = apply_transform(cube, None, spec,
                                     elastic_grid=ranges.elastic_grid)
            bucket.append(out)

    views = student_views + teacher_views
    pairs, negatives = [], []
    for a in range(2 * k):
        partner = a + k if a < k else a - k
        pairs.append((a, partner))
        negatives.append(np.array([i for i in range(2 * k)
                                   if i != a and i != partner]))
    return ContrastiveBatch(pairs=pairs, negatives=negatives,
                            temperature=temperature, views=views,
                            student_idx=np.arange(k))


def racs_batch(volumes, cfg, seed, ranges=AugmentRanges(), temperature=0.1):
    """Corresponding z-partitions across subjects as positives.

    Each subject volume is augmented into two whole-volume views, then split
    into S partitions. All views sharing a partition index are mutual
    positives (expanded pairwise); everything else is a negative.
    """
    volumes = [np.asarray(v) for v in volumes]
    if len(volumes) < 2:
        raise ValueError("region-aware sampling needs at least 2 subjects")
    depth = volumes[0].shape[0]
    if any(v.shape != volumes[0].shape for v in volumes):
        raise ValueError("subject volumes must share extents")
    if depth % cfg.partitions:
        raise ValueError(f"depth {depth} not divisible by S={cfg.partitions}")
    pdepth = depth // cfg.partitions
    rng = np.random.default_rng(seed)

    # view index = branch * (n_subj * S) + subject * S + partition
    n = len(volumes)
    s = cfg.partitions
    student_views = [None] * (n * s)
    teacher_views = [None] * (n * s)
    for si, vol in enumerate(volumes):
        for branch, bucket in ((0, student_views), (1, teacher_views)):
            spec = sample_transform(rng.integers(0, 2 ** 63), ranges)
            out, _ = apply_transform(vol, None, spec,
                                     elastic_grid=ranges.elastic_grid)
            for p in range(s):
                bucket[si * s + p] = out[p * pdepth:(p + 1) * pdepth]

    views = student_views + teacher_views
    total = 2 * n * s
    part_of = np.array([i % s for i in range(n * s)] * 2)
    pairs, negatives = [], []
    for a in range(total):
        mates = np.flatnonzero(part_of == part_of[a])
        negs = np.flatnonzero(part_of != part_of[a])
        for m in mates:
            if m != a:
                pairs.append((a, int(m)))
                negatives.append(negs)
    return ContrastiveBatch(pairs=pairs, negatives=negatives,
                            temperature=temperature, views=views,
                            student_idx=np.arange(n * s))
