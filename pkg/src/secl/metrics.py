"""Segmentation metrics (Dice, Jaccard, Hausdorff) and their aggregation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class EmptyForegroundError(ValueError):
    """Hausdorff distance is undefined when a mask has no foreground."""


def dice(pred, gt, cls):
    p = np.asarray(pred) == cls
    g = np.asarray(gt) == cls
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(p, g).sum() / denom


def jaccard(pred, gt, cls):
    p = np.asarray(pred) == cls
    g = np.asarray(gt) == cls
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return np.logical_and(p, g).sum() / union


def boundary_voxels(mask):
    """Foreground voxels with at least one 6-neighbor in the background."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(
        mask, structure=ndimage.generate_binary_structure(3, 1),
        border_value=0)
    return mask & ~interior


def hausdorff(pred_mask, gt_mask):
    """Symmetric Hausdorff distance between mask boundaries, in voxels."""
    p = boundary_voxels(pred_mask)
    g = boundary_voxels(gt_mask)
    if not p.any() or not g.any():
        raise EmptyForegroundError("Hausdorff undefined for empty foreground")
    # distance_transform_edt gives each voxel's distance to the nearest
    # boundary voxel of the other set
    dist_to_g = ndimage.distance_transform_edt(~g)
    dist_to_p = ndimage.distance_transform_edt(~p)
    return float(max(dist_to_g[p].max(), dist_to_p[g].max()))


@dataclass
class MetricTable:
    """Rows of (subject, class, dice, jaccard, hd) plus an aggregate row.

    `hd` is None when undefined (empty foreground on either side).
    `weights[(subject, cls)]` holds ground-truth voxel counts for the
    weighted aggregate.
    """
    rows: list = field(default_factory=list)
    weights: dict = field(default_factory=dict)

    def add(self, subject, cls, d, j, hd, gt_voxels):
        self.rows.append({"subject": subject, "class": cls,
                          "dice": d, "jaccard": j, "hd": hd})
        self.weights[(subject, cls)] = int(gt_voxels)

    def aggregate(self):
        """Voxel-count-weighted Dice/Jaccard; HD = max over subjects of each
        subject's mean per-class HD."""
        wsum = dsum = jsum = 0.0
        per_subject_hds = {}
        for row in self.rows:
            w = self.weights[(row["subject"], row["class"])]
            wsum += w
            dsum += w * row["dice"]
            jsum += w * row["jaccard"]
            if row["hd"] is not None:
                per_subject_hds.setdefault(row["subject"], []).append(row["hd"])
        agg_hd = max((float(np.mean(v)) for v in per_subject_hds.values()),
                     default=None)
        return {"dice": dsum / wsum if wsum else 1.0,
                "jaccard": jsum / wsum if wsum else 1.0,
                "hd": agg_hd}

    def write_csv(self, path):
        agg = self.aggregate()
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["subject", "class", "dice", "jaccard", "hd"])
            for row in self.rows:
                writer.writerow([row["subject"], row["class"],
                                 repr(float(row["dice"])),
                                 repr(float(row["jaccard"])),
                                 "" if row["hd"] is None else repr(float(row["hd"]))])
            writer.writerow(["aggregate", "all",
                             repr(float(agg["dice"])), repr(float(agg["jaccard"])),
                             "" if agg["hd"] is None else repr(float(agg["hd"]))])


def evaluate_segmentation(pred, gt, subject, classes, table=None, with_hd=True):
    """Append per-foreground-class rows for one subject to a MetricTable."""
    if table is None:
        table = MetricTable()
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("prediction/ground-truth extent mismatch")
    for cls in range(1, classes):
        d = dice(pred, gt, cls)
        j = jaccard(pred, gt, cls)
        hd = None
        if with_hd:
            try:
                hd = hausdorff(pred == cls, gt == cls)
            except EmptyForegroundError:
                hd = None
        table.add(subject, cls, d, j, hd, (gt == cls).sum())
    return table
