"""Stochastic view construction for 3-D volumes.

Five transforms: intensity shift, elastic deformation, flip, scale, rotation.
The geometric part is composed into a single backward coordinate map and
applied with one interpolation pass (trilinear for images, nearest for
labels), so a spec is fully reproducible and labels follow the image
geometry exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentRanges:
    intensity: tuple = (-0.2, 0.2)
    scale: tuple = (0.9, 1.1)
    rotation_deg: tuple = (-15.0, 15.0)
    flip_prob: float = 0.5
    elastic_grid: int = 4
    elastic_sigma: float = 2.0

    @staticmethod
    def identity():
        return AugmentRanges(intensity=(0.0, 0.0), scale=(1.0, 1.0),
                             rotation_deg=(0.0, 0.0), flip_prob=0.0,
                             elastic_sigma=0.0)


@dataclass(frozen=True)
class TransformSpec:
    intensity_shift: float
    scale: float
    rotation_axis: int          # 0, 1 or 2 (z, y, x)
    rotation_deg: float
    flip_axes: tuple            # subset of (0, 1, 2)
    elastic_field: tuple | None  # (3, g, g, g) control-grid displacements

    def is_identity(self):
        return (self.intensity_shift == 0.0 and self.scale == 1.0
                and self.rotation_deg == 0.0 and not self.flip_axes
                and self.elastic_field is None)


def sample_transform(seed, ranges=AugmentRanges()):
    """Draw one TransformSpec; identical seeds give identical specs."""
    rng = np.random.default_rng(seed)
    delta = rng.uniform(*ranges.intensity)
    scale = rng.uniform(*ranges.scale)
    axis = int(rng.integers(0, 3))
    angle = rng.uniform(*ranges.rotation_deg)
    flips = tuple(a for a in range(3) if rng.random() < ranges.flip_prob)
    field_arr = None
    if ranges.elastic_sigma > 0:
        field_arr = tuple(rng.normal(0.0, ranges.elastic_sigma,
                                     size=3 * ranges.elastic_grid ** 3))
    return TransformSpec(intensity_shift=float(delta), scale=float(scale),
                         rotation_axis=axis, rotation_deg=float(angle),
                         flip_axes=flips, elastic_field=field_arr)


def _rotation_matrix(axis, deg):
    th = np.deg2rad(deg)
    c, s = np.cos(th), np.sin(th)
    m = np.eye(3)
    a, b = [i for i in range(3) if i != axis]
    m[a, a], m[a, b], m[b, a], m[b, b] = c, -s, s, c
    return m


def _elastic_displacement(spec, extents, grid):
    field = np.asarray(spec.elastic_field, dtype=np.float64).reshape(
        3, grid, grid, grid)
    coords = np.indices(extents, dtype=np.float64)
    disp = np.empty_like(coords)
    for axis in range(3):
        scaled = [coords[i] * (grid - 1) / max(extents[i] - 1, 1)
                  for i in range(3)]
        disp[axis] = ndimage.map_coordinates(field[axis], scaled, order=1,
                                             mode="nearest")
    return disp


def _backward_coords(spec, extents, elastic_grid=4):
    """Input-space sample coordinates for each output voxel.

    Image = flip(elastic(rotate(scale(input)))); the backward map applies the
    stages' inverses in reverse order.
    """
    coords = np.indices(extents, dtype=np.float64)
    center = (np.asarray(extents, dtype=np.float64) - 1.0) / 2.0
    for axis in spec.flip_axes:
        coords[axis] = (extents[axis] - 1) - coords[axis]
    if spec.elastic_field is not None:
        coords = coords + _elastic_displacement(spec, extents, elastic_grid)
    if spec.rotation_deg != 0.0:
        rot = _rotation_matrix(spec.rotation_axis, -spec.rotation_deg)
        flat = coords.reshape(3, -1) - center[:, None]
        coords = (rot @ flat + center[:, None]).reshape(coords.shape)
    if spec.scale != 1.0:
        coords = (coords - center[:, None, None, None]) / spec.scale \
            + center[:, None, None, None]
    return coords


def apply_transform(volume, label_map, spec, elastic_grid=4):
    """Transform an image (and optionally its label map) by one spec.

    Geometric order: scale, rotate, elastic, flip; then the intensity shift
    on the image only. Out-of-bounds voxels become 0 (background).
    """
    volume = np.asarray(volume)
    needs_resample = not (spec.scale == 1.0 and spec.rotation_deg == 0.0
                          and spec.elastic_field is None and not spec.flip_axes)
    if needs_resample:
        coords = _backward_coords(spec, volume.shape, elastic_grid)
        out = ndimage.map_coordinates(volume.astype(np.float64), coords,
                                      order=1, mode="constant", cval=0.0)
        out = out.astype(volume.dtype if volume.dtype.kind == "f"
                         else np.float32)
        out_label = None
        if label_map is not None:
            out_label = ndimage.map_coordinates(label_map, coords, order=0,
                                                mode="constant", cval=0)
    else:
        out = volume.astype(volume.dtype if volume.dtype.kind == "f"
                            else np.float32, copy=True)
        out_label = None if label_map is None else label_map.copy()
    if spec.intensity_shift:
        out = out + np.asarray(spec.intensity_shift, dtype=out.dtype)
    return out, out_label
