"""Synthetic phantom corpus: aligned multi-class ellipsoid volumes plus raw
file I/O and dataset splits.

Each subject is background plus C-1 ellipsoidal structures at canonical
z-positions, jittered a little per subject so subjects stay roughly aligned.
One structure is deliberately low-contrast so the segmentation task is not
trivially solvable from a handful of labels.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

DEFAULT_INTENSITIES = (0.10, 0.80, 0.50, 0.195)  # background, then classes 1..3
DEFAULT_CENTERS = ((8, 16, 16), (16, 16, 16), (24, 16, 16))
DEFAULT_RADII = ((3.5, 6.0, 6.0), (3.5, 7.0, 7.0), (3.5, 6.5, 6.5))


@dataclass(frozen=True)
class PhantomConfig:
    extents: tuple = (32, 32, 32)
    classes: int = 4
    intensities: tuple = DEFAULT_INTENSITIES
    centers: tuple = DEFAULT_CENTERS
    radii: tuple = DEFAULT_RADII
    jitter: float = 3.0
    radius_jitter: float = 1.5
    noise_sigma: float = 0.03
    intensity_offset: float = 0.15

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need background plus at least one structure")
        if len(self.intensities) != self.classes:
            raise ValueError("one intensity per class required")


@dataclass
class DatasetSplit:
    labeled: list = field(default_factory=list)
    unlabeled: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def all_ids(self):
        return self.labeled + self.unlabeled + self.test


def generate_phantom(subject_seed, cfg=PhantomConfig()):
    """One (volume, label map) pair; deterministic per subject seed."""
    rng = np.random.default_rng(subject_seed)
    grid = np.indices(cfg.extents, dtype=np.float64)
    labels = np.zeros(cfg.extents, dtype=np.uint8)
    for c in range(1, cfg.classes):
        center = np.asarray(cfg.centers[c - 1], dtype=np.float64)
        center = center + rng.uniform(-cfg.jitter, cfg.jitter, size=3)
        radii = np.asarray(cfg.radii[c - 1], dtype=np.float64)
        radii = radii + rng.uniform(-cfg.radius_jitter, cfg.radius_jitter, size=3)
        dist = sum(((grid[i] - center[i]) / radii[i]) ** 2 for i in range(3))
        labels[dist <= 1.0] = c
    volume = np.asarray(cfg.intensities, dtype=np.float64)[labels]
    # per-subject brightness offset: a whole-volume shift (class contrasts
    # unchanged) that models scanner/exposure variation across subjects
    volume = volume + rng.uniform(-cfg.intensity_offset, cfg.intensity_offset)
    volume = volume + rng.normal(0.0, cfg.noise_sigma, size=cfg.extents)
    return volume.astype(np.float32), labels


# -- raw volume I/O -----------------------------------------------------------------

_DTYPE_NAMES = {"float32": np.float32, "uint8": np.uint8}


def write_volume(path, array, classes=None):
    """Raw little-endian payload at `path` (.raw) plus a JSON sidecar."""
    array = np.asarray(array)
    if array.dtype.name not in _DTYPE_NAMES:
        raise ValueError(f"unsupported dtype {array.dtype}")
    header = {"extents": list(array.shape), "dtype": array.dtype.name}
    if classes is not None:
        header["classes"] = int(classes)
    with open(_sidecar(path), "w") as f:
        json.dump(header, f)
    array.astype(array.dtype.newbyteorder("<")).tofile(path)


def read_volume(path):
    try:
        with open(_sidecar(path)) as f:
            header = json.load(f)
        extents = tuple(int(e) for e in header["extents"])
        dtype = np.dtype(_DTYPE_NAMES[header["dtype"]]).newbyteorder("<")
    except (json.JSONDecodeError, KeyError) as exc:
        raise ValueError(f"corrupt volume header for {path}: {exc}") from exc
    expected = int(np.prod(extents)) * dtype.itemsize
    actual = os.path.getsize(path)
    if actual < expected:
        raise ValueError(f"truncated volume file {path}: "
                         f"{actual} bytes, expected {expected}")
    if actual != expected:
        raise ValueError(f"extent mismatch for {path}: header implies "
                         f"{expected} bytes, file has {actual}")
    data = np.fromfile(path, dtype=dtype, count=int(np.prod(extents)))
    return data.reshape(extents)


def _sidecar(path):
    base, _ = os.path.splitext(str(path))
    return base + ".json"


# -- corpus layout -----------------------------------------------------------------

def subject_dir(root, subject_id):
    return os.path.join(str(root), subject_id)


def write_subject(root, subject_id, volume, labels, classes):
    d = subject_dir(root, subject_id)
    os.makedirs(d, exist_ok=True)
    write_volume(os.path.join(d, "image.raw"), volume)
    write_volume(os.path.join(d, "label.raw"), labels, classes=classes)


def read_subject(root, subject_id, with_label=True):
    d = subject_dir(root, subject_id)
    volume = read_volume(os.path.join(d, "image.raw"))
    labels = read_volume(os.path.join(d, "label.raw")) if with_label else None
    return volume, labels


def generate_dataset(root, subjects, seed, cfg=PhantomConfig()):
    """Write `subjects` phantom subjects under `root`; returns their ids."""
    ids = [f"s{idx:03d}" for idx in range(subjects)]
    for idx, sid in enumerate(ids):
        volume, labels = generate_phantom([seed, idx], cfg)
        write_subject(root, sid, volume, labels, cfg.classes)
    return ids


def make_split(subject_ids, n_labeled, m_unlabeled, n_test, seed):
    """Deterministic disjoint labeled/unlabeled/test split."""
    total = n_labeled + m_unlabeled + n_test
    if total > len(subject_ids):
        raise ValueError(f"split needs {total} subjects, have {len(subject_ids)}")
    if n_labeled < 1:
        raise ValueError("need at least one labeled subject")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(subject_ids))
    return DatasetSplit(labeled=order[:n_labeled],
                        unlabeled=order[n_labeled:n_labeled + m_unlabeled],
                        test=order[n_labeled + m_unlabeled:total])


def write_split(path, split):
    with open(path, "w") as f:
        for section, ids in (("labeled", split.labeled),
                             ("unlabeled", split.unlabeled),
                             ("test", split.test)):
            f.write(f"[{section}]\n")
            for sid in ids:
                f.write(sid + "\n")


def read_split(path):
    split = DatasetSplit()
    sections = {"labeled": split.labeled, "unlabeled": split.unlabeled,
                "test": split.test}
    current = None
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                name = line[1:-1]
                if name not in sections:
                    raise ValueError(f"unknown split section '{name}'")
                current = sections[name]
            elif current is None:
                raise ValueError("split manifest has ids before any section")
            else:
                current.append(line)
    return split
