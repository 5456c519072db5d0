"""Toy-scale volumetric encoder / projector / decoder and checkpoint I/O.

The encoder is a U-Net-style pyramid (one 3x3x3 conv + ReLU per level,
max-pool between levels). The projector global-average-pools the bottleneck
and applies two affine layers. The decoder upsamples, concatenates skip
features and convolves back to input resolution; a final 1x1x1 conv maps
features to one logit channel per class. Only the student owns a decoder;
the teacher carries encoder and projector copies.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, no_grad

CHECKPOINT_MAGIC = b"SECL"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {0: np.float32, 1: np.float64, 2: np.uint8, 3: np.int64}
_TAG_FOR = {np.dtype(v): k for k, v in _DTYPE_TAGS.items()}


@dataclass(frozen=True)
class ArchConfig:
    extents: tuple = (32, 32, 32)
    levels: int = 4
    base_channels: int = 8
    emb_dim: int = 64
    proj_hidden: int = 128
    classes: int = 4
    in_channels: int = 1

    def __post_init__(self):
        factor = 2 ** (self.levels - 1)
        if any(e % factor for e in self.extents):
            raise ValueError(f"extents {self.extents} not divisible by {factor}")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.emb_dim < 2:
            raise ValueError("embedding dimension must be >= 2")

    def channels(self, level):
        return self.base_channels * 2 ** level


@dataclass
class ModelParams:
    arch: ArchConfig
    params: dict = field(default_factory=dict)
    has_decoder: bool = True

    def encoder_projector_names(self):
        return [n for n in self.params
                if n.startswith("enc") or n.startswith("proj")]

    def copy(self):
        return ModelParams(
            self.arch,
            {n: Tensor(p.data.copy(), requires_grad=p.requires_grad)
             for n, p in self.params.items()},
            self.has_decoder)


def _he_conv(rng, co, ci, k, dtype):
    std = np.sqrt(2.0 / (ci * k ** 3))
    return (rng.standard_normal((k, k, k, ci, co)) * std).astype(dtype)


def _he_affine(rng, n_in, n_out, dtype):
    std = np.sqrt(2.0 / n_in)
    return (rng.standard_normal((n_in, n_out)) * std).astype(dtype)


def init_params(arch, seed, dtype=np.float32):
    """Student parameters: He-scaled weights, zero biases, seed-deterministic."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    p = {}
    ci = arch.in_channels
    for lvl in range(arch.levels):
        co = arch.channels(lvl)
        p[f"enc{lvl}.w"] = _he_conv(rng, co, ci, 3, dtype)
        p[f"enc{lvl}.b"] = np.zeros(co, dtype=dtype)
        ci = co
    for lvl in range(arch.levels - 2, -1, -1):
        cin = arch.channels(lvl + 1) + arch.channels(lvl)
        co = arch.channels(lvl)
        p[f"dec{lvl}.w"] = _he_conv(rng, co, cin, 3, dtype)
        p[f"dec{lvl}.b"] = np.zeros(co, dtype=dtype)
    p["out.w"] = _he_conv(rng, arch.classes, arch.channels(0), 1, dtype)
    p["out.b"] = np.zeros(arch.classes, dtype=dtype)
    cb = arch.channels(arch.levels - 1)
    p["proj.w1"] = _he_affine(rng, cb, arch.proj_hidden, dtype)
    p["proj.b1"] = np.zeros(arch.proj_hidden, dtype=dtype)
    p["proj.w2"] = _he_affine(rng, arch.proj_hidden, arch.emb_dim, dtype)
    p["proj.b2"] = np.zeros(arch.emb_dim, dtype=dtype)
    return ModelParams(arch, {n: Tensor(a, requires_grad=True)
                              for n, a in p.items()})


def teacher_from_student(student):
    """Exact copy of the student's encoder and projector; no decoder."""
    names = student.encoder_projector_names()
    return ModelParams(
        student.arch,
        {n: Tensor(student.params[n].data.copy()) for n in names},
        has_decoder=False)


def _as_batch(volume):
    x = volume if isinstance(volume, Tensor) else Tensor(volume)
    if x.data.ndim == 3:
        x = x.reshape((1,) + x.shape + (1,))
    elif x.data.ndim == 4:
        x = x.reshape(x.shape + (1,))
    return x


def encoder_forward(model, volume):
    """Returns (bottleneck, skips); skips are levels 0..L-2, full to coarse.

    The input need not match the arch's nominal extents (contrastive cubes
    and partitions are smaller); pooling stops once an extent turns odd, so
    arch-sized inputs shrink by exactly 2^(levels-1).
    """
    arch = model.arch
    x = _as_batch(volume)
    skips = []
    for lvl in range(arch.levels):
        x = x.conv3d(model.params[f"enc{lvl}.w"], model.params[f"enc{lvl}.b"],
                     stride=1, padding=1).relu()
        if lvl < arch.levels - 1:
            skips.append(x)
            if all(e % 2 == 0 for e in x.shape[1:4]):
                x = x.max_pool3d(2)
    return x, skips


def projector_forward(model, bottleneck):
    """Global average pool, then affine -> ReLU -> affine; (N, emb_dim)."""
    z = bottleneck.mean(axis=(1, 2, 3))
    z = (z @ model.params["proj.w1"] + model.params["proj.b1"]).relu()
    return z @ model.params["proj.w2"] + model.params["proj.b2"]


def decoder_forward(model, bottleneck, skips):
    """Refine coarse features with skips up to input resolution; (N,D,H,W,C)."""
    if not model.has_decoder:
        raise ValueError("this parameter set has no decoder")
    x = bottleneck
    for lvl in range(model.arch.levels - 2, -1, -1):
        x = x.upsample_nearest3d(2)
        skip = skips[lvl]
        if x.shape[1:4] != skip.shape[1:4]:
            raise ValueError(f"skip extents {skip.shape[1:4]} do not match "
                             f"decoder extents {x.shape[1:4]}")
        x = concat([x, skip], axis=-1)
        x = x.conv3d(model.params[f"dec{lvl}.w"], model.params[f"dec{lvl}.b"],
                     stride=1, padding=1).relu()
    return x.conv3d(model.params["out.w"], model.params["out.b"],
                    stride=1, padding=0)


def segment(model, volume):
    """Per-voxel argmax class map of the student network, as uint8."""
    with no_grad():
        bottleneck, skips = encoder_forward(model, volume)
        logits = decoder_forward(model, bottleneck, skips)
    return logits.data.argmax(axis=-1)[0].astype(np.uint8)


# -- checkpoint serialization ---------------------------------------------------

def save_tensors(path, tensors):
    """Binary tensor archive: magic, version, then length-prefixed records."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            tag = _TAG_FOR[arr.dtype.newbyteorder("<")
                           if arr.dtype.byteorder == ">" else arr.dtype]
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BB", tag, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=arr.dtype).astype(
                arr.dtype.newbyteorder("<")).tobytes())


def load_tensors(path):
    def need(f, n, what):
        buf = f.read(n)
        if len(buf) != n:
            raise ValueError(f"truncated checkpoint while reading {what}")
        return buf

    tensors = {}
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("bad checkpoint magic")
        version, = struct.unpack("<I", need(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise ValueError("truncated checkpoint while reading name length")
            nlen, = struct.unpack("<I", head)
            name = need(f, nlen, "name").decode("utf-8")
            tag, rank = struct.unpack("<BB", need(f, 2, "dtype/rank"))
            if tag not in _DTYPE_TAGS:
                raise ValueError(f"unknown dtype tag {tag}")
            shape = struct.unpack(f"<{rank}Q", need(f, 8 * rank, "extents"))
            dtype = np.dtype(_DTYPE_TAGS[tag]).newbyteorder("<")
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            data = need(f, nbytes, f"tensor '{name}'")
            tensors[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    return tensors


def save_checkpoint(path, student, teacher):
    tensors = {"meta/arch": np.array(
        list(student.arch.extents) +
        [student.arch.levels, student.arch.base_channels, student.arch.emb_dim,
         student.arch.proj_hidden, student.arch.classes,
         student.arch.in_channels], dtype=np.int64)}
    for name, p in student.params.items():
        tensors[f"student/{name}"] = p.data
    for name, p in teacher.params.items():
        tensors[f"teacher/{name}"] = p.data
    save_tensors(path, tensors)


def load_checkpoint(path):
    tensors = load_tensors(path)
    meta = tensors.pop("meta/arch")
    arch = ArchConfig(extents=tuple(int(e) for e in meta[:3]),
                      levels=int(meta[3]), base_channels=int(meta[4]),
                      emb_dim=int(meta[5]), proj_hidden=int(meta[6]),
                      classes=int(meta[7]), in_channels=int(meta[8]))
    student = ModelParams(arch, {}, has_decoder=True)
    teacher = ModelParams(arch, {}, has_decoder=False)
    for key, arr in tensors.items():
        side, name = key.split("/", 1)
        target = student if side == "student" else teacher
        target.params[name] = Tensor(arr, requires_grad=(side == "student"))
    return student, teacher
