"""Synthetic brain-like phantoms, preprocessing and the UADV volume format.

Randomness comes from numpy's PCG64 bit generator seeded through a
``SeedSequence([seed, index])``; both are fully specified algorithms, so a
(spec, seed, index) triple yields the same volume on every platform.

UADV layout (all integers little-endian)::

    b"UADV" | u32 version | u32 rank | rank * u32 extents | f32 voxels
    then zero or more sections: u8 tag | u32 byte length | payload
      tag 1: brain mask, one u8 per voxel
      tag 2: lesion mask, one u8 per voxel
      tag 3: UTF-8 JSON with id, spacing and metadata
"""
from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)


@dataclass
class Volume:
    voxels: np.ndarray
    brain_mask: np.ndarray
    lesion_mask: Optional[np.ndarray] = None
    id: str = ""
    spacing: Tuple[float, ...] = (1.0, 1.0, 1.0)
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        self.brain_mask = np.asarray(self.brain_mask, dtype=bool)
        if self.brain_mask.shape != self.voxels.shape:
            raise ValueError("brain mask shape differs from voxel grid")
        if self.lesion_mask is not None:
            self.lesion_mask = np.asarray(self.lesion_mask, dtype=bool)
            if self.lesion_mask.shape != self.voxels.shape:
                raise ValueError("lesion mask shape differs from voxel grid")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.voxels.shape

    @property
    def has_lesions(self) -> bool:
        return self.lesion_mask is not None and bool(self.lesion_mask.any())

    def equals(self, other: "Volume") -> bool:
        """Bitwise equality of grids plus equality of id, spacing and metadata."""
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()
        return (same(self.voxels, other.voxels) and same(self.brain_mask, other.brain_mask)
                and same(self.lesion_mask, other.lesion_mask) and self.id == other.id
                and self.spacing == other.spacing and self.metadata == other.metadata)


@dataclass
class PhantomSpec:
    shape: Tuple[int, int, int] = (64, 64, 64)
    # brain ellipsoid semi-axes as fractions of each extent
    axes_min: Tuple[float, float, float] = (0.37, 0.39, 0.37)
    axes_max: Tuple[float, float, float] = (0.38, 0.40, 0.38)
    center_jitter: float = 0.25
    tissue_min: float = 0.44
    tissue_max: float = 0.46
    # darker inner ellipsoid, as fraction of the brain axes
    core_scale: float = 0.35
    core_ratio: float = 0.7
    # relative spread of the core axes around core_scale
    core_jitter: float = 0.03
    edge_sigma: float = 1.0
    noise_amplitude: float = 0.02
    noise_correlation: float = 4.0
    lesion_count_min: int = 1
    lesion_count_max: int = 3
    lesion_radius_min: float = 3.0
    lesion_radius_max: float = 5.5
    contrast_min: float = 0.30
    contrast_max: float = 0.45
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        for name in ("axes_min", "axes_max"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ValueError(f"phantom grid must be 3D with extents >= 8, got {self.shape}")
        if self.contrast_min <= self.noise_amplitude:
            raise ValueError("lesion contrast must exceed the noise amplitude")
        if not 1 <= self.lesion_count_min <= self.lesion_count_max:
            raise ValueError("lesion count range is invalid")
        if not 0 < self.lesion_radius_min <= self.lesion_radius_max:
            raise ValueError("lesion radius range is invalid")
        if not 0 <= self.tissue_min <= self.tissue_max <= 1:
            raise ValueError("tissue intensity band must lie in [0, 1]")

    @classmethod
    def from_mapping(cls, values: Dict[str, str]) -> "PhantomSpec":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise KeyError(key)
            default = getattr(cls(), key)
            if isinstance(default, tuple):
                kwargs[key] = tuple(type(default[0])(v) for v in raw.split(","))
            else:
                kwargs[key] = type(default)(raw)
        return cls(**kwargs)

    def to_mapping(self) -> Dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(repr(e) for e in v) if isinstance(v, tuple) else repr(v)
        return out


def _rng(seed: int, index: int, lesioned: bool) -> np.random.Generator:
    # healthy and lesioned draws never share a stream, so index i of one set is not a copy of the other
    entropy = [int(seed), int(index), int(lesioned)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def _smooth_noise(rng, shape, sigma: float) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    std = n.std()
    return n / std if std > 0 else n


def generate_phantom(spec: PhantomSpec, lesioned: bool, index: int = 0) -> Volume:
    """One synthetic head: textured ellipsoidal brain, optional bright lesions."""
    rng = _rng(spec.seed, index, lesioned)
    shape = spec.shape
    grid = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    center = [(n - 1) / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter) for n in shape]
    axes = [n * rng.uniform(lo, hi) for n, lo, hi in zip(shape, spec.axes_min, spec.axes_max)]
    r = np.sqrt(sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, axes)))
    brain = r <= 1.0

    core_axes = [a * spec.core_scale * rng.uniform(1 - spec.core_jitter, 1 + spec.core_jitter) for a in axes]
    r_core = np.sqrt(sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, core_axes)))
    tissue = rng.uniform(spec.tissue_min, spec.tissue_max)
    img = np.where(r_core <= 1.0, tissue * spec.core_ratio, tissue)
    img = ndimage.gaussian_filter(img, sigma=spec.edge_sigma)
    img = img + spec.noise_amplitude * _smooth_noise(rng, shape, spec.noise_correlation)
    edge = ndimage.gaussian_filter(brain.astype(np.float64), sigma=spec.edge_sigma)
    img = img * edge

    lesion = np.zeros(shape, dtype=bool)
    meta = {"generator": "phantom", "seed": str(spec.seed), "index": str(index),
            "tissue": repr(float(tissue))}
    if lesioned:
        count = int(rng.integers(spec.lesion_count_min, spec.lesion_count_max + 1))
        contrasts = []
        for _ in range(count):
            radius = rng.uniform(spec.lesion_radius_min, spec.lesion_radius_max)
            # keep lesions in white-matter-like tissue: inside the brain, outside the core
            for _attempt in range(100):
                direction = rng.standard_normal(3)
                direction /= np.linalg.norm(direction)
                rho = rng.uniform(0.5, 0.75)
                c = [cc + rho * d * a for cc, d, a in zip(center, direction, axes)]
                if np.sqrt(sum(((ci - cc) / a) ** 2 for ci, cc, a in zip(c, center, core_axes))) > 1.3:
                    break
            stretch = rng.uniform(0.8, 1.2, size=3)
            rl = np.sqrt(sum(((g - ci) / (radius * s)) ** 2 for g, ci, s in zip(grid, c, stretch)))
            blob = (rl <= 1.0) & brain
            contrast = rng.uniform(spec.contrast_min, spec.contrast_max)
            img = np.where(blob, img + contrast, img)
            lesion |= blob
            contrasts.append(contrast)
        meta["lesions"] = str(count)
        meta["contrasts"] = ",".join(repr(float(v)) for v in contrasts)

    img = np.clip(img, 0.0, 1.0)
    img[~brain] = 0.0
    vid = f"{'lesion' if lesioned else 'healthy'}_{spec.seed}_{index:04d}"
    return Volume(voxels=img.astype(np.float32), brain_mask=brain,
                  lesion_mask=lesion if lesioned else None, id=vid, metadata=meta)


def generate_dataset(spec: PhantomSpec, n: int, lesioned: bool, start: int = 0) -> List[Volume]:
    return [generate_phantom(spec, lesioned, index=start + i) for i in range(n)]


# ---------------------------------------------------------------- preprocessing


def _crop_or_pad(a: np.ndarray, target: Tuple[int, ...]) -> np.ndarray:
    out = a
    for axis, (n, t) in enumerate(zip(a.shape, target)):
        if n > t:
            lo = (n - t) // 2
            out = np.take(out, np.arange(lo, lo + t), axis=axis)
        elif n < t:
            before = (t - n) // 2
            pad = [(0, 0)] * a.ndim
            pad[axis] = (before, t - n - before)
            out = np.pad(out, pad)
    return out


def preprocess(v: Volume, target_shape: Tuple[int, ...]) -> Volume:
    """Center-crop or zero-pad to ``target_shape`` and bring in-brain intensities into [0, 1].

    Min-max rescaling inside the brain mask is applied when the in-mask range
    leaves [0, 1]; data already inside [0, 1] keep their values. A constant
    in-mask intensity becomes 0.5. Voxels outside the mask are zeroed.
    """
    target_shape = tuple(int(t) for t in target_shape)
    if len(target_shape) != v.voxels.ndim:
        raise ValueError(f"target shape {target_shape} has the wrong rank for {v.shape}")
    vox = _crop_or_pad(v.voxels.astype(np.float64), target_shape)
    brain = _crop_or_pad(v.brain_mask, target_shape)
    lesion = None if v.lesion_mask is None else _crop_or_pad(v.lesion_mask, target_shape) & brain
    inside = vox[brain]
    if inside.size:
        lo, hi = float(inside.min()), float(inside.max())
        if hi == lo:
            log.warning("volume %s has constant in-brain intensity; setting it to 0.5", v.id)
            vox = np.full_like(vox, 0.5)
        elif lo < 0.0 or hi > 1.0:
            vox = (vox - lo) / (hi - lo)
    vox = np.where(brain, vox, 0.0)
    meta = dict(v.metadata)
    meta["preprocess"] = "x".join(map(str, target_shape))
    return Volume(voxels=vox.astype(np.float32), brain_mask=brain, lesion_mask=lesion,
                  id=v.id, spacing=v.spacing, metadata=meta)


@dataclass
class Slice:
    voxels: np.ndarray
    brain_mask: np.ndarray
    lesion_mask: Optional[np.ndarray]
    source_id: str
    index: int


def central_indices(extent: int, count: int) -> range:
    """``count`` consecutive indices centred on ``extent // 2`` (left-biased for even count)."""
    if count > extent or count < 1:
        raise ValueError(f"cannot take {count} slices from an axis of extent {extent}")
    start = extent // 2 - count // 2
    start = min(max(start, 0), extent - count)
    return range(start, start + count)


def extract_slices(v: Volume, count: int) -> List[Slice]:
    """The ``count`` central axial (first-axis) slices of ``v``."""
    return [
        Slice(voxels=v.voxels[i], brain_mask=v.brain_mask[i],
              lesion_mask=None if v.lesion_mask is None else v.lesion_mask[i],
              source_id=v.id, index=i)
        for i in central_indices(v.shape[0], count)
    ]


# ---------------------------------------------------------------- UADV I/O

MAGIC = b"UADV"
VERSION = 1
TAG_BRAIN, TAG_LESION, TAG_META = 1, 2, 3


class VolumeFormatError(ValueError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class VersionMismatchError(VolumeFormatError):
    pass


class TruncatedError(VolumeFormatError):
    pass


def encode_volume(v: Volume) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, v.voxels.ndim), struct.pack(f"<{v.voxels.ndim}I", *v.shape),
             np.ascontiguousarray(v.voxels, dtype="<f4").tobytes()]

    def section(tag: int, payload: bytes):
        parts.append(struct.pack("<BI", tag, len(payload)))
        parts.append(payload)

    section(TAG_BRAIN, v.brain_mask.astype(np.uint8).tobytes())
    if v.lesion_mask is not None:
        section(TAG_LESION, v.lesion_mask.astype(np.uint8).tobytes())
    meta = {"id": v.id, "spacing": list(v.spacing), "metadata": v.metadata}
    section(TAG_META, json.dumps(meta, sort_keys=True).encode("utf-8"))
    return b"".join(parts)


def decode_volume(raw: bytes, source: str = "<bytes>") -> Volume:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {raw[:4]!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise TruncatedError(f"{source}: expected {n} more bytes at offset {pos}, file has {len(raw) - pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    version, rank = struct.unpack("<II", take(8))
    if version != VERSION:
        raise VersionMismatchError(f"{source}: version {version}, reader supports {VERSION}")
    if not 1 <= rank <= 8:
        raise VolumeFormatError(f"{source}: implausible rank {rank}")
    shape = struct.unpack(f"<{rank}I", take(4 * rank))
    count = int(np.prod(shape))
    voxels = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    brain = lesion = None
    meta: dict = {}
    while pos < len(raw):
        tag, length = struct.unpack("<BI", take(5))
        payload = take(length)
        if tag in (TAG_BRAIN, TAG_LESION):
            if length != count:
                raise TruncatedError(f"{source}: mask section holds {length} bytes, grid has {count} voxels")
            mask = np.frombuffer(payload, dtype=np.uint8).reshape(shape).astype(bool)
            if tag == TAG_BRAIN:
                brain = mask
            else:
                lesion = mask
        elif tag == TAG_META:
            meta = json.loads(payload.decode("utf-8"))
        else:
            raise VolumeFormatError(f"{source}: unknown section tag {tag}")
    if brain is None:
        brain = np.ones(shape, dtype=bool)
    return Volume(voxels=voxels, brain_mask=brain, lesion_mask=lesion, id=meta.get("id", ""),
                  spacing=tuple(meta.get("spacing", (1.0,) * rank)), metadata=meta.get("metadata", {}))


def write_volume(v: Volume, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_volume(v))
    os.replace(tmp, path)


def read_volume(path) -> Volume:
    return decode_volume(Path(path).read_bytes(), source=str(path))


def list_volumes(directory) -> List[Path]:
    return sorted(Path(directory).glob("*.uadv"))


# ---------------------------------------------------------------- PGM


def write_pgm(image: np.ndarray, path, lo: float = 0.0, hi: float = 1.0) -> None:
    """Binary 16-bit PGM (P5, maxval 65535, big-endian samples)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2D image")
    scaled = np.clip((img - lo) / (hi - lo), 0.0, 1.0) if hi > lo else np.zeros_like(img)
    data = np.round(scaled * 65535).astype(">u2")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    pos += 1
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dt = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(raw[pos:], dtype=dt, count=w * h).reshape(h, w)
