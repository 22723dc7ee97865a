"""Synthetic 2D segmentation data, label corruption and the MSEG file format.

MSEG layout (little endian)::

    b"MSEG" | u32 version=1 | u32 count | u32 H | u32 W
    per sample: H*W float32 image | u8 mask flag | H*W u8 mask (if flag)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

MAGIC = b"MSEG"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
SPLITS = ("clean", "meta", "unlabeled", "initialized", "eval")
SHAPE_FAMILIES = ("ellipse", "rect", "mixed")


class FormatError(ValueError):
    """Malformed MSEG file."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray  # [K,1,H,W] float32
    masks: Optional[np.ndarray] = None  # [K,H,W] uint8, absent for unlabeled data
    split: str = "clean"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValueError(f"images must be [K,1,H,W], got {self.images.shape}")
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=np.uint8)
            if self.masks.shape != (self.images.shape[0],) + self.images.shape[2:]:
                raise ValueError(f"mask shape {self.masks.shape} does not match images {self.images.shape}")
            if self.masks.size and self.masks.max() > 1:
                raise ValueError("mask values must be 0 or 1")

    def __len__(self):
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def subset(self, idx, split: Optional[str] = None) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.images[idx], None if self.masks is None else self.masks[idx], split or self.split)

    def unlabeled(self) -> "Dataset":
        return Dataset(self.images, None, "unlabeled")


@dataclass
class GenConfig:
    H: int = 32
    W: int = 32
    count: int = 1
    shape_family: str = "mixed"
    noise_level: float = 0.1


def _shape_mask(rng, H, W, family):
    yy, xx = np.mgrid[0:H, 0:W]
    kind = family if family != "mixed" else ("ellipse", "rect")[rng.integers(2)]
    cy, cx = rng.uniform(0.2, 0.8) * H, rng.uniform(0.2, 0.8) * W
    ry, rx = rng.uniform(0.1, 0.3) * H, rng.uniform(0.1, 0.3) * W
    if kind == "ellipse":
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def generate_sample(rng: np.random.Generator, cfg: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    """One image in [0,1] and its exact shape-interior mask.

    Shapes are redrawn until foreground covers 5-60 % of the image.
    """
    H, W = cfg.H, cfg.W
    while True:
        mask = np.zeros((H, W), bool)
        for _ in range(rng.integers(1, 4)):
            mask |= _shape_mask(rng, H, W, cfg.shape_family)
        if 0.05 <= mask.mean() <= 0.6:
            break
    background = rng.uniform(0.15, 0.35)
    offset = rng.uniform(0.25, 0.45)
    image = background + offset * mask
    if cfg.noise_level > 0:
        image = image + rng.normal(0.0, cfg.noise_level, size=(H, W))
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask.astype(np.uint8)


def generate(cfg: GenConfig, seed: int, split: str = "clean") -> Dataset:
    """Deterministic labeled dataset of ``cfg.count`` samples."""
    if cfg.H % 2 or cfg.W % 2 or cfg.H < 4 or cfg.W < 4:
        raise ValueError(f"H and W must be even and >= 4, got {cfg.H}x{cfg.W}")
    if cfg.count < 1:
        raise ValueError(f"count must be >= 1, got {cfg.count}")
    if cfg.shape_family not in SHAPE_FAMILIES:
        raise ValueError(f"shape family must be one of {SHAPE_FAMILIES}, got {cfg.shape_family!r}")
    if cfg.noise_level < 0:
        raise ValueError("noise level must be non-negative")
    rng = np.random.default_rng(seed)
    pairs = [generate_sample(rng, cfg) for _ in range(cfg.count)]
    images = np.stack([p[0] for p in pairs])[:, None]
    masks = np.stack([p[1] for p in pairs])
    return Dataset(images, masks, split)


def generate_splits(H: int, W: int, counts: dict, seed: int, shape_family: str = "mixed",
                    noise_level: float = 0.1) -> dict:
    """Disjoint splits cut from one generated pool, in ``counts`` order.

    Unlabeled splits keep their ground truth under ``<name>_gt`` for analysis only.
    """
    total = sum(counts.values())
    pool = generate(GenConfig(H, W, total, shape_family, noise_level), seed)
    out, at = {}, 0
    for name, n in counts.items():
        part = pool.subset(np.arange(at, at + n), name)
        at += n
        if name == "unlabeled":
            out["unlabeled_gt"] = part
            part = part.unlabeled()
        out[name] = part
    return out


def standardize(images) -> np.ndarray:
    """Per-image zero mean, unit variance (float64); constant images map to zeros."""
    x = np.asarray(images, dtype=np.float64)
    axes = tuple(range(x.ndim - 2, x.ndim))
    std = x.std(axis=axes, keepdims=True)
    return (x - x.mean(axis=axes, keepdims=True)) / np.where(std > 0, std, 1.0)


def boundary_distance(mask: np.ndarray) -> np.ndarray:
    """Euclidean distance from each pixel to the nearest pixel of the other class (inf if none)."""
    mask = np.asarray(mask).astype(bool)
    if mask.all() or not mask.any():
        return np.full(mask.shape, np.inf)
    d_fg = ndimage.distance_transform_edt(mask)  # fg pixel -> nearest bg
    d_bg = ndimage.distance_transform_edt(~mask)  # bg pixel -> nearest fg
    return np.where(mask, d_fg, d_bg)


def corrupt_mask(mask: np.ndarray, dilate_r: float = 0, erode_r: float = 0, flip_rate: float = 0.0,
                 rng: Optional[np.random.Generator] = None, band: float = 2.0) -> np.ndarray:
    """Boundary-local label noise: disk dilation, then disk erosion, then
    Bernoulli flips of pixels within ``band`` of the original boundary."""
    if not 0.0 <= flip_rate <= 1.0 or dilate_r < 0 or erode_r < 0:
        raise ValueError(f"invalid corruption parameters ({dilate_r}, {erode_r}, {flip_rate})")
    orig = np.asarray(mask).astype(bool)
    out = orig.copy()
    if dilate_r > 0 and out.any():
        out |= ndimage.distance_transform_edt(~out) <= dilate_r
    if erode_r > 0 and not out.all():
        out &= ~(ndimage.distance_transform_edt(out) <= erode_r)
    if flip_rate > 0:
        rng = np.random.default_rng() if rng is None else rng
        near = boundary_distance(orig) <= band
        flips = near & (rng.random(orig.shape) < flip_rate)
        out ^= flips
    return out.astype(np.uint8)


# ------------------------------------------------------------------- MSEG I/O


def to_bytes(ds: Dataset) -> bytes:
    K = len(ds)
    H, W = ds.shape
    parts = [_HEADER.pack(MAGIC, VERSION, K, H, W)]
    img = ds.images.astype("<f4")
    for k in range(K):
        parts.append(img[k, 0].tobytes())
        if ds.masks is None:
            parts.append(b"\x00")
        else:
            parts.append(b"\x01")
            parts.append(ds.masks[k].astype(np.uint8).tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes, split: str = "clean") -> Dataset:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {_HEADER.size} bytes", len(buf))
    magic, version, K, H, W = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    n = H * W
    pos = _HEADER.size
    images = np.empty((K, 1, H, W), np.float32)
    masks = np.zeros((K, H, W), np.uint8)
    flags = []

    def need(count):
        if pos + count > len(buf):
            raise FormatError(f"truncated sample data: need {count} bytes, {len(buf) - pos} left", pos)

    for k in range(K):
        need(4 * n + 1)
        images[k, 0] = np.frombuffer(buf, "<f4", n, pos).reshape(H, W)
        pos += 4 * n
        flag = buf[pos]
        if flag not in (0, 1):
            raise FormatError(f"bad mask flag {flag}", pos)
        pos += 1
        flags.append(flag)
        if flag:
            need(n)
            m = np.frombuffer(buf, np.uint8, n, pos)
            if m.max(initial=0) > 1:
                raise FormatError("mask values must be 0 or 1", pos)
            masks[k] = m.reshape(H, W)
            pos += n
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    if any(flags) and not all(flags):
        raise FormatError("mixed labeled and unlabeled samples are not supported", _HEADER.size)
    return Dataset(images, masks if (flags and all(flags)) else None, split)


def save(ds: Dataset, path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def load(path, split: str = "clean") -> Dataset:
    return from_bytes(Path(path).read_bytes(), split)


def file_size(count: int, H: int, W: int, labeled: bool = True) -> int:
    return _HEADER.size + count * (4 * H * W + 1 + (H * W if labeled else 0))


def write_manifest(splits: dict, directory) -> Path:
    """Save each split as ``<name>.mseg`` and list them in ``manifest.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, ds in splits.items():
        save(ds, directory / f"{name}.mseg")
        lines.append(f"{name}={name}.mseg")
    path = directory / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, sep, rel = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected split=path, got {line!r}")
        name, rel = name.strip(), rel.strip()
        out[name] = load(path.parent / rel, split=name)
    return out
