"""Synthetic multi-channel cell images, affine augmentation, MCS container I/O.

Each image holds a handful of Gaussian "cells".  Channels 0 and 1 are nucleus
stains shared by every class; channel ``2 + k`` is the marker that lights up
cells of class ``k``.  The label of an image is the class of the cell sitting
at its center; the other cells are distractors with random classes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

MCS_MAGIC = b"MCS1"
MCS_VERSION = 1
_HEADER = struct.Struct("<4s6I")


@dataclass
class MultiChannelImage:
    data: np.ndarray  # (H, W, C) in [0, 1]
    label: int | None = None

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W, C) float32
    labels: np.ndarray | None = None  # (n,) int

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        label = None if self.labels is None else int(self.labels[i])
        return MultiChannelImage(self.images[i], label)

    def subset(self, idx):
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels)


@dataclass
class SynthConfig:
    image_size: int = 64
    channels: int = 7
    classes: int = 5
    cells_min: int = 1
    cells_max: int = 4
    radius_min: float = 4.0
    radius_max: float = 8.0
    noise: float = 0.05
    nucleus_levels: tuple = (0.8, 0.6)
    marker_level: float = 0.9
    leak_level: float = 0.2
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "nucleus_levels" in known:
            known["nucleus_levels"] = tuple(known["nucleus_levels"])
        return cls(**known)

    def to_dict(self):
        d = asdict(self)
        d["nucleus_levels"] = list(self.nucleus_levels)
        return d

    def validate(self):
        if self.radius_min <= 0 or self.radius_max < self.radius_min:
            raise ConfigError(f"bad blob radius range [{self.radius_min}, {self.radius_max}]")
        if self.classes < 1 or self.channels < 2 + self.classes:
            raise ConfigError(f"{self.classes} classes need at least {2 + self.classes} channels")
        if self.cells_min < 1 or self.cells_max < self.cells_min:
            raise ConfigError(f"bad cell count range [{self.cells_min}, {self.cells_max}]")
        if self.image_size < 4:
            raise ConfigError(f"image size {self.image_size} too small")
        if self.noise < 0:
            raise ConfigError("noise level must be non-negative")

    def profile(self, k):
        """Channel amplitudes for a cell of class ``k``."""
        amp = np.zeros(self.channels, dtype=np.float32)
        amp[2 + k] = self.marker_level
        amp[2 + (k + 1) % self.classes] = self.leak_level
        return amp


def _blob(yy, xx, cy, cx, ry, rx, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (yy - cy) * c + (xx - cx) * s
    v = -(yy - cy) * s + (xx - cx) * c
    return np.exp(-0.5 * ((u / ry) ** 2 + (v / rx) ** 2))


def _render(cfg, label, rng):
    n = cfg.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    img = np.zeros((n, n, cfg.channels))
    centre = (n - 1) / 2.0
    n_cells = int(rng.integers(cfg.cells_min, cfg.cells_max + 1))
    for j in range(n_cells):
        if j == 0:
            cy, cx = centre + rng.uniform(-2, 2, size=2)
            k = label
        else:
            # distractors stay clear of the central cell
            while True:
                cy, cx = rng.uniform(0, n - 1, size=2)
                if np.hypot(cy - centre, cx - centre) > 2.5 * cfg.radius_max:
                    break
            k = int(rng.integers(cfg.classes))
        ry, rx = rng.uniform(cfg.radius_min, cfg.radius_max, size=2) / 2.0
        theta = rng.uniform(0, np.pi)
        body = _blob(yy, xx, cy, cx, ry, rx, theta)
        nucleus = _blob(yy, xx, cy, cx, 0.5 * ry, 0.5 * rx, theta)
        img[..., 0] += cfg.nucleus_levels[0] * nucleus
        img[..., 1] += cfg.nucleus_levels[1] * nucleus
        img += body[..., None] * cfg.profile(k)[None, None, :]
    img += rng.normal(0.0, cfg.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate(cfg, n):
    """Generate ``n`` labeled images; classes are balanced exactly when ``n % classes == 0``."""
    cfg.validate()
    if n < 1:
        raise ConfigError(f"need at least one image, got n={n}")
    root = np.random.SeedSequence(cfg.seed)
    labels = np.arange(n) % cfg.classes
    np.random.default_rng(root.spawn(1)[0]).shuffle(labels)
    children = root.spawn(n)
    images = np.stack([
        _render(cfg, int(labels[i]), np.random.default_rng(children[i])) for i in range(n)
    ])
    return Dataset(images, labels.astype(np.int64))


# -- augmentation ------------------------------------------------------------


@dataclass
class AugmentParams:
    flip: bool = False
    rot90: int = 0
    shift: tuple = (0, 0)
    scale: float = 1.0


def draw_augment(rng, max_shift=4, scale_range=(0.8, 1.2)):
    return AugmentParams(
        flip=bool(rng.integers(2)),
        rot90=int(rng.integers(4)),
        shift=tuple(int(s) for s in rng.integers(-max_shift, max_shift + 1, size=2)),
        scale=float(rng.uniform(*scale_range)),
    )


def apply_augment(data, params):
    """Apply a spatial-only transform to an ``(H, W, C)`` array."""
    out = data
    if params.scale != 1.0:
        h, w = out.shape[:2]
        ys = np.floor((np.arange(h) + 0.5 - h / 2) / params.scale + h / 2).astype(int)
        xs = np.floor((np.arange(w) + 0.5 - w / 2) / params.scale + w / 2).astype(int)
        out = out[np.clip(ys, 0, h - 1)][:, np.clip(xs, 0, w - 1)]
    if params.rot90 % 4:
        out = np.rot90(out, params.rot90, axes=(0, 1))
    if params.flip:
        out = out[:, ::-1]
    if params.shift != (0, 0):
        out = np.roll(out, params.shift, axis=(0, 1))
    return np.ascontiguousarray(out)


def augment(img, rng, **kwargs):
    """Random flip, 90-degree rotation, translation and rescale; intensities untouched."""
    params = draw_augment(rng, **kwargs)
    if isinstance(img, MultiChannelImage):
        return MultiChannelImage(apply_augment(img.data, params), img.label)
    return apply_augment(np.asarray(img), params)


# -- MCS container -----------------------------------------------------------


def write_mcs(path, dataset):
    images = np.ascontiguousarray(dataset.images, dtype="<f4")
    if images.ndim != 4:
        raise FormatError(f"expected (n, H, W, C) images, got shape {images.shape}")
    count, h, w, c = images.shape
    has_labels = dataset.labels is not None
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MCS_MAGIC, MCS_VERSION, count, h, w, c, int(has_labels)))
        if has_labels:
            fh.write(np.asarray(dataset.labels, dtype="<u4").tobytes())
        fh.write(images.tobytes())


def read_mcs(path):
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(buf))
    magic, version, count, h, w, c, flag = _HEADER.unpack_from(buf, 0)
    if magic != MCS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != MCS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if flag not in (0, 1):
        raise FormatError(f"{path}: label flag must be 0 or 1, got {flag}", offset=24)
    offset = _HEADER.size
    labels = None
    if flag:
        end = offset + 4 * count
        if len(buf) < end:
            raise FormatError(f"{path}: label block truncated", offset=len(buf))
        labels = np.frombuffer(buf, dtype="<u4", count=count, offset=offset).astype(np.int64)
        offset = end
    expected = offset + 4 * count * h * w * c
    if len(buf) != expected:
        raise FormatError(
            f"{path}: header declares {count} images of {h}x{w}x{c} "
            f"({expected} bytes) but file has {len(buf)} bytes",
            offset=min(len(buf), expected),
        )
    images = np.frombuffer(buf, dtype="<f4", offset=offset).reshape(count, h, w, c)
    return Dataset(images.astype(np.float32), labels)
