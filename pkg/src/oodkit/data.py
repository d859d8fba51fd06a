"""Datasets: synthetic generators, IDX files, flips and splits.

Images are float32 arrays of shape ``(n, H, W)`` scaled to [-1, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ConfigError, DimensionMismatchError, TruncatedPayloadError
from .rng import RngHandle

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

KINDS = ("blobs", "stripes", "checker", "idx-file")
SPLIT_NAMES = ("train", "val", "test")


@dataclass
class DatasetSpec:
    kind: str
    n: int = 1000
    H: int = 16
    W: int = 16
    seed: int = 0
    params: dict = field(default_factory=dict)
    name: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind != "idx-file":
            if self.n < 1:
                raise ConfigError("n must be positive")
            if self.H % 4 or self.W % 4 or self.H <= 0 or self.W <= 0:
                raise ConfigError(f"H, W must be positive multiples of 4, got {self.H}x{self.W}")
        if self.name is None:
            self.name = self.kind


@dataclass
class ImageDataset:
    name: str
    images: np.ndarray
    splits: dict = field(default_factory=dict)
    labels: np.ndarray | None = None

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def split_indices(self, which: str) -> np.ndarray:
        if which == "all":
            return np.arange(len(self))
        if which not in self.splits:
            raise KeyError(f"dataset {self.name!r} has no split {which!r}")
        return self.splits[which]

    def subset(self, which: str) -> np.ndarray:
        return self.images[self.split_indices(which)]


def _finish(name, imgs) -> ImageDataset:
    imgs = np.clip(imgs, -1.0, 1.0).astype(np.float32)
    return ImageDataset(name=name, images=imgs)


def gen_blobs(spec: DatasetSpec) -> ImageDataset:
    """1-3 Gaussian bumps per image, centres biased to the top half."""
    gen = RngHandle(spec.seed).child("blobs").generator()
    H, W = spec.H, spec.W
    top = spec.params.get("top_fraction", 0.45)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    imgs = np.zeros((spec.n, H, W))
    scale = H / 16.0
    for i in range(spec.n):
        k = gen.integers(1, 4)
        cy = gen.uniform(0.05 * H, top * H, size=k)
        cx = gen.uniform(0.1 * W, 0.9 * W, size=k)
        sig = gen.uniform(1.0, 2.5, size=k) * scale
        amp = gen.uniform(0.7, 1.0, size=k)
        for j in range(k):
            imgs[i] += amp[j] * np.exp(-((yy - cy[j]) ** 2 + (xx - cx[j]) ** 2) / (2 * sig[j] ** 2))
    return _finish(spec.name, 2.0 * np.clip(imgs, 0.0, 1.0) - 1.0)


def gen_stripes(spec: DatasetSpec) -> ImageDataset:
    """Sinusoid gratings: orientation fixed per dataset, random phase and period per image."""
    gen = RngHandle(spec.seed).child("stripes").generator()
    H, W = spec.H, spec.W
    theta = spec.params.get("orientation_deg")
    theta = np.deg2rad(gen.uniform(0.0, 180.0) if theta is None else float(theta))
    c, s = np.cos(theta), np.sin(theta)
    c = 0.0 if abs(c) < 1e-12 else c
    s = 0.0 if abs(s) < 1e-12 else s
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    coord = xx * c + yy * s
    lo, hi = spec.params.get("period_range", (3.0, 8.0))
    period = gen.uniform(lo, hi, size=spec.n)
    phase = gen.uniform(0.0, 2 * np.pi, size=spec.n)
    imgs = np.sin(2 * np.pi * coord[None] / period[:, None, None] + phase[:, None, None])
    return _finish(spec.name, imgs)


def gen_checker(spec: DatasetSpec) -> ImageDataset:
    """Random-offset checkerboards with additive per-image noise."""
    gen = RngHandle(spec.seed).child("checker").generator()
    H, W = spec.H, spec.W
    noise = spec.params.get("noise", 0.1)
    yy, xx = np.mgrid[0:H, 0:W]
    imgs = np.empty((spec.n, H, W))
    for i in range(spec.n):
        cell = int(gen.integers(2, 5))
        oy, ox = gen.integers(0, cell, size=2)
        board = (((yy + oy) // cell + (xx + ox) // cell) % 2) * 2.0 - 1.0
        imgs[i] = 0.8 * board + noise * gen.standard_normal((H, W))
    return _finish(spec.name, imgs)


def generate(spec: DatasetSpec) -> ImageDataset:
    if spec.kind == "blobs":
        return gen_blobs(spec)
    if spec.kind == "stripes":
        return gen_stripes(spec)
    if spec.kind == "checker":
        return gen_checker(spec)
    path = spec.params.get("images_path")
    if not path:
        raise ConfigError("idx-file dataset needs params.images_path")
    ds = load_idx(path, spec.params.get("labels_path"))
    ds.name = spec.name
    return ds


# --- IDX ------------------------------------------------------------------


def _read_header(buf: bytes, path, expected_magic: int, ndim: int):
    if len(buf) < 4:
        raise TruncatedPayloadError(f"{path}: file shorter than IDX magic")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise TruncatedPayloadError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:end])
    return dims, end


def load_idx(images_path, labels_path=None) -> ImageDataset:
    """Read an IDX ``u8`` image file (and optional label file), rescaling pixels to [-1, 1]."""
    images_path = Path(images_path)
    buf = images_path.read_bytes()
    (n, h, w), off = _read_header(buf, images_path, IDX_IMAGE_MAGIC, 3)
    if n == 0 or h == 0 or w == 0:
        raise DimensionMismatchError(f"{images_path}: zero-sized dimension {(n, h, w)}")
    need = n * h * w
    payload = buf[off:]
    if len(payload) < need:
        raise TruncatedPayloadError(f"{images_path}: expected {need} pixel bytes, found {len(payload)}")
    if len(payload) > need:
        raise DimensionMismatchError(f"{images_path}: {len(payload) - need} bytes beyond declared dimensions")
    pix = np.frombuffer(payload, dtype=np.uint8).reshape(n, h, w)
    images = (pix.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)

    labels = None
    if labels_path is not None:
        labels_path = Path(labels_path)
        lbuf = labels_path.read_bytes()
        (m,), loff = _read_header(lbuf, labels_path, IDX_LABEL_MAGIC, 1)
        if m != n:
            raise DimensionMismatchError(f"{labels_path}: {m} labels for {n} images")
        lpay = lbuf[loff:]
        if len(lpay) < m:
            raise TruncatedPayloadError(f"{labels_path}: expected {m} label bytes, found {len(lpay)}")
        if len(lpay) > m:
            raise DimensionMismatchError(f"{labels_path}: {len(lpay) - m} bytes beyond declared dimensions")
        labels = np.frombuffer(lpay, dtype=np.uint8).copy()
    return ImageDataset(name=images_path.stem, images=images, labels=labels)


def to_u8(images) -> np.ndarray:
    """Inverse of the IDX rescale; exact for images on the 1/127.5 grid."""
    return np.clip(np.rint((np.asarray(images, np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_idx(images_path, images, labels_path=None, labels=None) -> None:
    pix = to_u8(images)
    if pix.ndim != 3:
        raise DimensionMismatchError(f"expected (n, H, W) images, got shape {pix.shape}")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I3I", IDX_IMAGE_MAGIC, *pix.shape))
        f.write(pix.tobytes())
    if labels_path is not None:
        lab = np.asarray(labels, dtype=np.uint8)
        with open(labels_path, "wb") as f:
            f.write(struct.pack(">II", IDX_LABEL_MAGIC, lab.size))
            f.write(lab.tobytes())


# --- transforms -----------------------------------------------------------


def flip_v(ds: ImageDataset) -> ImageDataset:
    return replace(ds, name=f"vflip({ds.name})", images=np.ascontiguousarray(ds.images[:, ::-1, :]))


def flip_h(ds: ImageDataset) -> ImageDataset:
    return replace(ds, name=f"hflip({ds.name})", images=np.ascontiguousarray(ds.images[:, :, ::-1]))


def split(ds: ImageDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> ImageDataset:
    """Deterministic shuffled train/val/test partition."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(ds)
    perm = RngHandle(seed).child("split").generator().permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    parts = np.split(perm, [n_train, n_train + n_val])
    splits = {k: np.sort(p) for k, p in zip(SPLIT_NAMES, parts)}
    return replace(ds, splits=splits)
