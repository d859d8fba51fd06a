"""Denoiser training with the simplified noise-prediction loss, plus checkpoints.

Checkpoint layout (all little-endian)::

    b"OODCKPT\\0"                      8-byte magic
    u32 version, u32 model_kind, u32 n_arrays
    n_arrays x { u32 name_len, utf-8 name, u32 rank, u64 dims[rank], f32 payload }
    u64 seed, f64 beta_start, f64 beta_end, u32 T
"""

from __future__ import annotations

import logging
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule, forward_noise, linear_schedule
from .errors import (
    BadMagicError,
    CorruptCheckpointError,
    NonFiniteLossError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .nn import AdamState, DenoiserNet, adam_step
from .rng import RngHandle

log = logging.getLogger(__name__)

MAGIC = b"OODCKPT\x00"
FORMAT_VERSION = 1
MODEL_KINDS = ("ddpm", "ae", "memae")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 2.5e-4
    T: int = 1000
    beta_start: float = 0.0015
    beta_end: float = 0.0195
    seed: int = 0
    image_shape: tuple = (16, 16)
    checkpoint_path: str | None = None
    hidden_dims: tuple = (256, 256)
    time_embed_dim: int = 64
    time_hidden_dim: int = 128

    def __post_init__(self):
        self.image_shape = tuple(int(s) for s in self.image_shape)
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.T < 2:
            raise ValueError(f"invalid training config {self}")

    @classmethod
    def fast(cls, **overrides) -> "TrainConfig":
        """CI profile: T=100 with the 1000-step beta range scaled by 10."""
        base = dict(T=100, beta_start=0.015, beta_end=0.195)
        base.update(overrides)
        return cls(**base)

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class LossRecord:
    epoch: int
    mean_loss: float
    wall_seconds: float


@dataclass
class CheckpointManifest:
    model_kind: str
    arrays: dict
    seed: int = 0
    beta_start: float = 0.0
    beta_end: float = 0.0
    T: int = 0
    format_version: int = FORMAT_VERSION
    magic: bytes = field(default=MAGIC, repr=False)

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model_kind!r}")

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.T, self.beta_start, self.beta_end)

    def equals(self, other: "CheckpointManifest") -> bool:
        if (self.model_kind, self.seed, self.T, self.format_version) != (
            other.model_kind, other.seed, other.T, other.format_version
        ):
            return False
        if struct.pack("<dd", self.beta_start, self.beta_end) != struct.pack("<dd", other.beta_start, other.beta_end):
            return False
        if list(self.arrays) != list(other.arrays):
            return False
        return all(
            self.arrays[k].shape == other.arrays[k].shape
            and self.arrays[k].astype("<f4").tobytes() == other.arrays[k].astype("<f4").tobytes()
            for k in self.arrays
        )


def encode_checkpoint(m: CheckpointManifest) -> bytes:
    out = [MAGIC, struct.pack("<III", m.format_version, MODEL_KINDS.index(m.model_kind), len(m.arrays))]
    for name, arr in m.arrays.items():
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    out.append(struct.pack("<QddI", m.seed & ((1 << 64) - 1), m.beta_start, m.beta_end, m.T))
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(f"{self.path}: truncated payload at byte {self.pos} (wanted {n} more)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes, path="<bytes>") -> CheckpointManifest:
    r = _Reader(buf, path)
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    r.take(len(MAGIC))
    version, kind, count = r.unpack("<III")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if kind >= len(MODEL_KINDS):
        raise CorruptCheckpointError(f"{path}: unknown model kind {kind}")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(4 * size)
        arrays[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    seed, b0, b1, T = r.unpack("<QddI")
    if r.pos != len(buf):
        raise CorruptCheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return CheckpointManifest(MODEL_KINDS[kind], arrays, seed, b0, b1, T, version)


def save_checkpoint(manifest: CheckpointManifest, path) -> None:
    """Write atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(manifest)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> CheckpointManifest:
    return decode_checkpoint(Path(path).read_bytes(), path)


# --- denoiser <-> manifest --------------------------------------------------


def net_to_manifest(net: DenoiserNet, seed: int, sched: NoiseSchedule) -> CheckpointManifest:
    arrays = {"config.image_shape": np.asarray(net.image_shape, np.float32)}
    arrays.update({p.name: p.value for p in net.params})
    return CheckpointManifest("ddpm", arrays, seed, sched.beta_start, sched.beta_end, sched.T)


def net_from_manifest(m: CheckpointManifest) -> DenoiserNet:
    if m.model_kind != "ddpm":
        raise ValueError(f"checkpoint holds a {m.model_kind} model, not a ddpm")
    a = m.arrays
    image_shape = tuple(int(v) for v in a["config.image_shape"])
    n_hidden = sum(1 for k in a if k.startswith("hidden.") and k.endswith(".W"))
    hidden = tuple(a[f"hidden.{i}.W"].shape[1] for i in range(n_hidden))
    net = DenoiserNet(image_shape, hidden, a["time.0.W"].shape[0], a["time.0.W"].shape[1])
    for p in net.params:
        if a[p.name].shape != p.value.shape:
            raise CorruptCheckpointError(f"array {p.name} has shape {a[p.name].shape}, expected {p.value.shape}")
        p.value = a[p.name].copy()
        p.grad = np.zeros_like(p.value)
    return net


# --- loss and loop ----------------------------------------------------------


def draw_training_noise(stream: RngHandle, image_shape, T: int):
    gen = stream.generator()
    t = int(gen.integers(1, T + 1))
    eps = gen.standard_normal(image_shape, dtype=np.float32)
    return t, eps


def lsimple_loss(net, x0_batch, sched: NoiseSchedule, rng: RngHandle, sample_ids=None, accumulate=True):
    """Mean squared noise-prediction error over batch and pixels.

    Each sample draws ``t ~ U{1..T}`` and ``eps`` from its own stream
    ``rng.child("sample", id)``; ids default to batch positions. Gradients
    are accumulated into the net unless ``accumulate`` is False.
    Returns ``(loss, {param_name: grad})``.
    """
    x0 = np.asarray(x0_batch)
    if x0.ndim < 3 or x0.shape[0] == 0:
        raise ValueError("lsimple_loss needs a non-empty batch of images")
    ids = range(x0.shape[0]) if sample_ids is None else sample_ids
    ts = np.empty(x0.shape[0], dtype=np.int64)
    eps = np.empty(x0.shape, dtype=np.float32)
    x_t = np.empty(x0.shape, dtype=np.float32)
    for i, sid in enumerate(ids):
        ts[i], eps[i] = draw_training_noise(rng.child("sample", int(sid)), x0.shape[1:], sched.T)
        x_t[i] = forward_noise(x0[i], ts[i], eps[i], sched)
    eps_hat, cache = net.forward_cached(x_t, ts)
    resid = eps.astype(np.float64) - np.asarray(eps_hat, np.float64)
    loss = float(np.mean(resid * resid))
    if accumulate:
        upstream = (-2.0 / resid.size) * resid
        net.backward(cache, upstream.astype(np.float32))
    grads = {p.name: p.grad for p in getattr(net, "params", [])}
    return loss, grads


def _batches(n: int, batch_size: int, stream: RngHandle):
    order = stream.generator().permutation(n)
    for b, lo in enumerate(range(0, n, batch_size)):
        yield b, order[lo:lo + batch_size]


def train_ddpm(config: TrainConfig, dataset, net: DenoiserNet | None = None, progress=None):
    """Train the denoiser on ``dataset``'s train split.

    Returns ``(manifest, [LossRecord, ...])``; the manifest is also written to
    ``config.checkpoint_path`` when that is set.
    """
    images = dataset.subset("train") if hasattr(dataset, "subset") else np.asarray(dataset)
    if images.shape[0] == 0:
        raise ValueError("empty train split")
    if tuple(images.shape[1:]) != config.image_shape:
        raise ValueError(f"dataset images {images.shape[1:]} != config image_shape {config.image_shape}")
    sched = config.schedule()
    if net is None:
        net = DenoiserNet(config.image_shape, config.hidden_dims, config.time_embed_dim,
                          config.time_hidden_dim, seed=config.seed)
    state = AdamState(lr=config.lr)
    root = RngHandle(config.seed).child("train")
    records = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        ep = root.child("epoch", epoch)
        total, count = 0.0, 0
        for _, idx in _batches(images.shape[0], config.batch_size, ep.child("order")):
            loss, _ = lsimple_loss(net, images[idx], sched, ep, sample_ids=idx)
            if not np.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss {loss} at epoch {epoch}")
            adam_step(net.params, state)
            total += loss * len(idx)
            count += len(idx)
        rec = LossRecord(epoch, total / count, time.perf_counter() - t0)
        records.append(rec)
        log.info("epoch %d mean loss %.5f (%.1fs)", epoch, rec.mean_loss, rec.wall_seconds)
        if progress is not None:
            progress(rec)
    manifest = net_to_manifest(net, config.seed, sched)
    if config.checkpoint_path:
        save_checkpoint(manifest, config.checkpoint_path)
    return manifest, records


def train_reconstructor(model, images, epochs: int, batch_size: int, lr: float, seed: int, progress=None):
    """Generic Adam loop for models exposing ``loss_and_backward(batch)`` and ``params``."""
    images = np.asarray(images)
    state = AdamState(lr=lr)
    root = RngHandle(seed).child("train", type(model).__name__)
    records = []
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for _, idx in _batches(images.shape[0], batch_size, root.child("epoch", epoch)):
            loss = model.loss_and_backward(images[idx])
            if not np.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss {loss} at epoch {epoch}")
            adam_step(model.params, state)
            total += loss * len(idx)
            count += len(idx)
        rec = LossRecord(epoch, total / count, time.perf_counter() - t0)
        records.append(rec)
        if progress is not None:
            progress(rec)
    return records
