"""Single-bottleneck reconstruction baselines.

* plain autoencoder, score = reconstruction MSE
* Mahalanobis-augmented autoencoder, score = a * D_M(E(x)) + b * ||x - x_hat||_2
* memory-augmented autoencoder (MemAE) with hard shrinkage, score = MSE
* AnoDDPM-Mod: one DDPM reconstruction from a fixed noise level, score = MSE

All scores follow the "higher = more OOD" convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .diffusion import NoiseSchedule, ddpm_reconstruct, plms_reconstruct, make_grid
from .nn import Conv2d, ConvTranspose2d, LeakyReLU, Param, Sequential
from .ood import mse_batch
from .rng import RngHandle
from .training import CheckpointManifest

SHRINK_EPS = 1e-12
STD_FLOOR = 1e-12


class AEModel:
    """Strided-conv autoencoder; each conv halves (encoder) or doubles (decoder) H and W."""

    def __init__(self, image_shape=(16, 16), enc_widths=(32, 16, 8), dec_widths=(16, 32, 1), seed=0):
        if dec_widths[-1] != 1:
            raise ValueError("decoder must end with one channel")
        if len(enc_widths) != len(dec_widths):
            raise ValueError("encoder and decoder need the same depth")
        self.image_shape = tuple(int(s) for s in image_shape)
        f = 2 ** len(enc_widths)
        if self.image_shape[0] % f or self.image_shape[1] % f:
            raise ValueError(f"image shape {self.image_shape} not divisible by {f}")
        self.enc_widths = tuple(enc_widths)
        self.dec_widths = tuple(dec_widths)
        gen = RngHandle(seed).child("ae_init").generator()
        enc, cin = [], 1
        for i, c in enumerate(enc_widths):
            enc += [Conv2d(f"enc.{i}", cin, c, gen), LeakyReLU()]
            cin = c
        dec = []
        for i, c in enumerate(dec_widths):
            dec.append(ConvTranspose2d(f"dec.{i}", cin, c, gen))
            if i < len(dec_widths) - 1:
                dec.append(LeakyReLU())
            cin = c
        self.encoder = Sequential(*enc)
        self.decoder = Sequential(*dec)
        self.latent_shape = (enc_widths[-1], self.image_shape[0] // f, self.image_shape[1] // f)

    @property
    def latent_dim(self) -> int:
        return int(np.prod(self.latent_shape))

    @property
    def params(self) -> list[Param]:
        return self.encoder.params() + self.decoder.params()

    @property
    def dtype(self):
        return self.encoder.layers[0].W.value.dtype

    def _in(self, x):
        x = np.asarray(x, self.dtype)
        if tuple(x.shape[-2:]) != self.image_shape:
            raise ValueError(f"expected images of shape {self.image_shape}, got {x.shape[-2:]}")
        return x.reshape(-1, 1, *self.image_shape)

    def encode_cached(self, x):
        z, c = self.encoder.forward(self._in(x))
        return z.reshape(z.shape[0], -1), c

    def decode_cached(self, z):
        z = np.asarray(z, self.dtype).reshape(-1, *self.latent_shape)
        y, c = self.decoder.forward(z)
        return y[:, 0], c

    def encode(self, x):
        return self.encode_cached(x)[0]

    def decode(self, z):
        return self.decode_cached(z)[0]

    def reconstruct(self, x):
        shape = np.shape(x)
        return self.decode(self.encode(x)).reshape(shape)

    def loss_and_backward(self, batch) -> float:
        x = np.asarray(batch, self.dtype)
        z, ce = self.encode_cached(x)
        xh, cd = self.decode_cached(z)
        resid = xh.astype(np.float64) - x.reshape(xh.shape)
        loss = float(np.mean(resid * resid))
        g = ((2.0 / resid.size) * resid).astype(self.dtype)[:, None]
        gz = self.decoder.backward(cd, g)
        self.encoder.backward(ce, gz)
        return loss

    def to_manifest(self, seed=0) -> CheckpointManifest:
        arrays = {"config.image_shape": np.asarray(self.image_shape, np.float32)}
        arrays.update({p.name: p.value for p in self.params})
        return CheckpointManifest("ae", arrays, seed)

    def load_arrays(self, arrays):
        for p in self.params:
            if arrays[p.name].shape != p.value.shape:
                raise ValueError(f"array {p.name}: shape {arrays[p.name].shape} != {p.value.shape}")
            p.value = np.array(arrays[p.name], np.float32)
            p.grad = np.zeros_like(p.value)


def _widths_from_arrays(arrays):
    n = sum(1 for k in arrays if k.startswith("enc.") and k.endswith(".W"))
    enc = tuple(arrays[f"enc.{i}.W"].shape[0] for i in range(n))
    dec = tuple(arrays[f"dec.{i}.W"].shape[1] for i in range(n))
    return enc, dec


def ae_from_manifest(m: CheckpointManifest) -> AEModel:
    if m.model_kind != "ae":
        raise ValueError(f"checkpoint holds a {m.model_kind} model, not an ae")
    enc, dec = _widths_from_arrays(m.arrays)
    model = AEModel(tuple(int(v) for v in m.arrays["config.image_shape"]), enc, dec)
    model.load_arrays(m.arrays)
    return model


def ae_score(model: AEModel, x) -> np.ndarray | float:
    """Reconstruction MSE per image (scalar for a single image)."""
    x = np.asarray(x, np.float32)
    s = mse_batch(x, model.reconstruct(x))
    return float(s) if np.ndim(s) == 0 else s


# --- MemAE ------------------------------------------------------------------


def memory_attention(z, memory):
    """Softmax over cosine similarities between latents ``z`` and memory rows."""
    z = np.asarray(z, np.float64)
    m = np.asarray(memory, np.float64)
    zn_norm = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    mn_norm = np.maximum(np.linalg.norm(m, axis=1, keepdims=True), 1e-12)
    zn, mn = z / zn_norm, m / mn_norm
    c = zn @ mn.T
    c = c - c.max(axis=1, keepdims=True)
    e = np.exp(c)
    w = e / e.sum(axis=1, keepdims=True)
    return w, (zn, zn_norm, mn, mn_norm)


def shrink_weights(w, lam, eps=SHRINK_EPS):
    """Hard shrinkage then renormalization; rows that empty fall back to ``w``."""
    return kernels.hard_shrink(w, lam, eps)


class MemAEModel:
    def __init__(self, image_shape=(16, 16), memory_size=100, shrink_threshold=2.5e-3, seed=0, **ae_kwargs):
        if shrink_threshold < 0:
            raise ValueError("shrink threshold must be >= 0")
        self.ae = AEModel(image_shape, seed=seed, **ae_kwargs)
        gen = RngHandle(seed).child("memory_init").generator()
        d = self.ae.latent_dim
        lim = np.sqrt(6.0 / (memory_size + d))
        self.memory = Param("memory", gen.uniform(-lim, lim, (memory_size, d)).astype(np.float32))
        # kept at float32 precision so a checkpoint round trip is exact
        self.shrink_threshold = float(np.float32(shrink_threshold))

    @property
    def image_shape(self):
        return self.ae.image_shape

    @property
    def params(self):
        return self.ae.params + [self.memory]

    def _forward(self, x):
        z, ce = self.ae.encode_cached(x)
        w, att_cache = memory_attention(z, self.memory.value)
        w_hat, fallback = shrink_weights(w, self.shrink_threshold)
        z_hat = (w_hat @ self.memory.value.astype(np.float64)).astype(self.ae.dtype)
        xh, cd = self.ae.decode_cached(z_hat)
        return xh, (ce, w, att_cache, w_hat, fallback, cd)

    def forward(self, x):
        """Returns ``(x_hat, w_hat, fallback)``."""
        shape = np.shape(x)
        xh, (_, _, _, w_hat, fallback, _) = self._forward(x)
        return xh.reshape(shape), w_hat, fallback

    def reconstruct(self, x):
        return self.forward(x)[0]

    def loss_and_backward(self, batch) -> float:
        x = np.asarray(batch, self.ae.dtype)
        xh, (ce, w, (zn, zn_norm, mn, mn_norm), w_hat, fallback, cd) = self._forward(x)
        resid = xh.astype(np.float64) - x.reshape(xh.shape)
        loss = float(np.mean(resid * resid))
        g = ((2.0 / resid.size) * resid).astype(self.ae.dtype)[:, None]
        g_zhat = self.ae.decoder.backward(cd, g).reshape(x.shape[0], -1).astype(np.float64)

        mem = self.memory.value.astype(np.float64)
        g_mem = w_hat.T @ g_zhat
        g_what = g_zhat @ mem.T

        # renormalization and shrinkage
        lam = self.shrink_threshold
        d = w - lam
        pos = d > 0
        s = np.where(pos, d * w / (np.abs(d) + SHRINK_EPS), 0.0)
        tot = s.sum(axis=1, keepdims=True)
        safe = np.where(tot > 0, tot, 1.0)
        g_s = (g_what - (g_what * w_hat).sum(axis=1, keepdims=True)) / safe
        den = d + SHRINK_EPS
        ds_dw = np.where(pos, ((2 * w - lam) * den - w * d) / np.where(pos, den, 1.0) ** 2, 0.0)
        g_w = np.where(fallback[:, None], g_what, g_s * ds_dw)

        # softmax and cosine similarity
        g_c = w * (g_w - (g_w * w).sum(axis=1, keepdims=True))
        g_zn = g_c @ mn
        g_mn = g_c.T @ zn
        g_z = (g_zn - zn * (zn * g_zn).sum(axis=1, keepdims=True)) / zn_norm
        g_mem += (g_mn - mn * (mn * g_mn).sum(axis=1, keepdims=True)) / mn_norm

        self.memory.grad += g_mem.astype(self.memory.grad.dtype)
        self.ae.encoder.backward(ce, g_z.astype(self.ae.dtype).reshape(-1, *self.ae.latent_shape))
        return loss

    def to_manifest(self, seed=0) -> CheckpointManifest:
        m = self.ae.to_manifest(seed)
        m.model_kind = "memae"
        m.arrays["memory"] = self.memory.value
        m.arrays["config.shrink_threshold"] = np.asarray([self.shrink_threshold], np.float32)
        return m


def memae_from_manifest(m: CheckpointManifest) -> MemAEModel:
    if m.model_kind != "memae":
        raise ValueError(f"checkpoint holds a {m.model_kind} model, not a memae")
    enc, dec = _widths_from_arrays(m.arrays)
    model = MemAEModel(tuple(int(v) for v in m.arrays["config.image_shape"]), m.arrays["memory"].shape[0],
                       float(m.arrays["config.shrink_threshold"][0]), enc_widths=enc, dec_widths=dec)
    model.ae.load_arrays(m.arrays)
    model.memory.value = np.array(m.arrays["memory"], np.float32)
    model.memory.grad = np.zeros_like(model.memory.value)
    return model


def memae_forward(model: MemAEModel, x):
    return model.forward(x)


def memae_score(model: MemAEModel, x):
    x = np.asarray(x, np.float32)
    s = mse_batch(x, model.reconstruct(x))
    return float(s) if np.ndim(s) == 0 else s


# --- Mahalanobis --------------------------------------------------------------


@dataclass
class MahalanobisStats:
    mean: np.ndarray
    cov: np.ndarray
    cov_inv: np.ndarray
    alpha: float = 1.0
    beta: float = 1.0


def mahalanobis_distance(stats: MahalanobisStats, z) -> np.ndarray | float:
    z = np.asarray(z, np.float64)
    if z.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"latent dim {z.shape[-1]} != fitted dim {stats.mean.shape[0]}")
    d = z - stats.mean
    q = np.einsum("...i,ij,...j->...", d, stats.cov_inv, d)
    out = np.sqrt(np.maximum(q, 0.0))
    return float(out) if out.ndim == 0 else out


def reconstruction_norm(model, x) -> np.ndarray:
    """``||x - x_hat||_2`` per image."""
    x = np.asarray(x, np.float32)
    d = (x.astype(np.float64) - model.reconstruct(x).astype(np.float64)).reshape(-1, int(np.prod(x.shape[-2:])))
    return np.sqrt((d * d).sum(axis=1)).reshape(x.shape[:-2])


def reciprocal_std(values) -> float:
    return 1.0 / max(float(np.std(np.asarray(values, np.float64))), STD_FLOOR)


def fit_latent_gaussian(latents, ridge_rel=1e-6):
    """Mean, ridge-regularized population covariance and its inverse."""
    z = np.asarray(latents, np.float64)
    mu = z.mean(axis=0)
    dz = z - mu
    cov = dz.T @ dz / z.shape[0]
    d = cov.shape[0]
    tr = float(np.trace(cov))
    ridge = ridge_rel * tr / d if tr > 0 else ridge_rel
    cov = cov + ridge * np.eye(d)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("latent covariance singular after regularization") from None
    inv_chol = np.linalg.inv(chol)
    return mu, cov, inv_chol.T @ inv_chol


def fit_mahalanobis(model: AEModel, train_images, val_images) -> MahalanobisStats:
    mu, cov, inv = fit_latent_gaussian(model.encode(train_images))
    stats = MahalanobisStats(mu, cov, inv)
    val_dm = mahalanobis_distance(stats, model.encode(val_images))
    stats.alpha = reciprocal_std(val_dm)
    stats.beta = reciprocal_std(reconstruction_norm(model, val_images))
    return stats


def mahalanobis_score(model: AEModel, stats: MahalanobisStats, x):
    if not isinstance(stats, MahalanobisStats):
        raise ValueError("mahalanobis stats not fitted; call fit_mahalanobis first")
    x = np.asarray(x, np.float32)
    dm = mahalanobis_distance(stats, model.encode(x))
    s = stats.alpha * np.asarray(dm).reshape(x.shape[:-2]) + stats.beta * reconstruction_norm(model, x)
    return float(s) if np.ndim(s) == 0 else s


# --- AnoDDPM-Mod --------------------------------------------------------------


def anoddpm_start(T: int, ref_start: int = 250, ref_T: int = 1000) -> int:
    """Fixed reconstruction level: 250 on a 1000-step chain, scaled for shorter chains."""
    return max(1, int(round(ref_start * T / ref_T)))


def anoddpm_mod_score(net, sched: NoiseSchedule, x, rng, start: int | None = None, sampler: str = "ddpm",
                      steps: int | None = None):
    """MSE between ``x`` and one reconstruction from ``start``.

    ``rng`` is a single handle or one handle per image. With the PLMS
    sampler ``steps`` sets the stepping grid (must contain ``start``).
    """
    start = anoddpm_start(sched.T) if start is None else int(start)
    if not (1 <= start <= sched.T):
        raise ValueError(f"start {start} outside [1, {sched.T}]")
    x = np.asarray(x, np.float32)
    if sampler == "ddpm":
        rec = ddpm_reconstruct(net, x, start, sched, rng=rng)
    elif sampler == "plms":
        grid = make_grid(sched.T, steps or sched.T)
        rec = plms_reconstruct(net, x, start, grid, sched, rng=rng)
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    s = mse_batch(x, rec)
    return float(s) if np.ndim(s) == 0 else s
