"""Small dense-array network toolkit with hand-written reverse mode.

Layers are stateless with respect to activations: ``forward`` returns
``(output, cache)`` and ``backward(cache, upstream)`` accumulates parameter
gradients and returns the input gradient. Forward passes therefore never
touch parameters and can be shared between workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .rng import RngHandle

DTYPE = np.float32


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ValueError(f"grad shape {self.grad.shape} != value shape {self.value.shape} for {self.name}")

    def zero_grad(self):
        self.grad[...] = 0


def glorot_uniform(gen: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-lim, lim, size=shape).astype(DTYPE)


def swish(x: np.ndarray) -> np.ndarray:
    """Elementwise ``x * sigmoid(x)``."""
    return kernels.swish_fwd(x)


def sinusoidal_embed(t, dim: int, base: float = 10000.0) -> np.ndarray:
    """Sinusoidal timestep embedding.

    ``t`` may be a scalar or an integer array; the result has shape
    ``t.shape + (dim,)`` with the sine lanes first and cosine lanes second.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("timestep must be >= 0")
    half = dim // 2
    freqs = base ** (-2.0 * np.arange(half) / dim)
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


# --- layers ---------------------------------------------------------------


class Layer:
    def params(self) -> list[Param]:
        return []

    def __call__(self, x):
        return self.forward(x)[0]


class Dense(Layer):
    def __init__(self, name, fan_in, fan_out, gen=None, zero=False):
        if zero or gen is None:
            w = np.zeros((fan_in, fan_out), DTYPE)
        else:
            w = glorot_uniform(gen, fan_in, fan_out, (fan_in, fan_out))
        self.W = Param(f"{name}.W", w)
        self.b = Param(f"{name}.b", np.zeros(fan_out, DTYPE))

    def params(self):
        return [self.W, self.b]

    def forward(self, x):
        return x @ self.W.value + self.b.value, x

    def backward(self, x, g):
        self.W.grad += x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        self.b.grad += g.reshape(-1, g.shape[-1]).sum(axis=0)
        return g @ self.W.value.T


class Swish(Layer):
    def forward(self, x):
        return kernels.swish_fwd(x), x

    def backward(self, x, g):
        return kernels.swish_bwd(x, g)


class LeakyReLU(Layer):
    def __init__(self, slope=0.2):
        self.slope = slope

    def forward(self, x):
        return np.where(x > 0, x, self.slope * x).astype(x.dtype, copy=False), x

    def backward(self, x, g):
        return np.where(x > 0, g, self.slope * g).astype(g.dtype, copy=False)


class Conv2d(Layer):
    """Strided 2-D convolution on ``(B, C, H, W)`` arrays."""

    def __init__(self, name, cin, cout, gen=None, kernel=3, stride=2, pad=1):
        self.k, self.s, self.p = kernel, stride, pad
        shape = (cout, cin, kernel, kernel)
        if gen is None:
            w = np.zeros(shape, DTYPE)
        else:
            w = glorot_uniform(gen, cin * kernel * kernel, cout * kernel * kernel, shape)
        self.W = Param(f"{name}.W", w)
        self.b = Param(f"{name}.b", np.zeros(cout, DTYPE))

    def params(self):
        return [self.W, self.b]

    def _out_hw(self, h, w):
        return (h + 2 * self.p - self.k) // self.s + 1, (w + 2 * self.p - self.k) // self.s + 1

    def _window(self, xp, kh, kw, ho, wo):
        s = self.s
        return xp[:, :, kh:kh + s * (ho - 1) + 1:s, kw:kw + s * (wo - 1) + 1:s]

    def forward(self, x):
        b, c, h, w = x.shape
        ho, wo = self._out_hw(h, w)
        p = self.p
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        out = np.zeros((b, self.W.value.shape[0], ho, wo), x.dtype)
        for kh in range(self.k):
            for kw in range(self.k):
                win = self._window(xp, kh, kw, ho, wo)
                out += np.einsum("bchw,oc->bohw", win, self.W.value[:, :, kh, kw], optimize=True)
        out += self.b.value[None, :, None, None]
        return out, xp

    def backward(self, xp, g):
        ho, wo = g.shape[2:]
        dxp = np.zeros_like(xp)
        s = self.s
        for kh in range(self.k):
            for kw in range(self.k):
                win = self._window(xp, kh, kw, ho, wo)
                self.W.grad[:, :, kh, kw] += np.einsum("bohw,bchw->oc", g, win, optimize=True)
                dxp[:, :, kh:kh + s * (ho - 1) + 1:s, kw:kw + s * (wo - 1) + 1:s] += np.einsum(
                    "bohw,oc->bchw", g, self.W.value[:, :, kh, kw], optimize=True
                )
        self.b.grad += g.sum(axis=(0, 2, 3))
        p = self.p
        return dxp[:, :, p:dxp.shape[2] - p, p:dxp.shape[3] - p]


class ConvTranspose2d(Layer):
    """Kernel-2 stride-2 transposed convolution (exact 2x upsampling)."""

    def __init__(self, name, cin, cout, gen=None):
        shape = (cin, cout, 2, 2)
        w = np.zeros(shape, DTYPE) if gen is None else glorot_uniform(gen, cin * 4, cout * 4, shape)
        self.W = Param(f"{name}.W", w)
        self.b = Param(f"{name}.b", np.zeros(cout, DTYPE))

    def params(self):
        return [self.W, self.b]

    def forward(self, x):
        b, _, h, w = x.shape
        y = np.einsum("bcij,codk->boidjk", x, self.W.value, optimize=True)
        y = y.reshape(b, -1, 2 * h, 2 * w) + self.b.value[None, :, None, None]
        return y, x

    def backward(self, x, g):
        b, _, h, w = x.shape
        g6 = g.reshape(b, g.shape[1], h, 2, w, 2)
        self.W.grad += np.einsum("bcij,boidjk->codk", x, g6, optimize=True)
        self.b.grad += g.sum(axis=(0, 2, 3))
        return np.einsum("boidjk,codk->bcij", g6, self.W.value, optimize=True)


class Sequential(Layer):
    def __init__(self, *layers):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, caches, g):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            g = layer.backward(c, g)
        return g


# --- denoiser -------------------------------------------------------------


class DenoiserNet:
    """Time-conditioned MLP noise predictor ``eps_theta(x_t, t)``.

    The flattened image goes through ``len(hidden_dims)`` Swish layers; the
    timestep embedding (sinusoidal -> Dense -> Swish -> Dense) is projected
    and added to the first hidden pre-activation. The output layer starts at
    zero, so an untrained net predicts zero noise.
    """

    def __init__(self, image_shape=(16, 16), hidden_dims=(256, 256), time_embed_dim=64,
                 time_hidden_dim=128, seed=0, zero_output=True):
        if time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if not hidden_dims:
            raise ValueError("need at least one hidden layer")
        self.image_shape = tuple(int(s) for s in image_shape)
        self.hidden_dims = tuple(int(h) for h in hidden_dims)
        self.time_embed_dim = int(time_embed_dim)
        self.time_hidden_dim = int(time_hidden_dim)
        self.n_evals = 0

        gen = RngHandle(seed).child("init").generator()
        d = int(np.prod(self.image_shape))
        self.t1 = Dense("time.0", self.time_embed_dim, self.time_hidden_dim, gen)
        self.t2 = Dense("time.1", self.time_hidden_dim, self.time_hidden_dim, gen)
        self.tproj = Dense("time.proj", self.time_hidden_dim, self.hidden_dims[0], gen)
        self.hidden = []
        fan_in = d
        for i, h in enumerate(self.hidden_dims):
            self.hidden.append(Dense(f"hidden.{i}", fan_in, h, gen))
            fan_in = h
        self.out = Dense("out", fan_in, d, gen, zero=zero_output)

    def _layers(self):
        return [self.t1, self.t2, self.tproj, *self.hidden, self.out]

    @property
    def params(self) -> list[Param]:
        return [p for layer in self._layers() for p in layer.params()]

    def n_params(self) -> int:
        return sum(p.value.size for p in self.params)

    @property
    def dtype(self):
        return self.out.W.value.dtype

    def astype(self, dtype) -> "DenoiserNet":
        """Copy of the net with all parameters cast to ``dtype`` (used by gradient checks)."""
        clone = DenoiserNet(self.image_shape, self.hidden_dims, self.time_embed_dim, self.time_hidden_dim)
        for dst, src in zip(clone.params, self.params):
            dst.value = src.value.astype(dtype)
            dst.grad = np.zeros_like(dst.value)
        return clone

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def _check(self, x_t):
        if tuple(x_t.shape[-2:]) != self.image_shape:
            raise ValueError(f"expected image shape {self.image_shape}, got {tuple(x_t.shape[-2:])}")

    def forward_cached(self, x_t, t):
        x_t = np.asarray(x_t)
        self._check(x_t)
        lead = x_t.shape[:-2]
        dt = self.dtype
        x = x_t.reshape(-1, int(np.prod(self.image_shape))).astype(dt, copy=False)
        tt = np.broadcast_to(np.asarray(t), lead).reshape(-1)
        emb = sinusoidal_embed(tt, self.time_embed_dim).astype(dt)

        a1, c_t1 = self.t1.forward(emb)
        s1 = kernels.swish_fwd(a1)
        temb, c_t2 = self.t2.forward(s1)
        st = kernels.swish_fwd(temb)
        proj, c_tp = self.tproj.forward(st)

        caches = []
        h = x
        for i, layer in enumerate(self.hidden):
            pre, c = layer.forward(h)
            if i == 0:
                pre = pre + proj
            h = kernels.swish_fwd(pre)
            caches.append((c, pre))
        y, c_out = self.out.forward(h)
        self.n_evals += x.shape[0]
        cache = (lead, a1, c_t1, temb, c_t2, st, c_tp, caches, c_out)
        return y.reshape(x_t.shape), cache

    def __call__(self, x_t, t):
        return self.forward_cached(x_t, t)[0]

    def backward(self, cache, upstream):
        lead, a1, c_t1, temb, c_t2, st, c_tp, caches, c_out = cache
        g = np.asarray(upstream, dtype=self.dtype).reshape(-1, self.out.W.value.shape[1])
        g = self.out.backward(c_out, g)
        g_proj = None
        for i in reversed(range(len(self.hidden))):
            c, pre = caches[i]
            g = kernels.swish_bwd(pre, g)
            if i == 0:
                g_proj = g
            g = self.hidden[i].backward(c, g)
        g = self.tproj.backward(c_tp, g_proj)
        g = kernels.swish_bwd(temb, g)
        g = self.t2.backward(c_t2, g)
        g = kernels.swish_bwd(a1, g)
        self.t1.backward(c_t1, g)


def denoiser_forward(net: DenoiserNet, x_t, t) -> np.ndarray:
    return net(x_t, t)


def denoiser_backward(net: DenoiserNet, x_t, t, upstream_grad) -> None:
    """Accumulate d<upstream_grad, eps_hat>/d(param) into every ``param.grad``."""
    upstream_grad = np.asarray(upstream_grad)
    if upstream_grad.shape != np.shape(x_t):
        raise ValueError(f"upstream shape {upstream_grad.shape} != input shape {np.shape(x_t)}")
    _, cache = net.forward_cached(x_t, t)
    net.backward(cache, upstream_grad)


# --- optimizer ------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[Param], state: AdamState) -> AdamState:
    """One bias-corrected Adam update in place; grads are zeroed afterwards."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p in params:
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        m, v = state.m[p.name], state.v[p.name]
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.value -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.value.dtype)
        p.zero_grad()
    return state
