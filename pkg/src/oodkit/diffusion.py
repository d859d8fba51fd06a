"""Diffusion process: schedules, forward noising, DDPM / DDIM / PLMS steps.

Timesteps are 1-based (``1..T``) at the API; ``alpha_bar(0)`` is defined as 1
so a deterministic transfer can land exactly on ``t = 0``.

Arrays may carry any number of leading batch axes in front of ``(H, W)``.
Arithmetic runs in float64 and results are cast back to the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rng import RngHandle

# Adams-Bashforth weights, newest noise estimate first.
AB_COEFFS = {
    1: (1.0,),
    2: (3.0 / 2.0, -1.0 / 2.0),
    3: (23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0),
    4: (55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0),
}

SAMPLERS = ("ddpm", "plms")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float = 0.0
    beta_end: float = 0.0

    def alpha_bar(self, t: int) -> float:
        """``alpha_bar_t`` for ``t`` in ``0..T``."""
        t = int(t)
        if t < 0 or t > self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        return float(self.betas[int(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[int(t) - 1])


def linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    T = int(T)
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    t = np.arange(T, dtype=np.float64)
    betas = beta_start + t * (beta_end - beta_start) / (T - 1)
    betas[-1] = beta_end
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(T, betas, alphas, alpha_bars, float(beta_start), float(beta_end))


def fast_schedule(T: int = 100, ref_T: int = 1000, beta_start: float = 0.0015,
                  beta_end: float = 0.0195) -> NoiseSchedule:
    """Shorter chain with betas scaled by ``ref_T / T`` so ``alpha_bar`` spans a similar range."""
    k = ref_T / T
    return linear_schedule(T, beta_start * k, beta_end * k)


def _check_t(sched: NoiseSchedule, t: int, lo: int = 1):
    if not (lo <= int(t) <= sched.T):
        raise ValueError(f"timestep {t} outside [{lo}, {sched.T}]")


def _out_dtype(x):
    dt = np.asarray(x).dtype
    return dt if np.issubdtype(dt, np.floating) else np.float64


def forward_noise(x0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Sample ``x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    _check_t(sched, t)
    ab = sched.alpha_bar(t)
    out = np.sqrt(ab) * x0.astype(np.float64) + np.sqrt(1.0 - ab) * eps.astype(np.float64)
    return out.astype(_out_dtype(x0))


def _draw(rng, shape, *keys) -> np.ndarray:
    """Gaussian noise of ``shape``; ``rng`` is one handle or one handle per leading item."""
    if isinstance(rng, RngHandle):
        return rng.normal(shape, *keys)
    rngs = list(rng)
    if len(rngs) != shape[0]:
        raise ValueError(f"{len(rngs)} rng streams for batch of {shape[0]}")
    return np.stack([r.normal(shape[1:], *keys) for r in rngs])


def ddpm_posterior_std(sched: NoiseSchedule, t: int) -> float:
    if t == 1:
        return 0.0
    var = (1.0 - sched.alpha_bar(t - 1)) / (1.0 - sched.alpha_bar(t)) * sched.beta(t)
    return float(np.sqrt(var))


def ddpm_step(net, x_t, t: int, sched: NoiseSchedule, rng=None, eps_hat=None, z=None) -> np.ndarray:
    """One ancestral step ``x_t -> x_{t-1}`` with fixed posterior variance.

    ``eps_hat`` and ``z`` may be supplied to bypass the network / the rng.
    """
    _check_t(sched, t)
    x_t = np.asarray(x_t)
    if eps_hat is None:
        eps_hat = net(x_t, t)
    a, b, ab = sched.alpha(t), sched.beta(t), sched.alpha_bar(t)
    mean = (x_t.astype(np.float64) - (b / np.sqrt(1.0 - ab)) * np.asarray(eps_hat, np.float64)) / np.sqrt(a)
    sigma = ddpm_posterior_std(sched, t)
    if sigma > 0.0:
        if z is None:
            z = _draw(rng, x_t.shape, "ddpm_step", t)
        mean = mean + sigma * np.asarray(z, np.float64)
    return mean.astype(_out_dtype(x_t))


def ddim_transfer(x_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic move from level ``t`` to ``t_prev`` given a noise estimate."""
    if not (0 <= t_prev < t <= sched.T):
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    ab_t, ab_p = sched.alpha_bar(t), sched.alpha_bar(t_prev)
    x = np.asarray(x_t, np.float64)
    e = np.asarray(eps_hat, np.float64)
    x0_pred = (x - np.sqrt(1.0 - ab_t) * e) / np.sqrt(ab_t)
    out = np.sqrt(ab_p) * x0_pred + np.sqrt(1.0 - ab_p) * e
    return out.astype(_out_dtype(x_t))


def make_grid(T: int, steps: int) -> list[int]:
    if not (1 <= steps <= T):
        raise ValueError(f"need 1 <= steps <= T, got steps={steps}, T={T}")
    if T % steps:
        raise ValueError(f"T={T} not divisible by steps={steps}")
    stride = T // steps
    return list(range(stride, T + 1, stride))


@dataclass
class ReconstructionPlan:
    """Reconstruction starting points plus the sampler configuration.

    ``grid`` holds the starting points actually used. ``steps_grid`` is the
    PLMS stepping schedule the chains walk down; it defaults to ``grid`` and
    stays at the full schedule when ``grid`` is subsampled.
    """

    grid: list[int]
    T: int
    sampler: str = "plms"
    plms_order: int = 4
    max_T: int | None = None
    steps_grid: list[int] | None = None

    def __post_init__(self):
        self.grid = [int(g) for g in self.grid]
        if self.max_T is None:
            self.max_T = self.T
        if self.steps_grid is None:
            self.steps_grid = list(self.grid)
        self.steps_grid = [int(g) for g in self.steps_grid]
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.plms_order not in AB_COEFFS:
            raise ValueError(f"plms_order must be 1..4, got {self.plms_order}")
        if not self.grid:
            raise ValueError("empty reconstruction grid")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError("grid must be strictly ascending")
        if self.grid[0] < 1 or self.grid[-1] > self.max_T or self.max_T > self.T:
            raise ValueError(f"grid entries must lie in [1, {self.max_T}]")
        if self.sampler == "plms":
            missing = set(self.grid) - set(self.steps_grid)
            if missing:
                raise ValueError(f"starts {sorted(missing)} not on the stepping grid")

    @property
    def n_recon(self) -> int:
        return len(self.grid)

    @classmethod
    def full(cls, T: int, steps: int, sampler: str = "plms", plms_order: int = 4) -> "ReconstructionPlan":
        g = make_grid(T, steps)
        return cls(grid=g, T=T, sampler=sampler, plms_order=plms_order, steps_grid=g)

    def evals_for_start(self, start: int) -> int:
        if self.sampler == "ddpm":
            return int(start)
        return self.steps_grid.index(int(start)) + 1

    def summary(self) -> dict:
        return {"n_recon": self.n_recon, "max_t": self.max_T, "sampler": self.sampler}


@dataclass(frozen=True)
class EvalBudget:
    model_evaluations: int
    equivalent_samples: float


def count_evaluations(plan: ReconstructionPlan) -> EvalBudget:
    n = sum(plan.evals_for_start(s) for s in plan.grid)
    return EvalBudget(n, n / plan.T)


def plms_reconstruct(net, x0, start: int, grid: Sequence[int], sched: NoiseSchedule, rng=None,
                     eps=None, order: int = 4) -> np.ndarray:
    """Noise ``x0`` to ``start`` and walk ``grid`` down to 0 with PLMS.

    Uses ``index(start) + 1`` network evaluations. The forward noise is
    ``eps`` if given, else drawn from ``rng`` under the key ``("forward", start)``.
    """
    grid = [int(g) for g in grid]
    start = int(start)
    if start not in grid:
        raise ValueError(f"start {start} not on grid")
    if order not in AB_COEFFS:
        raise ValueError(f"order must be 1..4, got {order}")
    x0 = np.asarray(x0)
    if eps is None:
        eps = _draw(rng, x0.shape, "forward", start)
    x = forward_noise(x0, start, eps, sched)
    idx = grid.index(start)
    seq = grid[idx::-1] + [0]
    history: list[np.ndarray] = []
    for t_cur, t_next in zip(seq[:-1], seq[1:]):
        e = np.asarray(net(x, t_cur), np.float64)
        history.insert(0, e)
        del history[order:]
        coeffs = AB_COEFFS[len(history)]
        e_comb = sum(c * h for c, h in zip(coeffs, history))
        x = ddim_transfer(x, e_comb, t_cur, t_next, sched)
    return x


def ddpm_reconstruct(net, x0, start: int, sched: NoiseSchedule, rng=None, eps=None) -> np.ndarray:
    """Noise ``x0`` to ``start`` then run ``start`` ancestral steps (``start`` evaluations)."""
    start = int(start)
    _check_t(sched, start)
    x0 = np.asarray(x0)
    if eps is None:
        eps = _draw(rng, x0.shape, "forward", start)
    x = forward_noise(x0, start, eps, sched)
    for t in range(start, 0, -1):
        z = None
        if t > 1:
            z = _draw(rng, x0.shape, "ddpm", start, t)
        x = ddpm_step(net, x, t, sched, z=z)
    return x


def reconstruct(net, x0, start: int, plan: ReconstructionPlan, sched: NoiseSchedule, rng=None, eps=None):
    if plan.sampler == "ddpm":
        return ddpm_reconstruct(net, x0, start, sched, rng=rng, eps=eps)
    return plms_reconstruct(net, x0, start, plan.steps_grid, sched, rng=rng, eps=eps, order=plan.plms_order)
