"""Properties that need the trained desk model (shares the session ``desk`` run)."""

import numpy as np

from oodkit import diffusion, ood
from oodkit.rng import RngHandle


def _val(desk, n=50):
    return desk.first.datasets.in_ds.subset("val")[:n].astype(np.float64)


def test_trained_model_beats_zero_net_at_low_noise(desk):
    net, sched = desk.first.ctx["ddpm"]
    x0 = _val(desk)
    grid = diffusion.make_grid(sched.T, desk.cfg.plan.steps)
    rng = RngHandle(11)
    zero = lambda x, t: np.zeros_like(x)  # noqa: E731
    for start in [g for g in grid if g <= 0.3 * sched.T]:
        eps = rng.child("eps", start).generator().standard_normal(x0.shape)
        ours = diffusion.plms_reconstruct(net, x0, start, grid, sched, eps=eps)
        base = diffusion.plms_reconstruct(zero, x0, start, grid, sched, eps=eps)
        assert ood.mse(x0, ours) < ood.mse(x0, base), start


def test_plms_agrees_with_ddpm_in_distribution(desk):
    net, sched = desk.first.ctx["ddpm"]
    x0 = _val(desk)
    dense = list(range(1, sched.T + 1))
    # holds up to the first desk grid point (5% of T); r falls to ~0.88 at s=10
    for start in (1, 2, 5):
        eps = RngHandle(5).child("eps", start).generator().standard_normal(x0.shape)
        a = diffusion.plms_reconstruct(net, x0, start, dense, sched, eps=eps)
        b = diffusion.ddpm_reconstruct(net, x0, start, sched, rng=RngHandle(6), eps=eps)
        r = np.corrcoef(a.ravel(), b.ravel())[0, 1]
        assert r >= 0.9, (start, r)


def test_ood_scores_higher_than_held_out(desk):
    d = desk.dirs[0] / "scores" / "ddpm"
    name = desk.first.datasets.in_name
    _, s_in = ood.read_scores_csv(d / f"{name}_test.csv")
    for k in desk.first.datasets.ood:
        _, s_ood = ood.read_scores_csv(d / f"{k}.csv")
        assert np.mean(s_ood) > np.mean(s_in), k
