import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from oodkit.nn import DenoiserNet


def fd_check(params, loss_fn, h=1e-3, floor=1e-7):
    """Worst relative error between stored grads and central differences."""
    worst = 0.0
    for p in params:
        for i in range(p.value.size):
            old = p.value.flat[i]
            p.value.flat[i] = old + h
            fp = loss_fn()
            p.value.flat[i] = old - h
            fm = loss_fn()
            p.value.flat[i] = old
            fd = (fp - fm) / (2 * h)
            g = p.grad.flat[i]
            worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), floor))
    return worst


@pytest.fixture
def tiny_net():
    # 4x4 images, one hidden layer of 8: 360 parameters
    return DenoiserNet((4, 4), (8,), time_embed_dim=4, time_hidden_dim=4, seed=3, zero_output=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.json"


@dataclass
class DeskRuns:
    cfg: object
    first: object
    second: object
    dirs: tuple
    seconds: float


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """The seeded desk experiment (configs/desk.json), run twice from scratch."""
    from oodkit.harness import load_config, run_experiment

    runs, dirs, seconds = [], [], 0.0
    for k in range(2):
        cfg = load_config(DESK_CONFIG, env={})
        cfg.output_dir = str(tmp_path_factory.mktemp(f"desk{k}"))
        t0 = time.process_time()
        runs.append(run_experiment(cfg))
        if k == 0:
            seconds = time.process_time() - t0
        dirs.append(Path(cfg.output_dir))
    return DeskRuns(cfg, runs[0], runs[1], tuple(dirs), seconds)


def pytest_collection_modifyitems(items):
    for item in items:
        if "desk" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)
