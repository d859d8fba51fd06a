"""Multi-level reconstruction OOD scoring.

Each input is noised to every start on the plan grid and reconstructed; the
MSE and multi-scale MSE of every reconstruction against the clean input form
a row of ``2 * n_recon`` measurements. Rows are Z-scored column-wise with
statistics from an in-distribution validation set and averaged into one
score (higher = more OOD).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .diffusion import NoiseSchedule, ReconstructionPlan, reconstruct
from .errors import PlanMismatchError
from .rng import RngHandle

METRICS = ("mse", "ms_mse")
MS_SCALES = (1, 2, 4)
STD_FLOOR = 1e-12
DEFAULT_CHUNK = 256


def mse(a, b) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def _as_batch(a):
    a = np.asarray(a)
    return a.reshape((-1,) + a.shape[-2:])


def ms_mse_batch(a, b, scales=MS_SCALES) -> np.ndarray:
    """Multi-scale pooled MSE per image for ``(..., H, W)`` arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    h, w = a.shape[-2:]
    for s in scales:
        if h % s or w % s:
            raise ValueError(f"image {h}x{w} not divisible by pool scale {s}")
    ab, bb = _as_batch(a), _as_batch(b)
    total = np.zeros(ab.shape[0])
    for s in scales:
        total += kernels.pooled_sq_err(ab, bb, s)
    return (total / len(scales)).reshape(a.shape[:-2])


def ms_mse(a, b, scales=MS_SCALES) -> float:
    """Mean over scales of the MSE between ``s x s`` mean-pooled images."""
    return float(ms_mse_batch(a, b, scales))


def mse_batch(a, b) -> np.ndarray:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return np.mean(d * d, axis=(-2, -1))


def column_labels(plan: ReconstructionPlan) -> list[tuple[int, str]]:
    return [(t, m) for t in plan.grid for m in METRICS]


@dataclass
class ReconstructionRecord:
    start_t: int
    recon: np.ndarray
    similarity: dict


@dataclass
class ScoreMatrix:
    values: np.ndarray
    labels: list
    input_ids: list = field(default_factory=list)

    def __post_init__(self):
        # C order keeps row reductions (and so scores) bit-identical across code paths
        self.values = np.ascontiguousarray(self.values, np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.labels):
            raise ValueError(f"values shape {self.values.shape} does not match {len(self.labels)} labels")
        if not self.input_ids:
            self.input_ids = list(range(self.values.shape[0]))
        if np.isnan(self.values).any():
            raise ValueError("score matrix contains NaN")

    @property
    def n_recon(self) -> int:
        return len(self.labels) // len(METRICS)

    def select(self, labels) -> "ScoreMatrix":
        """Columns for ``labels`` (used to reuse a full-grid matrix for a sub-plan)."""
        pos = {lab: i for i, lab in enumerate(self.labels)}
        try:
            cols = [pos[tuple(lab)] for lab in labels]
        except KeyError as exc:
            raise PlanMismatchError(f"column {exc.args[0]} not in score matrix") from None
        return ScoreMatrix(self.values[:, cols], [tuple(lab) for lab in labels], list(self.input_ids))


@dataclass(frozen=True)
class ValidationStats:
    mean: np.ndarray
    std: np.ndarray
    labels: tuple

    def to_dict(self) -> dict:
        return {
            "labels": [list(lab) for lab in self.labels],
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
        }

    @classmethod
    def from_dict(cls, d) -> "ValidationStats":
        return cls(np.asarray(d["mean"], np.float64), np.asarray(d["std"], np.float64),
                   tuple((int(t), str(m)) for t, m in d["labels"]))


def fit_validation_stats(val_matrix: ScoreMatrix) -> ValidationStats:
    """Per-column population mean and std (std floored at 1e-12)."""
    v = val_matrix.values
    if v.shape[0] < 2:
        raise ValueError(f"need at least 2 validation rows, got {v.shape[0]}")
    mean = v.mean(axis=0)
    std = np.maximum(v.std(axis=0), STD_FLOOR)
    return ValidationStats(mean, std, tuple(tuple(lab) for lab in val_matrix.labels))


def zscores(values, stats: ValidationStats) -> np.ndarray:
    values = np.asarray(values, np.float64)
    if values.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"row length {values.shape[-1]} != {stats.mean.shape[0]} fitted columns")
    return (values - stats.mean) / stats.std


def zscore_aggregate(row, stats: ValidationStats) -> float:
    """Average Z-score of one measurement row."""
    return float(np.mean(zscores(row, stats)))


def subsample_plan(plan: ReconstructionPlan, keep_n: int, max_T: int | None = None) -> ReconstructionPlan:
    """Drop starts above ``max_T`` then keep ``keep_n`` uniformly strided starts.

    The stride is the largest one that still yields ``keep_n`` entries
    counting from the first remaining start, e.g. 100 -> 25 keeps every
    fourth start and 100 -> 13 every eighth. The stepping grid is untouched.
    """
    max_T = plan.max_T if max_T is None else int(max_T)
    if max_T > plan.T:
        raise ValueError(f"max_T={max_T} exceeds T={plan.T}")
    pool = [g for g in plan.grid if g <= max_T]
    keep_n = int(keep_n)
    if keep_n < 1 or keep_n > len(pool):
        raise ValueError(f"cannot keep {keep_n} of {len(pool)} starts at or below max_T={max_T}")
    stride = 1 if keep_n == 1 else (len(pool) - 1) // (keep_n - 1)
    grid = pool[::stride][:keep_n]
    return ReconstructionPlan(grid=grid, T=plan.T, sampler=plan.sampler, plms_order=plan.plms_order,
                              max_T=max_T, steps_grid=plan.steps_grid)


def input_stream(rng: RngHandle, input_id) -> RngHandle:
    return rng.child("input", input_id)


def reconstruct_all(net, x0, plan: ReconstructionPlan, sched: NoiseSchedule, rng: RngHandle):
    """All reconstructions of one image; ``rng`` is that image's stream."""
    records = []
    for t in plan.grid:
        rec = reconstruct(net, x0, t, plan, sched, rng=rng)
        sim = {"mse": mse(x0, rec), "ms_mse": ms_mse(x0, rec)}
        records.append(ReconstructionRecord(t, rec, sim))
    return records


def score_matrix(net, images, plan: ReconstructionPlan, sched: NoiseSchedule, rng: RngHandle,
                 input_ids=None, chunk: int = DEFAULT_CHUNK) -> ScoreMatrix:
    """Measurement matrix for a batch of images, processed in fixed-size chunks.

    Input ``i`` uses the stream ``rng.child("input", input_ids[i])`` so its
    row does not depend on which other images are scored with it.
    """
    images = np.asarray(images)
    n = images.shape[0]
    ids = list(range(n)) if input_ids is None else [int(i) for i in input_ids]
    if len(ids) != n:
        raise ValueError(f"{len(ids)} ids for {n} images")
    labels = column_labels(plan)
    out = np.empty((n, len(labels)))
    for lo in range(0, n, chunk):
        x0 = images[lo:lo + chunk]
        streams = [input_stream(rng, i) for i in ids[lo:lo + chunk]]
        for j, t in enumerate(plan.grid):
            rec = reconstruct(net, x0, t, plan, sched, rng=streams)
            out[lo:lo + chunk, 2 * j] = mse_batch(x0, rec)
            out[lo:lo + chunk, 2 * j + 1] = ms_mse_batch(x0, rec)
    return ScoreMatrix(out, labels, ids)


def fit_stats_on(net, val_images, plan, sched, rng, input_ids=None, chunk=DEFAULT_CHUNK) -> ValidationStats:
    return fit_validation_stats(score_matrix(net, val_images, plan, sched, rng, input_ids, chunk))


def scores_from_matrix(matrix: ScoreMatrix, stats: ValidationStats) -> np.ndarray:
    if tuple(tuple(lab) for lab in matrix.labels) != stats.labels:
        raise PlanMismatchError("score matrix columns do not match the fitted validation stats")
    return zscores(matrix.values, stats).mean(axis=1)


def score_dataset(net, images, plan: ReconstructionPlan, stats: ValidationStats, sched: NoiseSchedule,
                  rng: RngHandle, input_ids=None, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """One OOD score per image (higher = more OOD)."""
    if tuple(column_labels(plan)) != stats.labels:
        raise PlanMismatchError("plan grid does not match the grid the validation stats were fitted on")
    return scores_from_matrix(score_matrix(net, images, plan, sched, rng, input_ids, chunk), stats)


# --- CSV ------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def write_score_matrix_csv(path, matrix: ScoreMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["input_id", "start_t", "metric", "value"])
        for i, row in zip(matrix.input_ids, matrix.values):
            for (t, m), v in zip(matrix.labels, row):
                w.writerow([i, t, m, _fmt(v)])


def read_score_matrix_csv(path) -> ScoreMatrix:
    rows: dict = {}
    labels: list = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as f:
        for rec in csv.DictReader(f):
            lab = (int(rec["start_t"]), rec["metric"])
            if lab not in seen:
                seen.add(lab)
                labels.append(lab)
            rows.setdefault(int(rec["input_id"]), {})[lab] = float(rec["value"])
    ids = list(rows)
    values = np.array([[rows[i][lab] for lab in labels] for i in ids])
    return ScoreMatrix(values, labels, ids)


def write_scores_csv(path, input_ids, scores) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["input_id", "score"])
        for i, s in zip(input_ids, scores):
            w.writerow([int(i), _fmt(s)])


def read_scores_csv(path):
    ids, scores = [], []
    with open(path, newline="", encoding="utf-8") as f:
        for rec in csv.DictReader(f):
            ids.append(int(rec["input_id"]))
            scores.append(float(rec["score"]))
    return ids, np.asarray(scores)
