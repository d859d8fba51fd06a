"""Experiment orchestration: AUC, rank aggregation, desk runs and sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import baselines, data, diffusion, ood, training
from .errors import ConfigError
from .kernels import mann_whitney_u
from .rng import RngHandle

log = logging.getLogger(__name__)

METHODS = ("ddpm", "ae", "mahalanobis", "memae", "anoddpm_mod")
REPORT_HEADER = ["pairing", "method", "auc", "n_recon", "max_t", "sampler", "model_evals", "seed"]
SEED_ENV = "OODKIT_SEED"


def auc(in_scores, ood_scores) -> float:
    """Probability that an OOD score exceeds an in-distribution score (ties count 1/2)."""
    x = np.asarray(in_scores, np.float64).ravel()
    y = np.asarray(ood_scores, np.float64).ravel()
    if x.size == 0 or y.size == 0:
        raise ValueError("auc needs non-empty score sets")
    return mann_whitney_u(x, y) / (x.size * y.size)


@dataclass
class PairingResult:
    in_name: str
    ood_name: str
    method: str
    auc: float
    n_in: int = 0
    n_ood: int = 0
    n_recon: int = 1
    max_t: int | None = None
    sampler: str = "none"
    model_evals: int = 0
    seed: int = 0
    error: str | None = None

    @property
    def pairing(self) -> str:
        return f"{self.in_name}_vs_{self.ood_name}"

    def row(self) -> list:
        return [self.pairing, self.method, "" if self.error else repr(float(self.auc)), self.n_recon,
                "" if self.max_t is None else self.max_t, self.sampler, self.model_evals, self.seed]


@dataclass
class RankTable:
    methods: list
    pairings: list
    ranks: dict
    average: dict

    def best(self) -> str:
        return min(self.methods, key=lambda m: (self.average[m], m))


def _average_ranks_desc(values) -> np.ndarray:
    v = -np.asarray(values, np.float64)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def average_rank(results) -> RankTable:
    """Rank methods by descending AUC within each pairing (ties share the mean rank), then average."""
    table: dict = {}
    methods: list = []
    for r in results:
        if r.error:
            continue
        table.setdefault(r.pairing, {})[r.method] = r.auc
        if r.method not in methods:
            methods.append(r.method)
    pairings = sorted(table)
    ranks = {}
    for p in pairings:
        missing = [m for m in methods if m not in table[p]]
        if missing:
            raise ValueError(f"pairing {p} has no result for {missing}")
        rk = _average_ranks_desc([table[p][m] for m in methods])
        ranks[p] = dict(zip(methods, rk.tolist()))
    avg = {m: float(np.mean([ranks[p][m] for p in pairings])) for m in methods} if pairings else {}
    return RankTable(methods, pairings, ranks, avg)


# --- config -----------------------------------------------------------------


@dataclass
class DatasetConfig:
    kind: str = "blobs"
    n: int = 2500
    H: int = 16
    W: int = 16
    seed: int = 1
    params: dict = field(default_factory=dict)
    name: str | None = None
    split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])

    def spec(self) -> data.DatasetSpec:
        return data.DatasetSpec(self.kind, self.n, self.H, self.W, self.seed, dict(self.params), self.name)


@dataclass
class OODConfig:
    """Either a generated dataset (``kind``...) or a flip of the in-distribution test split (``derive``)."""

    derive: str | None = None
    kind: str | None = None
    n: int = 250
    seed: int = 2
    params: dict = field(default_factory=dict)
    name: str | None = None

    def __post_init__(self):
        if (self.derive is None) == (self.kind is None):
            raise ConfigError("each ood entry needs exactly one of 'derive' or 'kind'")
        if self.derive not in (None, "vflip", "hflip"):
            raise ConfigError(f"unknown derived dataset {self.derive!r}")


@dataclass
class DDPMConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 2.5e-4
    T: int = 100
    beta_start: float = 0.015
    beta_end: float = 0.195
    hidden_dims: list = field(default_factory=lambda: [256, 256])
    time_embed_dim: int = 64
    time_hidden_dim: int = 128
    checkpoint: str | None = None


@dataclass
class AEConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    enc_widths: list = field(default_factory=lambda: [32, 16, 8])
    dec_widths: list = field(default_factory=lambda: [16, 32, 1])
    memory_size: int = 100
    shrink_threshold: float = 2.5e-3
    checkpoint: str | None = None


@dataclass
class ModelConfig:
    ddpm: DDPMConfig = field(default_factory=DDPMConfig)
    ae: AEConfig = field(default_factory=AEConfig)
    memae: AEConfig = field(default_factory=AEConfig)


@dataclass
class PlanConfig:
    steps: int = 20
    sampler: str = "plms"
    plms_order: int = 4
    max_T: int | None = None
    n_recon: int | None = None
    anoddpm_sampler: str = "ddpm"


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    ood: list = field(default_factory=lambda: [OODConfig(kind="stripes"), OODConfig(derive="vflip")])
    model: ModelConfig = field(default_factory=ModelConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    methods: list = field(default_factory=lambda: ["ddpm"])
    output_dir: str = "runs/desk"
    seed: int = 0

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")

    def build_plan(self) -> diffusion.ReconstructionPlan:
        p = self.plan
        T = self.model.ddpm.T
        plan = diffusion.ReconstructionPlan.full(T, p.steps, p.sampler, p.plms_order)
        if p.max_T is not None or p.n_recon is not None:
            max_T = T if p.max_T is None else p.max_T
            keep = p.n_recon or sum(1 for g in plan.grid if g <= max_T)
            plan = ood.subsample_plan(plan, keep, max_T)
        return plan

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    names = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        sub = _NESTED.get((cls, k))
        if sub is not None:
            kwargs[k] = _build(sub, v, f"{where}.{k}")
        elif cls is ExperimentConfig and k == "ood":
            kwargs[k] = [_build(OODConfig, o, f"{where}.ood[{i}]") for i, o in enumerate(v)]
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


_NESTED = {
    (ExperimentConfig, "dataset"): DatasetConfig,
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "plan"): PlanConfig,
    (ModelConfig, "ddpm"): DDPMConfig,
    (ModelConfig, "ae"): AEConfig,
    (ModelConfig, "memae"): AEConfig,
}


def config_from_dict(d: dict, env: dict | None = None) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, d, "config")
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    return cfg


def load_config(path, env: dict | None = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(d, env)


# --- experiment state -------------------------------------------------------


@dataclass
class Datasets:
    in_ds: data.ImageDataset
    ood: dict  # name -> images

    @property
    def in_name(self):
        return self.in_ds.name


def build_datasets(cfg: ExperimentConfig) -> Datasets:
    ds = data.split(data.generate(cfg.dataset.spec()), cfg.dataset.split, cfg.dataset.seed)
    out = {}
    for o in cfg.ood:
        if o.derive:
            flipped = (data.flip_v if o.derive == "vflip" else data.flip_h)(ds)
            out[o.name or flipped.name] = flipped.subset("test")
        else:
            spec = data.DatasetSpec(o.kind, o.n, cfg.dataset.H, cfg.dataset.W, o.seed, dict(o.params), o.name)
            out[spec.name] = data.generate(spec).images
    return Datasets(ds, out)


def _ddpm_train_config(cfg: ExperimentConfig, ckpt_path) -> training.TrainConfig:
    m = cfg.model.ddpm
    return training.TrainConfig(
        epochs=m.epochs, batch_size=m.batch_size, lr=m.lr, T=m.T, beta_start=m.beta_start, beta_end=m.beta_end,
        seed=cfg.seed, image_shape=(cfg.dataset.H, cfg.dataset.W), checkpoint_path=str(ckpt_path),
        hidden_dims=tuple(m.hidden_dims), time_embed_dim=m.time_embed_dim, time_hidden_dim=m.time_hidden_dim,
    )


def get_ddpm(cfg: ExperimentConfig, dsets: Datasets):
    """Load the configured DDPM checkpoint, or train one into the output directory."""
    if cfg.model.ddpm.checkpoint:
        man = training.load_checkpoint(cfg.model.ddpm.checkpoint)
    else:
        path = Path(cfg.output_dir) / "checkpoints" / "ddpm.ckpt"
        man, recs = training.train_ddpm(_ddpm_train_config(cfg, path), dsets.in_ds)
        _write_losses(Path(cfg.output_dir) / "losses_ddpm.csv", recs)
    return training.net_from_manifest(man), man.schedule()


def get_ae(cfg: ExperimentConfig, dsets: Datasets, kind: str):
    mc = cfg.model.ae if kind == "ae" else cfg.model.memae
    if mc.checkpoint:
        man = training.load_checkpoint(mc.checkpoint)
        return baselines.ae_from_manifest(man) if kind == "ae" else baselines.memae_from_manifest(man)
    shape = (cfg.dataset.H, cfg.dataset.W)
    kw = dict(enc_widths=tuple(mc.enc_widths), dec_widths=tuple(mc.dec_widths), seed=cfg.seed)
    if kind == "ae":
        model = baselines.AEModel(shape, **kw)
    else:
        model = baselines.MemAEModel(shape, mc.memory_size, mc.shrink_threshold, **kw)
    recs = training.train_reconstructor(model, dsets.in_ds.subset("train"), mc.epochs, mc.batch_size, mc.lr, cfg.seed)
    training.save_checkpoint(model.to_manifest(cfg.seed), Path(cfg.output_dir) / "checkpoints" / f"{kind}.ckpt")
    _write_losses(Path(cfg.output_dir) / f"losses_{kind}.csv", recs)
    return model


def _write_losses(path, recs):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for r in recs:
            w.writerow([r.epoch, repr(r.mean_loss)])


def score_rng(cfg: ExperimentConfig, dataset_name: str) -> RngHandle:
    return RngHandle(cfg.seed).child("score", dataset_name)


@dataclass
class DDPMMatrices:
    val: ood.ScoreMatrix
    test: ood.ScoreMatrix
    ood: dict


def ddpm_matrices(net, sched, plan, cfg, dsets: Datasets) -> DDPMMatrices:
    """Measurement matrices for validation, held-out test and every OOD set; checks the eval budget."""
    ds = dsets.in_ds
    budget = diffusion.count_evaluations(plan).model_evaluations

    def run(images, name, ids):
        before = net.n_evals
        m = ood.score_matrix(net, images, plan, sched, score_rng(cfg, name), ids)
        used = net.n_evals - before
        if used != budget * len(images):
            raise RuntimeError(f"model evaluations {used} != predicted {budget} x {len(images)}")
        return m

    val = run(ds.subset("val"), ds.name, ds.split_indices("val"))
    test = run(ds.subset("test"), ds.name, ds.split_indices("test"))
    oods = {name: run(imgs, name, range(len(imgs))) for name, imgs in dsets.ood.items()}
    return DDPMMatrices(val, test, oods)


def _score_ddpm(mats: DDPMMatrices, labels):
    val = mats.val.select(labels)
    stats = ood.fit_validation_stats(val)
    s_in = ood.scores_from_matrix(mats.test.select(labels), stats)
    s_ood = {k: ood.scores_from_matrix(m.select(labels), stats) for k, m in mats.ood.items()}
    return stats, s_in, s_ood


@dataclass
class ExperimentResult:
    results: list
    report_path: Path
    rank: RankTable | None = None
    errors: list = field(default_factory=list)
    ctx: dict = field(default_factory=dict, repr=False)
    datasets: Datasets | None = field(default=None, repr=False)


def _method_scores(method, cfg, dsets, ctx):
    """Return (in_scores, {ood_name: scores}, meta) for one baseline method."""
    ds = dsets.in_ds
    test = ds.subset("test")
    if method in ("ae", "mahalanobis"):
        if "ae" not in ctx:
            ctx["ae"] = get_ae(cfg, dsets, "ae")
        model = ctx["ae"]
        if method == "ae":
            fn = lambda x: baselines.ae_score(model, x)  # noqa: E731
        else:
            stats = baselines.fit_mahalanobis(model, ds.subset("train"), ds.subset("val"))
            fn = lambda x: baselines.mahalanobis_score(model, stats, x)  # noqa: E731
        meta = dict(n_recon=1, max_t=None, sampler="none", model_evals=1)
    elif method == "memae":
        model = get_ae(cfg, dsets, "memae")
        fn = lambda x: baselines.memae_score(model, x)  # noqa: E731
        meta = dict(n_recon=1, max_t=None, sampler="none", model_evals=1)
    elif method == "anoddpm_mod":
        net, sched = ctx["ddpm"]
        start = baselines.anoddpm_start(sched.T)
        sampler = cfg.plan.anoddpm_sampler

        def fn(x, name, ids):
            streams = [ood.input_stream(score_rng(cfg, name).child("anoddpm"), i) for i in ids]
            return baselines.anoddpm_mod_score(net, sched, x, streams, start, sampler, cfg.plan.steps)

        evals = start if sampler == "ddpm" else diffusion.make_grid(sched.T, cfg.plan.steps).index(start) + 1
        meta = dict(n_recon=1, max_t=start, sampler=sampler, model_evals=evals)
        s_in = fn(test, ds.name, ds.split_indices("test"))
        s_ood = {k: fn(v, k, range(len(v))) for k, v in dsets.ood.items()}
        return s_in, s_ood, meta
    else:
        raise ValueError(method)
    return fn(test), {k: fn(v) for k, v in dsets.ood.items()}, meta


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Train/load models, score every (method, OOD set) pairing and write the report."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dsets = build_datasets(cfg)
    in_name = dsets.in_name
    results: list[PairingResult] = []
    errors = []
    ctx: dict = {}

    def fail(method, name, exc):
        log.error("%s on %s failed: %s", method, name, exc)
        errors.append((f"{in_name}_vs_{name}", method, f"{type(exc).__name__}: {exc}"))
        results.append(PairingResult(in_name, name, method, math.nan, seed=cfg.seed, error=str(exc)))

    needs_ddpm = any(m in cfg.methods for m in ("ddpm", "anoddpm_mod"))
    if needs_ddpm:
        try:
            ctx["ddpm"] = get_ddpm(cfg, dsets)
        except Exception as exc:  # every pairing of DDPM-based methods fails
            for m in ("ddpm", "anoddpm_mod"):
                if m in cfg.methods:
                    for name in dsets.ood:
                        fail(m, name, exc)

    for method in cfg.methods:
        if method in ("ddpm", "anoddpm_mod") and "ddpm" not in ctx:
            continue
        try:
            if method == "ddpm":
                net, sched = ctx["ddpm"]
                plan = cfg.build_plan()
                mats = ddpm_matrices(net, sched, plan, cfg, dsets)
                ctx["ddpm_mats"] = (plan, mats)
                stats, s_in, s_ood = _score_ddpm(mats, ood.column_labels(plan))
                _write_ddpm_outputs(out, plan, stats, mats, s_in, s_ood, dsets)
                meta = dict(n_recon=plan.n_recon, max_t=plan.max_T, sampler=plan.sampler,
                            model_evals=diffusion.count_evaluations(plan).model_evaluations)
            else:
                s_in, s_ood, meta = _method_scores(method, cfg, dsets, ctx)
                ood.write_scores_csv(out / "scores" / method / f"{in_name}_test.csv",
                                     dsets.in_ds.split_indices("test"), s_in)
                for k, v in s_ood.items():
                    ood.write_scores_csv(out / "scores" / method / f"{k}.csv", range(len(v)), v)
        except Exception as exc:
            for name in dsets.ood:
                fail(method, name, exc)
            continue
        for name, s in s_ood.items():
            results.append(PairingResult(in_name, name, method, auc(s_in, s), len(s_in), len(s), seed=cfg.seed, **meta))

    results.sort(key=lambda r: (r.pairing, r.method))
    report = out / "results.csv"
    write_report(report, results)
    write_errors(out / "errors.csv", errors)
    good = [r for r in results if not r.error]
    rank = None
    if good:
        try:
            rank = average_rank(good)
            write_rank_table(out / "ranks.csv", rank)
        except ValueError as exc:
            log.warning("rank table skipped: %s", exc)
    return ExperimentResult(results, report, rank, errors, ctx, dsets)


def _write_ddpm_outputs(out, plan, stats, mats, s_in, s_ood, dsets):
    d = out / "scores" / "ddpm"
    d.mkdir(parents=True, exist_ok=True)
    ds = dsets.in_ds
    ood.write_scores_csv(d / f"{ds.name}_test.csv", ds.split_indices("test"), s_in)
    for k, v in s_ood.items():
        ood.write_scores_csv(d / f"{k}.csv", range(len(v)), v)
    m = out / "matrices"
    m.mkdir(parents=True, exist_ok=True)
    ood.write_score_matrix_csv(m / f"{ds.name}_val.csv", mats.val)
    ood.write_score_matrix_csv(m / f"{ds.name}_test.csv", mats.test)
    for k, v in mats.ood.items():
        ood.write_score_matrix_csv(m / f"{k}.csv", v)
    write_stats(out / "val_stats.json", stats, plan)


def write_stats(path, stats: ood.ValidationStats, plan: diffusion.ReconstructionPlan):
    d = {"plan": {"grid": plan.grid, "T": plan.T, "sampler": plan.sampler, "plms_order": plan.plms_order,
                  "max_T": plan.max_T, "steps_grid": plan.steps_grid}}
    d.update(stats.to_dict())
    Path(path).write_text(json.dumps(d, indent=1) + "\n", encoding="utf-8")


def read_stats(path):
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return ood.ValidationStats.from_dict(d), diffusion.ReconstructionPlan(**d["plan"])


def write_report(path, results) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in results:
            w.writerow(r.row())


def read_report(path) -> list[PairingResult]:
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        for rec in csv.DictReader(f):
            in_name, _, ood_name = rec["pairing"].partition("_vs_")
            a = rec["auc"]
            out.append(PairingResult(
                in_name, ood_name, rec["method"], float(a) if a else math.nan,
                n_recon=int(rec["n_recon"]), max_t=int(rec["max_t"]) if rec["max_t"] else None,
                sampler=rec["sampler"], model_evals=int(rec["model_evals"]), seed=int(rec["seed"]),
                error=None if a else "missing auc",
            ))
    return out


def write_errors(path, errors) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["pairing", "method", "error"])
        w.writerows(errors)


def write_rank_table(path, rank: RankTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "average_rank"] + rank.pairings)
        for m in sorted(rank.methods, key=lambda m: (rank.average[m], m)):
            w.writerow([m, repr(rank.average[m])] + [repr(rank.ranks[p][m]) for p in rank.pairings])


# --- sweeps -------------------------------------------------------------------


@dataclass
class SweepCell:
    keep_n: int
    max_T: int
    plan: diffusion.ReconstructionPlan | None
    results: list
    skipped: str | None = None


def sweep_reconstructions(cfg: ExperimentConfig, keep_ns, max_Ts, net=None, sched=None, dsets=None,
                          mats=None, base_plan=None):
    """AUC per (keep_n, max_T) cell, reusing one set of full-grid reconstructions.

    Returns ``(cells, report_path)``. Cells whose ``keep_n`` exceeds the
    starts available below ``max_T`` are recorded as skipped.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dsets = dsets or build_datasets(cfg)
    if mats is None:
        if net is None:
            net, sched = get_ddpm(cfg, dsets)
        base_plan = base_plan or diffusion.ReconstructionPlan.full(
            cfg.model.ddpm.T, cfg.plan.steps, cfg.plan.sampler, cfg.plan.plms_order)
        mats = ddpm_matrices(net, sched, base_plan, cfg, dsets)
    cells = []
    rows = []
    for max_T in max_Ts:
        for keep in keep_ns:
            try:
                plan = ood.subsample_plan(base_plan, keep, max_T)
            except ValueError as exc:
                cells.append(SweepCell(keep, max_T, None, [], str(exc)))
                continue
            _, s_in, s_ood = _score_ddpm(mats, ood.column_labels(plan))
            budget = diffusion.count_evaluations(plan).model_evaluations
            res = [PairingResult(dsets.in_name, k, "ddpm", auc(s_in, v), len(s_in), len(v), plan.n_recon,
                                 plan.max_T, plan.sampler, budget, cfg.seed) for k, v in s_ood.items()]
            cells.append(SweepCell(keep, max_T, plan, res))
            rows.extend(res)
    report = out / "sweep.csv"
    write_report(report, rows)
    with open(out / "sweep_skipped.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["keep_n", "max_t", "reason"])
        for c in cells:
            if c.skipped:
                w.writerow([c.keep_n, c.max_T, c.skipped])
    return cells, report
