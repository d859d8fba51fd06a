"""Command-line interface: ``oodkit <subcommand> ...``.

Failures exit non-zero and print one JSON line to stderr:
``{"status": "error", "code": ..., "message": ...}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import baselines, data, harness, ood, training
from .errors import ConfigError, OodkitError


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.config_from_dict({})
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "output_dir", None):
        cfg.output_dir = args.output_dir
    for attr, dest in (("steps", "steps"), ("sampler", "sampler"), ("max_t", "max_T"), ("n_recon", "n_recon")):
        v = getattr(args, attr, None)
        if v is not None:
            setattr(cfg.plan, dest, v)
    if getattr(args, "methods", None):
        cfg.methods = [m.strip() for m in args.methods.split(",") if m.strip()]
        cfg.__post_init__()
    if getattr(args, "epochs", None) is not None:
        cfg.model.ddpm.epochs = cfg.model.ae.epochs = cfg.model.memae.epochs = args.epochs
    return cfg


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_gen_data(args):
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dsets = harness.build_datasets(cfg)
    ds = dsets.in_ds
    written = []
    path = out / f"{ds.name}-images-idx3-ubyte"
    data.write_idx(path, ds.images)
    written.append(str(path))
    splits = {k: [int(i) for i in v] for k, v in ds.splits.items()}
    (out / f"{ds.name}-splits.json").write_text(json.dumps(splits) + "\n", encoding="utf-8")
    for name, imgs in dsets.ood.items():
        p = out / f"{name}-images-idx3-ubyte"
        data.write_idx(p, imgs)
        written.append(str(p))
    print(json.dumps({"status": "ok", "written": written}))


def cmd_train(args):
    cfg = _config(args)
    dsets = harness.build_datasets(cfg)
    default = Path(cfg.output_dir) / "checkpoints" / f"{args.kind}.ckpt"
    out = Path(args.out) if args.out else default
    if args.kind == "ddpm":
        tc = harness._ddpm_train_config(cfg, out)
        _, recs = training.train_ddpm(tc, dsets.in_ds)
    else:
        mc = cfg.model.ae if args.kind == "ae" else cfg.model.memae
        kw = dict(enc_widths=tuple(mc.enc_widths), dec_widths=tuple(mc.dec_widths), seed=cfg.seed)
        shape = (cfg.dataset.H, cfg.dataset.W)
        model = (baselines.AEModel(shape, **kw) if args.kind == "ae"
                 else baselines.MemAEModel(shape, mc.memory_size, mc.shrink_threshold, **kw))
        recs = training.train_reconstructor(model, dsets.in_ds.subset("train"), mc.epochs, mc.batch_size,
                                            mc.lr, cfg.seed)
        training.save_checkpoint(model.to_manifest(cfg.seed), out)
    print(json.dumps({"status": "ok", "checkpoint": str(out),
                      "losses": [round(r.mean_loss, 6) for r in recs]}))


def _ddpm(path):
    man = training.load_checkpoint(path)
    return training.net_from_manifest(man), man.schedule()


def cmd_fit_stats(args):
    cfg = _config(args)
    dsets = harness.build_datasets(cfg)
    net, sched = _ddpm(args.checkpoint)
    cfg.model.ddpm.T = sched.T
    plan = cfg.build_plan()
    ds = dsets.in_ds
    m = ood.score_matrix(net, ds.subset("val"), plan, sched, harness.score_rng(cfg, ds.name), ds.split_indices("val"))
    stats = ood.fit_validation_stats(m)
    harness.write_stats(args.out, stats, plan)
    if args.matrix_out:
        ood.write_score_matrix_csv(args.matrix_out, m)
    print(json.dumps({"status": "ok", "stats": str(args.out), "columns": len(stats.labels)}))


def _images_for(args, cfg, dsets):
    if args.images:
        ds = data.load_idx(args.images)
        return ds.name, ds.images, np.arange(len(ds))
    name = args.dataset or dsets.in_name
    if name == dsets.in_name:
        return name, dsets.in_ds.subset(args.split), dsets.in_ds.split_indices(args.split)
    if name not in dsets.ood:
        raise ConfigError(f"unknown dataset {name!r}; known: {[dsets.in_name, *dsets.ood]}")
    imgs = dsets.ood[name]
    return name, imgs, np.arange(len(imgs))


def cmd_score(args):
    cfg = _config(args)
    dsets = harness.build_datasets(cfg)
    name, images, ids = _images_for(args, cfg, dsets)
    man = training.load_checkpoint(args.checkpoint)
    if man.model_kind == "ddpm":
        if not args.stats:
            raise ConfigError("scoring with a ddpm checkpoint needs --stats")
        stats, plan = harness.read_stats(args.stats)
        net, sched = training.net_from_manifest(man), man.schedule()
        m = ood.score_matrix(net, images, plan, sched, harness.score_rng(cfg, name), ids)
        scores = ood.scores_from_matrix(m, stats)
        if args.matrix_out:
            ood.write_score_matrix_csv(args.matrix_out, m)
    elif man.model_kind == "ae":
        scores = baselines.ae_score(baselines.ae_from_manifest(man), images)
    else:
        scores = baselines.memae_score(baselines.memae_from_manifest(man), images)
    ood.write_scores_csv(args.out, ids, np.atleast_1d(scores))
    print(json.dumps({"status": "ok", "scores": str(args.out), "n": int(len(ids))}))


def _print_results(results):
    for r in results:
        print(json.dumps({"pairing": r.pairing, "method": r.method,
                          "auc": None if r.error else r.auc, "model_evals": r.model_evals, "error": r.error}))


def cmd_evaluate(args):
    cfg = _config(args)
    res = harness.run_experiment(cfg)
    _print_results(res.results)
    print(json.dumps({"status": "ok" if not res.errors else "partial", "report": str(res.report_path)}))


def cmd_sweep(args):
    cfg = _config(args)
    T = cfg.model.ddpm.T
    keep = args.keep or [cfg.plan.steps]
    max_ts = args.max_ts or [T]
    cells, report = harness.sweep_reconstructions(cfg, keep, max_ts)
    for c in cells:
        if c.skipped:
            print(json.dumps({"keep_n": c.keep_n, "max_t": c.max_T, "skipped": c.skipped}))
        else:
            for r in c.results:
                print(json.dumps({"keep_n": c.keep_n, "max_t": c.max_T, "pairing": r.pairing, "auc": r.auc,
                                  "model_evals": r.model_evals}))
    print(json.dumps({"status": "ok", "report": str(report)}))


def cmd_report(args):
    results = []
    for p in args.results:
        results.extend(harness.read_report(p))
    rank = harness.average_rank(results)
    if args.out:
        harness.write_rank_table(args.out, rank)
    for m in sorted(rank.methods, key=lambda m: (rank.average[m], m)):
        print(json.dumps({"method": m, "average_rank": rank.average[m]}))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oodkit", description="Multi-level diffusion reconstruction OOD detection.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, plan=True):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output-dir")
        sp.add_argument("--epochs", type=int)
        if plan:
            sp.add_argument("--steps", type=int, help="PLMS stepping grid size")
            sp.add_argument("--sampler", choices=["plms", "ddpm"])
            sp.add_argument("--max-t", type=int)
            sp.add_argument("--n-recon", type=int)

    sp = sub.add_parser("gen-data", help="write configured datasets as IDX files")
    common(sp, plan=False)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model on the in-distribution train split")
    sp.add_argument("kind", choices=training.MODEL_KINDS)
    common(sp, plan=False)
    sp.add_argument("--out", help="checkpoint path")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("fit-stats", help="fit validation Z-score statistics for a DDPM checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--matrix-out")
    sp.set_defaults(func=cmd_fit_stats)

    sp = sub.add_parser("score", help="write per-input OOD scores")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--stats")
    sp.add_argument("--dataset", help="in-distribution or configured OOD dataset name")
    sp.add_argument("--images", help="IDX image file to score instead of a configured dataset")
    sp.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    sp.add_argument("--out", required=True)
    sp.add_argument("--matrix-out")
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("evaluate", help="run the configured experiment end to end")
    common(sp)
    sp.add_argument("--methods", help="comma-separated subset of " + ",".join(harness.METHODS))
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep", help="AUC vs number of reconstructions and max_T")
    common(sp)
    sp.add_argument("--keep", type=_ints, help="comma-separated reconstruction counts")
    sp.add_argument("--max-ts", type=_ints, help="comma-separated max_T caps")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="average-rank table from result CSVs")
    sp.add_argument("results", nargs="+")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (OodkitError, ValueError, KeyError, OSError, np.linalg.LinAlgError) as exc:
        code = getattr(exc, "code", None) or type(exc).__name__
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        print(json.dumps({"status": "error", "code": code, "message": str(msg)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
