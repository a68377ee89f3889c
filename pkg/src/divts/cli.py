"""Command line: ``divts synth | train | detect | eval``.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import detect as det
from .config import ALGORITHMS, ExperimentConfig, resolve_config
from .data import load_dataset, save_dataset, split_indices, write_json
from .diversify import _batched, grid_search_k, train
from .errors import ConfigError, DataError, InvalidConfig, MissingCheckpoint, NumericError
from .metrics import accuracy, aupr, auroc, domain_agreement, h_divergence_matrix, mean_pairwise
from .nn import load_checkpoint, save_checkpoint
from .rng import derive_seed
from .synthgen import SynthConfig, generate, separability_check

log = logging.getLogger("divts")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _atomic_json(path: Path, obj):
    tmp = path.with_suffix(path.suffix + ".tmp")
    write_json(tmp, obj)
    os.replace(tmp, path)


def runs_root() -> Path:
    return Path(os.environ.get("DIVTS_RUNS_DIR", "runs"))


# ---------------------------------------------------------------------------
# synth

SYNTH_FLAGS = {
    "domains": "K_true", "classes": "C", "ood_extra": "ood_extra", "channels": "channels",
    "series_length": "series_length", "window": "window", "step": "step",
    "subjects": "subjects_per_domain", "target_subjects": "target_subjects",
    "noise": "noise_sigma", "drift": "drift_rate", "target_offset": "target_offset", "seed": "seed",
}


def cmd_synth(args) -> int:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    for flag, key in SYNTH_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            base[key] = v
    cfg = SynthConfig.from_dict(base)
    train_ds, target_ds = generate(cfg)
    out = Path(args.out)
    save_dataset(train_ds, out / "train")
    save_dataset(target_ds, out / "target")
    write_json(out / "synth_config.json", cfg.to_dict())
    print(f"wrote {len(train_ds)} train and {len(target_ds)} target windows to {out} "
          f"(separability {separability_check(train_ds):.3f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

TRAIN_FLAGS = ("algorithm", "K", "lambda1", "lambda2", "temperature", "odin_eps", "lr", "weight_decay",
               "rounds", "e2", "e3", "e4", "epoch_budget", "batch_size", "train_ratio", "seed", "kernel",
               "bottleneck_dim")


def _parse_grid(text: str) -> list[int]:
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError as exc:
        raise InvalidConfig(f"--k-grid expects LO:HI, got {text!r}") from exc
    if not 1 <= lo <= hi <= 10:
        raise InvalidConfig("--k-grid bounds must satisfy 1 <= LO <= HI <= 10")
    return list(range(lo, hi + 1))


def cmd_train(args) -> int:
    overrides = {f: getattr(args, f) for f in TRAIN_FLAGS}
    if args.freeze_featurizer is not None:
        overrides["freeze_featurizer_steps34"] = args.freeze_featurizer
    cfg = resolve_config(args.config, **overrides)
    data_dir = Path(args.data).resolve()
    ds = load_dataset(data_dir)
    if ds.is_ood.any():
        raise DataError("training data contains OOD-class instances")
    tr_idx, va_idx = split_indices(len(ds), cfg.train_ratio, derive_seed(cfg.seed, "data.split"))
    train_ds, val_ds = ds.subset(tr_idx), ds.subset(va_idx)

    run = Path(args.run_dir) if args.run_dir else runs_root() / f"{cfg.algorithm}-K{cfg.K}-seed{cfg.seed}"
    run.mkdir(parents=True, exist_ok=True)
    write_json(run / "split.json", {"data": str(data_dir), "train_idx": tr_idx.tolist(), "val_idx": va_idx.tolist()})

    def on_round(history):
        _atomic_json(run / "history.json", {"algorithm": cfg.algorithm, "K": cfg.K, "rounds": history})

    if args.k_grid:
        if cfg.algorithm != "diversify":
            raise InvalidConfig("--k-grid applies to diversify only")
        best_k, res, table = grid_search_k(train_ds, val_ds, cfg, _parse_grid(args.k_grid), on_round=on_round)
        cfg = cfg.updated(K=best_k)
        write_json(run / "grid.json", {"val_acc": {str(k): v for k, v in table.items()}, "best_K": best_k})
        on_round(res.history)
    else:
        res = train(train_ds, val_ds, cfg, on_round=on_round)

    resolved = cfg.to_dict()
    write_json(run / "config.json", {"data": str(data_dir), **resolved})
    save_checkpoint(res.model, run / "checkpoint", cfg.algorithm, res.step_count, resolved)
    if cfg.algorithm == "diversify":
        write_json(run / "assignments.json", {
            "best_round": res.best_round,
            "final": res.final_assignments.tolist(),
            "selected": res.latent.assignments.tolist(),
        })
    print(f"{cfg.algorithm}: best val acc {res.best_val_acc:.4f} at round {res.best_round} -> {run}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# detect

def _load_run(run: Path):
    if not (run / "checkpoint" / "model.json").exists():
        raise MissingCheckpoint(f"no checkpoint under {run}")
    model, meta = load_checkpoint(run / "checkpoint")
    split = json.loads((run / "split.json").read_text(encoding="utf-8"))
    cfg = json.loads((run / "config.json").read_text(encoding="utf-8"))
    return model, meta, split, cfg


def _run_train_split(split):
    ds = load_dataset(split["data"])
    return ds, ds.subset(np.asarray(split["train_idx"])), ds.subset(np.asarray(split["val_idx"]))


def cmd_detect(args) -> int:
    run = Path(args.run)
    model, meta, split, rcfg = _load_run(run)
    target = load_dataset(args.data)
    scorers = list(det.SCORERS) if args.scorer == "all" else [args.scorer]
    T = args.temp if args.temp is not None else rcfg.get("temperature", 1.0)
    eps = args.eps if args.eps is not None else rcfg.get("odin_eps", 1e-3)
    q = args.threshold_quantile if args.threshold_quantile is not None else rcfg.get("threshold_quantile", 0.05)

    _, train_ds, val_ds = _run_train_split(split)
    stats = None
    if "mah" in scorers:
        spath = run / "gaussian_stats.json"
        if spath.exists():
            stats = det.GaussianStats.from_dict(json.loads(spath.read_text(encoding="utf-8")))
        else:
            stats = det.fit_model_stats(model, train_ds, ridge_scale=rcfg.get("ridge_scale", 1e-3))
            write_json(spath, stats.to_dict())

    records = []
    for sc in scorers:
        val_scores, _ = det.scores_for(model, val_ds.x, sc, stats, T, eps)
        thr = det.quantile_threshold(val_scores, q)
        records += det.detect_batch(model, stats, target, sc, thr, T, eps)
    out = Path(args.out) if args.out else run / "results.json"
    det.write_results(records, out)
    print(f"wrote {len(records)} score records ({', '.join(scorers)}) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def _scorer_metrics(recs, ds, ood_positive=False):
    ids = np.array([r.id for r in recs])
    if len(ids) and (ids.max() >= len(ds) or ids.min() < 0):
        raise DataError("result ids do not match the ground-truth dataset")
    y = ds.y[ids]
    pred = np.array([r.pred_class for r in recs])
    is_ood = ds.is_ood[ids] if ds.ood_classes else None
    id_mask = np.ones(len(ids), bool) if is_ood is None else ~is_ood
    m = {"id_acc": accuracy(pred[id_mask], y[id_mask]) if id_mask.any() else None}
    if is_ood is not None and is_ood.any() and (~is_ood).any():
        scores = np.array([r.score for r in recs])
        m["auroc"] = auroc(scores, ~is_ood)
        m["aupr"] = aupr(-scores, is_ood) if ood_positive else aupr(scores, ~is_ood)
        m["n_id"], m["n_ood"] = int((~is_ood).sum()), int(is_ood.sum())
    return m


def _latent_diagnostics(run: Path, seed: int):
    apath = run / "assignments.json"
    if not apath.exists():
        return {}
    model, _, split, _ = _load_run(run)
    _, train_ds, _ = _run_train_split(split)
    assign = json.loads(apath.read_text(encoding="utf-8"))
    out = {}
    z = _batched(model, train_ds.x, model.step3_embed)
    hm = h_divergence_matrix(z, np.asarray(assign["selected"]), seed=seed)
    out["h_div"] = {"matrix": np.where(np.isfinite(hm), hm, None).tolist(), "mean_pairwise": mean_pairwise(hm),
                    "estimator": "linear-probe lower bound, 2-fold CV, step-3 embeddings"}
    if train_ds.d_planted is not None:
        out["domain_agreement"] = domain_agreement(np.asarray(assign["final"]), train_ds.d_planted)
    return out


def cmd_eval(args) -> int:
    recs = det.read_results(args.results)
    ds = load_dataset(args.data)
    by_scorer: dict[str, list] = {}
    for r in recs:
        by_scorer.setdefault(r.scorer, []).append(r)
    per = {sc: _scorer_metrics(rs, ds, args.ood_positive) for sc, rs in by_scorer.items()}
    order = [s for s in ("mah", "mcp", "odin") if s in per]
    primary = args.primary if args.primary in per else (order[0] if order else None)
    metrics = {"primary_scorer": primary}
    if primary:
        metrics["id_acc"] = per[primary]["id_acc"]
        for k in ("auroc", "aupr"):
            if k in per[primary]:
                metrics[k] = per[primary][k]
    metrics["aupr_positive"] = "ood" if args.ood_positive else "id"
    metrics["per_scorer"] = {s: per[s] for s in order}
    if args.run:
        metrics.update(_latent_diagnostics(Path(args.run), args.seed))

    out = Path(args.out) if args.out else Path(args.results).parent
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "metrics.json", metrics)
    cols = ["scorer", "id_acc", "auroc", "aupr", "n_id", "n_ood"]
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for s in order:
            w.writerow([s] + [per[s].get(c, "") for c in cols[1:]])

    print(f"{'scorer':<8}{'id_acc':>9}{'auroc':>9}{'aupr':>9}")
    fmt = lambda v: f"{v:9.4f}" if isinstance(v, float) else f"{'-':>9}"  # noqa: E731
    for s in order:
        print(f"{s:<8}{fmt(per[s]['id_acc'])}{fmt(per[s].get('auroc'))}{fmt(per[s].get('aupr'))}")
    if "domain_agreement" in metrics:
        print(f"domain agreement {metrics['domain_agreement']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="divts", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic train/target datasets")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    for flag, key in SYNTH_FLAGS.items():
        typ = float if key in ("noise_sigma", "drift_rate", "target_offset") else int
        s.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train diversify, erm or dann")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--run-dir")
    t.add_argument("--k-grid", help="LO:HI grid search over K")
    t.add_argument("--algorithm", choices=ALGORITHMS)
    t.add_argument("--K", "--domains", dest="K", type=int)
    for name in ("lambda1", "lambda2", "temperature", "odin_eps", "lr", "weight_decay", "train_ratio"):
        t.add_argument("--" + name.replace("_", "-"), dest=name, type=float)
    for name in ("rounds", "e2", "e3", "e4", "epoch_budget", "batch_size", "seed", "kernel", "bottleneck_dim"):
        t.add_argument("--" + name.replace("_", "-"), dest=name, type=int)
    t.add_argument("--freeze-featurizer", dest="freeze_featurizer", action="store_true", default=None)
    t.add_argument("--no-freeze-featurizer", dest="freeze_featurizer", action="store_false")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="score a dataset with a trained run")
    d.add_argument("--run", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--scorer", choices=det.SCORERS + ("all",), default="all")
    d.add_argument("--temp", type=float)
    d.add_argument("--eps", type=float)
    d.add_argument("--threshold-quantile", type=float)
    d.add_argument("--out")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="metrics from a results file")
    e.add_argument("--results", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--run")
    e.add_argument("--out")
    e.add_argument("--primary", default="mah")
    e.add_argument("--ood-positive", action="store_true", help="report AUPR with OOD as the positive class")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"divts {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"divts {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"divts {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
