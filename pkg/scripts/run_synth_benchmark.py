"""Train DIVERSIFY, ERM and DANN on the synthetic benchmark over several seeds.

Prints, per algorithm, target-domain accuracy, Mahalanobis/MCP/ODIN AUROC and
(for DIVERSIFY) agreement between latent and planted domains.

    python3 scripts/run_synth_benchmark.py --seeds 0 1 2 --out bench.json
"""
import argparse
import json
import time

import numpy as np
import torch

from divts.config import ExperimentConfig
from divts.data import split_train_val
from divts.detect import fit_model_stats, score_mahalanobis, score_mcp, score_odin
from divts.diversify import embed, predict, train
from divts.metrics import auroc, domain_agreement
from divts.synthgen import SynthConfig, generate, separability_check


def evaluate(res, train_ds, target, cfg):
    m = res.model
    idm = ~target.is_ood
    pred, _ = predict(m, target.x[idm])
    out = {"target_acc": float(np.mean(pred == target.y[idm])), "best_round": res.best_round}
    stats = fit_model_stats(m, train_ds, ridge_scale=cfg.ridge_scale)
    scores = {
        "mah": score_mahalanobis(stats, embed(m, target.x))[0],
        "mcp": score_mcp(m, target.x, cfg.temperature)[0],
        "odin": score_odin(m, target.x, cfg.temperature, cfg.odin_eps)[0],
    }
    for k, s in scores.items():
        out[f"auroc_{k}"] = auroc(s, idm)
    if res.final_assignments is not None:
        out["agreement"] = domain_agreement(res.final_assignments, train_ds.d_planted)
    return out


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--algorithms", nargs="+", default=["diversify", "erm", "dann"])
    p.add_argument("--rounds", type=int, default=15)
    p.add_argument("--epochs", type=int, nargs=3, default=[3, 4, 3], metavar=("E2", "E3", "E4"))
    p.add_argument("--freeze", action="store_true", help="keep the featurizer fixed in steps 3 and 4")
    p.add_argument("--synth", default="{}", help="JSON overrides for SynthConfig")
    p.add_argument("--out")
    args = p.parse_args()
    torch.set_num_threads(1)

    rows = []
    for seed in args.seeds:
        tr, te = generate(SynthConfig.from_dict({"seed": seed, **json.loads(args.synth)}))
        a, v = split_train_val(tr, 0.8, seed=seed)
        print(f"seed {seed}: {len(tr)} train / {len(te)} target windows, separability {separability_check(tr):.3f}")
        for alg in args.algorithms:
            e2, e3, e4 = args.epochs
            cfg = ExperimentConfig(algorithm=alg, seed=seed, rounds=args.rounds, e2=e2, e3=e3, e4=e4,
                                   freeze_featurizer_steps34=args.freeze)
            t0 = time.time()
            res = train(a, v, cfg)
            row = {"seed": seed, "algorithm": alg, "seconds": round(time.time() - t0, 1), **evaluate(res, a, te, cfg)}
            rows.append(row)
            print("  " + "  ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))

    print("\nmedians over seeds")
    for alg in args.algorithms:
        sub = [r for r in rows if r["algorithm"] == alg]
        keys = [k for k in sub[0] if k.startswith(("target", "auroc", "agree"))]
        print(f"  {alg:10s} " + "  ".join(f"{k}={np.median([r[k] for r in sub]):.3f}" for k in keys))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(rows, f, indent=1)


if __name__ == "__main__":
    main()
