"""Multi-seed four-arm ablation on the synthetic corridor benchmark.

Prints each arm's AUROC/FPR per seed, then the two end-to-end checks: the
depth-weighted arm's AUROC and whether its FPR stays at or below the
unweighted arm's FPR under the same threshold method.

    python scripts/run_ablation.py --seeds 0 1 2 3 4 --epochs 30 --lr 0.01 --frames-per-sample 15
"""
import argparse
import json
import tempfile
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from depcae.experiment import TrainConfig, seed_sweep
from depcae.metrics import format_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--profile", default="corridor")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--frames-per-sample", type=int, default=15)
    ap.add_argument("--channel-plan", default="8,16,16")
    ap.add_argument("--workdir", help="where datasets are rendered (default: a temp dir)")
    ap.add_argument("--json", help="write per-seed metrics here")
    ap.add_argument("--tables", action="store_true", help="print the full metric table per seed")
    args = ap.parse_args()

    cfg = TrainConfig(channel_plan=tuple(int(c) for c in args.channel_plan.split(",")), epochs=args.epochs,
                      lr=args.lr, frames_per_sample=args.frames_per_sample)
    t0 = time.perf_counter()
    rows = []

    def report(o):
        arms = o.result.arms
        line = "  ".join(f"{n}: auroc={a.metrics.auroc:.4f} fpr={a.metrics.fpr:.4f}" for n, a in arms.items())
        print(f"seed {o.seed} ({o.seconds:.0f}s)  {line}", flush=True)
        if args.tables:
            print(format_table(o.result.metrics()), flush=True)
        rows.append({"seed": o.seed, "seconds": o.seconds,
                     "arms": {n: a.metrics.as_dict() for n, a in arms.items()},
                     "thresholds": {n: a.threshold.threshold for n, a in arms.items()}})

    with tempfile.TemporaryDirectory() as tmp, threadpool_limits(limits=1):
        outcomes = seed_sweep(args.profile, args.seeds, cfg, args.workdir or tmp, on_seed=report)

    aurocs = [o.result.arms["depCAE"].metrics.auroc for o in outcomes]
    claims = [o.fpr_claim() for o in outcomes]
    iqr_claims = [o.fpr_claim("depWgtOnly", "baseline") for o in outcomes]
    print(f"depCAE AUROC per seed: {[round(a, 4) for a in aurocs]}")
    print(f"FPR(depCAE) <= FPR(anntThrOnly): {sum(claims)}/{len(claims)} seeds")
    print(f"FPR(depWgtOnly) <= FPR(baseline): {sum(iqr_claims)}/{len(iqr_claims)} seeds")
    print(f"total {time.perf_counter() - t0:.0f}s")
    if args.json:
        Path(args.json).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
