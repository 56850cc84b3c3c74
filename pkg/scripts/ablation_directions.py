"""Reduced-budget ablation directions: inner vs inter, shared vs non-shared, cs vs ss.

    python3 scripts/ablation_directions.py --out runs/directions [--epochs 8] [--seeds 0,1,2]

Writes results.tsv (one row per variant, linear-probe accuracy per seed).
"""

import argparse
import logging
from pathlib import Path

from cscon import evaluation as ev
from cscon.model import DESK
from cscon.synthdata import DataConfig, generate_split, stack
from cscon.training import DESK_TRAIN, ResultRow, pretrain, write_results

VARIANTS = {
    "inner/shared/cs": {},
    "inter": {"loss": "inter"},
    "non_shared": {"sharing": "non_shared"},
    "ss": {"positive_pair": "ss"},
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/directions")
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--per-class", type=int, default=50)
    ap.add_argument("--points", type=int, default=512)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    seeds = [int(s) for s in args.seeds.split(",")]
    dc = DataConfig(n_train_per_class=args.per_class, n_test_per_class=args.per_class // 2, n_points=args.points)
    (x, y), (xt, yt) = stack(generate_split(dc, "train")), stack(generate_split(dc, "test"))

    rows = []
    for name, kw in VARIANTS.items():
        accs = []
        for seed in seeds:
            tc = DESK_TRAIN.replace(epochs=args.epochs, warmup_epochs=min(1, args.epochs - 1), seed=seed, **kw)
            model = pretrain(DESK, tc, x).model
            r = ev.probe_linear(ev.extract_features(model, x), y, ev.extract_features(model, xt), yt, seeds=(0,))
            accs.append(r.mean)
        rows.append(ResultRow("variant", name, accs))
        print(f"{name:16s} {ev.ProbeResult(accs)}", flush=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_results(out / "results.tsv", rows)


if __name__ == "__main__":
    main()
