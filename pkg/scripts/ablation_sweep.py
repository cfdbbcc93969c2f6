"""Recall versus retrieved-frame budget r and block size b on planted-needle traces.

    python3 scripts/ablation_sweep.py --fixtures 5 --out sweep.jsonl
"""

import argparse
import json
from collections import defaultdict
from pathlib import Path

from streamkv.harness import BenchSweep, build_trace, expected_uniform_recall_analytic, needle_spec, run_bench
from streamkv.model import ModelConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fixtures", type=int, default=5)
    ap.add_argument("--frames", type=int, default=200)
    ap.add_argument("--span", type=int, default=3)
    ap.add_argument("--r-list", default="1,2,4,8,16,32,64")
    ap.add_argument("--b-list", default="1,2,4,8,16")
    ap.add_argument("--pooling", choices=("pre_rope", "post_rope"), default="pre_rope")
    ap.add_argument("--random-projections", action="store_true",
                    help="random query/key weights instead of identity ones")
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    r_values = tuple(int(x) for x in args.r_list.split(","))
    b_values = tuple(int(x) for x in args.b_list.split(","))
    cfg = ModelConfig(projection_mode="random" if args.random_projections else "identity")
    sweep = BenchSweep(r_values, b_values, ("internal", "external", "uniform"))

    recalls = defaultdict(list)
    records = []
    for seed in range(args.fixtures):
        trace = build_trace(needle_spec(seed, args.frames, span=args.span))
        report = run_bench(trace, cfg, sweep, seed, pooling=args.pooling, max_new_tokens=1)
        for row in report.rows:
            recalls[row["mode"], row["r"], row["b"]].append(row["recall"])
            records.append({"fixture": seed, **{k: row[k] for k in ("mode", "r", "b", "recall", "blocks_per_layer")}})

    print(f"mean recall over {args.fixtures} fixtures (T={args.frames}, needle span {args.span})")
    print(f"{'mode':<10}{'b':>4}  " + "".join(f"r={r:<6}" for r in r_values))
    for mode in sweep.modes:
        for b in (b_values if mode != "uniform" else (1,)):
            cells = "".join(f"{sum(v) / len(v):<8.3f}" for v in (recalls[mode, r, b] for r in r_values))
            print(f"{mode:<10}{b:>4}  {cells}")
    expect = "".join(f"{expected_uniform_recall_analytic(args.frames, r, args.span):<8.3f}" for r in r_values)
    print(f"{'uniform E':<10}{'':>4}  {expect}")

    if args.out:
        with args.out.open("w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
