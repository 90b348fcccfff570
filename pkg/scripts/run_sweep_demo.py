"""Small end-to-end sweep on the bundled fixture: baseline vs filtering vs
filtering + early exit, each reduced to a Max Curve.

    python scripts/run_sweep_demo.py [--out results/sweep] [--queries 5]

Toy weights are random, so the ROUGE-L values only exercise the plumbing.
Each method's points are resumable from its own directory.
"""
import argparse
import json
from pathlib import Path

from fidfilter.model import random_weights
from fidfilter.runtime import fixture_path, load_dataset
from fidfilter.sweep import SweepGrid, build_max_curve, export_curve, latency_saving_at_drop, run_sweep
from fidfilter.toy import TOY_CONFIG

COMMON = dict(n_passages=[1, 2, 3, 4], beams=2, max_new_tokens=40)
METHODS = {
    "baseline": SweepGrid(p_percent=[], base_threshold=[], **COMMON),
    "filter": SweepGrid(p_percent=[10, 30, 50], trigger_token=[1, 3], trigger_layer=[1, 2],
                        base_threshold=[], **COMMON),
    "filter_exit": SweepGrid(p_percent=[10, 30], trigger_token=[1, 3], trigger_layer=[2],
                             base_threshold=[0.3, 0.6], threshold_coef=[0.7], threshold_decay=[4], **COMMON),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("results/sweep"))
    ap.add_argument("--queries", type=int, default=5)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--intervals", type=int, default=10)
    args = ap.parse_args()

    weights = random_weights(TOY_CONFIG, seed=0)
    data = load_dataset(fixture_path())[: args.queries]
    curves = {}
    for name, grid in METHODS.items():
        out = args.out / name
        points = run_sweep(grid, data, weights, repeats=args.repeats, out_dir=out)
        curves[name] = build_max_curve(points, args.intervals)
        export_curve(curves[name], out / "max_curve.csv")
        print(f"{name}: {len(points)} points, {len(curves[name].representatives)} occupied intervals")

    summary = {}
    for name in ("filter", "filter_exit"):
        saving = latency_saving_at_drop(curves["baseline"], curves[name], drop=0.02)
        summary[name] = saving
        print(f"{name}: latency saving at 2% drop = " + ("none" if saving is None else f"{saving:.1%}"))
    (args.out / "savings.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
