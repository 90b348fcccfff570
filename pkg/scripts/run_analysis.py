"""Gold-passage ratio and passage distribution of the top-p tokens over
the bundled fixture (gold moved to rank 1).

    python scripts/run_analysis.py [--out results/analysis] [--plot]
"""
import argparse
from pathlib import Path

from fidfilter.analysis import CurveAccumulator, emit_analysis, gold_ratio, passage_distribution, record_trace
from fidfilter.model import random_weights
from fidfilter.runtime import DecodeSettings, fixture_path, load_dataset
from fidfilter.toy import TOY_CONFIG


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("results/analysis"))
    ap.add_argument("--tokens", type=int, default=40)
    ap.add_argument("--plot", action="store_true")
    args = ap.parse_args()

    weights = random_weights(TOY_CONFIG, seed=0)
    settings = DecodeSettings(beams=4, max_new_tokens=args.tokens)
    ps = (10, 30, 50)
    gold = {p: CurveAccumulator() for p in ps}
    dist = {p: CurveAccumulator() for p in ps}
    for inp in load_dataset(fixture_path()):
        trace = record_trace(weights, inp, settings)
        for p in ps:
            gold[p].add(gold_ratio(trace, p).values)
            dist[p].add(passage_distribution(trace, p, layer=2).values)
    files = emit_analysis(args.out, gold={p: a.mean() for p, a in gold.items()},
                          distributions={p: (2, a.mean()) for p, a in dist.items()}, plot=args.plot)
    for f in files:
        print(f)


if __name__ == "__main__":
    main()
