"""Decoder share of end-to-end latency as the answer grows.

    python scripts/run_profile.py [--out results/profile] [--repeats 5]

Uses seeded toy weights and a synthetic 100-passage query, times generation
forced to each token budget, and writes decoder_share.csv (plus a PNG when
matplotlib is available).
"""
import argparse
import csv
from pathlib import Path

from fidfilter.model import random_weights
from fidfilter.runtime import DecodeSettings, profile_decoder_share
from fidfilter.toy import TOY_CONFIG, synthetic_input


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("results/profile"))
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--beams", type=int, default=4)
    args = ap.parse_args()

    weights = random_weights(TOY_CONFIG, seed=0)
    inp = synthetic_input(100, words_per_passage=40, seed=0)
    budgets = [1, 15, 50, 150, 300]
    records = profile_decoder_share(weights, inp, DecodeSettings(beams=args.beams), budgets, [10, 50, 100],
                                    repeats=args.repeats)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "decoder_share.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(records[0]))
        w.writeheader()
        w.writerows(records)
    for r in records:
        print(f"passages={r['n_passages']:>3} tokens={r['tokens']:>3} decoder_share={r['decoder_share']:.3f}")

    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    fig, ax = plt.subplots(figsize=(6, 4))
    for n in sorted({r["n_passages"] for r in records}):
        rows = [r for r in records if r["n_passages"] == n]
        ax.plot([r["tokens"] for r in rows], [r["decoder_share"] for r in rows], marker="o", label=f"{n} passages")
    ax.set_xlabel("generated tokens")
    ax.set_ylabel("decoder share of latency")
    ax.legend()
    fig.savefig(args.out / "decoder_share.png", dpi=120, bbox_inches="tight")


if __name__ == "__main__":
    main()
