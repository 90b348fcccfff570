"""Cross-attention diagnostics: gold-passage ratio and per-passage share of
the top-p scored input tokens, per decoder layer and generated-token index.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .filtering import score_tokens, select_top
from .model import ModelWeights
from .runtime import DecodeSettings, EncodedBundle, FidInput, generate
from .tokenizer import Tokenizer
from .trace import CrossAttnTrace


class TraceBudgetExceeded(RuntimeError):
    """Recording would exceed the trace memory budget."""


class TraceRecorder:
    """Collects beam-averaged cross-attention per (step, layer) during generate().

    Rows are scattered back to the unpruned input length so entries stay
    comparable if filtering fired mid-generation (pruned positions are 0).
    """

    def __init__(self, layers: Iterable[int] | None = None, tokens: Iterable[int] | None = None,
                 max_bytes: int | None = None):
        self.layers = None if layers is None else set(layers)
        self.tokens = None if tokens is None else set(tokens)
        self.max_bytes = max_bytes
        self.trace = CrossAttnTrace()
        self._nbytes = 0

    def record(self, step: int, acts, bundle: EncodedBundle) -> None:
        if self.trace.token_to_passage is None:
            # the first step always sees the unpruned bundle
            self.trace.token_to_passage = np.asarray(bundle.token_to_passage).copy()
        if self.tokens is not None and step not in self.tokens:
            return
        for l, act in enumerate(acts, start=1):
            if self.layers is not None and l not in self.layers:
                continue
            row = act.cross_attn_scores.mean(axis=0).astype(np.float32)
            full = np.zeros((row.shape[0], bundle.original_len), dtype=np.float32)
            full[:, bundle.source_index] = row
            if self.max_bytes is not None and self._nbytes + full.nbytes > self.max_bytes:
                raise TraceBudgetExceeded(
                    f"trace entry (t={step}, l={l}) would exceed budget of {self.max_bytes} bytes")
            self.trace.entries[(step, l)] = full
            self._nbytes += full.nbytes


def record_trace(weights: ModelWeights, inp: FidInput, settings: DecodeSettings,
                 layers: Iterable[int] | None = None, tokens: Iterable[int] | None = None,
                 max_bytes: int | None = None, gold_first: bool = True,
                 tokenizer: Tokenizer | None = None) -> CrossAttnTrace:
    if gold_first:
        inp = inp.gold_first()
    rec = TraceRecorder(layers, tokens, max_bytes)
    generate(weights, inp, settings, tokenizer, trace=rec)
    g = inp.gold_index
    rec.trace.gold_rank = None if g is None else g + 1
    return rec.trace


@dataclass
class GoldRatioCurve:
    values: dict[tuple[int, int], float] = field(default_factory=dict)  # (layer, t) -> ratio


@dataclass
class PassageDistribution:
    layer: int
    values: dict[tuple[int, int], float] = field(default_factory=dict)  # (passage_rank, t) -> fraction
    n_passages: int = 0


def _selected_passages(trace: CrossAttnTrace, t: int, l: int, p_percent: float) -> np.ndarray:
    keep = select_top(score_tokens(trace, t, l), p_percent)
    return np.asarray(trace.token_to_passage)[keep]


def gold_ratio(trace: CrossAttnTrace, p_percent: float, gold_rank: int | None = None) -> GoldRatioCurve:
    gold = trace.gold_rank if gold_rank is None else gold_rank
    if gold is None:
        raise ValueError("gold_ratio needs a gold passage rank")
    curve = GoldRatioCurve()
    for (t, l) in sorted(trace.entries):
        chosen = _selected_passages(trace, t, l, p_percent)
        curve.values[(l, t)] = float(np.mean(chosen == gold))
    return curve


def passage_distribution(trace: CrossAttnTrace, p_percent: float, layer: int) -> PassageDistribution:
    n = int(np.max(trace.token_to_passage))
    dist = PassageDistribution(layer=layer, n_passages=n)
    tokens = [t for (t, l) in sorted(trace.entries) if l == layer]
    if not tokens:
        raise ValueError(f"trace has no entries for layer {layer}")
    for t in tokens:
        chosen = _selected_passages(trace, t, layer, p_percent)
        counts = np.bincount(chosen, minlength=n + 1)[1:]
        for rank in range(1, n + 1):
            dist.values[(rank, t)] = counts[rank - 1] / chosen.size
    return dist


class CurveAccumulator:
    """Associative (sum, count) merge of per-query curves."""

    def __init__(self):
        self.sums: dict[tuple[int, int], float] = {}
        self.counts: dict[tuple[int, int], int] = {}

    def add(self, values: dict[tuple[int, int], float]) -> None:
        for k, v in values.items():
            self.sums[k] = self.sums.get(k, 0.0) + v
            self.counts[k] = self.counts.get(k, 0) + 1

    def merge(self, other: "CurveAccumulator") -> "CurveAccumulator":
        out = CurveAccumulator()
        for acc in (self, other):
            for k in acc.sums:
                out.sums[k] = out.sums.get(k, 0.0) + acc.sums[k]
                out.counts[k] = out.counts.get(k, 0) + acc.counts[k]
        return out

    def mean(self) -> dict[tuple[int, int], float]:
        return {k: self.sums[k] / self.counts[k] for k in sorted(self.sums)}


def emit_analysis(out_dir: str | Path, gold: dict[float, dict[tuple[int, int], float]] | None = None,
                  distributions: dict[float, tuple[int, dict[tuple[int, int], float]]] | None = None,
                  plot: bool = False) -> list[Path]:
    """Write one CSV per curve (and optionally a PNG); returns written paths.

    ``gold`` maps p -> {(layer, t): ratio}; ``distributions`` maps
    p -> (layer, {(rank, t): fraction}).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for p, values in (gold or {}).items():
        path = out / f"gold_ratio_p{p:g}.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["layer", "token_index", "value"])
            for (l, t), v in sorted(values.items()):
                w.writerow([l, t, f"{v:.6f}"])
        written.append(path)
    for p, (layer, values) in (distributions or {}).items():
        path = out / f"passage_distribution_p{p:g}_layer{layer}.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["passage_rank", "token_index", "value"])
            for (r, t), v in sorted(values.items()):
                w.writerow([r, t, f"{v:.6f}"])
        written.append(path)
    if plot:
        written.extend(_plot(out, gold or {}, distributions or {}))
    return written


def _plot(out: Path, gold, distributions) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for p, values in gold.items():
        fig, ax = plt.subplots(figsize=(6, 4))
        for layer in sorted({l for l, _ in values}):
            ts = sorted(t for l, t in values if l == layer)
            ax.plot(ts, [values[(layer, t)] for t in ts], label=f"layer {layer}")
        ax.set_xlabel("generated token index")
        ax.set_ylabel("gold-passage share of selected tokens")
        ax.set_title(f"p = {p:g}%")
        ax.legend(fontsize="small")
        path = out / f"gold_ratio_p{p:g}.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        paths.append(path)
    for p, (layer, values) in distributions.items():
        fig, ax = plt.subplots(figsize=(6, 4))
        for rank in sorted({r for r, _ in values}):
            ts = sorted(t for r, t in values if r == rank)
            ax.plot(ts, [values[(rank, t)] for t in ts], color="red" if rank == 1 else None,
                    alpha=1.0 if rank == 1 else 0.4)
        ax.set_xlabel("generated token index")
        ax.set_ylabel("share of selected tokens")
        ax.set_title(f"p = {p:g}%, layer {layer}")
        path = out / f"passage_distribution_p{p:g}_layer{layer}.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        paths.append(path)
    return paths
