"""Grid sweeps over (passages, filtering, early exit) and Max Curve construction.

Each grid combination is run on every query; its latency is the mean over
queries of the per-query median over timing repeats, its metric the mean
ROUGE-L. The Max Curve bins the latency range into equal-width intervals
and keeps the best-metric point per interval.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import os
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .early_exit import ExitConfig
from .filtering import FilterConfig
from .metrics import f1, rouge_l
from .model import ModelWeights
from .runtime import DecodeSettings, FidInput, generate, timed_generate
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)


@dataclass
class SweepGrid:
    """Search space. An empty ``p_percent`` disables filtering, an empty
    ``base_threshold`` disables early exit; both empty is the baseline."""

    n_passages: list[int] = field(default_factory=lambda: [5, 10, 25, 50, 75, 100])
    p_percent: list[float] = field(default_factory=lambda: [10, 30, 50])
    trigger_token: list[int] = field(default_factory=lambda: list(range(1, 21)))
    trigger_layer: list[int] | None = None  # None: 1..L of the model
    base_threshold: list[float] = field(default_factory=lambda: [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    threshold_coef: list[float] = field(default_factory=lambda: [0.5, 0.7, 0.9])
    threshold_decay: list[int] = field(default_factory=lambda: [3, 4, 5])
    beams: int = 4
    max_new_tokens: int = 300
    min_new_tokens: int = 0
    max_passage_tokens: int = 235

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "SweepGrid":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown grid keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "SweepGrid":
        return cls.from_json(json.loads(Path(path).read_text()))

    def combinations(self, n_dec_layers: int) -> list[DecodeSettings]:
        layers = self.trigger_layer if self.trigger_layer is not None else list(range(1, n_dec_layers + 1))
        filters: list[FilterConfig | None] = [None]
        if self.p_percent:
            filters = [FilterConfig(p, t, l) for p, t, l in
                       itertools.product(self.p_percent, self.trigger_token, layers)]
        exits: list[ExitConfig | None] = [None]
        if self.base_threshold:
            exits = [ExitConfig(b, c, d) for b, c, d in
                     itertools.product(self.base_threshold, self.threshold_coef, self.threshold_decay)]
        return [
            DecodeSettings(n_passages=n, beams=self.beams, max_new_tokens=self.max_new_tokens,
                           min_new_tokens=self.min_new_tokens, filter=flt, exit=ex,
                           max_passage_tokens=self.max_passage_tokens)
            for n, flt, ex in itertools.product(self.n_passages, filters, exits)
        ]


def settings_key(settings: DecodeSettings) -> str:
    blob = json.dumps(settings.to_json(), sort_keys=True)
    return hashlib.sha1(blob.encode()).hexdigest()[:16]


@dataclass
class SweepPoint:
    settings: DecodeSettings | None
    latency_seconds: float
    metric: float
    f1: float = 0.0
    encoder_seconds: float = 0.0
    per_query_records: str | None = None
    key: str = ""

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["settings"] = None if self.settings is None else self.settings.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "SweepPoint":
        d = dict(d)
        if d.get("settings") is not None:
            d["settings"] = DecodeSettings.from_json(d["settings"])
        return cls(**d)


def _append_jsonl(path: Path, obj: dict[str, Any]) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(obj) + "\n")
        f.flush()
        os.fsync(f.fileno())


def _read_jsonl(path: Path) -> list[dict[str, Any]]:
    if not path.exists():
        return []
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError:
            break  # torn final line from an interrupted write
    return rows


def evaluate_settings(weights: ModelWeights, dataset: Sequence[FidInput], settings: DecodeSettings,
                      repeats: int = 3, warmup: int = 2, tokenizer: Tokenizer | None = None,
                      texts: Sequence[str] | None = None) -> tuple[SweepPoint, list[dict[str, Any]]]:
    """Time and score one setting on every query."""
    records = []
    for qi, inp in enumerate(dataset):
        first, runs = timed_generate(weights, inp, settings, tokenizer, repeats=repeats, warmup=warmup)
        if texts is not None and texts[qi] != first.text:
            raise RuntimeError(f"query {qi}: timed output differs from the metric pass")
        ref = inp.reference_answer or ""
        records.append({
            "query": qi,
            "latency_seconds": statistics.median(r.total_seconds for r in runs),
            "encoder_seconds": statistics.median(r.encoder_seconds for r in runs),
            "repeat_latencies": [r.total_seconds for r in runs],
            "rouge_l": rouge_l(first.text, ref),
            "f1": f1(first.text, ref),
            "n_tokens": len(first.token_ids),
            "mean_exit_layer": float(np.mean(first.exit_layer_per_token)),
            "text": first.text,
        })
    point = SweepPoint(
        settings=settings,
        latency_seconds=float(np.mean([r["latency_seconds"] for r in records])),
        metric=float(np.mean([r["rouge_l"] for r in records])),
        f1=float(np.mean([r["f1"] for r in records])),
        encoder_seconds=float(np.mean([r["encoder_seconds"] for r in records])),
        key=settings_key(settings),
    )
    return point, records


def run_sweep(grid: SweepGrid | Sequence[DecodeSettings], dataset: Sequence[FidInput], weights: ModelWeights,
              repeats: int = 3, out_dir: str | Path | None = None, warmup: int = 2, jobs: int = 1,
              tokenizer: Tokenizer | None = None) -> list[SweepPoint]:
    """Exhaustive grid evaluation; appends to ``out_dir/points.jsonl`` as it goes.

    Combinations already present in ``points.jsonl`` are reused, so an
    interrupted sweep resumes where it stopped. Failing combinations are
    logged to ``failures.jsonl`` and skipped. With ``jobs > 1`` an untimed
    metric pass runs in a thread pool; latency is always measured one job at
    a time.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    combos = grid.combinations(weights.config.n_dec_layers) if isinstance(grid, SweepGrid) else list(grid)
    if not combos:
        raise ValueError("grid is empty")
    tokenizer = tokenizer or Tokenizer.default()

    out = Path(out_dir) if out_dir is not None else None
    done: dict[str, SweepPoint] = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "records").mkdir(exist_ok=True)
        for row in _read_jsonl(out / "points.jsonl"):
            done[row["key"]] = SweepPoint.from_json(row)

    todo = [s for s in combos if settings_key(s) not in done]
    texts: dict[str, list[str]] = {}
    if jobs > 1 and todo:
        def metric_pass(s: DecodeSettings) -> tuple[str, list[str]]:
            return settings_key(s), [generate(weights, q, s, tokenizer).text for q in dataset]

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for key, t in pool.map(metric_pass, todo):
                texts[key] = t

    points = []
    for i, settings in enumerate(combos):
        key = settings_key(settings)
        if key in done:
            points.append(done[key])
            continue
        try:
            point, records = evaluate_settings(weights, dataset, settings, repeats, warmup, tokenizer,
                                               texts.get(key))
        except Exception as exc:  # noqa: BLE001 - one bad combination must not stop the sweep
            log.warning("combination %s failed: %s", key, exc)
            if out is not None:
                _append_jsonl(out / "failures.jsonl", {"key": key, "settings": settings.to_json(), "error": repr(exc)})
            continue
        if out is not None:
            rec_path = out / "records" / f"{key}.jsonl"
            with open(rec_path, "w", encoding="utf-8") as f:
                for r in records:
                    f.write(json.dumps(r) + "\n")
            point.per_query_records = str(rec_path.relative_to(out))
            _append_jsonl(out / "points.jsonl", point.to_json())
        done[key] = point
        points.append(point)
        log.info("combination %d/%d latency=%.4fs rouge_l=%.4f", i + 1, len(combos),
                 point.latency_seconds, point.metric)
    return points


# --- Max Curve ------------------------------------------------------------

@dataclass
class Interval:
    index: int
    lo: float
    hi: float
    representative: SweepPoint | None = None


@dataclass
class MaxCurve:
    intervals: list[Interval]
    smoothed: list[float]  # running max over occupied intervals, in latency order
    closed: str = "right"

    @property
    def representatives(self) -> list[SweepPoint]:
        return [iv.representative for iv in self.intervals if iv.representative is not None]


def assign_bins(latencies: Sequence[float], n_intervals: int, closed: str = "right") -> tuple[np.ndarray, np.ndarray]:
    """Equal-width bins over [min, max]; returns (bin index per point, edges).

    ``closed="right"``: bins are (lo, hi] with the first one closed on both
    ends. ``closed="left"``: [lo, hi) with the last one closed.
    """
    x = np.asarray(latencies, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    edges = np.array([lo + (hi - lo) * k / n_intervals for k in range(n_intervals + 1)])
    edges[-1] = hi
    if hi == lo:
        return np.zeros(x.size, dtype=np.int64), edges
    inner = edges[1:-1]
    if closed == "right":
        idx = np.searchsorted(inner, x, side="left")
    elif closed == "left":
        idx = np.searchsorted(inner, x, side="right")
    else:
        raise ValueError(f"closed must be 'left' or 'right', got {closed!r}")
    return idx.astype(np.int64), edges


def running_max(values: Iterable[float]) -> list[float]:
    out, best = [], -np.inf
    for v in values:
        best = max(best, v)
        out.append(float(best))
    return out


def build_max_curve(points: Sequence[SweepPoint], n_intervals: int = 30, closed: str = "right") -> MaxCurve:
    if not points:
        raise ValueError("need at least one point")
    if n_intervals < 1:
        raise ValueError("n_intervals must be >= 1")
    idx, edges = assign_bins([p.latency_seconds for p in points], n_intervals, closed)
    intervals = [Interval(k, float(edges[k]), float(edges[k + 1])) for k in range(n_intervals)]
    for p, k in zip(points, idx):
        iv = intervals[k]
        rep = iv.representative
        if rep is None or p.metric > rep.metric or (p.metric == rep.metric and p.latency_seconds < rep.latency_seconds):
            iv.representative = p
    reps = [iv.representative.metric for iv in intervals if iv.representative is not None]
    return MaxCurve(intervals=intervals, smoothed=running_max(reps), closed=closed)


def best_settings_per_interval(curve: MaxCurve) -> list[DecodeSettings | None]:
    return [p.settings for p in curve.representatives]


def latency_saving_at_drop(curve_baseline: MaxCurve, curve_method: MaxCurve, drop: float = 0.02) -> float | None:
    """Fractional latency saved by the method while staying within ``drop`` of the baseline peak.

    Measured against the fastest baseline point at peak metric; negative when
    the method needs longer. Returns ``None`` when no method point reaches
    ``(1 - drop) * peak``.
    """
    base = curve_baseline.representatives
    meth = curve_method.representatives
    if not base or not meth:
        raise ValueError("both curves must be non-empty")
    peak = max(p.metric for p in base)
    peak_latency = min(p.latency_seconds for p in base if p.metric == peak)
    ok = [p.latency_seconds for p in meth if p.metric >= (1.0 - drop) * peak]
    if not ok:
        return None
    return 1.0 - min(ok) / peak_latency


def export_curve(curve: MaxCurve, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["interval_index", "latency", "metric", "smoothed_metric", "settings"])
        smoothed = iter(curve.smoothed)
        for iv in curve.intervals:
            rep = iv.representative
            if rep is None:
                continue
            settings = json.dumps(rep.settings.to_json(), sort_keys=True) if rep.settings is not None else ""
            w.writerow([iv.index, f"{rep.latency_seconds:.6f}", f"{rep.metric:.6f}", f"{next(smoothed):.6f}", settings])
