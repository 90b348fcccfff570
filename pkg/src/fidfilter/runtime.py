"""Fusion-in-Decoder orchestration.

Passages are encoded independently, their states concatenated in rank
order, and a beam-search decoder cross-attends to the concatenation. The
encoder call and every decoder step are timed separately.
"""
from __future__ import annotations

import gc
import json
import statistics
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .early_exit import ExitConfig, ExitMonitor
from .filtering import FilterConfig, TokenFilter
from .model import EOS_ID, PAD_ID, ModelWeights, decode_step, encode, init_decoder_state
from .tokenizer import Tokenizer

# minimum answer length per dataset used during evaluation
MIN_ANSWER_LENGTH = {"eli5": 150, "msmarco": 50, "nq": 50}
PASSAGE_TEMPLATE = "question: {question} title: {title} context: {context}"


@dataclass(frozen=True)
class Passage:
    title: str
    context: str
    is_gold: bool = False


@dataclass(frozen=True)
class FidInput:
    question: str
    passages: tuple[Passage, ...]
    reference_answer: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "passages", tuple(self.passages))
        if sum(p.is_gold for p in self.passages) > 1:
            raise ValueError("at most one passage may be marked gold")

    @property
    def gold_index(self) -> int | None:
        for i, p in enumerate(self.passages):
            if p.is_gold:
                return i
        return None

    def gold_first(self) -> "FidInput":
        """Move the gold passage to rank 1, keeping the others in order."""
        g = self.gold_index
        if g is None or g == 0:
            return self
        ps = list(self.passages)
        return replace(self, passages=(ps[g], *ps[:g], *ps[g + 1 :]))

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "FidInput":
        passages = tuple(
            Passage(title=p.get("title", ""), context=p.get("text", p.get("context", "")),
                    is_gold=bool(p.get("is_gold", False)))
            for p in obj["passages"]
        )
        return cls(question=obj["question"], passages=passages, reference_answer=obj.get("answer"))

    def to_json(self) -> dict[str, Any]:
        return {
            "question": self.question,
            "passages": [{"title": p.title, "text": p.context, "is_gold": p.is_gold} for p in self.passages],
            "answer": self.reference_answer,
        }


def load_dataset(path: str | Path) -> list[FidInput]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rows.append(FidInput.from_json(json.loads(line)))
    return rows


def fixture_path() -> Path:
    return Path(__file__).resolve().parent / "data" / "fixture.jsonl"


@dataclass(frozen=True)
class DecodeSettings:
    n_passages: int | None = None  # None: all passages of the input
    beams: int = 4
    max_new_tokens: int = 300
    min_new_tokens: int = 0
    filter: FilterConfig | None = None
    exit: ExitConfig | None = None
    max_passage_tokens: int = 235

    def __post_init__(self):
        if self.beams < 1:
            raise ValueError(f"beams must be >= 1, got {self.beams}")
        if not 0 <= self.min_new_tokens <= self.max_new_tokens:
            raise ValueError(f"need 0 <= min_new_tokens <= max_new_tokens, got {self.min_new_tokens}, {self.max_new_tokens}")
        if self.n_passages is not None and self.n_passages < 1:
            raise ValueError(f"n_passages must be >= 1, got {self.n_passages}")
        if self.max_passage_tokens < 1:
            raise ValueError("max_passage_tokens must be >= 1")

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "DecodeSettings":
        d = dict(d)
        if d.get("filter") is not None:
            d["filter"] = FilterConfig(**d["filter"])
        if d.get("exit") is not None:
            d["exit"] = ExitConfig(**d["exit"])
        return cls(**d)


@dataclass
class EncodedBundle:
    states: np.ndarray            # [T, d_model]
    mask: np.ndarray              # [T] bool
    token_to_passage: np.ndarray  # [T] 1-based passage rank
    source_index: np.ndarray      # [T] position in the unpruned concatenation
    passage_length: int
    original_len: int

    @property
    def total_len(self) -> int:
        return int(self.states.shape[0])


@dataclass
class GenerationResult:
    token_ids: list[int]
    text: str
    encoder_seconds: float
    per_token_decoder_seconds: list[float]
    exit_layer_per_token: list[int]
    surviving_token_indices: list[int] | None
    beams_used: int
    step_seconds: list[float] = field(default_factory=list)
    score: float = 0.0

    @property
    def decoder_seconds(self) -> float:
        """Wall time of every decoder step run, including steps of beams that lost."""
        return float(sum(self.step_seconds))

    @property
    def total_seconds(self) -> float:
        return self.encoder_seconds + self.decoder_seconds

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["decoder_seconds"] = self.decoder_seconds
        return d


def passage_token_ids(tokenizer: Tokenizer, question: str, passage: Passage, max_len: int) -> list[int]:
    text = PASSAGE_TEMPLATE.format(question=question, title=passage.title, context=passage.context)
    return tokenizer.encode(text)[: max_len - 1] + [EOS_ID]


def encode_passages(weights: ModelWeights, inp: FidInput, settings: DecodeSettings,
                    tokenizer: Tokenizer | None = None) -> EncodedBundle:
    tokenizer = tokenizer or Tokenizer.default()
    n = len(inp.passages) if settings.n_passages is None else settings.n_passages
    if n == 0 or not inp.passages:
        raise ValueError("no passages to encode")
    if n > len(inp.passages):
        raise ValueError(f"n_passages={n} but input has {len(inp.passages)} passages")
    seqs = [passage_token_ids(tokenizer, inp.question, p, settings.max_passage_tokens)
            for p in inp.passages[:n]]
    width = max(len(s) for s in seqs)
    ids = np.full((n, width), PAD_ID, dtype=np.int64)
    mask = np.zeros((n, width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    states = encode(weights, ids, mask)  # passages are independent rows of the batch
    total = n * width
    return EncodedBundle(
        states=states.reshape(total, -1),
        mask=mask.reshape(total),
        token_to_passage=np.repeat(np.arange(1, n + 1), width),
        source_index=np.arange(total),
        passage_length=width,
        original_len=total,
    )


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    x = logits.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


StepCallback = Callable[[int, np.ndarray, np.ndarray], None]


def generate(weights: ModelWeights, inp: FidInput, settings: DecodeSettings,
             tokenizer: Tokenizer | None = None, *, trace=None,
             step_callback: StepCallback | None = None) -> GenerationResult:
    """Beam-search generation with optional token filtering and early exit.

    Hypotheses are ranked by mean token log-probability. EOS is masked until
    ``min_new_tokens`` tokens exist; the search stops once ``beams``
    hypotheses have finished or ``max_new_tokens`` is reached.
    ``trace.record(step, activations, bundle)`` and
    ``step_callback(step, logits, input_ids)`` are invoked per step.
    """
    tokenizer = tokenizer or Tokenizer.default()
    cfg = weights.config
    B, V, L = settings.beams, cfg.vocab_size, cfg.n_dec_layers
    if settings.filter is not None and settings.filter.trigger_layer > L:
        raise ValueError(f"filter layer {settings.filter.trigger_layer} exceeds decoder depth {L}")

    t0 = time.perf_counter()
    bundle = encode_passages(weights, inp, settings, tokenizer)
    encoder_seconds = time.perf_counter() - t0

    token_filter = TokenFilter(settings.filter) if settings.filter is not None else None
    beam_scores = np.full(B, -np.inf)
    beam_scores[0] = 0.0
    beam_tokens: list[list[int]] = [[] for _ in range(B)]
    input_ids = np.full(B, PAD_ID, dtype=np.int64)
    finished: list[tuple[float, list[int]]] = []
    step_seconds: list[float] = []
    step_exit: list[int] = []
    state = None

    for step in range(1, settings.max_new_tokens + 1):
        ts = time.perf_counter()
        if state is None:
            state = init_decoder_state(weights, bundle.states, bundle.mask, beams=B,
                                       capacity=settings.max_new_tokens)
        monitor = None
        if settings.exit is not None:
            min_layer = 1
            if token_filter is not None and not token_filter.fired and step == settings.filter.trigger_token:
                min_layer = settings.filter.trigger_layer
            monitor = ExitMonitor(weights, settings.exit, step, min_layer)
        logits, acts, exit_layer = decode_step(weights, state, input_ids, exit_check=monitor)
        if step_callback is not None:
            step_callback(step, logits, input_ids.copy())
        if trace is not None:
            trace.record(step, acts, bundle)
        if token_filter is not None:
            state, bundle = token_filter(step, acts, state, bundle)

        logp = _log_softmax(logits)
        if step <= settings.min_new_tokens:
            logp[:, EOS_ID] = -np.inf
        cand = (beam_scores[:, None] + logp).ravel()

        if step == settings.max_new_tokens:
            for f in np.argsort(-cand, kind="stable")[:B]:
                if np.isfinite(cand[f]):
                    b, tok = divmod(int(f), V)
                    finished.append((cand[f] / step, beam_tokens[b] + [tok]))
            step_seconds.append(time.perf_counter() - ts)
            step_exit.append(exit_layer)
            break

        nxt: list[tuple[int, int, float]] = []
        for rank, f in enumerate(np.argsort(-cand, kind="stable")[: 2 * B]):
            s = cand[f]
            if not np.isfinite(s):
                break
            b, tok = divmod(int(f), V)
            if tok == EOS_ID:
                if rank < B:
                    finished.append((s / step, beam_tokens[b] + [tok]))
            else:
                nxt.append((b, tok, s))
                if len(nxt) == B:
                    break
        done = len(finished) >= B or not nxt
        if not done:
            while len(nxt) < B:
                nxt.append((nxt[0][0], nxt[0][1], -np.inf))
            origin = np.array([b for b, _, _ in nxt])
            state.reorder(origin)
            beam_tokens = [beam_tokens[b] + [tok] for b, tok, _ in nxt]
            beam_scores = np.array([s for _, _, s in nxt])
            input_ids = np.array([tok for _, tok, _ in nxt], dtype=np.int64)
        step_seconds.append(time.perf_counter() - ts)
        step_exit.append(exit_layer)
        if done:
            break

    if not finished:
        finished = [(beam_scores[b] / max(1, len(beam_tokens[b])), beam_tokens[b]) for b in range(B)
                    if np.isfinite(beam_scores[b])]
    best_score, best = finished[0]
    for s, toks in finished[1:]:
        if s > best_score:
            best_score, best = s, toks
    n = len(best)
    surviving = None
    if token_filter is not None and token_filter.fired:
        surviving = [int(i) for i in bundle.source_index]
    return GenerationResult(
        token_ids=[int(t) for t in best],
        text=tokenizer.decode(best),
        encoder_seconds=encoder_seconds,
        per_token_decoder_seconds=step_seconds[:n],
        exit_layer_per_token=step_exit[:n],
        surviving_token_indices=surviving,
        beams_used=B,
        step_seconds=step_seconds,
        score=float(best_score),
    )


@contextmanager
def timing_quiet():
    """Collect garbage up front and keep the collector off while timing."""
    gc.collect()
    was = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was:
            gc.enable()


def timed_generate(weights: ModelWeights, inp: FidInput, settings: DecodeSettings,
                   tokenizer: Tokenizer | None = None, repeats: int = 3, warmup: int = 2
                   ) -> tuple[GenerationResult, list[GenerationResult]]:
    """Warm up, then run ``repeats`` timed generations; returns (first timed, all timed)."""
    for _ in range(warmup):
        generate(weights, inp, settings, tokenizer)
    runs = []
    with timing_quiet():
        for _ in range(max(1, repeats)):
            runs.append(generate(weights, inp, settings, tokenizer))
    return runs[0], runs


def profile_decoder_share(weights: ModelWeights, inp: FidInput, settings: DecodeSettings,
                          token_budgets: Sequence[int], passage_counts: Iterable[int] | None = None,
                          repeats: int = 5, warmup: int = 2,
                          tokenizer: Tokenizer | None = None) -> list[dict[str, Any]]:
    """Decoder share of wall time with generation forced to exactly each budget.

    One record per (budget, n_passages); ``decoder_share`` is the median over
    ``repeats`` of decoder time / (encoder + decoder time).
    """
    if not token_budgets:
        raise ValueError("token_budgets must be non-empty")
    counts = list(passage_counts) if passage_counts is not None else [settings.n_passages]
    records = []
    for n in counts:
        for budget in token_budgets:
            s = replace(settings, n_passages=n, max_new_tokens=budget, min_new_tokens=budget)
            _, runs = timed_generate(weights, inp, s, tokenizer, repeats=repeats, warmup=warmup)
            shares = [r.decoder_seconds / r.total_seconds for r in runs]
            records.append({
                "tokens": int(budget),
                "n_passages": n if n is not None else len(inp.passages),
                "decoder_share": statistics.median(shares),
                "encoder_seconds": statistics.median(r.encoder_seconds for r in runs),
                "decoder_seconds": statistics.median(r.decoder_seconds for r in runs),
                "generated": len(runs[0].token_ids),
            })
    return records


def write_results(path: str | Path, results: Iterable[GenerationResult]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in results:
            f.write(json.dumps(r.to_json()) + "\n")
