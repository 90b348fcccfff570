"""Token Filtering: one-shot pruning of the decoder's cross-attention inputs.

At generated-token index ``t*`` the head-averaged cross-attention of layer
``l*`` scores every input token; the top ``p`` percent survive and every
decoder-side tensor indexed by input position is sliced to them for the
rest of the generation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .model import DecoderState, LayerActivation
from .trace import CrossAttnTrace


@dataclass(frozen=True)
class FilterConfig:
    p_percent: float
    trigger_token: int = 1
    trigger_layer: int = 1
    value_norm: bool = False
    mean_over_layers: bool = False

    def __post_init__(self):
        if not 0 < self.p_percent <= 100:
            raise ValueError(f"p_percent must be in (0, 100], got {self.p_percent}")
        if self.trigger_token < 1:
            raise ValueError(f"trigger_token must be >= 1, got {self.trigger_token}")
        if self.trigger_layer < 1:
            raise ValueError(f"trigger_layer must be >= 1, got {self.trigger_layer}")


@dataclass
class SalienceScores:
    scores: np.ndarray
    t: int
    l: int

    def __len__(self) -> int:
        return len(self.scores)


def keep_count(total: int, p_percent: float) -> int:
    """``ceil(p/100 * T)`` in exact arithmetic (``0.3 * 10`` must give 3, not 4)."""
    p = Fraction(str(p_percent))
    return max(1, math.ceil(p * total / 100))


def score_tokens(trace: CrossAttnTrace | Mapping[tuple[int, int], np.ndarray], t: int, l: int,
                 cfg: FilterConfig | None = None,
                 values: np.ndarray | Mapping[int, np.ndarray] | None = None) -> SalienceScores:
    """Head-mean cross-attention per input token at ``(t, l)``.

    With ``cfg.value_norm`` each token's score is scaled by the L2 norm of its
    cross-attention value row; ``values`` is ``[T, D]`` for layer ``l`` or a
    mapping layer -> ``[T, D]``. With ``cfg.mean_over_layers`` layers
    ``1..l`` are averaged.
    """
    entries = trace.entries if isinstance(trace, CrossAttnTrace) else trace
    value_norm = cfg is not None and cfg.value_norm
    layers = range(1, l + 1) if cfg is not None and cfg.mean_over_layers else [l]
    if value_norm and values is None:
        raise ValueError("value_norm requires value rows")

    total = None
    for layer in layers:
        if (t, layer) not in entries:
            raise KeyError(f"trace has no entry for token {t}, layer {layer}")
        attn = np.asarray(entries[(t, layer)], dtype=np.float64)
        if attn.ndim != 2:
            raise ValueError(f"expected [h, T] attention at ({t}, {layer}), got shape {attn.shape}")
        s = attn.mean(axis=0)
        if value_norm:
            v = values[layer] if isinstance(values, Mapping) else values
            if not isinstance(values, Mapping) and len(layers) > 1:
                raise ValueError("mean_over_layers with value_norm needs values for every layer")
            v = np.asarray(v, dtype=np.float64)
            if v.shape[0] != s.shape[0]:
                raise ValueError(f"values have {v.shape[0]} rows, attention has {s.shape[0]} tokens")
            s = s * np.linalg.norm(v, axis=1)
        total = s if total is None else total + s
    scores = total / len(layers)
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite salience scores")
    return SalienceScores(scores=scores, t=t, l=l)


def select_top(scores: SalienceScores | np.ndarray, p_percent: float) -> np.ndarray:
    """Indices of the top ``ceil(p/100*T)`` scores, ties to the lower index.

    Returned ascending, i.e. in original input order.
    """
    s = np.asarray(scores.scores if isinstance(scores, SalienceScores) else scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("cannot select from empty scores")
    if not 0 < p_percent <= 100:
        raise ValueError(f"p_percent must be in (0, 100], got {p_percent}")
    n = keep_count(s.size, p_percent)
    order = np.argsort(-s, kind="stable")
    return np.sort(order[:n])


def prune_decoder_state(state: DecoderState, bundle, keep: Sequence[int]):
    """Slice every input-indexed tensor to ``keep`` (original relative order).

    Covers cross-attention K/V of all decoder layers, the encoder-decoder
    position bias, and the bundle's states/mask/token map. Returns new
    ``(state, bundle)``; inputs are not modified.
    """
    idx = np.asarray(keep, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("keep set is empty")
    idx = np.unique(idx)
    if idx[0] < 0 or idx[-1] >= state.src_len:
        raise ValueError(f"keep indices must lie in [0, {state.src_len})")
    new_state = replace(
        state,
        cross_k=[np.ascontiguousarray(k[:, idx]) for k in state.cross_k],
        cross_v=[np.ascontiguousarray(v[:, idx]) for v in state.cross_v],
        cross_bias=np.ascontiguousarray(state.cross_bias[:, idx]),
    )
    new_bundle = replace(
        bundle,
        states=bundle.states[idx],
        mask=bundle.mask[idx],
        token_to_passage=bundle.token_to_passage[idx],
        source_index=bundle.source_index[idx],
    )
    return new_state, new_bundle


def value_rows(state: DecoderState, layer: int) -> np.ndarray:
    """Cross-attention value rows ``[T, h*d_kv]`` of a 1-based layer."""
    v = state.cross_v[layer - 1]  # [h, T, dk]
    return v.transpose(1, 0, 2).reshape(v.shape[1], -1)


def beam_mean_trace(step: int, acts: Sequence[LayerActivation], upto: int) -> dict[tuple[int, int], np.ndarray]:
    return {(step, l): acts[l - 1].cross_attn_scores.mean(axis=0) for l in range(1, upto + 1)}


class TokenFilter:
    """Per-generation filter hook; fires at most once."""

    def __init__(self, cfg: FilterConfig):
        self.cfg = cfg
        self.fired = False
        self.keep: np.ndarray | None = None
        self.scores: SalienceScores | None = None

    def __call__(self, step: int, acts: Sequence[LayerActivation], state: DecoderState, bundle):
        if self.fired or step != self.cfg.trigger_token:
            return state, bundle
        l = self.cfg.trigger_layer
        if len(acts) < l:
            raise ValueError(f"filter layer {l} did not run at step {step} (only {len(acts)} layers)")
        trace = beam_mean_trace(step, acts, l)
        values = None
        if self.cfg.value_norm:
            layers = range(1, l + 1) if self.cfg.mean_over_layers else [l]
            values = {j: value_rows(state, j) for j in layers}
        self.scores = score_tokens(trace, step, l, self.cfg, values)
        self.keep = select_top(self.scores, self.cfg.p_percent)
        self.fired = True
        return prune_decoder_state(state, bundle, self.keep)


def apply_filter_hook(step: int, layer_activations: Sequence[LayerActivation], cfg: FilterConfig,
                      state: DecoderState, bundle, fired: bool = False):
    """Functional form of :class:`TokenFilter`: returns ``(state, bundle, fired)``."""
    if fired:
        return state, bundle, True
    hook = TokenFilter(cfg)
    state, bundle = hook(step, layer_activations, state, bundle)
    return state, bundle, hook.fired
