"""Confidence-based decoder early exit with a decaying threshold.

Confidence is the softmax gap between the top two tokens after projecting a
layer's hidden state through the final norm and LM head. Under beam search
the step exits only when the least confident beam clears the threshold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import DecoderState, ModelWeights, decode_step, lm_logits, softmax


@dataclass(frozen=True)
class ExitConfig:
    base_threshold: float
    threshold_coef: float = 1.0
    threshold_decay: int = 4
    confidence_measure: str = "softmax_top2_diff"

    def __post_init__(self):
        if not 0.0 <= self.base_threshold <= 1.0:
            raise ValueError(f"base_threshold must be in [0, 1], got {self.base_threshold}")
        if not 0.0 < self.threshold_coef <= 1.0:
            raise ValueError(f"threshold_coef must be in (0, 1], got {self.threshold_coef}")
        if self.threshold_decay <= 0:
            raise ValueError(f"threshold_decay must be positive, got {self.threshold_decay}")
        if self.confidence_measure != "softmax_top2_diff":
            raise ValueError(f"unknown confidence measure {self.confidence_measure!r}")


@dataclass
class ExitDecision:
    layer: int
    confidences_per_layer: list[float] = field(default_factory=list)
    per_beam: list[np.ndarray] = field(default_factory=list)


def top2_gap(logits: np.ndarray) -> np.ndarray:
    probs = softmax(np.asarray(logits, dtype=np.float32))
    top = np.sort(probs, axis=-1)[..., -2:]
    return (top[..., 1] - top[..., 0]).astype(np.float64)


def confidence(hidden: np.ndarray, weights: ModelWeights) -> np.ndarray | float:
    """Top-1 minus top-2 probability for each row of ``hidden``."""
    gap = top2_gap(lm_logits(weights, np.asarray(hidden, dtype=np.float32)))
    return float(gap) if gap.ndim == 0 else gap


def effective_threshold(t: int, cfg: ExitConfig) -> float:
    """``base * (coef + (1 - coef) * exp(-(t - 1) / decay))`` for token index ``t >= 1``."""
    if t < 1:
        raise ValueError(f"token index must be >= 1, got {t}")
    c = cfg.threshold_coef
    return cfg.base_threshold * (c + (1.0 - c) * math.exp(-(t - 1) / cfg.threshold_decay))


class ExitMonitor:
    """``exit_check`` callable for :func:`decode_step` that records its decision."""

    def __init__(self, weights: ModelWeights, cfg: ExitConfig, t: int, min_layer: int = 1):
        self.weights = weights
        self.threshold = effective_threshold(t, cfg)
        self.min_layer = min_layer
        self.decision = ExitDecision(layer=weights.config.n_dec_layers)

    def __call__(self, layer: int, hidden: np.ndarray) -> bool:
        per_beam = np.atleast_1d(confidence(hidden, self.weights))
        c = float(per_beam.min())
        self.decision.per_beam.append(per_beam)
        self.decision.confidences_per_layer.append(c)
        if layer >= self.min_layer and c >= self.threshold:
            self.decision.layer = layer
            return True
        return False


def step_with_exit(weights: ModelWeights, state: DecoderState, token_ids, cfg: ExitConfig, t: int,
                   min_layer: int = 1) -> tuple[np.ndarray, ExitDecision]:
    """One decode step that stops at the first layer whose min-over-beams confidence clears the threshold."""
    monitor = ExitMonitor(weights, cfg, t, min_layer)
    logits, _, layer = decode_step(weights, state, token_ids, exit_check=monitor)
    monitor.decision.layer = layer
    return logits, monitor.decision
