"""Seeded toy models and synthetic FiD inputs for tests, demos and profiling."""
from __future__ import annotations

import random
from pathlib import Path

from .model import ModelConfig, random_weights, save_weights
from .runtime import FidInput, Passage
from .tokenizer import Tokenizer

TOY_CONFIG = ModelConfig(d_model=64, n_heads=4, n_enc_layers=4, n_dec_layers=4,
                         d_ff=128, d_kv=16, vocab_size=512, rel_pos_buckets=32)


def make_toy_model(config: ModelConfig, seed: int, out: str | Path) -> Path:
    """Write seeded random weights; same (config, seed) gives a byte-identical file."""
    out = Path(out)
    save_weights(out, random_weights(config, seed))
    return out


def synthetic_input(n_passages: int, words_per_passage: int = 40, seed: int = 0,
                    tokenizer: Tokenizer | None = None) -> FidInput:
    """Random in-vocabulary passages; the first one is marked gold."""
    tokenizer = tokenizer or Tokenizer.default()
    words = [w for w in tokenizer.pieces[3 + 256 :] if not w.endswith(":")]
    rng = random.Random(seed)
    question = " ".join(rng.choice(words) for _ in range(6))
    passages = tuple(
        Passage(title=rng.choice(words),
                context=" ".join(rng.choice(words) for _ in range(words_per_passage)),
                is_gold=(i == 0))
        for i in range(n_passages)
    )
    return FidInput(question=question, passages=passages, reference_answer=" ".join(rng.choice(words) for _ in range(8)))
