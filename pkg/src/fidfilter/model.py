"""Minimal T5-style encoder-decoder forward pass in float32 numpy.

Inference only. The encoder uses bidirectional relative-position bias, the
decoder self-attention uses unidirectional bias, and cross-attention has no
relative term: its "position bias" is the additive mask over encoder
positions (0 or -inf), which is what gets sliced when tokens are filtered.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping

import numpy as np

from .container import ContainerError, read_container, write_container

PAD_ID = 0
EOS_ID = 1
LN_EPS = 1e-6


class WeightsError(ValueError):
    """Raised when a weight map does not match its ModelConfig."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 4
    n_dec_layers: int = 4
    d_ff: int = 128
    d_kv: int = 16
    vocab_size: int = 512
    rel_pos_buckets: int = 32
    rel_pos_max_distance: int = 128
    tie_embeddings: bool = True

    def __post_init__(self):
        for name in ("d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff",
                     "d_kv", "vocab_size", "rel_pos_max_distance"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        # the bidirectional bucketing splits buckets in half and needs >= 1 exact bucket per side
        if self.rel_pos_buckets < 4:
            raise ValueError(f"rel_pos_buckets must be >= 4, got {self.rel_pos_buckets}")

    @property
    def inner_dim(self) -> int:
        return self.n_heads * self.d_kv

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every tensor name a config requires, with its shape."""
    d, inner, ff = config.d_model, config.inner_dim, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {"shared": (config.vocab_size, d)}

    def attn(prefix: str) -> None:
        for proj in ("q", "k", "v"):
            shapes[f"{prefix}.{proj}"] = (d, inner)
        shapes[f"{prefix}.o"] = (inner, d)

    shapes["enc.rel_bias"] = (config.rel_pos_buckets, config.n_heads)
    for i in range(config.n_enc_layers):
        shapes[f"enc.{i}.ln_attn"] = (d,)
        attn(f"enc.{i}.self_attn")
        shapes[f"enc.{i}.ln_ff"] = (d,)
        shapes[f"enc.{i}.ff.wi"] = (d, ff)
        shapes[f"enc.{i}.ff.wo"] = (ff, d)
    shapes["enc.final_ln"] = (d,)

    shapes["dec.rel_bias"] = (config.rel_pos_buckets, config.n_heads)
    for i in range(config.n_dec_layers):
        shapes[f"dec.{i}.ln_self"] = (d,)
        attn(f"dec.{i}.self_attn")
        shapes[f"dec.{i}.ln_cross"] = (d,)
        attn(f"dec.{i}.cross_attn")
        shapes[f"dec.{i}.ln_ff"] = (d,)
        shapes[f"dec.{i}.ff.wi"] = (d, ff)
        shapes[f"dec.{i}.ff.wo"] = (ff, d)
    shapes["dec.final_ln"] = (d,)
    if not config.tie_embeddings:
        shapes["lm_head"] = (config.vocab_size, d)
    return shapes


class ModelWeights(Mapping[str, np.ndarray]):
    """Validated, read-only tensor map. Safe to share across threads."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray]):
        expected = expected_shapes(config)
        for name, shape in expected.items():
            if name not in tensors:
                raise WeightsError(f"missing tensor {name!r}")
            got = tuple(np.shape(tensors[name]))
            if got != shape:
                raise WeightsError(f"shape mismatch for tensor {name!r}: expected {shape}, got {got}")
        extra = sorted(set(tensors) - set(expected))
        if extra:
            raise WeightsError(f"unexpected tensor {extra[0]!r} for this config")
        self.config = config
        self._tensors = {}
        for name in expected:
            arr = np.array(tensors[name], dtype=np.float32, copy=True)
            arr.setflags(write=False)
            self._tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)


def load_weights(path: str | Path, config: ModelConfig | None = None) -> ModelWeights:
    """Load a container file; ``config`` defaults to the one stored in its metadata."""
    tensors, metadata = read_container(path)
    if config is None:
        if "config" not in metadata:
            raise ContainerError(f"{path}: no config in metadata and none supplied")
        config = ModelConfig.from_dict(metadata["config"])
    return ModelWeights(config, tensors)


def save_weights(path: str | Path, weights: ModelWeights) -> None:
    write_container(path, dict(weights), metadata={"config": weights.config.to_dict()})


# --- numerics -------------------------------------------------------------

def rms_norm(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    var = np.mean(np.square(x), axis=-1, keepdims=True)
    return (x / np.sqrt(var + np.float32(LN_EPS))) * weight


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def relative_position_bucket(relative_position: np.ndarray, bidirectional: bool,
                             num_buckets: int, max_distance: int) -> np.ndarray:
    """T5 bucketing of ``memory_pos - query_pos``."""
    rel = np.asarray(relative_position, dtype=np.int64)
    buckets = np.zeros_like(rel)
    if bidirectional:
        num_buckets //= 2
        buckets += (rel > 0).astype(np.int64) * num_buckets
        rel = np.abs(rel)
    else:
        rel = -np.minimum(rel, 0)
    max_exact = num_buckets // 2
    is_small = rel < max_exact
    with np.errstate(divide="ignore"):
        large = max_exact + (
            np.log(np.maximum(rel, 1).astype(np.float32) / max_exact)
            / math.log(max_distance / max_exact)
            * (num_buckets - max_exact)
        ).astype(np.int64)
    large = np.minimum(large, num_buckets - 1)
    return buckets + np.where(is_small, rel, large)


def _rel_bias(table: np.ndarray, q_pos: np.ndarray, k_pos: np.ndarray, bidirectional: bool,
              config: ModelConfig) -> np.ndarray:
    rel = k_pos[None, :] - q_pos[:, None]
    idx = relative_position_bucket(rel, bidirectional, config.rel_pos_buckets,
                                   config.rel_pos_max_distance)
    return np.ascontiguousarray(table[idx].transpose(2, 0, 1))  # [h, q, k]


def _mask_bias(mask: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(mask, dtype=bool), np.float32(0.0), np.float32(-np.inf)).astype(np.float32)


def _split_heads(x: np.ndarray, config: ModelConfig) -> np.ndarray:
    # [..., s, h*dk] -> [..., h, s, dk]
    *lead, s, _ = x.shape
    return np.swapaxes(x.reshape(*lead, s, config.n_heads, config.d_kv), -2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    *lead, h, s, dk = x.shape
    return np.swapaxes(x, -2, -3).reshape(*lead, s, h * dk)


def _ff(w: ModelWeights, prefix: str, x: np.ndarray) -> np.ndarray:
    return np.maximum(x @ w[f"{prefix}.wi"], np.float32(0.0)) @ w[f"{prefix}.wo"]


def lm_logits(weights: ModelWeights, hidden: np.ndarray) -> np.ndarray:
    """Final layer norm + LM head. ``hidden`` is any decoder-layer output."""
    x = rms_norm(hidden, weights["dec.final_ln"])
    if weights.config.tie_embeddings:
        return (x * np.float32(weights.config.d_model ** -0.5)) @ weights["shared"].T
    return x @ weights["lm_head"].T


# --- encoder --------------------------------------------------------------

def encode(weights: ModelWeights, token_ids, mask=None) -> np.ndarray:
    """Encode one sequence ``[S]`` or an independent batch ``[N, S]``.

    Returns hidden states ``[S, d_model]`` (or ``[N, S, d_model]``). Masked
    positions are excluded as attention keys.
    """
    cfg = weights.config
    ids = np.asarray(token_ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
    if mask is None:
        m = np.ones(ids.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if single:
            m = m[None]
    if m.shape != ids.shape:
        raise ValueError(f"token_ids shape {ids.shape} != mask shape {m.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of vocab range [0, {cfg.vocab_size})")

    s = ids.shape[1]
    pos = np.arange(s)
    bias = _rel_bias(weights["enc.rel_bias"], pos, pos, True, cfg)[None]  # [1,h,S,S]
    bias = bias + _mask_bias(m)[:, None, None, :]
    x = weights["shared"][ids]
    for i in range(cfg.n_enc_layers):
        p = f"enc.{i}"
        n = rms_norm(x, weights[f"{p}.ln_attn"])
        q = _split_heads(n @ weights[f"{p}.self_attn.q"], cfg)
        k = _split_heads(n @ weights[f"{p}.self_attn.k"], cfg)
        v = _split_heads(n @ weights[f"{p}.self_attn.v"], cfg)
        probs = softmax(q @ np.swapaxes(k, -1, -2) + bias)
        x = x + _merge_heads(probs @ v) @ weights[f"{p}.self_attn.o"]
        x = x + _ff(weights, f"{p}.ff", rms_norm(x, weights[f"{p}.ln_ff"]))
    out = rms_norm(x, weights["enc.final_ln"]).astype(np.float32)
    return out[0] if single else out


# --- decoder --------------------------------------------------------------

@dataclass
class LayerActivation:
    """Outputs of one decoder layer for the current step (all beams)."""

    hidden: np.ndarray             # [B, d_model]
    cross_attn_scores: np.ndarray  # [B, h, T] post-softmax
    self_k: np.ndarray             # [B, h, n, d_kv] view of the cache
    self_v: np.ndarray


@dataclass
class DecoderState:
    """Per-generation decode state: self-attn caches and cross-attn K/V.

    ``cross_bias`` is the encoder-decoder position bias ``[h, T]``.
    """

    self_k: list[np.ndarray]
    self_v: list[np.ndarray]
    cross_k: list[np.ndarray]      # per layer [h, T, d_kv]
    cross_v: list[np.ndarray]
    cross_bias: np.ndarray
    length: int = 0

    @property
    def beams(self) -> int:
        return self.self_k[0].shape[0]

    @property
    def capacity(self) -> int:
        return self.self_k[0].shape[2]

    @property
    def src_len(self) -> int:
        return self.cross_bias.shape[-1]

    def reorder(self, beam_idx: np.ndarray) -> None:
        """Gather self-attn caches along the beam axis (beam search bookkeeping)."""
        idx = np.asarray(beam_idx, dtype=np.int64)
        self.self_k = [k[idx] for k in self.self_k]
        self.self_v = [v[idx] for v in self.self_v]


def init_decoder_state(weights: ModelWeights, encoder_states: np.ndarray, encoder_mask,
                       beams: int = 1, capacity: int = 512,
                       position_bias: np.ndarray | None = None) -> DecoderState:
    cfg = weights.config
    enc = np.asarray(encoder_states, dtype=np.float32)
    mask = np.asarray(encoder_mask, dtype=bool)
    if enc.ndim != 2 or enc.shape[1] != cfg.d_model:
        raise ValueError(f"encoder_states must be [T, {cfg.d_model}], got {enc.shape}")
    if mask.shape != (enc.shape[0],):
        raise ValueError(f"encoder mask length {mask.shape} does not match encoder_states length {enc.shape[0]}")
    if position_bias is None:
        position_bias = np.broadcast_to(_mask_bias(mask), (cfg.n_heads, enc.shape[0])).copy()
    elif position_bias.shape != (cfg.n_heads, enc.shape[0]):
        raise ValueError(f"position_bias must be [{cfg.n_heads}, {enc.shape[0]}], got {position_bias.shape}")
    cross_k, cross_v = [], []
    for i in range(cfg.n_dec_layers):
        p = f"dec.{i}.cross_attn"
        cross_k.append(_split_heads(enc @ weights[f"{p}.k"], cfg))
        cross_v.append(_split_heads(enc @ weights[f"{p}.v"], cfg))
    shape = (beams, cfg.n_heads, capacity, cfg.d_kv)
    return DecoderState(
        self_k=[np.zeros(shape, np.float32) for _ in range(cfg.n_dec_layers)],
        self_v=[np.zeros(shape, np.float32) for _ in range(cfg.n_dec_layers)],
        cross_k=cross_k,
        cross_v=cross_v,
        cross_bias=np.asarray(position_bias, dtype=np.float32),
    )


# exit_check(layer_1_based, hidden [B, d]) -> True to stop after that layer
ExitCheck = Callable[[int, np.ndarray], bool]


def decode_step(weights: ModelWeights, state: DecoderState, token_ids,
                exit_check: ExitCheck | None = None) -> tuple[np.ndarray, list[LayerActivation], int]:
    """Advance every beam by one position.

    Returns ``(logits [B, V], activations, exit_layer)``; ``activations`` holds
    one entry per layer actually run. When ``exit_check`` stops early, the
    skipped layers' self-attention K/V for this position are filled from the
    exit hidden state so later steps stay well defined.
    """
    cfg = weights.config
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    if ids.shape[0] != state.beams:
        raise ValueError(f"expected {state.beams} token ids, got {ids.shape[0]}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError(f"token id out of vocab range [0, {cfg.vocab_size})")
    for k in state.cross_k:
        if k.shape[1] != state.src_len:
            raise ValueError("cross-attention K/V length does not match encoder position bias")
    pos = state.length
    if pos >= state.capacity:
        raise ValueError(f"decoder cache capacity {state.capacity} exhausted")
    B, h, dk = state.beams, cfg.n_heads, cfg.d_kv

    self_bias = _rel_bias(weights["dec.rel_bias"], np.array([pos]), np.arange(pos + 1), False, cfg)
    self_bias = self_bias[None]  # [1, h, 1, pos+1]
    cross_bias = state.cross_bias[None, :, None, :]  # [1, h, 1, T]

    x = weights["shared"][ids]  # [B, d]
    acts: list[LayerActivation] = []
    exit_layer = cfg.n_dec_layers
    for i in range(cfg.n_dec_layers):
        p = f"dec.{i}"
        n = rms_norm(x, weights[f"{p}.ln_self"])
        q = (n @ weights[f"{p}.self_attn.q"]).reshape(B, h, 1, dk)
        state.self_k[i][:, :, pos] = (n @ weights[f"{p}.self_attn.k"]).reshape(B, h, dk)
        state.self_v[i][:, :, pos] = (n @ weights[f"{p}.self_attn.v"]).reshape(B, h, dk)
        k = state.self_k[i][:, :, : pos + 1]
        v = state.self_v[i][:, :, : pos + 1]
        probs = softmax(q @ np.swapaxes(k, -1, -2) + self_bias)
        x = x + (probs @ v).reshape(B, h * dk) @ weights[f"{p}.self_attn.o"]

        n = rms_norm(x, weights[f"{p}.ln_cross"])
        q = (n @ weights[f"{p}.cross_attn.q"]).reshape(B, h, 1, dk)
        probs = softmax(q @ np.swapaxes(state.cross_k[i], -1, -2)[None] + cross_bias)
        x = x + (probs @ state.cross_v[i][None]).reshape(B, h * dk) @ weights[f"{p}.cross_attn.o"]

        x = x + _ff(weights, f"{p}.ff", rms_norm(x, weights[f"{p}.ln_ff"]))
        acts.append(LayerActivation(hidden=x, cross_attn_scores=probs[:, :, 0, :], self_k=k, self_v=v))

        if exit_check is not None and i + 1 < cfg.n_dec_layers and exit_check(i + 1, x):
            exit_layer = i + 1
            for j in range(i + 1, cfg.n_dec_layers):
                pj = f"dec.{j}"
                nj = rms_norm(x, weights[f"{pj}.ln_self"])
                state.self_k[j][:, :, pos] = (nj @ weights[f"{pj}.self_attn.k"]).reshape(B, h, dk)
                state.self_v[j][:, :, pos] = (nj @ weights[f"{pj}.self_attn.v"]).reshape(B, h, dk)
            break
    state.length = pos + 1
    return lm_logits(weights, x), acts, exit_layer


def decode_full(weights: ModelWeights, target_ids, encoder_states: np.ndarray, encoder_mask,
                cross_bias: np.ndarray | None = None) -> np.ndarray:
    """Uncached causal decoder over a whole prefix; returns logits ``[n, V]``.

    ``cross_bias`` may be ``[T]`` or per-target ``[n, T]`` additive bias over
    encoder positions (defaults to the mask bias).
    """
    cfg = weights.config
    ids = np.asarray(target_ids, dtype=np.int64)
    enc = np.asarray(encoder_states, dtype=np.float32)
    mask = np.asarray(encoder_mask, dtype=bool)
    if mask.shape != (enc.shape[0],):
        raise ValueError("encoder mask length does not match encoder_states")
    n = ids.shape[0]
    pos = np.arange(n)
    causal = np.where(pos[None, :] <= pos[:, None], np.float32(0.0), np.float32(-np.inf))
    self_bias = _rel_bias(weights["dec.rel_bias"], pos, pos, False, cfg) + causal[None]
    cb = _mask_bias(mask) if cross_bias is None else np.asarray(cross_bias, dtype=np.float32)
    cb = np.broadcast_to(cb, (n, enc.shape[0]))[None]  # [1, n, T]
    x = weights["shared"][ids]
    for i in range(cfg.n_dec_layers):
        p = f"dec.{i}"
        nx = rms_norm(x, weights[f"{p}.ln_self"])
        q = _split_heads(nx @ weights[f"{p}.self_attn.q"], cfg)
        k = _split_heads(nx @ weights[f"{p}.self_attn.k"], cfg)
        v = _split_heads(nx @ weights[f"{p}.self_attn.v"], cfg)
        x = x + _merge_heads(softmax(q @ np.swapaxes(k, -1, -2) + self_bias) @ v) @ weights[f"{p}.self_attn.o"]
        nx = rms_norm(x, weights[f"{p}.ln_cross"])
        q = _split_heads(nx @ weights[f"{p}.cross_attn.q"], cfg)
        k = _split_heads(enc @ weights[f"{p}.cross_attn.k"], cfg)
        v = _split_heads(enc @ weights[f"{p}.cross_attn.v"], cfg)
        x = x + _merge_heads(softmax(q @ np.swapaxes(k, -1, -2) + cb) @ v) @ weights[f"{p}.cross_attn.o"]
        x = x + _ff(weights, f"{p}.ff", rms_norm(x, weights[f"{p}.ln_ff"]))
    return lm_logits(weights, x)


def random_weights(config: ModelConfig, seed: int) -> ModelWeights:
    """Seeded random weights with T5-like init scales."""
    rng = np.random.default_rng(seed)
    d, dk, ff = config.d_model, config.d_kv, config.d_ff
    tensors = {}
    for name, shape in expected_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("ln") or leaf == "final_ln":
            arr = np.ones(shape)
        elif name in ("shared", "lm_head"):
            arr = rng.normal(0.0, 1.0, shape)
        elif leaf == "rel_bias":
            arr = rng.normal(0.0, 0.5, shape)
        elif leaf == "q":
            arr = rng.normal(0.0, (d * dk) ** -0.5, shape)
        elif leaf in ("k", "v"):
            arr = rng.normal(0.0, d ** -0.5, shape)
        elif leaf == "o":
            arr = rng.normal(0.0, (config.inner_dim) ** -0.5, shape)
        elif leaf == "wi":
            arr = rng.normal(0.0, d ** -0.5, shape)
        elif leaf == "wo":
            arr = rng.normal(0.0, ff ** -0.5, shape)
        else:  # pragma: no cover - expected_shapes only yields the names above
            raise AssertionError(name)
        tensors[name] = arr.astype(np.float32)
    return ModelWeights(config, tensors)
