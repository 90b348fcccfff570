"""Independent torch re-implementation of the forward pass, used as an oracle.

Written against the T5 arithmetic directly (float64, no caching, no shared
code with the numpy engine) so agreement is meaningful.
"""
import math

import torch


def _t(w, name):
    return torch.as_tensor(w[name].copy(), dtype=torch.float64)


def bucket(rel, bidirectional, num_buckets, max_distance):
    ret = torch.zeros_like(rel)
    n = num_buckets
    if bidirectional:
        n //= 2
        ret = ret + (rel > 0).long() * n
        rel = rel.abs()
    else:
        rel = -torch.clamp(rel, max=0)
    max_exact = n // 2
    small = rel < max_exact
    # float32 log matches the engine's bucket boundaries exactly
    large = max_exact + (
        torch.log(rel.clamp(min=1).float() / max_exact) / math.log(max_distance / max_exact) * (n - max_exact)
    ).long()
    large = torch.clamp(large, max=n - 1)
    return ret + torch.where(small, rel, large)


def rms(x, w):
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + 1e-6) * w


def mha(xq, xkv, w, prefix, h, dk, bias):
    def split(y):
        return y.view(*y.shape[:-1], h, dk).transpose(-2, -3)
    q = split(xq @ _t(w, prefix + ".q"))
    k = split(xkv @ _t(w, prefix + ".k"))
    v = split(xkv @ _t(w, prefix + ".v"))
    a = torch.softmax(q @ k.transpose(-1, -2) + bias, dim=-1)
    o = (a @ v).transpose(-2, -3).reshape(*xq.shape[:-1], h * dk)
    return o @ _t(w, prefix + ".o"), a


def encode(w, ids, mask):
    cfg = w.config
    ids = torch.as_tensor(ids).long()
    mask = torch.as_tensor(mask).bool()
    s = ids.shape[-1]
    pos = torch.arange(s)
    b = bucket(pos[None, :] - pos[:, None], True, cfg.rel_pos_buckets, cfg.rel_pos_max_distance)
    bias = _t(w, "enc.rel_bias")[b].permute(2, 0, 1)
    bias = bias + torch.where(mask, 0.0, float("-inf")).double()[..., None, None, :]
    x = _t(w, "shared")[ids]
    for i in range(cfg.n_enc_layers):
        p = f"enc.{i}"
        a, _ = mha(rms(x, _t(w, p + ".ln_attn")), rms(x, _t(w, p + ".ln_attn")), w, p + ".self_attn",
                   cfg.n_heads, cfg.d_kv, bias)
        x = x + a
        n = rms(x, _t(w, p + ".ln_ff"))
        x = x + torch.relu(n @ _t(w, p + ".ff.wi")) @ _t(w, p + ".ff.wo")
    return rms(x, _t(w, "enc.final_ln"))


def decode(w, tgt_ids, enc, cross_bias):
    """Full causal decoder. ``cross_bias`` is ``[n, T]`` additive bias per target position.

    Returns (logits [n, V], cross-attention probabilities per layer [h, n, T]).
    """
    cfg = w.config
    ids = torch.as_tensor(tgt_ids).long()
    enc = torch.as_tensor(enc, dtype=torch.float64)
    n = ids.shape[0]
    pos = torch.arange(n)
    b = bucket(pos[None, :] - pos[:, None], False, cfg.rel_pos_buckets, cfg.rel_pos_max_distance)
    causal = torch.full((n, n), float("-inf"), dtype=torch.float64).triu(1)
    self_bias = _t(w, "dec.rel_bias")[b].permute(2, 0, 1) + causal
    cb = torch.as_tensor(cross_bias, dtype=torch.float64)[None]
    x = _t(w, "shared")[ids]
    probs = []
    for i in range(cfg.n_dec_layers):
        p = f"dec.{i}"
        nx = rms(x, _t(w, p + ".ln_self"))
        a, _ = mha(nx, nx, w, p + ".self_attn", cfg.n_heads, cfg.d_kv, self_bias)
        x = x + a
        a, pr = mha(rms(x, _t(w, p + ".ln_cross")), enc, w, p + ".cross_attn", cfg.n_heads, cfg.d_kv, cb)
        x = x + a
        probs.append(pr)
        n2 = rms(x, _t(w, p + ".ln_ff"))
        x = x + torch.relu(n2 @ _t(w, p + ".ff.wi")) @ _t(w, p + ".ff.wo")
    x = rms(x, _t(w, "dec.final_ln"))
    if cfg.tie_embeddings:
        logits = (x * cfg.d_model ** -0.5) @ _t(w, "shared").T
    else:
        logits = x @ _t(w, "lm_head").T
    return logits, probs


def masked_cross_bias(n_heads, enc_mask, n_queries, keep=None, from_query=None):
    """``[n, T]`` additive bias: padding always masked; when ``keep`` is given,
    tokens outside it are also masked for query positions ``>= from_query``
    (0-based). Heads share the bias so only the row dimension is returned.
    """
    enc_mask = torch.as_tensor(enc_mask).bool()
    bias = torch.where(enc_mask, 0.0, float("-inf")).double().expand(n_queries, -1).clone()
    if keep is not None:
        dropped = torch.ones(enc_mask.shape[0], dtype=torch.bool)
        dropped[torch.as_tensor(list(keep)).long()] = False
        bias[from_query:, dropped] = float("-inf")
    return bias
