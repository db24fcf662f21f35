"""Transformer building blocks on top of the autodiff core.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names, which
keeps checkpoint serialization trivial. All sequence ops are batch-first:
``[batch, tokens, embed]``.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_BIAS = -1e9


def init_linear(params, rng, prefix, d_in, d_out, dtype=np.float32):
    std = 1.0 / math.sqrt(d_in)
    params[f"{prefix}.w"] = Tensor(
        rng.standard_normal((d_in, d_out)) * std, requires_grad=True, dtype=dtype
    )
    params[f"{prefix}.b"] = Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype)


def init_layer_norm(params, prefix, dim, dtype=np.float32):
    params[f"{prefix}.g"] = Tensor(np.ones(dim), requires_grad=True, dtype=dtype)
    params[f"{prefix}.b"] = Tensor(np.zeros(dim), requires_grad=True, dtype=dtype)


def init_block(params, rng, prefix, embed_dim, mlp_ratio=2, dtype=np.float32):
    init_layer_norm(params, f"{prefix}.ln1", embed_dim, dtype)
    init_linear(params, rng, f"{prefix}.attn.qkv", embed_dim, 3 * embed_dim, dtype)
    init_linear(params, rng, f"{prefix}.attn.out", embed_dim, embed_dim, dtype)
    init_layer_norm(params, f"{prefix}.ln2", embed_dim, dtype)
    init_linear(params, rng, f"{prefix}.mlp.fc1", embed_dim, mlp_ratio * embed_dim, dtype)
    init_linear(params, rng, f"{prefix}.mlp.fc2", mlp_ratio * embed_dim, embed_dim, dtype)


def linear(x, params, prefix):
    return ad.add(ad.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def layer_norm(x, params, prefix):
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def attention(x, params, prefix, heads, key_mask=None, capture=None):
    """Multi-head self-attention.

    key_mask: optional bool array [B, T]; False positions are excluded from
    every attention distribution (padding).
    capture: optional dict; if given, softmax probabilities [B, H, T, T] are
    stored under ``"probs"``.
    """
    b, t, e = x.shape
    hd = e // heads
    qkv = linear(x, params, f"{prefix}.qkv")  # [B, T, 3E]
    qkv = ad.reshape(qkv, (b, t, 3, heads, hd))
    qkv = ad.transpose(qkv, (2, 0, 3, 1, 4))  # [3, B, H, T, hd]
    q = ad.gather_rows(qkv, np.array(0))
    k = ad.gather_rows(qkv, np.array(1))
    v = ad.gather_rows(qkv, np.array(2))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    if key_mask is not None:
        bias = np.where(key_mask, 0.0, MASK_BIAS).astype(x.dtype)
        scores = ad.add(scores, Tensor(bias[:, None, None, :], dtype=x.dtype))
    probs = ad.softmax(scores, axis=-1)
    if capture is not None:
        capture["probs"] = probs.data.copy()
    out = ad.matmul(probs, v)  # [B, H, T, hd]
    out = ad.transpose(out, (0, 2, 1, 3))
    out = ad.reshape(out, (b, t, e))
    return linear(out, params, f"{prefix}.out")


def mlp(x, params, prefix):
    h = ad.gelu(linear(x, params, f"{prefix}.fc1"))
    return linear(h, params, f"{prefix}.fc2")


def transformer_block(x, params, prefix, heads, key_mask=None, capture=None):
    """Pre-norm block: x + attn(ln(x)), then + mlp(ln(.))."""
    h = ad.add(x, attention(layer_norm(x, params, f"{prefix}.ln1"), params,
                            f"{prefix}.attn", heads, key_mask, capture))
    return ad.add(h, mlp(layer_norm(h, params, f"{prefix}.ln2"), params, f"{prefix}.mlp"))
