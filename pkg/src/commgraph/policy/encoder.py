"""One-layer single-head encoder: forward pass, dropout, and exact backward.

Layout (post-norm residual, no positional encodings so row permutations of
the input permute the output identically):

    H0 = X W_in + b_in
    A  = softmax(Q K^T / sqrt(d_h)),  Q/K/V linear in H0
    H1 = LN1(H0 + (A V) W_o + b_o)
    H  = LN2(H1 + FFN(H1)),  FFN = ReLU(H1 W_ff1 + b_ff1) W_ff2 + b_ff2

Dropout (training only) multiplies the attention weights and the FFN output
by inverted-dropout masks; masks are drawn once and can be replayed so a
gradient pass differentiates exactly the forward that was sampled from.

All math runs in float64 regardless of parameter storage dtype.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..validation import DimensionMismatchError
from .params import TENSOR_NAMES, PolicyParameters

LN_EPS = 1e-5


@dataclass(frozen=True)
class DropoutMasks:
    """Inverted-dropout masks (entries are 0 or 1/(1-rate))."""

    attention: np.ndarray  # (N, N)
    ffn: np.ndarray        # (N, d_h)


def draw_dropout_masks(rng: np.random.Generator, n_rows: int,
                       params: PolicyParameters) -> DropoutMasks:
    rate = params.dropout
    keep = 1.0 - rate
    attn = (rng.random((n_rows, n_rows)) >= rate) / keep
    ffn = (rng.random((n_rows, params.hidden_dim)) >= rate) / keep
    return DropoutMasks(attention=attn, ffn=ffn)


@dataclass
class EncoderCache:
    """Forward intermediates needed by the backward pass."""

    x: np.ndarray
    h0: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray          # post-softmax, pre-dropout
    attn_dropped: np.ndarray  # post-dropout (== attn when masks is None)
    ctx: np.ndarray           # attention-weighted values
    xhat1: np.ndarray
    inv_std1: np.ndarray
    h1: np.ndarray
    ff_pre: np.ndarray        # pre-ReLU activations
    ff_hidden: np.ndarray     # post-ReLU
    ff_out: np.ndarray        # before dropout
    xhat2: np.ndarray
    inv_std2: np.ndarray
    h: np.ndarray
    masks: DropoutMasks | None


def _layer_norm(rows: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = rows.mean(axis=1, keepdims=True)
    var = rows.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (rows - mu) * inv_std
    return gain * xhat + bias, xhat, inv_std


def _layer_norm_backward(d_out: np.ndarray, xhat: np.ndarray,
                         inv_std: np.ndarray, gain: np.ndarray):
    d_gain = (d_out * xhat).sum(axis=0)
    d_bias = d_out.sum(axis=0)
    d_xhat = d_out * gain
    # d rows = inv_std * (d_xhat - mean(d_xhat) - xhat * mean(d_xhat * xhat))
    m1 = d_xhat.mean(axis=1, keepdims=True)
    m2 = (d_xhat * xhat).mean(axis=1, keepdims=True)
    d_rows = inv_std * (d_xhat - m1 - xhat * m2)
    return d_rows, d_gain, d_bias


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def encoder_forward(X: np.ndarray, params: PolicyParameters, *,
                    train_mode: bool = False,
                    rng: np.random.Generator | None = None,
                    masks: DropoutMasks | None = None
                    ) -> tuple[np.ndarray, EncoderCache]:
    """Run the encoder, returning contextualized states and the cache.

    In train mode, dropout masks are taken from ``masks`` when given (replay)
    or drawn from ``rng`` otherwise. Evaluation mode ignores both.
    """
    x = np.asarray(X, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"X must be a nonempty (N, d) matrix, got {x.shape}")
    if x.shape[1] != params.embed_dim:
        raise DimensionMismatchError(
            f"X has {x.shape[1]} columns, params expect {params.embed_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("X contains non-finite entries")
    n = x.shape[0]

    if train_mode and params.dropout > 0.0:
        if masks is None:
            if rng is None:
                raise ValueError("train-mode forward needs an rng or replay masks")
            masks = draw_dropout_masks(rng, n, params)
        if masks.attention.shape != (n, n) or masks.ffn.shape != (n, params.hidden_dim):
            raise DimensionMismatchError("dropout masks do not match input size")
    else:
        masks = None

    w = {name: getattr(params, name).astype(np.float64) for name in TENSOR_NAMES}

    h0 = x @ w["w_in"] + w["b_in"]
    q = h0 @ w["w_q"] + w["b_q"]
    k = h0 @ w["w_k"] + w["b_k"]
    v = h0 @ w["w_v"] + w["b_v"]
    attn = _softmax_rows(q @ k.T / np.sqrt(params.hidden_dim))
    attn_dropped = attn * masks.attention if masks is not None else attn
    ctx = attn_dropped @ v
    h1_pre = h0 + ctx @ w["w_o"] + w["b_o"]
    h1, xhat1, inv_std1 = _layer_norm(h1_pre, w["ln1_gain"], w["ln1_bias"])

    ff_pre = h1 @ w["w_ff1"] + w["b_ff1"]
    ff_hidden = np.maximum(ff_pre, 0.0)
    ff_out = ff_hidden @ w["w_ff2"] + w["b_ff2"]
    ff_dropped = ff_out * masks.ffn if masks is not None else ff_out
    h2_pre = h1 + ff_dropped
    h, xhat2, inv_std2 = _layer_norm(h2_pre, w["ln2_gain"], w["ln2_bias"])

    cache = EncoderCache(x=x, h0=h0, q=q, k=k, v=v, attn=attn,
                         attn_dropped=attn_dropped, ctx=ctx, xhat1=xhat1,
                         inv_std1=inv_std1, h1=h1, ff_pre=ff_pre,
                         ff_hidden=ff_hidden, ff_out=ff_out, xhat2=xhat2,
                         inv_std2=inv_std2, h=h, masks=masks)
    return h, cache


def encode(X: np.ndarray, params: PolicyParameters, train_mode: bool = False,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Contextualized node states H (N, d_h); see ``encoder_forward``."""
    h, _ = encoder_forward(X, params, train_mode=train_mode, rng=rng)
    return h


def encoder_backward(d_h: np.ndarray, cache: EncoderCache,
                     params: PolicyParameters) -> dict[str, np.ndarray]:
    """Exact gradients of a scalar loss w.r.t. every parameter tensor.

    ``d_h`` is the loss gradient w.r.t. the encoder output. Returns float64
    gradient arrays keyed by tensor name.
    """
    w = {name: getattr(params, name).astype(np.float64) for name in TENSOR_NAMES}
    grads: dict[str, np.ndarray] = {}
    scale = 1.0 / np.sqrt(params.hidden_dim)

    # H = LN2(H1 + FFN-with-dropout)
    d_h2_pre, grads["ln2_gain"], grads["ln2_bias"] = _layer_norm_backward(
        d_h, cache.xhat2, cache.inv_std2, w["ln2_gain"])
    d_h1 = d_h2_pre.copy()
    d_ff_out = (d_h2_pre * cache.masks.ffn if cache.masks is not None
                else d_h2_pre)

    grads["w_ff2"] = cache.ff_hidden.T @ d_ff_out
    grads["b_ff2"] = d_ff_out.sum(axis=0)
    d_ff_hidden = d_ff_out @ w["w_ff2"].T
    d_ff_pre = d_ff_hidden * (cache.ff_pre > 0.0)
    grads["w_ff1"] = cache.h1.T @ d_ff_pre
    grads["b_ff1"] = d_ff_pre.sum(axis=0)
    d_h1 += d_ff_pre @ w["w_ff1"].T

    # H1 = LN1(H0 + attention output)
    d_h1_pre, grads["ln1_gain"], grads["ln1_bias"] = _layer_norm_backward(
        d_h1, cache.xhat1, cache.inv_std1, w["ln1_gain"])
    d_h0 = d_h1_pre.copy()

    grads["w_o"] = cache.ctx.T @ d_h1_pre
    grads["b_o"] = d_h1_pre.sum(axis=0)
    d_ctx = d_h1_pre @ w["w_o"].T
    d_attn_dropped = d_ctx @ cache.v.T
    d_v = cache.attn_dropped.T @ d_ctx
    d_attn = (d_attn_dropped * cache.masks.attention
              if cache.masks is not None else d_attn_dropped)
    # softmax backward, rowwise
    d_scores = cache.attn * (d_attn - (d_attn * cache.attn).sum(axis=1,
                                                                keepdims=True))
    d_q = d_scores @ cache.k * scale
    d_k = d_scores.T @ cache.q * scale

    grads["w_q"] = cache.h0.T @ d_q
    grads["b_q"] = d_q.sum(axis=0)
    grads["w_k"] = cache.h0.T @ d_k
    grads["b_k"] = d_k.sum(axis=0)
    grads["w_v"] = cache.h0.T @ d_v
    grads["b_v"] = d_v.sum(axis=0)
    d_h0 += d_q @ w["w_q"].T + d_k @ w["w_k"].T + d_v @ w["w_v"].T

    grads["w_in"] = cache.x.T @ d_h0
    grads["b_in"] = d_h0.sum(axis=0)
    return grads
