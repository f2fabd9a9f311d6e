"""Neural building blocks: tokenization, attention, FFN, ConvBlock, UFE.

All blocks are pure functions of (input, params). Attention operates on a
flattened token view while ConvBlocks see the 3-d view; both feed residual
sums so that zero-initialized output projections make each block an exact
identity.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import AllKeysMasked, ShapeMismatch
from .tensor import Tensor


@dataclass
class TokenSeq:
    """Flattened [N, C] view of a [C, D, H, W] feature map."""

    tokens: Tensor
    origin_shape: tuple

    @property
    def n(self):
        return self.tokens.shape[0]

    @property
    def channels(self):
        return self.tokens.shape[1]


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    num_heads: int

    @property
    def head_dim(self):
        c = self.wq.shape[0]
        if c % self.num_heads:
            raise ShapeMismatch(f"channels {c} not divisible by {self.num_heads} heads")
        return c // self.num_heads


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class ConvBlockParams:
    conv_w: Tensor
    conv_b: Tensor
    lin_w: Tensor
    lin_b: Tensor


@dataclass
class UfeBlockParams:
    attn: AttentionParams
    cb1: ConvBlockParams  # None when ConvBlocks are ablated
    ffn: FfnParams
    cb2: ConvBlockParams


def tokenize(x):
    """[C, D, H, W] -> TokenSeq with one row per voxel in row-major order."""
    c = x.shape[0]
    n = x.shape[1] * x.shape[2] * x.shape[3]
    tokens = T.transpose(T.reshape(x, (c, n)), (1, 0))
    return TokenSeq(tokens, tuple(x.shape))


def detokenize(ts):
    """Inverse of tokenize; uses origin_shape to restore the 3-d view."""
    c, d, h, w = ts.origin_shape
    return T.reshape(T.transpose(ts.tokens, (1, 0)), (c, d, h, w))


def _plain_ln(tokens):
    """Layer norm over channels with fixed gamma=1, beta=0."""
    c = tokens.shape[-1]
    ones = Tensor(np.ones(c, dtype=tokens.dtype))
    zeros = Tensor(np.zeros(c, dtype=tokens.dtype))
    return T.layer_norm(tokens, ones, zeros)


def ln3d(x):
    """Per-voxel channel layer norm of a [C, D, H, W] map."""
    ts = tokenize(x)
    return detokenize(TokenSeq(_plain_ln(ts.tokens), ts.origin_shape))


def _split_heads(x, num_heads):
    n, c = x.shape
    return T.transpose(T.reshape(x, (n, num_heads, c // num_heads)), (1, 0, 2))


def _merge_heads(x):
    h, n, dk = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (n, h * dk))


def mhsa(q_src, kv_src, p, key_mask=None, return_attn=False):
    """Multi-head attention of q_src tokens over kv_src tokens.

    Queries come from LN(q_src) @ wq, keys/values from LN(kv_src); heads
    are concatenated and projected by wo. key_mask (bool [N_kv]) removes
    keys from the softmax entirely.
    """
    if q_src.channels != kv_src.channels:
        raise ShapeMismatch(
            f"query channels {q_src.channels} != key/value channels {kv_src.channels}")
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (kv_src.n,):
            raise ShapeMismatch(f"key_mask must be [{kv_src.n}], got {key_mask.shape}")
        if not key_mask.any():
            raise AllKeysMasked("key_mask removes every key")

    nh = p.num_heads
    dk = p.head_dim
    q = _split_heads(T.matmul(_plain_ln(q_src.tokens), p.wq), nh)
    ln_kv = _plain_ln(kv_src.tokens)
    k = _split_heads(T.matmul(ln_kv, p.wk), nh)
    v = _split_heads(T.matmul(ln_kv, p.wv), nh)

    logits = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dk))
    if key_mask is None:
        attn = T.softmax(logits, axis=-1)
    else:
        attn = T.masked_softmax(logits, key_mask[None, None, :], axis=-1)

    out = T.matmul(_merge_heads(T.matmul(attn, v)), p.wo)
    seq = TokenSeq(out, q_src.origin_shape)
    if return_attn:
        return seq, attn.data
    return seq


def ffn(x, p):
    """Per-token Linear -> GELU -> Linear; shape-preserving."""
    h = T.gelu(T.add(T.matmul(x.tokens, p.w1), p.b1))
    out = T.add(T.matmul(h, p.w2), p.b2)
    return TokenSeq(out, x.origin_shape)


def conv_block(x, p):
    """3-d conv -> token reshape -> per-token linear -> GELU -> 3-d reshape.

    The conv stage sees the volumetric structure; channel counts follow the
    conv/linear params (channel-preserving in UFE, reducing in fusion).
    """
    k = p.conv_w.shape[2]
    y = T.conv3d(x, p.conv_w, p.conv_b, stride=1, pad=k // 2)
    ts = tokenize(y)
    lin = T.gelu(T.add(T.matmul(ts.tokens, p.lin_w), p.lin_b))
    c_out = p.lin_w.shape[1]
    return detokenize(TokenSeq(lin, (c_out,) + ts.origin_shape[1:]))


def ufe_forward(f_star, ufe_blocks):
    """Two-stage parallel transformer/ConvBlock enhancement, residual.

    Stage 1 adds attention and ConvBlock branches of the normalized input;
    stage 2 adds FFN and ConvBlock branches. With zero-initialized output
    projections the whole block is an identity map.
    """
    x = f_star
    for blk in ufe_blocks:
        ts = tokenize(x)
        stage1 = T.add(x, detokenize(mhsa(ts, ts, blk.attn)))
        if blk.cb1 is not None:
            stage1 = T.add(stage1, conv_block(ln3d(x), blk.cb1))
        x = stage1

        ts2 = tokenize(x)
        stage2 = T.add(x, detokenize(ffn(TokenSeq(_plain_ln(ts2.tokens), ts2.origin_shape), blk.ffn)))
        if blk.cb2 is not None:
            stage2 = T.add(stage2, conv_block(ln3d(x), blk.cb2))
        x = stage2
    return x
