"""Transformer building blocks: attention, feed-forward, encoder/decoder stacks.

Post-norm arrangement (residual add, then layer norm), ReLU feed-forward,
sinusoidal positional encodings. Dropout is applied at exactly two sites:
attention weights and feed-forward activations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .module import Module
from .tensor import Rng, Tensor

MASK_BIAS = -1e9


@dataclass
class AttentionOutput:
    values: Tensor  # (..., L_q, d_v)
    weights: Tensor  # (..., L_q, L_k), pre-dropout, rows sum to 1


def scaled_dot_attention(
    query, key, value, mask=None, dropout_p=0.0, rng: Rng | None = None, train=False
) -> AttentionOutput:
    """softmax(QK^T / sqrt(d) + mask_bias) V.

    ``mask`` is boolean, True where attending is allowed, broadcastable to
    the (..., L_q, L_k) score shape. A fully masked query row is a contract
    violation.
    """
    query, key, value = T.as_tensor(query), T.as_tensor(key), T.as_tensor(value)
    d = query.shape[-1]
    if key.shape[-1] != d:
        raise ShapeError(f"query width {d} != key width {key.shape[-1]}")
    scores = T.matmul(query, T.transpose(key, *_swap_last(key.ndim)))
    scores = scores * (1.0 / np.sqrt(d))
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, bool), scores.shape)
        if not mask.any(axis=-1).all():
            raise ContractError("attention mask leaves a query row fully masked")
        scores = scores + np.where(mask, 0.0, MASK_BIAS).astype(scores.dtype)
    weights = T.softmax(scores, axis=-1)
    attended = T.dropout(weights, dropout_p, rng, train)
    return AttentionOutput(values=T.matmul(attended, value), weights=weights)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return axes


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal absolute positions: sin on even columns, cos on odd."""
    if d_model % 2:
        raise ShapeError("d_model must be even for sin/cos interleaving")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


class Linear(Module):
    def __init__(self, rng: Rng, d_in: int, d_out: int, dtype=np.float32, bias=True):
        super().__init__()
        self.w = self.param("w", T.glorot_uniform(rng, (d_in, d_out), d_in, d_out, dtype))
        self.b = self.param("b", np.zeros(d_out, dtype)) if bias else None

    def __call__(self, x) -> Tensor:
        y = T.matmul(x, self.w)
        return y + self.b if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32):
        super().__init__()
        self.g = self.param("g", np.ones(d, dtype))
        self.b = self.param("b", np.zeros(d, dtype))

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.g, self.b)


class MultiHeadAttention(Module):
    """Projected attention; with one head this is plain dot-product attention."""

    def __init__(self, rng: Rng, d_model: int, n_heads: int, dropout: float, dtype):
        super().__init__()
        if d_model % n_heads:
            raise ShapeError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.dropout = dropout
        self.wq = self.child("wq", Linear(rng.split("wq"), d_model, d_model, dtype))
        self.wk = self.child("wk", Linear(rng.split("wk"), d_model, d_model, dtype))
        self.wv = self.child("wv", Linear(rng.split("wv"), d_model, d_model, dtype))
        self.wo = self.child("wo", Linear(rng.split("wo"), d_model, d_model, dtype))

    def _split(self, x: Tensor, batch: int, length: int) -> Tensor:
        x = T.reshape(x, (batch, length, self.n_heads, self.d_head))
        return T.transpose(x, 0, 2, 1, 3)  # (B, h, L, dh)

    def __call__(self, q, kv, mask=None, train=False, rng=None):
        """q (B, Lq, d), kv (B, Lk, d) -> ((B, Lq, d), weights (B, Lq, Lk))."""
        b, lq = q.shape[0], q.shape[1]
        lk = kv.shape[1]
        qh = self._split(self.wq(q), b, lq)
        kh = self._split(self.wk(kv), b, lk)
        vh = self._split(self.wv(kv), b, lk)
        if mask is not None:
            mask = np.asarray(mask, bool)[:, None, :, :]  # broadcast over heads
        att = scaled_dot_attention(qh, kh, vh, mask, self.dropout, rng, train)
        out = T.transpose(att.values, 0, 2, 1, 3)
        out = T.reshape(out, (b, lq, self.n_heads * self.d_head))
        weights = T.tmean(att.weights, axis=1)  # (B, Lq, Lk), exact when h == 1
        return self.wo(out), weights


class FeedForward(Module):
    def __init__(self, rng: Rng, d_model: int, d_ff: int, dropout: float, dtype):
        super().__init__()
        self.dropout = dropout
        self.w1 = self.child("w1", Linear(rng.split("w1"), d_model, d_ff, dtype))
        self.w2 = self.child("w2", Linear(rng.split("w2"), d_ff, d_model, dtype))

    def __call__(self, x, train=False, rng=None) -> Tensor:
        h = T.relu(self.w1(x))
        h = T.dropout(h, self.dropout, rng, train)
        return self.w2(h)


class EncoderLayer(Module):
    def __init__(self, rng: Rng, d_model, d_ff, n_heads, dropout, dtype):
        super().__init__()
        self.attn = self.child("attn", MultiHeadAttention(rng.split("attn"), d_model, n_heads, dropout, dtype))
        self.ln1 = self.child("ln1", LayerNorm(d_model, dtype))
        self.ff = self.child("ff", FeedForward(rng.split("ff"), d_model, d_ff, dropout, dtype))
        self.ln2 = self.child("ln2", LayerNorm(d_model, dtype))

    def __call__(self, x, mask=None, train=False, rng=None):
        a, w = self.attn(x, x, mask, train, rng)
        x = self.ln1(x + a)
        x = self.ln2(x + self.ff(x, train, rng))
        return x, w


class EncoderStack(Module):
    """Self-attention encoder; shape-preserving over (B, L, d_model)."""

    def __init__(self, rng: Rng, n_layers, d_model, d_ff, n_heads, dropout, dtype=np.float32):
        super().__init__()
        self.layers = [
            self.child(f"layer{i}", EncoderLayer(rng.split(i), d_model, d_ff, n_heads, dropout, dtype))
            for i in range(n_layers)
        ]

    def __call__(self, x, pad_mask=None, train=False, rng=None, collect_weights=None):
        """pad_mask (B, L) boolean, True at valid positions."""
        attn_mask = None
        if pad_mask is not None:
            pad_mask = np.asarray(pad_mask, bool)
            attn_mask = pad_mask[:, None, :]  # every query may see all valid keys
        for layer in self.layers:
            x, w = layer(x, attn_mask, train, rng)
            if collect_weights is not None:
                collect_weights.append(w)
        return x


def causal_mask(t: int) -> np.ndarray:
    """(t, t) boolean, True where target position i may attend to j <= i."""
    return np.tril(np.ones((t, t), bool))


class DecoderLayer(Module):
    def __init__(self, rng: Rng, d_model, d_ff, n_heads, dropout, dtype):
        super().__init__()
        self.self_attn = self.child("self_attn", MultiHeadAttention(rng.split("sa"), d_model, n_heads, dropout, dtype))
        self.ln1 = self.child("ln1", LayerNorm(d_model, dtype))
        self.cross_attn = self.child("cross_attn", MultiHeadAttention(rng.split("ca"), d_model, n_heads, dropout, dtype))
        self.ln2 = self.child("ln2", LayerNorm(d_model, dtype))
        self.ff = self.child("ff", FeedForward(rng.split("ff"), d_model, d_ff, dropout, dtype))
        self.ln3 = self.child("ln3", LayerNorm(d_model, dtype))

    def __call__(self, x, memory, self_mask, mem_mask, train=False, rng=None):
        a, _ = self.self_attn(x, x, self_mask, train, rng)
        x = self.ln1(x + a)
        c, w = self.cross_attn(x, memory, mem_mask, train, rng)
        x = self.ln2(x + c)
        x = self.ln3(x + self.ff(x, train, rng))
        return x, w


class DecoderStack(Module):
    """Autoregressive decoder over embedded targets; emits per-position logits."""

    def __init__(self, rng: Rng, n_layers, d_model, d_ff, n_heads, dropout, vocab_size, dtype=np.float32):
        super().__init__()
        self.layers = [
            self.child(f"layer{i}", DecoderLayer(rng.split(i), d_model, d_ff, n_heads, dropout, dtype))
            for i in range(n_layers)
        ]
        self.out = self.child("out", Linear(rng.split("out"), d_model, vocab_size, dtype))

    def __call__(
        self,
        targets,
        memory,
        causal,
        mem_pad_mask=None,
        tgt_pad_mask=None,
        train=False,
        rng=None,
        collect_weights=None,
    ):
        """targets (B, T, d), memory (B, L, d) -> logits (B, T, vocab)."""
        if causal is None:
            raise ContractError("decoder requires a causal mask")
        b, t = targets.shape[0], targets.shape[1]
        self_mask = np.broadcast_to(np.asarray(causal, bool), (b, t, t))
        if tgt_pad_mask is not None:
            self_mask = self_mask & np.asarray(tgt_pad_mask, bool)[:, None, :]
            # a padded query row would mask everything; let it see itself
            self_mask = self_mask | np.eye(t, dtype=bool)[None, :, :]
        mem_mask = None
        if mem_pad_mask is not None:
            mem_mask = np.asarray(mem_pad_mask, bool)[:, None, :]
        x = targets
        for layer in self.layers:
            x, w = layer(x, memory, self_mask, mem_mask, train, rng)
            if collect_weights is not None:
                collect_weights.append(w)
        return self.out(x)
