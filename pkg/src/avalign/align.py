"""Cross-modal alignment: audio queries attend over video keys/values.

The fusion block computes visual context vectors by dot-product attention
(audio encoder outputs as queries, video encoder outputs as keys and
values), adds them residually onto the audio sequence, normalizes, and
runs a feed-forward sublayer. The attention weight matrix is kept around:
it is the alignment that gets inspected and exported as a heatmap.

An alternative fusion that concatenates context and audio and projects
back down is available behind ``fusion="linear"``; residual addition is
the default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .layers import FeedForward, LayerNorm, MultiHeadAttention
from .module import Module
from .tensor import Rng, Tensor


@dataclass
class AlignResult:
    fused: Tensor  # (B, N, d_model), same shape as the audio input
    alignment: Tensor  # (B, N, M) row-stochastic attention weights


class AlignBlock(Module):
    def __init__(self, rng: Rng, d_model, d_ff, n_heads, dropout, dtype, fusion="residual"):
        super().__init__()
        if fusion not in ("residual", "linear"):
            raise ValueError(f"unknown fusion {fusion!r}")
        self.fusion = fusion
        self.attn = self.child("attn", MultiHeadAttention(rng.split("attn"), d_model, n_heads, dropout, dtype))
        self.ln1 = self.child("ln1", LayerNorm(d_model, dtype))
        self.ff = self.child("ff", FeedForward(rng.split("ff"), d_model, d_ff, dropout, dtype))
        self.ln2 = self.child("ln2", LayerNorm(d_model, dtype))
        if fusion == "linear":
            from .layers import Linear

            self.fuse = self.child("fuse", Linear(rng.split("fuse"), 2 * d_model, d_model, dtype))

    def __call__(self, audio, video, video_pad_mask=None, train=False, rng=None):
        mask = None
        if video_pad_mask is not None:
            mask = np.asarray(video_pad_mask, bool)[:, None, :]
        context, weights = self.attn(audio, video, mask, train, rng)
        if self.fusion == "residual":
            fused = context + audio
        else:
            from . import tensor as T

            fused = self.fuse(T.concat([context, audio], axis=-1))
        x = self.ln1(fused)
        x = self.ln2(x + self.ff(x, train, rng))
        return x, weights


class AlignStack(Module):
    """One or more fusion blocks; alignment comes from the final block."""

    def __init__(self, rng: Rng, n_blocks, d_model, d_ff, n_heads, dropout, dtype=np.float32, fusion="residual"):
        super().__init__()
        self.blocks = [
            self.child(
                f"block{i}",
                AlignBlock(rng.split(i), d_model, d_ff, n_heads, dropout, dtype, fusion),
            )
            for i in range(n_blocks)
        ]

    def __call__(self, audio, video, video_pad_mask=None, train=False, rng=None) -> AlignResult:
        if audio.shape[-1] != video.shape[-1]:
            raise ShapeError(
                f"modality widths differ: audio {audio.shape} vs video {video.shape}"
            )
        x, weights = audio, None
        for block in self.blocks:
            x, weights = block(x, video, video_pad_mask, train, rng)
        return AlignResult(fused=x, alignment=weights)


def extract_alignment(result: AlignResult) -> np.ndarray:
    """The (N, M) row-stochastic weights for a single-utterance forward."""
    w = result.alignment.data
    return w[0] if w.ndim == 3 else w
