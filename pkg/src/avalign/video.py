"""Visual front-end: lip-region crop, bilinear downsample, residual CNN embedder.

Per frame: crop the bottom 40% of the height and the middle 80% of the
width, resize to 36x36, rescale pixels to [-1, 1], then run a small
full-preactivation residual CNN:

    conv3x3 -> 36x36x8 -> res(8) -> res(16, /2) -> res(32, /2) -> res(64, /2)
    -> 5x5 valid conv -> 1x1x128 -> linear projection to the model width.

Stride-2 convolutions use same-padding with ceil division so the spatial
chain is 36 -> 18 -> 9 -> 5.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import InputError, ShapeError
from .module import Module
from .tensor import Rng, Tensor

CNN_INPUT_SIZE = 36


def crop_lip_region(frame: np.ndarray) -> np.ndarray:
    """Keep rows [ceil(0.6 H), H) and columns [round(0.1 W), round(0.9 W))."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise InputError(f"expected (H, W, 3) frame, got {frame.shape}")
    h, w = frame.shape[:2]
    if h < 5 or w < 5:
        raise InputError(f"frame too small to crop: {h}x{w}")
    r0 = -(-3 * h // 5)  # ceil(0.6 h), exact integer arithmetic
    c0 = (w + 5) // 10  # round(0.1 w), half away from zero
    c1 = (9 * w + 5) // 10  # round(0.9 w)
    if r0 >= h or c0 >= c1:
        raise InputError(f"degenerate crop for {h}x{w} frame")
    return frame[r0:h, c0:c1]


def downsample_to_36(image: np.ndarray, size: int = CNN_INPUT_SIZE) -> np.ndarray:
    """Bilinear resize to size x size with half-pixel centers.

    A same-size input comes back unchanged; outputs never leave the input's
    value range (convex interpolation).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise InputError(f"expected (h, w, 3) image, got {img.shape}")
    h, w = img.shape[:2]

    def axis_coords(n_src, n_dst):
        src = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        src = np.clip(src, 0.0, n_src - 1.0)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_src - 1)
        frac = src - lo
        return lo, hi, frac

    r_lo, r_hi, r_f = axis_coords(h, size)
    c_lo, c_hi, c_f = axis_coords(w, size)
    top = img[r_lo][:, c_lo] * (1 - c_f)[None, :, None] + img[r_lo][:, c_hi] * c_f[None, :, None]
    bot = img[r_hi][:, c_lo] * (1 - c_f)[None, :, None] + img[r_hi][:, c_hi] * c_f[None, :, None]
    return top * (1 - r_f)[:, None, None] + bot * r_f[:, None, None]


def preprocess_frames(frames: np.ndarray) -> np.ndarray:
    """Crop + downsample every frame; (M, H, W, 3) -> (M, 36, 36, 3) pixels."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[3] != 3:
        raise InputError(f"expected (M, H, W, 3) frames, got {frames.shape}")
    return np.stack([downsample_to_36(crop_lip_region(f)) for f in frames])


class ChannelNorm(Module):
    """Per-channel normalization over the spatial map, learned scale/shift.

    Deterministic stand-in for batch norm: each channel of each sample is
    normalized by its own spatial mean/variance.
    """

    def __init__(self, channels: int, dtype):
        super().__init__()
        self.g = self.param("g", np.ones(channels, dtype))
        self.b = self.param("b", np.zeros(channels, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        t = T.transpose(x, 0, 3, 1, 2)
        t = T.reshape(t, (b, c, h * w))
        one = np.ones(1, x.data.dtype)
        zero = np.zeros(1, x.data.dtype)
        t = T.layer_norm(t, one, zero)
        t = t * T.reshape(self.g, (c, 1)) + T.reshape(self.b, (c, 1))
        t = T.reshape(t, (b, c, h, w))
        return T.transpose(t, 0, 2, 3, 1)


class ResBlock(Module):
    """Full-preactivation residual block: (norm -> ReLU -> conv3x3) twice.

    Shortcut is the identity, or a strided 1x1 conv when the shape changes.
    """

    def __init__(self, rng: Rng, c_in: int, c_out: int, stride: int, dtype):
        super().__init__()
        self.stride = stride
        self.projected = stride != 1 or c_in != c_out
        self.norm1 = self.child("norm1", ChannelNorm(c_in, dtype))
        self.w1 = self.param(
            "w1", T.glorot_uniform(rng.split("w1"), (3, 3, c_in, c_out), 9 * c_in, 9 * c_out, dtype)
        )
        self.b1 = self.param("b1", np.zeros(c_out, dtype))
        self.norm2 = self.child("norm2", ChannelNorm(c_out, dtype))
        self.w2 = self.param(
            "w2", T.glorot_uniform(rng.split("w2"), (3, 3, c_out, c_out), 9 * c_out, 9 * c_out, dtype)
        )
        self.b2 = self.param("b2", np.zeros(c_out, dtype))
        if self.projected:
            self.ws = self.param(
                "ws", T.glorot_uniform(rng.split("ws"), (1, 1, c_in, c_out), c_in, c_out, dtype)
            )

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(self.norm1(x))
        h = T.conv2d(h, self.w1, self.b1, stride=self.stride, padding="same")
        h = T.relu(self.norm2(h))
        h = T.conv2d(h, self.w2, self.b2, stride=1, padding="same")
        if self.projected:
            sc = T.conv2d(x, self.ws, None, stride=self.stride, padding="same")
        else:
            sc = x
        return h + sc


class VisualCnn(Module):
    """Per-frame embedder: (M, 36, 36, 3) pixels in [0, 255] -> (M, out_dim).

    Shape chain with base width c: 36x36xc -> 18x18x2c -> 9x9x4c -> 5x5x8c
    -> 1x1x16c -> out_dim. Defaults (c=8, out_dim=256) give the full-width
    recognizer; narrower variants keep gradient checks fast.
    """

    def __init__(self, rng: Rng, base_channels: int = 8, out_dim: int = 256, dtype=np.float32):
        super().__init__()
        c = base_channels
        self.feat_dim = 16 * c
        self.w_in = self.param(
            "w_in", T.glorot_uniform(rng.split("w_in"), (3, 3, 3, c), 27, 9 * c, dtype)
        )
        self.b_in = self.param("b_in", np.zeros(c, dtype))
        self.blocks = [
            self.child("block1", ResBlock(rng.split("b1"), c, c, 1, dtype)),
            self.child("block2", ResBlock(rng.split("b2"), c, 2 * c, 2, dtype)),
            self.child("block3", ResBlock(rng.split("b3"), 2 * c, 4 * c, 2, dtype)),
            self.child("block4", ResBlock(rng.split("b4"), 4 * c, 8 * c, 2, dtype)),
        ]
        self.w_out = self.param(
            "w_out",
            T.glorot_uniform(
                rng.split("w_out"), (5, 5, 8 * c, 16 * c), 25 * 8 * c, 16 * c, dtype
            ),
        )
        self.b_out = self.param("b_out", np.zeros(16 * c, dtype))
        self.w_proj = self.param(
            "w_proj",
            T.glorot_uniform(rng.split("w_proj"), (16 * c, out_dim), 16 * c, out_dim, dtype),
        )
        self.b_proj = self.param("b_proj", np.zeros(out_dim, dtype))

    @staticmethod
    def rescale(frames: np.ndarray) -> np.ndarray:
        """Pixel values [0, 255] -> [-1, +1]."""
        return np.asarray(frames, dtype=np.float64) / 127.5 - 1.0

    def __call__(self, frames, return_intermediates: bool = False):
        frames = np.asarray(frames)
        if frames.ndim != 4 or frames.shape[1:] != (36, 36, 3):
            raise ShapeError(f"expected (M, 36, 36, 3) input, got {frames.shape}")
        x = Tensor(self.rescale(frames).astype(self.w_in.data.dtype))
        x = T.conv2d(x, self.w_in, self.b_in, stride=1, padding="same")
        inter = [x.shape]
        for block in self.blocks:
            x = block(x)
            inter.append(x.shape)
        x = T.conv2d(x, self.w_out, self.b_out, stride=1, padding="valid")
        inter.append(x.shape)
        x = T.reshape(x, (frames.shape[0], self.feat_dim))
        x = T.matmul(x, self.w_proj) + self.b_proj
        if return_intermediates:
            return x, inter
        return x


def cnn_embed(cnn: VisualCnn, frames: np.ndarray) -> Tensor:
    """Embed preprocessed 36x36 RGB frames; returns an (M, out_dim) tensor."""
    return cnn(frames)
