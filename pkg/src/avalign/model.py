"""Full recognizer: audio/video encoders, cross-modal fusion, grapheme decoder.

Modes:
  audio  - audio encoder -> decoder (memory = audio states)
  av     - both encoders -> align stack -> decoder (memory = fused states)
  av+au  - av plus the action-unit regression head on the video encoder
           outputs, trained with an auxiliary MSE term.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .align import AlignStack
from .audio import FEATURE_DIM
from .errors import ConfigError, ContractError, InputError, ModeError
from .io import load_avt1, save_avt1
from .layers import DecoderStack, EncoderStack, Linear, causal_mask, positional_encoding
from .module import Module
from .tensor import Rng, Tensor
from .video import VisualCnn, preprocess_frames

MODES = ("audio", "av", "av+au")

# 26 letters + 10 digits + space + <pad>/<sos>/<eos> = 40 tokens
CHARS = "abcdefghijklmnopqrstuvwxyz0123456789 "
PAD, SOS, EOS = 0, 1, 2
VOCAB = ["<pad>", "<sos>", "<eos>"] + list(CHARS)
VOCAB_SIZE = len(VOCAB)
CHAR_TO_ID = {c: i + 3 for i, c in enumerate(CHARS)}


def encode_text(text: str) -> np.ndarray:
    """Transcript -> token ids (no specials attached)."""
    try:
        return np.array([CHAR_TO_ID[c] for c in text], dtype=np.int64)
    except KeyError as e:
        raise InputError(f"character {e.args[0]!r} not in vocabulary") from e


def decode_ids(ids) -> str:
    """Token ids -> transcript; <pad>/<sos>/<eos> are stripped."""
    return "".join(VOCAB[i] for i in ids if i > EOS)


@dataclass
class ModelConfig:
    d_model: int = 256
    d_ff: int = 256
    n_encoder_layers: int = 6
    n_decoder_layers: int = 6
    # Depth of the video encoder's self-attention stack; None means "same as
    # the audio encoder".  Setting 0 keeps the video branch purely local
    # (CNN embedding + positional encoding), so any video information must
    # reach the decoder through per-position cross-modal attention instead
    # of a pooled whole-sequence summary.
    n_video_layers: Optional[int] = None
    # When False, no positional encodings are added on the video branch, so
    # video states carry frame content only and a pooled attention context is
    # an orderless bag; transcript order can then reach the decoder only
    # through per-position cross-modal attention.  Also the switch behind the
    # column-permutation equivariance property of the align stack.
    video_pe: bool = True
    n_align_blocks: int = 1
    n_heads: int = 1
    dropout: float = 0.1
    vocab_size: int = VOCAB_SIZE
    max_len: int = 2048
    n_au: int = 2
    lambda_au: float = 1.0
    cnn_base_channels: int = 8
    fusion: str = "residual"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")
        if self.n_video_layers is not None and self.n_video_layers < 0:
            raise ConfigError(f"n_video_layers must be >= 0, got {self.n_video_layers}")

    @property
    def video_layers(self) -> int:
        return self.n_encoder_layers if self.n_video_layers is None else self.n_video_layers

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def tiny_config(**overrides) -> ModelConfig:
    """The gradient-check configuration: small enough for exhaustive FD."""
    base = dict(
        d_model=8,
        d_ff=8,
        n_encoder_layers=2,
        n_decoder_layers=2,
        n_align_blocks=1,
        n_heads=1,
        dropout=0.0,
        vocab_size=5,
        max_len=64,
        n_au=2,
        # channel-wise layer norm needs >= 2 channels: with one channel the
        # normalized activation is identically zero and ReLU sits on its kink
        cnn_base_channels=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


def desk_config(**overrides) -> ModelConfig:
    """Laptop-scale training configuration used by the synthetic experiments.

    Dropout is off: these runs deliberately overfit tiny corpora, and
    regularization noise only destabilizes the schedule at this scale.
    """
    base = dict(
        d_model=64,
        d_ff=128,
        n_encoder_layers=2,
        n_decoder_layers=2,
        n_align_blocks=1,
        n_heads=1,
        dropout=0.0,
        vocab_size=VOCAB_SIZE,
        max_len=512,
        n_au=2,
        cnn_base_channels=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class ModelOutput:
    logits: Tensor  # (B, T, vocab)
    alignment: Optional[Tensor] = None  # (B, N, M), audio-visual modes only
    au_pred: Optional[Tensor] = None  # (B, M, n_au), av+au only
    attention_weights: list = field(default_factory=list)  # every softmax in the net


class AVTransformer(Module):
    def __init__(self, config: ModelConfig, mode: str = "av", seed: int = 0, dtype=np.float32):
        super().__init__()
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        self.config = config
        self.mode = mode
        self.dtype = dtype
        rng = Rng(seed).split("init")
        d = config.d_model
        self.audio_in = self.child("audio_in", Linear(rng.split("audio_in"), FEATURE_DIM, d, dtype))
        self.audio_enc = self.child(
            "audio_enc",
            EncoderStack(rng.split("audio_enc"), config.n_encoder_layers, d, config.d_ff, config.n_heads, config.dropout, dtype),
        )
        if mode != "audio":
            self.cnn = self.child("cnn", VisualCnn(rng.split("cnn"), config.cnn_base_channels, d, dtype))
            self.video_enc = self.child(
                "video_enc",
                EncoderStack(rng.split("video_enc"), config.video_layers, d, config.d_ff, config.n_heads, config.dropout, dtype),
            )
            self.align = self.child(
                "align",
                AlignStack(rng.split("align"), config.n_align_blocks, d, config.d_ff, config.n_heads, config.dropout, dtype, config.fusion),
            )
        if mode == "av+au":
            self.au_out = self.child("au_out", Linear(rng.split("au_out"), d, config.n_au, dtype))
        self.embed = self.param(
            "embed",
            T.glorot_uniform(rng.split("embed"), (config.vocab_size, d), config.vocab_size, d, dtype),
        )
        self.decoder = self.child(
            "decoder",
            DecoderStack(rng.split("decoder"), config.n_decoder_layers, d, config.d_ff, config.n_heads, config.dropout, config.vocab_size, dtype),
        )
        self._pe_cache: dict[int, np.ndarray] = {}

    # -- helpers ---------------------------------------------------------
    def _pe(self, length: int) -> np.ndarray:
        if length > self.config.max_len:
            raise ContractError(f"sequence length {length} exceeds max_len {self.config.max_len}")
        if length not in self._pe_cache:
            self._pe_cache[length] = positional_encoding(length, self.config.d_model).astype(self.dtype)
        return self._pe_cache[length]

    def encode_audio(self, feats, pad_mask=None, train=False, rng=None, weights=None):
        """feats (B, N, 240) -> (B, N, d_model)."""
        x = self.audio_in(Tensor(np.asarray(feats, dtype=self.dtype)))
        x = x + self._pe(feats.shape[1])[None]
        return self.audio_enc(x, pad_mask, train, rng, weights)

    def encode_video(self, pixels, pad_mask=None, train=False, rng=None, weights=None):
        """pixels (B, M, 36, 36, 3) in [0, 255] -> (B, M, d_model)."""
        b, m = pixels.shape[0], pixels.shape[1]
        flat = np.asarray(pixels).reshape((b * m,) + pixels.shape[2:])
        emb = self.cnn(flat)
        x = T.reshape(emb, (b, m, self.config.d_model))
        if self.config.video_pe:
            x = x + self._pe(m)[None]
        return self.video_enc(x, pad_mask, train, rng, weights)

    def au_head(self, o_v: Tensor) -> Tensor:
        """Per-frame action-unit activations in (0, 1)."""
        if self.mode != "av+au":
            raise ConfigError("action-unit head invoked but not enabled (mode != av+au)")
        return T.sigmoid(self.au_out(o_v))

    def decode(self, memory, target_ids, mem_pad_mask=None, tgt_pad_mask=None, train=False, rng=None, weights=None):
        ids = np.asarray(target_ids)
        t = ids.shape[1]
        x = T.embedding(self.embed, ids) * np.sqrt(float(self.config.d_model))
        x = x + self._pe(t)[None]
        return self.decoder(x, memory, causal_mask(t), mem_pad_mask, tgt_pad_mask, train, rng, weights)

    # -- batched forward ---------------------------------------------------
    def forward_batch(
        self,
        audio_feats,
        target_ids,
        video_pixels=None,
        audio_mask=None,
        video_mask=None,
        tgt_mask=None,
        train=False,
        rng=None,
    ) -> ModelOutput:
        """All array inputs are padded numpy batches; masks are True at valid positions."""
        if audio_feats.shape[0] == 0 or audio_feats.shape[1] == 0:
            raise InputError("empty audio input")
        weights = []
        o_a = self.encode_audio(audio_feats, audio_mask, train, rng, weights)
        alignment = None
        au_pred = None
        if self.mode == "audio":
            memory = o_a
        else:
            if video_pixels is None or video_pixels.shape[1] == 0:
                raise InputError("audio-visual mode requires video frames")
            o_v = self.encode_video(video_pixels, video_mask, train, rng, weights)
            result = self.align(o_a, o_v, video_mask, train, rng)
            memory = result.fused
            alignment = result.alignment
            weights.append(alignment)
            if self.mode == "av+au":
                au_pred = self.au_head(o_v)
        logits = self.decode(memory, target_ids, audio_mask, tgt_mask, train, rng, weights)
        return ModelOutput(logits=logits, alignment=alignment, au_pred=au_pred, attention_weights=weights)


def forward_av(model: AVTransformer, audio_feats, video_frames, target_prefix, train=False, rng=None) -> ModelOutput:
    """Single-utterance audio-visual forward; raw (M, H, W, 3) frames."""
    if model.mode == "audio":
        raise ModeError("forward_av requires an audio-visual model")
    if np.asarray(target_prefix)[0] != SOS:
        raise ContractError("target prefix must begin with <sos>")
    pixels = preprocess_frames(video_frames)[None]
    out = model.forward_batch(
        np.asarray(audio_feats)[None], np.asarray(target_prefix)[None], pixels, train=train, rng=rng
    )
    return out


def forward_audio(model: AVTransformer, audio_feats, target_prefix, train=False, rng=None) -> ModelOutput:
    """Single-utterance audio-only forward."""
    if np.asarray(target_prefix)[0] != SOS:
        raise ContractError("target prefix must begin with <sos>")
    if model.mode == "audio":
        return model.forward_batch(np.asarray(audio_feats)[None], np.asarray(target_prefix)[None], train=train, rng=rng)
    raise ModeError("forward_audio requires an audio-only model")


def combined_loss(
    logits: Tensor,
    targets,
    tgt_mask=None,
    au_pred: Tensor | None = None,
    au_targets=None,
    video_mask=None,
    lambda_au: float = 1.0,
) -> Tensor:
    """Mean per-token cross-entropy over non-pad targets, plus lambda * AU MSE."""
    ids = np.asarray(targets)
    b, t, v = logits.shape
    if ids.shape != (b, t):
        raise ContractError(f"targets shape {ids.shape} != logits positions {(b, t)}")
    mask = np.ones((b, t), bool) if tgt_mask is None else np.asarray(tgt_mask, bool)
    mask = mask & (ids != PAD)
    count = int(mask.sum())
    if count == 0:
        raise ContractError("all target positions are padding")
    onehot = np.zeros((b, t, v), dtype=logits.dtype)
    onehot[np.arange(b)[:, None], np.arange(t)[None, :], ids] = 1.0
    onehot *= mask[:, :, None]
    lp = T.log_softmax(logits, axis=-1)
    ce = T.tsum(lp * onehot) * (-1.0 / count)
    if au_pred is None or au_targets is None or lambda_au == 0.0:
        return ce
    tgt = np.asarray(au_targets, dtype=au_pred.dtype)
    m, n_au = au_pred.shape[1], au_pred.shape[2]
    vmask = np.ones((au_pred.shape[0], m), bool) if video_mask is None else np.asarray(video_mask, bool)
    diff = (au_pred - tgt) * vmask[:, :, None].astype(au_pred.dtype)
    mse = T.tsum(diff * diff) * (1.0 / (int(vmask.sum()) * n_au))
    return ce + mse * lambda_au


# -- checkpointing ----------------------------------------------------------

def save_checkpoint(model: AVTransformer, directory: str) -> None:
    """Manifest JSON plus one AVT1 tensor file per parameter."""
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "format": "avalign-checkpoint",
        "mode": model.mode,
        "config": model.config.to_dict(),
        "params": {},
    }
    for name, t in model.parameters().items():
        fname = name.replace(".", "_") + ".avt1"
        save_avt1(os.path.join(directory, fname), t.data)
        manifest["params"][name] = fname
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_checkpoint(directory: str) -> AVTransformer:
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise InputError(f"no checkpoint manifest at {path}")
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("format") != "avalign-checkpoint":
        raise InputError(f"{path}: not an avalign checkpoint manifest")
    config = ModelConfig.from_dict(manifest["config"])
    model = AVTransformer(config, manifest["mode"])
    state = {
        name: load_avt1(os.path.join(directory, fname))
        for name, fname in manifest["params"].items()
    }
    model.load_state(state)
    return model
