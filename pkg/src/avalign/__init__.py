"""Desk-scale audio-visual transformer speech recognizer.

Audio and video streams are encoded separately, soft-aligned by
cross-modal attention (audio queries over video keys/values), fused by a
residual connection, and decoded autoregressively into graphemes. An
auxiliary action-unit regression head on the video branch helps the
visual front-end converge.
"""

from .align import AlignResult, AlignStack, extract_alignment
from .audio import Waveform, featurize, mel_warp, mix_noise, stack_frames, stft_magnitude
from .model import (
    AVTransformer,
    ModelConfig,
    ModelOutput,
    combined_loss,
    desk_config,
    forward_audio,
    forward_av,
    load_checkpoint,
    save_checkpoint,
    tiny_config,
)
from .tensor import Rng, Tensor, finite_difference_check
from .training import (
    EvalReport,
    cer,
    corpus_cer,
    evaluate,
    generate_corpus,
    greedy_decode,
    monotonicity_score,
    train,
)
from .video import VisualCnn, cnn_embed, crop_lip_region, downsample_to_36

__version__ = "0.1.0"

__all__ = [
    "AVTransformer",
    "AlignResult",
    "AlignStack",
    "EvalReport",
    "ModelConfig",
    "ModelOutput",
    "Rng",
    "Tensor",
    "VisualCnn",
    "Waveform",
    "cer",
    "cnn_embed",
    "combined_loss",
    "corpus_cer",
    "crop_lip_region",
    "desk_config",
    "downsample_to_36",
    "evaluate",
    "extract_alignment",
    "featurize",
    "finite_difference_check",
    "forward_audio",
    "forward_av",
    "generate_corpus",
    "greedy_decode",
    "load_checkpoint",
    "mel_warp",
    "mix_noise",
    "monotonicity_score",
    "save_checkpoint",
    "stack_frames",
    "stft_magnitude",
    "tiny_config",
    "train",
]
