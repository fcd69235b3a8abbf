"""Training loop, greedy decoding, CER evaluation, synthetic corpus, alignment analysis.

The synthetic corpus stands in for a real paired speech dataset at desk
scale: each utterance is a random character string rendered as a tone
sequence (one distinct frequency per character) with a temporally aligned
video of per-character colored frames, plus smooth per-frame action-unit
targets. Everything is reproducible from a single seed.
"""

from __future__ import annotations

import colorsys
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from . import tensor as tz
from .audio import Waveform, featurize, mix_noise, pink_noise
from .errors import ContractError, NanError
from .model import EOS, PAD, SOS, AVTransformer, combined_loss, encode_text
from .tensor import Rng
from .video import preprocess_frames

SNR_LEVELS = (10.0, 0.0, -5.0)  # the noise protocol's three corruption stages

LETTERS = "abcdefghijklmnopqrstuvwxyz"
CHAR_RATE = 4.0  # characters per second of audio
FPS = 25.0
SAMPLE_RATE = 16000
TONE_AMPLITUDE = 0.1


# -- edit distance / CER -----------------------------------------------------

def levenshtein(a: str, b: str) -> int:
    """Classic O(len(a)*len(b)) edit distance."""
    if not a:
        return len(b)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _as_text(x) -> str:
    if isinstance(x, str):
        return x
    from .model import decode_ids

    return decode_ids(np.asarray(x))


def cer(hyp, ref) -> float:
    """Edit distance over reference length; specials are stripped first."""
    hyp_s, ref_s = _as_text(hyp), _as_text(ref)
    if not ref_s:
        raise ContractError("empty reference transcript")
    return levenshtein(hyp_s, ref_s) / len(ref_s)


def corpus_cer(pairs) -> float:
    """Corpus-level CER: total edit distance / total reference length."""
    total_dist = total_len = 0
    for hyp, ref in pairs:
        hyp_s, ref_s = _as_text(hyp), _as_text(ref)
        if not ref_s:
            raise ContractError("empty reference transcript")
        total_dist += levenshtein(hyp_s, ref_s)
        total_len += len(ref_s)
    return total_dist / total_len


# -- alignment monotonicity ----------------------------------------------------

def monotonicity_score(weights: np.ndarray) -> float:
    """Spearman correlation between audio index and per-row argmax video index.

    +1 for a perfectly monotonic (diagonal-band) alignment, -1 for a
    reversed one. A constant argmax is degenerate: returns 0 with a warning.
    """
    w = np.asarray(weights)
    if w.ndim != 2 or w.shape[0] < 2 or w.shape[1] < 2:
        raise ContractError(f"need an (N>=2, M>=2) matrix, got {w.shape}")
    peaks = w.argmax(axis=1)
    if np.all(peaks == peaks[0]):
        warnings.warn("degenerate alignment: constant argmax, score undefined")
        return 0.0
    rho = stats.spearmanr(np.arange(len(peaks)), peaks).statistic
    return float(rho)


# -- synthetic corpus ----------------------------------------------------------

@dataclass
class SyntheticUtterance:
    uid: str
    waveform: Waveform
    frames: np.ndarray  # (M, H, W, 3) uint8
    fps: float
    transcript: str
    au_targets: np.ndarray  # (M, n_au) in [0, 1]
    seed: int
    snr_db: float | None = None


def char_tone_hz(k: int) -> float:
    """Distinct tone per character, 220 Hz .. ~4 kHz on a log scale."""
    return 220.0 * 2.0 ** (k / 6.0)


def char_color(k: int) -> np.ndarray:
    r, g, b = colorsys.hsv_to_rgb(k / len(LETTERS), 1.0, 1.0)
    return np.array([r, g, b]) * 255.0


def char_au(k: int, n_au: int) -> np.ndarray:
    ks = np.arange(1, n_au + 1)
    return 0.5 + 0.5 * np.sin(0.7 * ks * (k + 1))


def babble_noise(n: int, rng: Rng, n_talkers: int = 3) -> np.ndarray:
    """Competing-talker masker: a sum of random character-tone sequences.

    Unlike broadband noise, tone babble occupies exactly the frequency slots
    the corpus itself uses, so a masked character cannot be singled out from
    the audio alone -- the masker tones are indistinguishable from content.
    Unit RMS, length n samples.
    """
    spc = int(SAMPLE_RATE / CHAR_RATE)
    t = np.arange(spc) / SAMPLE_RATE
    ramp = np.minimum(1.0, np.minimum(t, t[::-1]) / 0.005)
    total = np.zeros(n)
    n_chars = n // spc + 2
    for talker in range(n_talkers):
        trng = rng.split(talker)
        chars = trng.split("chars").integers(0, len(LETTERS), n_chars)
        tones = np.concatenate(
            [ramp * np.sin(2 * np.pi * char_tone_hz(k) * t) for k in chars]
        )
        offset = int(trng.split("offset").integers(0, spc))
        total += tones[offset : offset + n]
    return total / np.sqrt(np.mean(total**2))


def synth_utterance(seed: int, uid: str, snr_db=None, n_au=2, frame_hw=60) -> SyntheticUtterance:
    rng = Rng(seed)
    length = int(rng.split("len").integers(3, 13))
    chars = rng.split("chars").integers(0, len(LETTERS), length)
    transcript = "".join(LETTERS[k] for k in chars)

    spc = int(SAMPLE_RATE / CHAR_RATE)  # samples per character
    t = np.arange(spc) / SAMPLE_RATE
    ramp = np.minimum(1.0, np.minimum(t, t[::-1]) / 0.005)  # 5 ms fades
    audio = np.concatenate(
        [TONE_AMPLITUDE * ramp * np.sin(2 * np.pi * char_tone_hz(k) * t) for k in chars]
    )
    wave = Waveform(audio)

    duration = length / CHAR_RATE
    m = int(round(duration * FPS))
    frames = np.zeros((m, frame_hw, frame_hw, 3), np.uint8)
    au = np.zeros((m, n_au))
    for j in range(m):
        active = min(int((j + 0.5) / FPS * CHAR_RATE), length - 1)
        frames[j, :, :] = char_color(int(chars[active])).astype(np.uint8)
        au[j] = char_au(int(chars[active]), n_au)

    if snr_db is not None:
        noise = Waveform(pink_noise(len(audio), rng.split("noise")))
        wave = mix_noise(wave, noise, snr_db)
    return SyntheticUtterance(uid, wave, frames, FPS, transcript, au, seed, snr_db)


def generate_corpus(n: int, seed: int, snr_db=None, n_au: int = 2) -> list[SyntheticUtterance]:
    """Deterministic n-utterance corpus; utterance i depends only on (seed, i)."""
    if n < 1:
        raise ContractError("corpus size must be >= 1")
    root = Rng(seed)
    return [
        synth_utterance(root.split(f"utt{i}").seed, f"utt_{i:03d}", snr_db, n_au)
        for i in range(n)
    ]


# -- optimizer -----------------------------------------------------------------

class Adam:
    """Adam with the inverse-sqrt warmup schedule and global-norm clipping."""

    def __init__(self, params: dict, d_model: int, warmup: int = 400, beta1=0.9, beta2=0.98, eps=1e-9, clip_norm=1.0, lr_scale=1.0):
        self.params = params
        self.d_model = d_model
        self.warmup = warmup
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.lr_scale = lr_scale
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def learning_rate(self, step: int) -> float:
        return (
            self.lr_scale
            * self.d_model**-0.5
            * min(step**-0.5, step * self.warmup**-1.5)
        )

    def step(self):
        self.step_count += 1
        lr = self.learning_rate(self.step_count)
        if lr == 0.0:
            return
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.params.items()}
        if self.clip_norm is not None:
            norm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
                grads = {k: g * scale for k, g in grads.items()}
        b1, b2 = self.beta1, self.beta2
        for k, t in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1**self.step_count)
            vhat = self.v[k] / (1 - b2**self.step_count)
            t.data = t.data - lr * mhat / (np.sqrt(vhat) + self.eps)


# -- batching -------------------------------------------------------------------

@dataclass
class PreparedUtterance:
    uid: str
    transcript: str
    feat_variants: list  # one (N, 240) array per SNR variant (index 0 = as-given)
    pixels: np.ndarray  # (M, 36, 36, 3) cropped+resized frames
    au: np.ndarray  # (M, n_au)
    dec_in: np.ndarray  # <sos> + transcript ids
    dec_tgt: np.ndarray  # transcript ids + <eos>
    waveform: Waveform = None  # kept so training can remix noise on the fly


def prepare_utterance(utt: SyntheticUtterance, snr_levels=None) -> PreparedUtterance:
    feats = [featurize(utt.waveform)]
    for level in snr_levels or ():
        if level is None:
            continue
        noise = Waveform(pink_noise(len(utt.waveform.samples), Rng(utt.seed).split(f"aug{level}")))
        feats.append(featurize(mix_noise(utt.waveform, noise, level)))
    ids = encode_text(utt.transcript)
    return PreparedUtterance(
        uid=utt.uid,
        transcript=utt.transcript,
        feat_variants=feats,
        pixels=preprocess_frames(utt.frames),
        au=utt.au_targets,
        dec_in=np.concatenate([[SOS], ids]),
        dec_tgt=np.concatenate([ids, [EOS]]),
        waveform=utt.waveform,
    )


def pad_batch(items, variant_picks=None):
    """Pad a list of PreparedUtterance into dense arrays plus validity masks."""
    b = len(items)
    n_max = max(p.feat_variants[0].shape[0] for p in items)
    m_max = max(p.pixels.shape[0] for p in items)
    t_max = max(len(p.dec_in) for p in items)
    n_au = items[0].au.shape[1]
    feats = np.zeros((b, n_max, items[0].feat_variants[0].shape[1]), np.float32)
    pixels = np.zeros((b, m_max, 36, 36, 3), np.float32)
    au = np.zeros((b, m_max, n_au), np.float32)
    dec_in = np.full((b, t_max), PAD, np.int64)
    dec_tgt = np.full((b, t_max), PAD, np.int64)
    a_mask = np.zeros((b, n_max), bool)
    v_mask = np.zeros((b, m_max), bool)
    t_mask = np.zeros((b, t_max), bool)
    for i, p in enumerate(items):
        pick = 0 if variant_picks is None else variant_picks[i]
        f = p.feat_variants[pick]
        feats[i, : f.shape[0]] = f
        a_mask[i, : f.shape[0]] = True
        pixels[i, : p.pixels.shape[0]] = p.pixels
        v_mask[i, : p.pixels.shape[0]] = True
        au[i, : p.au.shape[0]] = p.au
        dec_in[i, : len(p.dec_in)] = p.dec_in
        dec_tgt[i, : len(p.dec_tgt)] = p.dec_tgt
        t_mask[i, : len(p.dec_in)] = True
    return dict(
        feats=feats, pixels=pixels, au=au, dec_in=dec_in, dec_tgt=dec_tgt,
        audio_mask=a_mask, video_mask=v_mask, tgt_mask=t_mask,
    )


def _length_buckets(prepared, batch_size):
    order = sorted(range(len(prepared)), key=lambda i: prepared[i].feat_variants[0].shape[0])
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


# -- training loop ----------------------------------------------------------------

def train(
    model: AVTransformer,
    corpus,
    steps: int,
    seed: int = 0,
    batch_size: int = 8,
    warmup: int = 400,
    clip_norm: float = 1.0,
    lr_scale: float = 1.0,
    snr_levels=None,
    noise_resample: bool = False,
    noise_kind: str = "pink",
    log_every: int = 50,
    progress=None,
):
    """Teacher-forced training; returns the (step, loss) curve.

    ``snr_levels``: optional noise-augmentation levels; each batch element
    randomly picks the clean features or one of the noisy variants.
    ``noise_resample``: when noise augmentation is on, draw a fresh noise
    realization every time a noisy variant is picked instead of reusing one
    fixed realization per level, so noisy inputs can never be memorized.
    ``noise_kind``: "pink" (broadband) or "babble" (competing character
    tones); only used when resampling.
    ``lr_scale`` multiplies the inverse-sqrt schedule; desk-scale overfit
    runs want a lower peak than the schedule's default.
    Deterministic given (model seed, corpus, seed).
    """
    if not corpus:
        raise ContractError("empty corpus")
    prepared = [prepare_utterance(u, snr_levels) for u in corpus]
    buckets = _length_buckets(prepared, batch_size)
    opt = Adam(
        model.parameters(), model.config.d_model, warmup,
        clip_norm=clip_norm, lr_scale=lr_scale,
    )
    rng = Rng(seed).split("train")
    pick_rng = rng.split("variants")
    batch_rng = rng.split("batches")
    drop_rng = rng.split("dropout")
    n_variants = len(prepared[0].feat_variants)
    history = []
    t0 = time.time()
    for step in range(1, steps + 1):
        bucket = buckets[int(batch_rng.integers(0, len(buckets)))]
        items = [prepared[i] for i in bucket]
        picks = pick_rng.integers(0, n_variants, len(items)) if n_variants > 1 else None
        if noise_resample and picks is not None:
            levels = [lv for lv in snr_levels if lv is not None]
            fresh = []
            for slot, (p, pick) in enumerate(zip(items, picks)):
                if pick == 0:
                    fresh.append(replace(p, feat_variants=[p.feat_variants[0]]))
                    continue
                noise_rng = rng.split("resample").split(step).split(slot)
                gen = babble_noise if noise_kind == "babble" else pink_noise
                noise = Waveform(gen(len(p.waveform.samples), noise_rng))
                feats = featurize(mix_noise(p.waveform, noise, levels[pick - 1]))
                fresh.append(replace(p, feat_variants=[feats]))
            items, picks = fresh, None
        batch = pad_batch(items, picks)
        loss = _train_step(model, batch, drop_rng)
        if not np.isfinite(loss):
            _diagnose_nan(model, batch, drop_rng)
        opt.step()
        model.zero_grad()
        history.append((step, float(loss)))
        if progress and (step % log_every == 0 or step == steps):
            progress(step, float(loss), time.time() - t0)
    return history


def _train_step(model, batch, drop_rng) -> float:
    out = model.forward_batch(
        batch["feats"],
        batch["dec_in"],
        batch["pixels"] if model.mode != "audio" else None,
        batch["audio_mask"],
        batch["video_mask"] if model.mode != "audio" else None,
        batch["tgt_mask"],
        train=True,
        rng=drop_rng,
    )
    loss = combined_loss(
        out.logits,
        batch["dec_tgt"],
        batch["tgt_mask"],
        out.au_pred,
        batch["au"] if out.au_pred is not None else None,
        batch["video_mask"],
        model.config.lambda_au,
    )
    loss.backward()
    return loss.item()


def _diagnose_nan(model, batch, drop_rng):
    """Re-run the failed step with per-op NaN scanning to name the culprit."""
    tz.NAN_CHECK = True
    try:
        _train_step(model, batch, drop_rng)
    finally:
        tz.NAN_CHECK = False
    raise NanError("non-finite loss, but the re-run did not reproduce it")


# -- decoding and evaluation ---------------------------------------------------------

def greedy_decode(model, audio_feats, video_pixels=None, max_len: int = 64) -> np.ndarray:
    """Feed the argmax token back until <eos> or max_len; returns grapheme ids.

    The encoder memory is independent of the decoder prefix, so it is
    computed once and only the decoder reruns per emitted token.
    """
    from .tensor import Tensor

    feats = np.asarray(audio_feats)[None]
    o_a = model.encode_audio(feats)
    if model.mode == "audio":
        memory = o_a
    else:
        if video_pixels is None:
            raise ContractError("audio-visual decoding requires video frames")
        o_v = model.encode_video(np.asarray(video_pixels)[None])
        memory = model.align(o_a, o_v).fused
    memory = Tensor(memory.data)  # drop the graph: decoding never backprops
    prefix = [SOS]
    out_ids: list[int] = []
    for _ in range(max_len):
        logits = model.decode(memory, np.array([prefix]))
        nxt = int(np.argmax(logits.data[0, -1]))
        if nxt == EOS:
            break
        out_ids.append(nxt)
        prefix.append(nxt)
    return np.array(out_ids, dtype=np.int64)


@dataclass
class EvalReport:
    cer: float
    per_utterance_cer: float
    per_snr: dict = field(default_factory=dict)
    monotonicity: dict = field(default_factory=dict)
    hypotheses: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "cer": self.cer,
            "per_utterance_cer": self.per_utterance_cer,
            "per_snr": {str(k): v for k, v in self.per_snr.items()},
            "monotonicity": self.monotonicity,
            "hypotheses": self.hypotheses,
        }


def utterance_alignment(model, prep: PreparedUtterance, variant: int = 0) -> np.ndarray:
    """Alignment matrix for one utterance (decoder input irrelevant: <sos> only)."""
    out = model.forward_batch(
        prep.feat_variants[variant][None], np.array([[SOS]]), prep.pixels[None]
    )
    return out.alignment.data[0]


def evaluate(model, corpus, snr_db=None, max_len: int = 64, with_alignment=True) -> EvalReport:
    """Greedy-decode every utterance; corpus CER plus per-utterance stats."""
    from .model import decode_ids

    levels = [snr_db] if snr_db is not None else None
    pairs, per_utt, mono, hyps = [], [], {}, {}
    for utt in corpus:
        prep = prepare_utterance(utt, levels)
        variant = 1 if snr_db is not None else 0
        pixels = prep.pixels if model.mode != "audio" else None
        hyp = decode_ids(greedy_decode(model, prep.feat_variants[variant], pixels, max_len))
        pairs.append((hyp, utt.transcript))
        per_utt.append(cer(hyp, utt.transcript))
        hyps[utt.uid] = hyp
        if with_alignment and model.mode != "audio":
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                mono[utt.uid] = monotonicity_score(utterance_alignment(model, prep, variant))
    report = EvalReport(
        cer=corpus_cer(pairs),
        per_utterance_cer=float(np.mean(per_utt)),
        monotonicity=mono,
        hypotheses=hyps,
    )
    if snr_db is not None:
        report.per_snr[snr_db] = report.cer
    return report


# -- corpus on disk -----------------------------------------------------------------

def save_corpus(corpus, directory) -> None:
    """One subdirectory per utterance: audio.wav, frames/*.ppm, transcript.txt,
    au.avt1, meta.json."""
    import json
    import os

    from .io import save_avt1, save_ppm, write_wav

    os.makedirs(directory, exist_ok=True)
    for utt in corpus:
        udir = os.path.join(directory, utt.uid)
        os.makedirs(os.path.join(udir, "frames"), exist_ok=True)
        write_wav(os.path.join(udir, "audio.wav"), utt.waveform.samples, utt.waveform.sample_rate)
        for j, frame in enumerate(utt.frames):
            save_ppm(os.path.join(udir, "frames", f"frame_{j:04d}.ppm"), frame)
        with open(os.path.join(udir, "transcript.txt"), "w") as f:
            f.write(utt.transcript + "\n")
        save_avt1(os.path.join(udir, "au.avt1"), utt.au_targets)
        meta = {"uid": utt.uid, "fps": utt.fps, "seed": utt.seed, "snr_db": utt.snr_db}
        with open(os.path.join(udir, "meta.json"), "w") as f:
            json.dump(meta, f, indent=1, sort_keys=True)


def load_utterance(udir) -> SyntheticUtterance:
    import json
    import os

    from .errors import InputError
    from .io import load_avt1, load_image, read_wav

    with open(os.path.join(udir, "meta.json")) as f:
        meta = json.load(f)
    samples, rate = read_wav(os.path.join(udir, "audio.wav"))
    with open(os.path.join(udir, "transcript.txt")) as f:
        transcript = f.read().strip()
    fdir = os.path.join(udir, "frames")
    names = sorted(os.listdir(fdir))
    if not names:
        raise InputError(f"{fdir}: no frames")
    frames = np.stack([load_image(os.path.join(fdir, n)) for n in names]).astype(np.uint8)
    au = load_avt1(os.path.join(udir, "au.avt1"))
    return SyntheticUtterance(
        uid=meta["uid"],
        waveform=Waveform(samples, rate),
        frames=frames,
        fps=meta["fps"],
        transcript=transcript,
        au_targets=au,
        seed=meta["seed"],
        snr_db=meta.get("snr_db"),
    )


def load_corpus(directory) -> list:
    import os

    from .errors import InputError

    subdirs = sorted(
        d for d in os.listdir(directory) if os.path.isdir(os.path.join(directory, d))
    )
    if not subdirs:
        raise InputError(f"{directory}: no utterance directories")
    return [load_utterance(os.path.join(directory, d)) for d in subdirs]
