"""Command-line entry point for the desk-scale experiments.

Subcommands: featurize, corpus, train, align, gradcheck, pgm2png.
Exit codes: 0 success, 2 input error, 3 config error, 4 mode error,
5 verification failure. AVALIGN_SEED supplies the default seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .audio import Waveform, featurize
from .errors import ConfigError, InputError, ModeError, VerificationError
from .io import load_avt1, read_wav, save_avt1, save_pgm16
from .model import (
    AVTransformer,
    ModelConfig,
    desk_config,
    load_checkpoint,
    save_checkpoint,
    tiny_config,
)
from .training import (
    SNR_LEVELS,
    evaluate,
    generate_corpus,
    load_corpus,
    load_utterance,
    prepare_utterance,
    save_corpus,
    train,
    utterance_alignment,
)

EXIT_INPUT = 2
EXIT_CONFIG = 3
EXIT_MODE = 4
EXIT_VERIFY = 5


def default_seed() -> int:
    return int(os.environ.get("AVALIGN_SEED", "0"))


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file of model config fields (flags win)")
    p.add_argument("--d-model", type=int)
    p.add_argument("--d-ff", type=int)
    p.add_argument("--encoder-layers", type=int, dest="n_encoder_layers")
    p.add_argument("--decoder-layers", type=int, dest="n_decoder_layers")
    p.add_argument("--align-blocks", type=int, dest="n_align_blocks")
    p.add_argument("--heads", type=int, dest="n_heads")
    p.add_argument("--dropout", type=float)
    p.add_argument("--cnn-base", type=int, dest="cnn_base_channels")
    p.add_argument("--lambda-au", type=float, dest="lambda_au")
    p.add_argument("--fusion", choices=["residual", "linear"])


def _build_config(args, base: ModelConfig) -> ModelConfig:
    fields = base.to_dict()
    if args.config:
        with open(args.config) as f:
            file_cfg = json.load(f)
        unknown = set(file_cfg) - set(fields)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        fields.update(file_cfg)
    for key in fields:
        val = getattr(args, key, None)
        if val is not None:
            fields[key] = val
    try:
        return ModelConfig.from_dict(fields)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def cmd_featurize(args) -> int:
    samples, rate = read_wav(args.wav)
    feats = featurize(Waveform(samples, rate))
    save_avt1(args.out, feats)
    print(feats.shape[0])
    return 0


def cmd_corpus(args) -> int:
    corpus = generate_corpus(args.n, args.seed, args.snr)
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} utterances to {args.out}")
    return 0


def cmd_train(args) -> int:
    if (args.synthetic is None) == (args.corpus is None):
        raise ConfigError("exactly one of --synthetic N or --corpus DIR is required")
    if args.synthetic is not None:
        corpus = generate_corpus(args.synthetic, args.seed, args.snr)
    else:
        corpus = load_corpus(args.corpus)
        if args.snr is not None:
            raise ConfigError("--snr applies to --synthetic corpora only")
    if args.mode == "av+au" and any(u.au_targets.size == 0 for u in corpus):
        raise ConfigError("mode av+au requires AU targets in the corpus")
    config = _build_config(args, desk_config())
    model = AVTransformer(config, args.mode, seed=args.seed)
    snr_levels = list(SNR_LEVELS) if args.augment_snr else None

    os.makedirs(args.out, exist_ok=True)

    def progress(step, loss, elapsed):
        print(f"step {step:6d}  loss {loss:.4f}  ({elapsed:.0f}s)", flush=True)

    history = train(
        model,
        corpus,
        args.steps,
        seed=args.seed,
        batch_size=args.batch_size,
        warmup=args.warmup,
        lr_scale=args.lr_scale,
        snr_levels=snr_levels,
        progress=progress,
    )
    ckpt_dir = os.path.join(args.out, "checkpoint")
    save_checkpoint(model, ckpt_dir)
    with open(os.path.join(args.out, "loss.csv"), "w") as f:
        f.write("step,loss\n")
        for step, loss in history:
            f.write(f"{step},{loss:.6f}\n")
    report = evaluate(model, corpus, max_len=args.max_decode_len)
    if args.eval_snrs:
        for level in SNR_LEVELS:
            report.per_snr[level] = evaluate(
                model, corpus, snr_db=level, max_len=args.max_decode_len, with_alignment=False
            ).cer
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump(report.to_dict(), f, indent=1, sort_keys=True)
    print(f"final corpus CER {report.cer:.4f}")
    return 0


def cmd_align(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if model.mode == "audio":
        raise ModeError("alignment export requires an audio-visual checkpoint")
    utt = load_utterance(args.utterance)
    prep = prepare_utterance(utt)
    weights = utterance_alignment(model, prep)
    save_pgm16(args.out, weights)
    avt_path = os.path.splitext(args.out)[0] + ".avt1"
    save_avt1(avt_path, weights)
    print(f"alignment {weights.shape[0]}x{weights.shape[1]} -> {args.out}, {avt_path}")
    return 0


def cmd_gradcheck(args) -> int:
    from .verification import REL_TOL, run_gradcheck

    config = _build_config(args, tiny_config())
    reports, failures = run_gradcheck(
        modes=("audio", "av+au"), config=config, seed=args.seed, inject_fault=args.inject_fault
    )
    for mode, rep in reports.items():
        for name in sorted(rep):
            status = "ok" if rep[name] < REL_TOL else "FAIL"
            print(f"{mode:7s} {name:40s} {rep[name]:.3e} {status}")
    if failures:
        print(f"FAILED groups (tolerance {REL_TOL}): {', '.join(failures)}")
        raise VerificationError(f"{len(failures)} parameter groups exceed {REL_TOL}")
    print("all parameter groups pass")
    return 0


def cmd_pgm2png(args) -> int:
    try:
        from PIL import Image
    except ImportError:
        print("Pillow not installed; skipping PNG conversion")
        return 0
    from .io import load_pgm16

    pix = load_pgm16(args.pgm)
    Image.fromarray((pix // 257).astype(np.uint8), mode="L").save(args.png)
    print(f"wrote {args.png}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avalign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="WAV -> stacked log-mel AVT1 features")
    p.add_argument("wav")
    p.add_argument("out")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("corpus", help="generate a synthetic corpus on disk")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--snr", type=float, default=None)
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("train", help="train a model and write checkpoint + reports")
    p.add_argument("--mode", choices=["audio", "av", "av+au"], required=True)
    p.add_argument("--synthetic", type=int, default=None, metavar="N")
    p.add_argument("--corpus", default=None, metavar="DIR")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--out", required=True)
    p.add_argument("--snr", type=float, default=None, help="fix corpus noise at this SNR")
    p.add_argument("--augment-snr", action="store_true", help="mix in the 10/0/-5 dB noise stages during training")
    p.add_argument("--eval-snrs", action="store_true", help="also report CER at 10/0/-5 dB")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--warmup", type=int, default=400)
    p.add_argument("--lr-scale", type=float, default=1.0, help="multiplier on the inverse-sqrt schedule")
    p.add_argument("--max-decode-len", type=int, default=32)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("align", help="export an utterance's alignment heatmap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--utterance", required=True)
    p.add_argument("--out", required=True, help="output PGM path (AVT1 written alongside)")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("gradcheck", help="finite-difference check of all parameter groups")
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    _add_config_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pgm2png", help="convert a PGM heatmap to PNG (needs Pillow)")
    p.add_argument("pgm")
    p.add_argument("png")
    p.set_defaults(func=cmd_pgm2png)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ModeError as e:
        print(f"mode error: {e}", file=sys.stderr)
        return EXIT_MODE
    except VerificationError as e:
        print(f"verification failure: {e}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
