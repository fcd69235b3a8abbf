"""Whole-model gradient verification against central finite differences.

Runs the full loss (cross-entropy, plus the AU term when enabled) on a
small fixed synthetic batch in float64 and compares every parameter
group's analytic gradient with (f(p+eps) - f(p-eps)) / 2eps, coordinate
by coordinate.
"""

from __future__ import annotations

import numpy as np

from .model import EOS, SOS, AVTransformer, ModelConfig, combined_loss, tiny_config
from .tensor import Rng

REL_TOL = 1e-4
# scaled relative error: |a - fd| / max(|a|, |fd|, floor); the floor keeps
# FD roundoff noise on genuinely-zero gradients from registering as error
DENOM_FLOOR = 1e-4


def make_check_batch(model: AVTransformer, seed: int = 0):
    """Two short utterances of random features/pixels/targets, no padding tricks."""
    rng = Rng(seed).split("gradcheck-batch")
    b, n, m, t = 2, 5, 2, 4
    v = model.config.vocab_size
    feats = rng.split("feats").uniform(-1.0, 1.0, (b, n, 240))
    dec_in = np.concatenate(
        [np.full((b, 1), SOS), rng.split("in").integers(EOS + 1, v, (b, t - 1))], axis=1
    )
    dec_tgt = np.concatenate([dec_in[:, 1:], np.full((b, 1), EOS)], axis=1)
    batch = {"feats": feats, "dec_in": dec_in, "dec_tgt": dec_tgt, "pixels": None, "au": None}
    if model.mode != "audio":
        batch["pixels"] = rng.split("pix").uniform(0.0, 255.0, (b, m, 36, 36, 3))
    if model.mode == "av+au":
        batch["au"] = rng.split("au").uniform(0.05, 0.95, (b, m, model.config.n_au))
    return batch


def _loss(model: AVTransformer, batch):
    out = model.forward_batch(batch["feats"], batch["dec_in"], batch["pixels"])
    return combined_loss(
        out.logits, batch["dec_tgt"], None, out.au_pred, batch["au"],
        lambda_au=model.config.lambda_au,
    )


def model_gradient_check(
    model: AVTransformer, eps: float = 1e-5, seed: int = 0, inject_fault: bool = False
) -> dict[str, float]:
    """Max scaled relative gradient error per parameter group.

    ``inject_fault`` corrupts one analytic gradient on purpose so callers
    can verify that a bad gradient is actually reported.
    """
    if model.dtype != np.float64:
        raise ValueError("gradient checks require a float64 model")
    batch = make_check_batch(model, seed)
    model.zero_grad()
    loss = _loss(model, batch)
    loss.backward()
    params = model.parameters()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }
    if inject_fault:
        first = sorted(analytic)[0]
        analytic[first] = analytic[first] + 1.0
    report = {}
    for name, t in params.items():
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = _loss(model, batch).item()
            flat[i] = orig - eps
            lo = _loss(model, batch).item()
            flat[i] = orig
            fd[i] = (hi - lo) / (2.0 * eps)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), DENOM_FLOOR)
        report[name] = float(np.max(np.abs(a - fd) / denom))
    return report


def run_gradcheck(modes=("audio", "av+au"), config: ModelConfig | None = None, seed: int = 0, inject_fault: bool = False):
    """Check every parameter group of the requested model modes.

    Returns (per-mode report dict, list of failing group names).
    """
    reports, failures = {}, []
    for mode in modes:
        cfg = config or tiny_config()
        model = AVTransformer(cfg, mode, seed=seed, dtype=np.float64)
        rep = model_gradient_check(model, seed=seed, inject_fault=inject_fault)
        reports[mode] = rep
        failures += [f"{mode}:{name}" for name, err in rep.items() if err >= REL_TOL]
    return reports, failures
