"""Full recognizer: vocabulary, config validation, forward contracts, loss
oracle, checkpointing."""

import numpy as np
import pytest

from avalign.errors import ConfigError, ContractError, InputError, ModeError
from avalign.model import (
    EOS,
    PAD,
    SOS,
    VOCAB,
    VOCAB_SIZE,
    AVTransformer,
    ModelConfig,
    combined_loss,
    decode_ids,
    desk_config,
    encode_text,
    forward_audio,
    forward_av,
    load_checkpoint,
    save_checkpoint,
    tiny_config,
)
from avalign.tensor import Rng, Tensor


def small_cfg(**kw):
    return tiny_config(vocab_size=VOCAB_SIZE, **kw)


def rand_inputs(rng, b=2, n=6, m=3, t=4, vocab=VOCAB_SIZE):
    feats = rng.split("f").uniform(-1, 1, (b, n, 240))
    pixels = rng.split("p").uniform(0, 255, (b, m, 36, 36, 3))
    ids = np.concatenate(
        [np.full((b, 1), SOS), rng.split("i").integers(3, vocab, (b, t - 1))], axis=1
    )
    return feats, pixels, ids


# -- vocabulary -----------------------------------------------------------------

def test_vocab_is_40_tokens():
    assert VOCAB_SIZE == 40
    assert VOCAB[:3] == ["<pad>", "<sos>", "<eos>"]
    assert len(set(VOCAB)) == 40


def test_encode_decode_round_trip():
    text = "hello world 42"
    assert decode_ids(encode_text(text)) == text


def test_encode_rejects_out_of_vocab():
    with pytest.raises(InputError):
        encode_text("Hello!")


def test_decode_strips_specials():
    ids = np.array([SOS, 3, 4, EOS, PAD, PAD])
    assert decode_ids(ids) == "ab"


# -- config ---------------------------------------------------------------------

def test_config_round_trip():
    cfg = desk_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=3)


def test_config_rejects_bad_dropout():
    with pytest.raises(ConfigError):
        ModelConfig(dropout=1.0)


def test_model_rejects_unknown_mode():
    with pytest.raises(ConfigError):
        AVTransformer(small_cfg(), "video")


# -- forward contracts ------------------------------------------------------------

def test_forward_shapes_all_modes():
    rng = Rng(0)
    feats, pixels, ids = rand_inputs(rng)
    for mode in ("audio", "av", "av+au"):
        model = AVTransformer(small_cfg(), mode, seed=1)
        out = model.forward_batch(feats, ids, pixels if mode != "audio" else None)
        assert out.logits.shape == (2, 4, VOCAB_SIZE)
        if mode == "audio":
            assert out.alignment is None and out.au_pred is None
        else:
            assert out.alignment.shape == (2, 6, 3)
        if mode == "av+au":
            assert out.au_pred.shape == (2, 3, small_cfg().n_au)
            assert (out.au_pred.data > 0).all() and (out.au_pred.data < 1).all()


def test_av_mode_requires_video():
    model = AVTransformer(small_cfg(), "av", seed=1)
    feats, _, ids = rand_inputs(Rng(1))
    with pytest.raises(InputError):
        model.forward_batch(feats, ids, None)


def test_single_utterance_wrappers():
    rng = Rng(2)
    feats = rng.uniform(-1, 1, (6, 240))
    frames = rng.uniform(0, 255, (3, 60, 60, 3)).astype(np.uint8)
    av = AVTransformer(small_cfg(), "av", seed=1)
    out = forward_av(av, feats, frames, np.array([SOS, 5, 6]))
    assert out.logits.shape == (1, 3, VOCAB_SIZE)
    au = AVTransformer(small_cfg(), "audio", seed=1)
    out = forward_audio(au, feats, np.array([SOS, 5]))
    assert out.logits.shape == (1, 2, VOCAB_SIZE)
    with pytest.raises(ModeError):
        forward_av(au, feats, frames, np.array([SOS]))
    with pytest.raises(ModeError):
        forward_audio(av, feats, np.array([SOS]))
    with pytest.raises(ContractError):
        forward_audio(au, feats, np.array([5, 6]))


def test_sequence_longer_than_max_len_rejected():
    model = AVTransformer(small_cfg(max_len=8), "audio", seed=1)
    feats = Rng(3).uniform(-1, 1, (1, 20, 240))
    with pytest.raises(ContractError):
        model.forward_batch(feats, np.array([[SOS]]))


def test_forward_deterministic_in_eval():
    model = AVTransformer(small_cfg(), "av+au", seed=3)
    feats, pixels, ids = rand_inputs(Rng(4))
    a = model.forward_batch(feats, ids, pixels).logits.data
    b = model.forward_batch(feats, ids, pixels).logits.data
    assert np.array_equal(a, b)


def test_same_seed_same_init():
    p1 = AVTransformer(small_cfg(), "av", seed=9).parameters()
    p2 = AVTransformer(small_cfg(), "av", seed=9).parameters()
    assert all(np.array_equal(p1[k].data, p2[k].data) for k in p1)
    p3 = AVTransformer(small_cfg(), "av", seed=10).parameters()
    assert any(not np.array_equal(p1[k].data, p3[k].data) for k in p1)


# -- loss -------------------------------------------------------------------------

def test_cross_entropy_matches_hand_oracle():
    logits = Tensor(np.array([[[2.0, 1.0, 0.5], [0.1, 0.2, 0.3]]]))
    targets = np.array([[0, 2]])
    loss = combined_loss(logits, targets).item()

    def ce_row(row, t):
        z = row - row.max()
        return -(z[t] - np.log(np.exp(z).sum()))

    # note: target id 0 is <pad> in the real vocabulary; here we use raw rows
    ref = ce_row(np.array([0.1, 0.2, 0.3]), 2)
    assert np.isclose(loss, ref)


def test_loss_ignores_pad_targets():
    rng = Rng(5)
    logits = Tensor(rng.uniform(-1, 1, (1, 4, 6)))
    tgt_a = np.array([[3, 4, PAD, PAD]])
    tgt_b = np.array([[3, 4, PAD, PAD]])
    la = combined_loss(logits, tgt_a).item()
    # changing logits at padded positions must not change the loss
    bumped = logits.data.copy()
    bumped[0, 2:] += 5.0
    lb = combined_loss(Tensor(bumped), tgt_b).item()
    assert np.isclose(la, lb)


def test_loss_all_pad_rejected():
    logits = Tensor(np.zeros((1, 3, 6)))
    with pytest.raises(ContractError):
        combined_loss(logits, np.full((1, 3), PAD))


def test_combined_loss_adds_weighted_mse():
    rng = Rng(6)
    logits = Tensor(rng.uniform(-1, 1, (1, 3, 6)))
    tgt = np.array([[3, 4, 5]])
    au_pred = Tensor(rng.uniform(0.1, 0.9, (1, 4, 2)))
    au_tgt = rng.uniform(0.1, 0.9, (1, 4, 2))
    ce = combined_loss(logits, tgt).item()
    mse = float(((au_pred.data - au_tgt) ** 2).mean())
    for lam in (0.5, 1.0, 2.0):
        total = combined_loss(logits, tgt, None, au_pred, au_tgt, None, lam).item()
        assert np.isclose(total, ce + lam * mse)


def test_lambda_zero_is_pure_cross_entropy():
    rng = Rng(7)
    logits = Tensor(rng.uniform(-1, 1, (1, 3, 6)))
    tgt = np.array([[3, 4, 5]])
    au_pred = Tensor(rng.uniform(0.1, 0.9, (1, 2, 2)))
    au_tgt = rng.uniform(0.1, 0.9, (1, 2, 2))
    assert combined_loss(logits, tgt).item() == combined_loss(
        logits, tgt, None, au_pred, au_tgt, None, 0.0
    ).item()


# -- checkpointing ------------------------------------------------------------------

def test_checkpoint_round_trip_bit_identical_logits(tmp_path):
    model = AVTransformer(small_cfg(), "av+au", seed=5)
    feats, pixels, ids = rand_inputs(Rng(8))
    before = model.forward_batch(feats, ids, pixels).logits.data
    save_checkpoint(model, str(tmp_path / "ckpt"))
    loaded = load_checkpoint(str(tmp_path / "ckpt"))
    assert loaded.mode == "av+au"
    after = loaded.forward_batch(feats, ids, pixels).logits.data
    assert np.array_equal(before, after)


def test_checkpoint_missing_manifest(tmp_path):
    with pytest.raises(InputError):
        load_checkpoint(str(tmp_path))


def test_param_count_full_config_footprint():
    # informational soft check: fp32 footprint of the full-width AV model
    model = AVTransformer(ModelConfig(), "av", seed=0)
    mb = model.num_parameters() * 4 / 2**20
    print(f"AV model fp32 parameter footprint: {mb:.1f} MB")
    assert mb > 1.0  # sanity only; the acceptance suite logs the real check
