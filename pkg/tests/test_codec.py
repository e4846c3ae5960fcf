import numpy as np
import pytest

from gradcheck import REL_TOL, codec_loss_errors, relu_margin, to_float64
from momask_lab.codec import (
    codec_loss,
    LengthError,
    TokenStack,
    decoder_forward,
    detokenize,
    encode,
    encoder_forward,
    init_codec,
    mpjpe,
    pad_to_multiple,
    reconstruct,
    tokenize,
    train_rvqvae,
)
from momask_lab.corpus import synth_motion
from momask_lab.ndmath import Rng, Tensor
from momask_lab.toolkit.config import load_config


def _codec(seed=0, depth=4):
    return init_codec(48, 8, depth, 6, Rng(seed), width=8, res_blocks=1)


@pytest.mark.parametrize("frames", [4, 8, 32, 64])
def test_encoder_downsamples_by_four(frames):
    z = encoder_forward(Tensor(np.zeros((2, frames, 48), np.float32)), _codec())
    assert z.shape == (2, frames // 4, 8)
    assert decoder_forward(z, _codec()).shape == (2, frames, 48)


def test_length_errors():
    with pytest.raises(LengthError):
        encode(np.zeros((6, 48)), _codec())
    with pytest.raises(LengthError):
        encode(np.zeros((2, 48)), _codec())


def test_pad_to_multiple_repeats_last_frame():
    m = np.arange(5 * 48, dtype=np.float32).reshape(5, 48)
    p, n = pad_to_multiple(m)
    assert n == 5 and p.shape == (8, 48)
    np.testing.assert_array_equal(p[5:], np.repeat(m[-1:], 3, 0))


def test_tokenize_shape_and_range():
    p = _codec()
    toks = tokenize(synth_motion("walk", 37, 0.0, Rng(1)), p)
    assert isinstance(toks, TokenStack)
    assert toks.rows.shape == (4, 10)
    assert toks.rows.min() >= 0 and toks.rows.max() < 6


def test_reconstruct_matches_detokenize_and_keeps_length():
    p = _codec()
    m = synth_motion("jump", 22, 0.0, Rng(2))
    rec = reconstruct(m, p, 2)
    assert rec.shape == m.shape
    padded, _ = pad_to_multiple(m)
    np.testing.assert_array_equal(rec, detokenize(tokenize(padded, p), p, 2)[:22])


@pytest.mark.parametrize("active", [1, 3])
def test_codec_loss_gradient_under_straight_through(active):
    batch = np.stack([synth_motion("run", 8, 0.01, Rng(i)) for i in range(2)])
    # shifted away from the untrained decoder's output so no L1 kink sits inside the FD stencil
    batch = (batch - batch.mean()) / batch.std() + 5.0
    # and an init whose ReLU inputs all clear zero by more than the stencil moves them
    for seed in range(20):
        p = _codec(seed, depth=3)
        to_float64(p.weights)
        if relu_margin(lambda: codec_loss(batch, p, active)) > 2e-3:
            break
    errs = codec_loss_errors(p, batch, active)
    bad = {k: e for k, e in errs.items() if e >= REL_TOL}
    assert not bad


def test_mpjpe_of_known_offset():
    a = np.zeros((3, 48))
    b = np.zeros((3, 48))
    b[:, 0::3] = 3.0
    b[:, 1::3] = 4.0
    assert mpjpe(a, b) == pytest.approx(5.0)


def test_short_training_is_deterministic_and_reduces_loss():
    cfg = load_config(preset="toy", overrides={"codec.steps": 60, "codec.width": 8, "rvq.code_dim": 8,
                                               "rvq.codebook_size": 8, "codec.batch_size": 8})
    motions = [synth_motion(c, 32, 0.002, Rng(i)) for i, c in enumerate(["walk", "wave", "kick", "run"] * 4)]
    p1, log1 = train_rvqvae(motions, cfg, Rng(0))
    p2, log2 = train_rvqvae(motions, cfg, Rng(0))
    assert log1.loss == log2.loss
    for k in p1.weights:
        np.testing.assert_array_equal(p1.weights[k].data, p2.weights[k].data)
    assert log1.loss[-1] < log1.loss[0]
    assert all(w.data.dtype == np.float32 for w in p1.weights.values())
