import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from momask_lab.codec import LengthError, init_codec
from momask_lab.corpus import synth_motion
from momask_lab.engine import (
    Guidance,
    InpaintSpec,
    Models,
    cfg_logits,
    decode_base,
    fill_residuals,
    generate,
    generate_tokens,
    inpaint,
)
from momask_lab.mformer import init_mformer
from momask_lab.ndmath import Rng
from momask_lab.rformer import init_rformer
from momask_lab.schedule import remask_counts

K, V = 6, 3


@pytest.fixture(scope="module")
def models():
    codec = init_codec(48, 8, V + 1, K, Rng(0), width=8, res_blocks=1)
    m = init_mformer(K, 4, Rng(1), hidden=16, layers=1, heads=2, max_len=32)
    r = init_rformer(K, V, 4, Rng(2), hidden=16, layers=1, heads=2, max_len=32)
    return Models(codec, m, r)


def test_cfg_identities():
    rng = np.random.default_rng(0)
    wc, wu = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    np.testing.assert_array_equal(cfg_logits(wc, wu, 0.0), wc)
    for s in (0.5, 4.0, 11.0):
        np.testing.assert_array_equal(cfg_logits(wc, wc, s), wc)
    assert cfg_logits(np.array([2.0]), np.array([1.0]), 4.0)[0] == 6.0
    with pytest.raises(ValueError):
        cfg_logits(wc, wu[:, :4], 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 20), st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 1))
def test_cfg_is_affine_in_the_conditional(s, a, b, t):
    # (1 + s) x - s u is affine in x: mixing inputs mixes outputs
    u = np.array([0.3])
    mix = cfg_logits(np.array([t * a + (1 - t) * b]), u, s)
    sep = t * cfg_logits(np.array([a]), u, s) + (1 - t) * cfg_logits(np.array([b]), u, s)
    np.testing.assert_allclose(mix, sep, atol=1e-9 * (1 + s) * 10)


def test_guidance_rejects_negative_scales():
    with pytest.raises(ValueError):
        Guidance(s_masked=-1)


def test_trajectory_for_ten_tokens_ten_iterations(models):
    _, trace = decode_base(10, 1, models.mformer, 10, Guidance(), Rng(0))
    # ceil(cos(pi l / 20) * 10) for l = 1..10
    assert trace.masked_counts() == [10, 10, 9, 9, 8, 6, 5, 4, 2, 0]
    assert trace.masked_counts() == remask_counts(10, 10)


@pytest.mark.parametrize("n,iters", [(1, 1), (7, 3), (16, 10), (32, 20)])
def test_decode_fills_every_position(models, n, iters):
    row, trace = decode_base(n, None, models.mformer, iters, Guidance(), Rng(n))
    assert row.shape == (n,) and row.min() >= 0 and row.max() < K
    assert len(trace.steps) == iters and trace.masked_counts()[-1] == 0


def test_single_iteration_commits_everything_at_once(models):
    _, trace = decode_base(12, 0, models.mformer, 1, Guidance(), Rng(3))
    assert trace.masked_counts() == [0]
    assert trace.steps[0].locked == 12


def test_committed_tokens_never_change_after_final_commit(models):
    _, trace = decode_base(16, 2, models.mformer, 10, Guidance(), Rng(4))
    mask_id = models.mformer.mask_id
    for a, b in zip(trace.steps, trace.steps[1:]):
        kept = a.tokens != mask_id
        np.testing.assert_array_equal(b.tokens[kept], a.tokens[kept])


def test_locked_positions_survive_and_schedule_runs_on_free_ones(models):
    locked = np.zeros(10, bool)
    locked[[0, 4, 9]] = True
    ref = np.arange(10) % K
    row, trace = decode_base(10, 1, models.mformer, 5, Guidance(), Rng(5), locked_row=ref, locked=locked)
    np.testing.assert_array_equal(row[locked], ref[locked])
    assert trace.masked_counts() == remask_counts(7, 5)
    for step in trace.steps:
        np.testing.assert_array_equal(step.tokens[locked], ref[locked])


def test_length_limit(models):
    with pytest.raises(LengthError):
        decode_base(33, 0, models.mformer, 2, Guidance(), Rng(0))


def test_same_seed_same_output(models):
    a, ta = generate_tokens(1, 8, models, 5, Guidance(), Rng(6))
    b, tb = generate_tokens(1, 8, models, 5, Guidance(), Rng(6))
    np.testing.assert_array_equal(a.rows, b.rows)
    assert ta.to_text() == tb.to_text()


def test_greedy_residuals_ignore_rng(models):
    base = np.array([0, 1, 2, 3, 4])
    a = fill_residuals(base, 1, models.rformer, Guidance(), "greedy", Rng(0))
    b = fill_residuals(base, 1, models.rformer, Guidance(), "greedy", Rng(99))
    np.testing.assert_array_equal(a.rows, b.rows)
    assert a.rows.shape == (V + 1, 5)
    np.testing.assert_array_equal(a.rows[0], base)


def test_trace_text_format(models):
    _, trace = decode_base(4, 0, models.mformer, 2, Guidance(), Rng(0))
    first = trace.to_text().splitlines()[0].split()
    assert [f.split("=")[0] for f in first] == ["iter", "masked", "locked", "mean_conf"]


@pytest.mark.parametrize("frames", [4, 13, 64])
def test_generate_returns_requested_frames(models, frames):
    motion, _ = generate(0, frames, models, 3, Guidance(), Rng(7))
    assert motion.shape == (frames, 48)
    assert np.isfinite(motion).all()


def test_inpaint_without_ranges_returns_reconstruction(models):
    ref = synth_motion("walk", 32, 0.0, Rng(8))
    res = inpaint(InpaintSpec(ref, []), 0, models, 5, Guidance(), Rng(9))
    np.testing.assert_array_equal(res.motion, res.reference_recon)
    np.testing.assert_array_equal(res.tokens.rows, res.reference_tokens.rows)


def test_inpaint_range_validation(models):
    ref = synth_motion("walk", 32, 0.0, Rng(8))
    for ranges in ([(0, 9)], [(2, 5), (4, 6)], [(3, 3)]):
        with pytest.raises(ValueError):
            inpaint(InpaintSpec(ref, ranges), 0, models, 5, Guidance(), Rng(9))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 7), st.integers(1, 8), st.integers(0, 1000))
def test_inpaint_keeps_everything_outside_the_edit(models, start, width, seed):
    end = min(start + width, 8)
    ref = synth_motion("kick", 30, 0.002, Rng(seed))
    res = inpaint(InpaintSpec(ref, [(start, end)]), 3, models, 4, Guidance(), Rng(seed))
    keep = np.ones(8, bool)
    keep[start:end] = False
    np.testing.assert_array_equal(res.tokens.rows[:, keep], res.reference_tokens.rows[:, keep])
    frames = np.repeat(keep, 4)[:30]
    np.testing.assert_array_equal(res.motion[frames], res.reference_recon[frames])
    assert res.motion.shape == ref.shape
