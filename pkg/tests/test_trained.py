"""Training-run measurements on the shared toy stack."""

import math

import numpy as np

from momask_lab.codec import mpjpe, reconstruct, tokenize
from momask_lab.corpus import synth_motion
from momask_lab.engine import cfg_logits
from momask_lab.mformer import masked_accuracy, mformer_forward
from momask_lab.ndmath import Rng
from momask_lab.rformer import layer_accuracy
from momask_lab.toolkit.evaluate import eval_reconstruction


def _test_stacks(s):
    motions, labels = s.corpus.subset("test")
    return [tokenize(m, s.codec).rows for m in motions], labels


def test_masked_accuracy_beats_chance(toy_stack):
    stacks, labels = _test_stacks(toy_stack)
    acc = masked_accuracy([r[0] for r in stacks], labels, toy_stack.mformer, Rng(0))
    assert acc > 5.0 / toy_stack.mformer.codebook_size
    assert toy_stack.mformer_log.loss[-1] < 0.5 * math.log(toy_stack.mformer.codebook_size)


def test_conditional_and_null_logits_differ(toy_stack):
    stacks, labels = _test_stacks(toy_stack)
    row = np.full((1, len(stacks[0][0])), toy_stack.mformer.mask_id)
    cond = mformer_forward(row, [int(labels[0])], toy_stack.mformer).data
    null = mformer_forward(row, [None], toy_stack.mformer).data
    assert np.abs(cond - null).max() > 1e-3


def test_residual_loss_drops_and_first_layer_is_easiest(toy_stack):
    log = toy_stack.rformer_log
    assert log.loss[-1] <= 0.7 * log.loss[0]
    stacks, labels = _test_stacks(toy_stack)
    depth = toy_stack.rformer.depth
    assert layer_accuracy(stacks, labels, toy_stack.rformer, 1) > layer_accuracy(stacks, labels, toy_stack.rformer, depth)


def test_tying_holds_after_training(toy_stack):
    for j in range(1, toy_stack.rformer.depth + 1):
        assert toy_stack.rformer.head(j) is toy_stack.rformer.weights[f"tok_emb.{j}"]


def test_full_depth_beats_base_layer(toy_stack):
    r = eval_reconstruction(toy_stack.codec, toy_stack.corpus.subset("test")[0], [1, 6])
    assert r.mpjpe[1] < r.mpjpe[0]


def test_constant_pose_probe(toy_stack):
    motions = toy_stack.corpus.subset("test")[0]
    model = float(np.mean([mpjpe(reconstruct(m, toy_stack.codec), m) for m in motions]))
    still = np.repeat(synth_motion("wave", 1, 0.0, Rng(0), jitter=False), 32, axis=0)
    assert mpjpe(reconstruct(still, toy_stack.codec), still) < 10 * model


def test_guidance_sharpens_predictions(toy_stack):
    # accuracy saturates on the toy corpus, so look at predictive entropy instead
    p = toy_stack.mformer
    rows = np.full((8, 12), p.mask_id)
    cond = mformer_forward(rows, list(range(8)), p).data
    null = mformer_forward(rows, [None] * 8, p).data

    def entropy(logits):
        lp = logits - logits.max(-1, keepdims=True)
        lp = lp - np.log(np.exp(lp).sum(-1, keepdims=True))
        return float(-(np.exp(lp) * lp).sum(-1).mean())

    assert entropy(cfg_logits(cond, null, 4.0)) < entropy(cond)
