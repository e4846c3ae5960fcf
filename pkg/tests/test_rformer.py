import math

import numpy as np
import pytest

from gradcheck import REL_TOL, directional, to_float64
from momask_lab.mformer import TokenError
from momask_lab.ndmath import Rng
from momask_lab.rformer import init_rformer, rformer_forward, rformer_loss, train_rformer
from momask_lab.toolkit.config import load_config


def _params(K=6, V=3, seed=0):
    return init_rformer(K, V, 4, Rng(seed), hidden=16, layers=1, heads=2, max_len=16)


def _stacks(K=6, V=3, count=6, seed=0):
    rng = Rng(seed)
    return [rng.integers(0, K, size=(V + 1, int(rng.integers(3, 9)))) for _ in range(count)]


def test_heads_are_tied_to_embeddings():
    p = _params()
    for j in range(1, 4):
        assert p.head(j) is p.weights[f"tok_emb.{j}"]
    p.weights["tok_emb.2"].data[0, 0] = 7.0
    assert p.head(2).data[0, 0] == 7.0


@pytest.mark.parametrize("j", [1, 2, 3])
def test_logit_shape_per_layer(j):
    p = _params()
    out = rformer_forward(np.zeros((2, j, 5), int), j, [0, None], p)
    assert out.shape == (2, 5, 6)


def test_layer_and_row_errors():
    p = _params()
    with pytest.raises(ValueError):
        rformer_forward(np.zeros((0, 4), int), 0, [0], p)
    with pytest.raises(ValueError):
        rformer_forward(np.zeros((4, 4), int), 4, [0], p)
    with pytest.raises(ValueError):
        rformer_forward(np.zeros((1, 4), int), 2, [0], p)
    with pytest.raises(TokenError):
        rformer_forward(np.full((1, 4), 6), 1, [0], p)


def test_layer_sum_is_order_free():
    p = _params(seed=1)
    below = np.array([[1, 2, 3, 4], [5, 0, 1, 2], [3, 3, 0, 1]])
    a = rformer_forward(below, 3, [1], p).data
    # swapping the contents of rows 1 and 2 together with their tables leaves the sum unchanged
    w = p.weights
    w["tok_emb.1"].data, w["tok_emb.2"].data = w["tok_emb.2"].data.copy(), w["tok_emb.1"].data.copy()
    b = rformer_forward(below[[0, 2, 1]], 3, [1], p).data
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_forward_is_deterministic():
    p = _params(seed=2)
    below = np.array([[1, 2, 3]])
    np.testing.assert_array_equal(rformer_forward(below, 1, [2], p).data, rformer_forward(below, 1, [2], p).data)


def test_untrained_loss_is_log_k():
    p = init_rformer(128, 3, 8, Rng(0), hidden=32, layers=1, heads=2, max_len=32)
    loss, _, _ = rformer_loss(_stacks(128, 3, 16), list(range(8)) * 2, p, Rng(1))
    assert loss.item() == pytest.approx(math.log(128), abs=0.05)


def test_stack_depth_is_checked():
    with pytest.raises(ValueError):
        rformer_loss(_stacks(V=2), [0] * 6, _params(), Rng(0))


@pytest.mark.parametrize("j", [1, 3])
def test_loss_gradient_on_toy_dims(j):
    p = init_rformer(4, 3, 2, Rng(3), hidden=8, layers=1, heads=2, max_len=8)
    to_float64(p.weights)
    stacks = _stacks(4, 3, 3, seed=4)

    def loss():
        return rformer_loss(stacks, [0, 1, 0], p, Rng(5), cond_drop=0.5, j=j)[0]

    errs = directional(loss, p.weights)
    assert max(errs.values()) < REL_TOL, errs


def test_tying_survives_optimizer_steps():
    tcfg = load_config(preset="toy", overrides={"rformer.steps": 3, "rformer.hidden": 16, "rformer.layers": 1,
                                                "rformer.heads": 2, "rformer.batch_size": 4,
                                                "rformer.max_len": 16}).rformer
    p, _ = train_rformer(_stacks(count=8), [i % 4 for i in range(8)], 4, 6, 3, tcfg, Rng(0))
    before = init_rformer(6, 3, 4, Rng(0).stream("init"), tcfg.hidden, tcfg.layers, tcfg.heads, tcfg.ff_mult,
                          tcfg.max_len).weights["tok_emb.1"].data
    for j in range(1, 4):
        assert p.head(j) is p.weights[f"tok_emb.{j}"]
    assert not np.array_equal(p.weights["tok_emb.1"].data, before)
