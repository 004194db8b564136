import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from clfusion.camera import default_rig
from clfusion.masks import (
    EPS,
    GaussianMaskParams,
    MaskParamError,
    SharedMask,
    attention_bias,
    biased_attention,
    merge_masks,
    shared_mask_for_objects,
    single_target_mask,
    softmax_rows,
)
from clfusion.scene import ObjectList, SceneGenConfig, sample_random_scene


def direct(i, j, cx, cy, sigma, r):
    return math.exp(-((i - cx) ** 2 + (j - cy) ** 2) / (sigma * r * r))


def test_hand_values():
    m = single_target_mask(GaussianMaskParams((10, 10), 4, 1.0), (21, 21))
    assert m[10, 10] == 1.0
    assert math.isclose(m[10, 14], math.exp(-1), rel_tol=1e-15)
    m = single_target_mask(GaussianMaskParams((10, 10), 4, 2.0), (21, 21))
    assert math.isclose(m[10, 12], 0.882497, abs_tol=1e-6)


@pytest.mark.parametrize("kw", [dict(radius=0.0), dict(radius=-1.0), dict(bandwidth=0.0)])
def test_invalid_params(kw):
    with pytest.raises(MaskParamError):
        GaussianMaskParams((0, 0), **{"radius": 1.0, **kw})


def test_matches_direct_evaluation_random(rng):
    worst = 0.0
    for _ in range(200):
        cx, cy = rng.uniform(-5, 45), rng.uniform(-5, 25)
        r, s = rng.uniform(0.3, 10), rng.uniform(0.2, 5)
        m = single_target_mask(GaussianMaskParams((cx, cy), r, s), (20, 40))
        for _ in range(50):
            i, j = int(rng.integers(40)), int(rng.integers(20))
            worst = max(worst, abs(m[j, i] - direct(i, j, cx, cy, s, r)))
    assert worst <= 1e-12


@given(st.floats(0, 39), st.floats(0, 19), st.floats(0.2, 8), st.floats(0.2, 4))
def test_nearest_cell_lower_bound(cx, cy, r, s):
    m = single_target_mask(GaussianMaskParams((cx, cy), r, s), (20, 40))
    assert m[round(cy), round(cx)] >= math.exp(-0.5 / (s * r * r)) - 1e-15
    assert m.max() <= 1.0 and m.min() >= 0.0


def test_merge_rules():
    a = single_target_mask(GaussianMaskParams((3, 3), 1.0), (10, 30))
    b = single_target_mask(GaussianMaskParams((25, 6), 1.0), (10, 30))
    one = merge_masks([[a]], (10, 30))
    assert np.array_equal(one.grids[0], np.maximum(a, EPS))
    two = merge_masks([[a, b]], (10, 30))
    assert two.grids[0, 3, 3] == 1.0 and two.grids[0, 6, 25] == 1.0
    same = merge_masks([[a, a]], (10, 30))
    assert np.array_equal(same.grids, one.grids)
    empty = merge_masks([[], []], (10, 30))
    assert np.all(empty.grids == EPS)
    with pytest.raises(ValueError):
        merge_masks([[np.ones((3, 3))]], (10, 30))


def test_bias_values():
    assert not attention_bias(SharedMask.uniform(2, (3, 4)), 8).any()
    b = attention_bias(SharedMask.uniform(1, (2, 2), EPS), 64)
    assert np.allclose(b, -1.15129, atol=1e-5)
    assert attention_bias(SharedMask.uniform(6, (5, 7)), 4).shape == (6 * 5 * 7,)
    with pytest.raises(ValueError):
        attention_bias(SharedMask.uniform(1, (1, 1)), 0)


def test_scene_mask_range():
    rig = default_rig(grid=(16, 40))
    for seed in range(10):
        s = sample_random_scene(SceneGenConfig(), seed)
        m = shared_mask_for_objects(rig, s.objects)
        assert m.grids.shape == (6, 16, 40)
        assert m.grids.min() >= EPS and m.grids.max() <= 1.0
        bias = attention_bias(m, 8)
        assert np.all(bias <= 0) and bias.min() >= math.log(EPS) / math.sqrt(8)
    blank = shared_mask_for_objects(rig, ObjectList())
    assert np.all(blank.grids == EPS)


def test_softmax_hand_case():
    _, w = biased_attention(np.zeros((1, 1)), np.zeros((2, 1)), np.eye(2), np.array([0.0, -1.0]))
    assert np.allclose(w, [[0.731059, 0.268941]], atol=1e-6)


def test_uniform_mask_neutrality_bitwise(rng):
    Q, K, V = rng.normal(size=(5, 8)), rng.normal(size=(12, 8)), rng.normal(size=(12, 3))
    bias = attention_bias(SharedMask.uniform(1, (3, 4)), 8)
    o1, w1 = biased_attention(Q, K, V)
    o2, w2 = biased_attention(Q, K, V, bias)
    assert np.array_equal(o1, o2) and np.array_equal(w1, w2)


def test_single_key():
    out, w = biased_attention(np.ones((3, 2)), np.ones((1, 2)), np.array([[4.0, 5.0]]), np.array([-3.0]))
    assert np.all(w == 1.0) and np.all(out == [4.0, 5.0])


def test_shape_and_finiteness_errors():
    with pytest.raises(ValueError):
        biased_attention(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros((4, 1)))
    with pytest.raises(ValueError):
        biased_attention(np.zeros((2, 3)), np.zeros((4, 3)), np.zeros((4, 1)), np.zeros(3))
    with pytest.raises(ValueError):
        biased_attention(np.zeros((2, 3)), np.zeros((4, 3)), np.zeros((4, 1)), np.array([0, 0, 0, np.inf]))
    with pytest.raises(ValueError):
        biased_attention(np.full((2, 3), np.nan), np.zeros((4, 3)), np.zeros((4, 1)))


finite = st.floats(-5, 5, allow_nan=False)


@given(arrays(float, (4, 3), elements=finite), arrays(float, (6, 3), elements=finite),
       arrays(float, (6,), elements=st.floats(-9, 0)))
def test_rows_stochastic(Q, K, bias):
    _, w = biased_attention(Q, K, np.eye(6), bias)
    assert np.all(np.abs(w.sum(1) - 1) <= 1e-12)


def test_peak_attraction():
    grid = (10, 20)
    g = merge_masks([[single_target_mask(GaussianMaskParams((13.4, 6.2), 2.0), grid)]], grid)
    bias = attention_bias(g, 4)
    _, w = biased_attention(np.zeros((1, 4)), np.ones((200, 4)), np.eye(200), bias)
    assert np.unravel_index(np.argmax(w[0]), grid) == (6, 13)


@given(st.integers(0, 11), st.floats(0.01, 0.9))
def test_monotone_in_mask(cell, step):
    r = np.random.default_rng(cell)
    Q, K = r.normal(size=(3, 4)), r.normal(size=(12, 4))
    G = np.full(12, 0.05)
    base = attention_bias(SharedMask(G.reshape(1, 3, 4)), 4)
    G2 = G.copy()
    G2[cell] += step
    up = attention_bias(SharedMask(G2.reshape(1, 3, 4)), 4)
    _, w1 = biased_attention(Q, K, np.eye(12), base)
    _, w2 = biased_attention(Q, K, np.eye(12), up)
    assert np.all(w2[:, cell] > w1[:, cell])


def test_softmax_rows_stable():
    w = softmax_rows(np.array([[1000.0, 1000.0, -1000.0]]))
    assert np.allclose(w, [[0.5, 0.5, 0.0]])
