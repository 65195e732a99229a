import numpy as np
import pytest
from hypothesis import given, strategies as st

from mpunet.fusion import (FusionError, FusionParams, balanced_sample, fit_fusion, fuse,
                           fusion_loss)
from mpunet.nncore.layers import softmax


def _random_probs(rng, v, shape, c):
    return softmax(rng.normal(size=(v,) + shape + (c,)) * 2.0)


def test_hand_example():
    # two planes, two classes: z = W . p + beta
    p1 = np.array([0.8, 0.2])
    p2 = np.array([0.3, 0.7])
    W = np.array([[1.0, 1.0], [1.0, 2.0]])
    beta = np.array([-0.2, 0.0])
    z, lab = fuse([p1[None], p2[None]], FusionParams(W, beta))
    np.testing.assert_allclose(z[0], [0.9, 1.6])
    assert lab[0] == 1


def test_single_plane_identity(rng):
    p = _random_probs(rng, 1, (6, 5, 4), 3)
    z, lab = fuse(p, FusionParams(np.ones((1, 3)), np.zeros(3)))
    np.testing.assert_allclose(z, p[0])
    np.testing.assert_array_equal(lab, p[0].argmax(-1))


def test_uniform_is_plane_average(rng):
    p = _random_probs(rng, 4, (5, 5, 5), 3)
    z, _ = fuse(p, FusionParams.uniform(4, 3))
    np.testing.assert_allclose(z, p.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(softmax(z).sum(-1), 1.0, atol=1e-12)


def test_ties_pick_lowest_class():
    p = np.full((1, 2, 3), 1.0 / 3)
    _, lab = fuse(p, FusionParams.uniform(1, 3))
    assert lab.tolist() == [0, 0]


@given(st.integers(0, 10_000))
def test_plane_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    p = _random_probs(rng, 3, (4, 4), 3)
    W, beta = rng.normal(size=(3, 3)), rng.normal(size=3)
    perm = rng.permutation(3)
    za, _ = fuse(p, FusionParams(W, beta))
    zb, _ = fuse(p[perm], FusionParams(W[perm], beta))
    np.testing.assert_allclose(za, zb, atol=1e-12)


@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_beta_shift_leaves_labels_and_softmax(seed, shift):
    rng = np.random.default_rng(seed)
    p = _random_probs(rng, 2, (3, 3), 4)
    W, beta = rng.normal(size=(2, 4)), rng.normal(size=4)
    za, la = fuse(p, FusionParams(W, beta))
    zb, lb = fuse(p, FusionParams(W, beta + shift))
    np.testing.assert_allclose(softmax(za), softmax(zb), atol=1e-10)
    np.testing.assert_array_equal(la, lb)


def test_rejects_unnormalised_and_mismatched(rng):
    p = _random_probs(rng, 2, (3,), 3)
    with pytest.raises(FusionError):
        fuse(p * 1.1, FusionParams.uniform(2, 3))
    with pytest.raises(FusionError):
        fuse(p, FusionParams.uniform(3, 3))
    with pytest.raises(FusionError):
        fuse([p[0], p[1, :2]], FusionParams.uniform(2, 3))
    with pytest.raises(FusionError):
        FusionParams(np.ones((2, 3)), np.zeros(2))
    with pytest.raises(FusionError):
        FusionParams(np.array([[np.nan]]), np.zeros(1))


def test_loss_gradient_matches_finite_differences(rng):
    probs = _random_probs(rng, 3, (40,), 4)
    labels = rng.integers(0, 4, size=40)
    W, beta = rng.normal(size=(3, 4)), rng.normal(size=4)
    _, dW, db = fusion_loss(W, beta, probs, labels)
    h = 1e-6
    for idx in np.ndindex(W.shape):
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += h
        Wm[idx] -= h
        num = (fusion_loss(Wp, beta, probs, labels)[0] - fusion_loss(Wm, beta, probs, labels)[0]) / (2 * h)
        assert abs(num - dW[idx]) < 1e-6
    for c in range(4):
        bp, bm = beta.copy(), beta.copy()
        bp[c] += h
        bm[c] -= h
        num = (fusion_loss(W, bp, probs, labels)[0] - fusion_loss(W, bm, probs, labels)[0]) / (2 * h)
        assert abs(num - db[c]) < 1e-6


def _accurate_and_random(rng, shape=(10, 10, 10)):
    truth = rng.integers(0, 3, size=shape)
    good = softmax(np.eye(3)[truth] * 4.0 + rng.normal(size=shape + (3,)) * 0.5)
    bad = softmax(rng.normal(size=shape + (3,)))
    return truth, good, bad


def test_fit_beats_uniform_and_favours_accurate_plane(rng):
    truth, good, bad = _accurate_and_random(rng)
    fp = fit_fusion([[good, bad]], [truth], seed=0)
    assert fp.info["final_loss"] <= fp.info["initial_loss"]
    assert np.all(fp.W[0] > fp.W[1])

    # coarse grid over (w_good, w_bad) with beta = 0 on the fit set
    idx = balanced_sample(truth.ravel(), 1_000_000, np.random.default_rng(0))
    probs = np.stack([good.reshape(-1, 3)[idx], bad.reshape(-1, 3)[idx]])
    labels = truth.ravel()[idx]
    grid = {(a, b): fusion_loss(np.array([[a] * 3, [b] * 3]), np.zeros(3), probs, labels)[0]
            for a in (0.5, 2.0) for b in (0.5, 2.0)}
    assert min(grid, key=grid.get) == (2.0, 0.5)


def test_fit_single_plane_keeps_argmax(rng):
    truth, good, _ = _accurate_and_random(rng)
    fp = fit_fusion([[good]], [truth], seed=1)
    _, lab = fuse([good], fp)
    assert np.mean(lab == good.argmax(-1)) >= 0.99


def test_fit_is_deterministic(rng):
    truth, good, bad = _accurate_and_random(rng)
    a = fit_fusion([[good, bad]], [truth], seed=3, max_voxels=500)
    b = fit_fusion([[good, bad]], [truth], seed=3, max_voxels=500)
    assert a.W.tobytes() == b.W.tobytes() and a.beta.tobytes() == b.beta.tobytes()
    assert a.info["fit_voxels"] <= 500


def test_fit_needs_foreground(rng):
    truth = np.zeros((4, 4, 4), dtype=int)
    p = _random_probs(rng, 2, (4, 4, 4), 3)
    with pytest.raises(FusionError):
        fit_fusion([list(p)], [truth])
    with pytest.raises(FusionError):
        fit_fusion([], [])


def test_balanced_sample_halves(rng):
    labels = np.zeros(1000, dtype=int)
    labels[:30] = 2
    idx = balanced_sample(labels, 200, rng)
    assert idx.size == 200
    assert np.sum(labels[idx] > 0) == 100


def test_json_round_trip(tmp_path, rng):
    fp = FusionParams(rng.normal(size=(3, 4)), rng.normal(size=4),
                      vectors=[[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]], info={"final_loss": 0.5})
    fp.save(tmp_path / "f.json")
    back = FusionParams.load(tmp_path / "f.json")
    np.testing.assert_array_equal(back.W, fp.W)
    np.testing.assert_array_equal(back.beta, fp.beta)
    assert back.vectors == fp.vectors and back.info == fp.info
