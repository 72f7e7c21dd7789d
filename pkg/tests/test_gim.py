import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segtrack import gim
from helpers import numeric_grad, rel_error


def random_features(seed, d=8, g=6):
    return np.random.default_rng(seed).normal(size=(d, g, g))


def brute_force_top_k(features, vectors, K):
    d, gh, gw = features.shape
    out = np.zeros((gh, gw))
    for r in range(gh):
        for c in range(gw):
            y = features[:, r, c]
            ny = np.linalg.norm(y)
            sims = []
            for x in vectors:
                nx = np.linalg.norm(x)
                sims.append(0.0 if ny == 0 or nx == 0 else float(np.dot(y, x) / (ny * nx)))
            sims.sort(reverse=True)
            out[r, c] = np.mean(sims[:K])
    return out


def test_foreground_count_matches_mask():
    f = random_features(0)
    mask = np.zeros((6, 6), bool)
    mask[1:3, 2:5] = True
    model = gim.build_gim_model(f, mask)
    assert len(model.foreground) == 6
    assert len(model.background) == 30


def test_full_mask_is_rejected():
    with pytest.raises(gim.GimError):
        gim.build_gim_model(random_features(0), np.ones((6, 6), bool))


def test_empty_mask_is_rejected():
    with pytest.raises(gim.GimError):
        gim.build_gim_model(random_features(0), np.zeros((6, 6), bool))


def test_checkerboard_sets_disjoint_and_exhaustive():
    f = random_features(1)
    mask = (np.add.outer(np.arange(6), np.arange(6)) % 2).astype(bool)
    model = gim.build_gim_model(f, mask)
    fg, bg = set(model.foreground_cells), set(model.background_cells)
    assert fg.isdisjoint(bg) and fg | bg == set(range(36))
    assert fg == set(np.flatnonzero(mask.ravel()))
    flat = f.reshape(8, -1).T
    np.testing.assert_array_equal(model.foreground, flat[sorted(fg)])


def test_crop_resolution_mask_majority_vote():
    f = random_features(2, g=4)
    mask = np.zeros((32, 32), bool)
    mask[0:8, 0:8] = True  # full cell
    mask[8:13, 0:8] = True  # 40/64, majority
    mask[16:20, 0:8] = True  # 32/64, tie -> background
    model = gim.build_gim_model(f, mask)
    assert sorted(model.foreground_cells) == [0, 4]


def test_caps_subsample():
    f = random_features(3, g=10)
    mask = np.zeros((10, 10), bool)
    mask[:5] = True
    model = gim.build_gim_model(f, mask, caps=(7, 11), rng=np.random.default_rng(0))
    assert len(model.foreground) == 7 and len(model.background) == 11


def test_self_similarity_is_one():
    v = np.random.default_rng(4).normal(size=8)
    f = np.broadcast_to(v[:, None, None], (8, 5, 5)).copy()
    model = gim.GimModel(v[None], -v[None], K=3)
    F, B = gim.similarity_channels(f, model)
    np.testing.assert_allclose(F, 1.0)
    np.testing.assert_allclose(B, -1.0)


def test_top_k_arithmetic():
    # unit vectors with known cosines to e0: 0.9, 0.8, 0.7, 0.1
    cos = np.array([0.9, 0.8, 0.7, 0.1])
    vecs = np.stack([cos, np.sqrt(1 - cos**2)], axis=1)
    f = np.zeros((2, 1, 1))
    f[0] = 1.0
    model = gim.GimModel(vecs, vecs, K=3)
    F, _ = gim.similarity_channels(f, model)
    assert abs(F[0, 0] - 0.8) < 1e-12


@pytest.mark.oracle
@pytest.mark.parametrize("K", [1, 3, 5, 50])
def test_matches_brute_force_oracle(K):
    rng = np.random.default_rng(K)
    f = rng.normal(size=(8, 6, 6))
    f[:, 2, 3] = 0  # zero feature vector -> similarity 0
    model = gim.GimModel(rng.normal(size=(12, 8)), rng.normal(size=(20, 8)), K=K)
    F, B = gim.similarity_channels(f, model)
    np.testing.assert_allclose(F, brute_force_top_k(f, model.foreground, K), atol=1e-10)
    np.testing.assert_allclose(B, brute_force_top_k(f, model.background, K), atol=1e-10)


def test_k_larger_than_set_is_plain_mean():
    rng = np.random.default_rng(5)
    f = rng.normal(size=(4, 3, 3))
    fg = rng.normal(size=(2, 4))
    model = gim.GimModel(fg, rng.normal(size=(5, 4)), K=10)
    F, _ = gim.similarity_channels(f, model)
    y = f.reshape(4, -1).T
    y = y / np.linalg.norm(y, axis=1, keepdims=True)
    x = fg / np.linalg.norm(fg, axis=1, keepdims=True)
    np.testing.assert_allclose(F.ravel(), (y @ x.T).mean(axis=1), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_scale_and_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(6, 4, 4))
    model = gim.GimModel(rng.normal(size=(7, 6)), rng.normal(size=(9, 6)), K=3)
    F, B = gim.similarity_channels(f, model)
    scales = rng.uniform(0.1, 10, size=(1, 4, 4))
    F2, B2 = gim.similarity_channels(f * scales, model)
    np.testing.assert_allclose(F, F2, atol=1e-12)
    np.testing.assert_allclose(B, B2, atol=1e-12)
    perm = gim.GimModel(model.foreground[rng.permutation(7)] * 3.0, model.background[rng.permutation(9)], K=3)
    F3, B3 = gim.similarity_channels(f, perm)
    np.testing.assert_allclose(F, F3, atol=1e-12)
    np.testing.assert_allclose(B, B3, atol=1e-12)
    assert np.all((F >= -1) & (F <= 1)) and np.all((B >= -1) & (B <= 1))


def test_posterior_values():
    assert np.allclose(gim.posterior_channel(np.full((3, 3), 0.2), np.full((3, 3), 0.2)), 0.5)
    assert abs(gim.posterior_channel(np.log(3), 0.0) - 0.75) < 1e-15
    F = np.linspace(-1, 1, 11)
    P = gim.posterior_channel(F, np.zeros_like(F))
    assert np.all(np.diff(P) > 0)
    assert np.array_equal(P > 0.5, F > 0)


@pytest.mark.gradient
def test_similarity_gradients():
    rng = np.random.default_rng(6)
    f = rng.normal(size=(5, 4, 4))
    fg = rng.normal(size=(6, 5))
    bg = rng.normal(size=(8, 5))
    wF, wB = rng.normal(size=(2, 4, 4))

    def loss():
        model = gim.GimModel(fg, bg, K=3)
        F, B = gim.similarity_channels(f, model)
        P = gim.posterior_channel(F, B)
        return float((F * wF).sum() + (P * wB).sum())

    model = gim.GimModel(fg, bg, K=3)
    F, B, cache = gim.similarity_channels(f, model, return_cache=True)
    P = gim.posterior_channel(F, B)
    dF_p, dB_p = gim.posterior_backward(wB, P)
    gf, gfg, gbg = gim.similarity_backward(wF + dF_p, dB_p, cache)
    assert rel_error(gf, numeric_grad(loss, f)) < 1e-4
    assert rel_error(gfg, numeric_grad(loss, fg)) < 1e-4
    assert rel_error(gbg, numeric_grad(loss, bg)) < 1e-4
