import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from engageformer import numerics as nx
from engageformer.errors import ConfigError, GeometryError
from engageformer.tokenizer import (TubeletEmbedder, ViewConfig, extract_tubelets, make_views,
                                    tubelet_tokenize)

from conftest import fd_max_rel_error


def floor_count(T, H, W, t, h, w):
    return (T // t) * (H // h) * (W // w)


def zero_embedder(cfg, N, D=3):
    return TubeletEmbedder(nx.Tensor(np.zeros((cfg.patch_size(D), cfg.d))), nx.Tensor(np.zeros(cfg.d)),
                           nx.Tensor(np.zeros((N, cfg.d))))


def test_full_scale_token_counts():
    assert ViewConfig(8, 8, 8, 512).num_tokens(32, 112, 112) == 4 * 14 * 14 == 784
    assert ViewConfig(2, 8, 8, 512).num_tokens(32, 112, 112) == 3136
    assert ViewConfig(4, 8, 8, 512).num_tokens(32, 112, 112) == 1568


def test_zero_embedder_gives_zero_tokens():
    cfg = ViewConfig(2, 4, 4, 5)
    clip = np.random.default_rng(0).normal(size=(4, 8, 8, 3))
    seq = tubelet_tokenize(clip, cfg, zero_embedder(cfg, 8))
    assert seq.tokens.shape == (8, 5) and seq.n == 8 and seq.d == 5
    assert not seq.tokens.data.any()


def test_tubelet_ordering_and_flattening():
    clip = np.arange(4 * 4 * 4 * 2).reshape(4, 4, 4, 2).astype(float)
    patches = extract_tubelets(clip, ViewConfig(2, 2, 2, 1))
    # token 1 is the second tubelet along width: frames 0-1, rows 0-1, cols 2-3
    np.testing.assert_array_equal(patches[1], clip[0:2, 0:2, 2:4].reshape(-1))
    # token 2 moves one step along height
    np.testing.assert_array_equal(patches[2], clip[0:2, 2:4, 0:2].reshape(-1))
    # token 4 moves one step in time
    np.testing.assert_array_equal(patches[4], clip[2:4, 0:2, 0:2].reshape(-1))


def test_trailing_pixels_dropped():
    clip = np.ones((5, 9, 10, 3))
    assert extract_tubelets(clip, ViewConfig(2, 4, 4, 1)).shape == (2 * 2 * 2, 2 * 4 * 4 * 3)


def test_clip_smaller_than_tubelet():
    with pytest.raises(GeometryError):
        extract_tubelets(np.zeros((1, 8, 8, 3)), ViewConfig(2, 4, 4, 1))


@settings(max_examples=60)
@given(st.integers(1, 9), st.integers(1, 12), st.integers(1, 12), st.integers(1, 4), st.integers(1, 5),
       st.integers(1, 5))
def test_token_count_matches_closed_form(T, H, W, t, h, w):
    cfg = ViewConfig(t, h, w, 2)
    clip = np.zeros((T, H, W, 1))
    if t > T or h > H or w > W:
        with pytest.raises(GeometryError):
            extract_tubelets(clip, cfg)
        return
    assert extract_tubelets(clip, cfg).shape[0] == floor_count(T, H, W, t, h, w) == cfg.num_tokens(T, H, W)


def test_permuting_tubelets_permutes_tokens():
    r = np.random.default_rng(1)
    cfg = ViewConfig(2, 2, 2, 4)
    clip = r.normal(size=(4, 4, 4, 3))
    emb = TubeletEmbedder(nx.Tensor(r.normal(size=(24, 4))), nx.Tensor(r.normal(size=4)), nx.Tensor(np.zeros((8, 4))))
    base = tubelet_tokenize(clip, cfg, emb).tokens.data
    # swap the first and last tubelet in the clip itself
    swapped = clip.copy()
    swapped[0:2, 0:2, 0:2], swapped[2:4, 2:4, 2:4] = clip[2:4, 2:4, 2:4], clip[0:2, 0:2, 0:2]
    out = tubelet_tokenize(swapped, cfg, emb).tokens.data
    perm = [7, 1, 2, 3, 4, 5, 6, 0]
    np.testing.assert_allclose(out, base[perm], rtol=1e-6)


def test_make_views_full_scale_order():
    cfgs = [ViewConfig(2, 8, 8, 4), ViewConfig(4, 8, 8, 4), ViewConfig(8, 8, 8, 4)]
    clip = np.zeros((32, 112, 112, 3), dtype=np.float32)
    counts = [c.num_tokens(32, 112, 112) for c in cfgs]
    views = make_views(clip, cfgs, [zero_embedder(c, n) for c, n in zip(cfgs, counts)])
    assert [v.n for v in views] == [784, 1568, 3136]
    assert [v.view_index for v in views] == [2, 1, 0]


def test_make_views_single_view_and_ties():
    clip = np.zeros((4, 8, 8, 3))
    single = ViewConfig(2, 4, 4, 3)
    out = make_views(clip, [single], [zero_embedder(single, 8)])
    assert len(out) == 1 and out[0].view_index == 0
    a, b = ViewConfig(2, 4, 4, 3), ViewConfig(4, 2, 4, 3)  # both give 8 tokens
    out = make_views(clip, [a, b], [zero_embedder(a, 8), zero_embedder(b, 8)])
    assert [v.view_index for v in out] == [0, 1]


def test_make_views_rejects_mixed_d():
    a, b = ViewConfig(2, 4, 4, 3), ViewConfig(4, 4, 4, 5)
    with pytest.raises(ConfigError):
        make_views(np.zeros((4, 8, 8, 3)), [a, b], [zero_embedder(a, 8), zero_embedder(b, 4)])


@pytest.mark.parametrize("seed", range(3))
def test_tokenize_gradients(seed):
    r = np.random.default_rng(seed)
    cfg = ViewConfig(2, 4, 4, 3)
    clip = r.normal(size=(4, 8, 8, 3))
    n = cfg.num_tokens(4, 8, 8)

    def build(E, b, P):
        return tubelet_tokenize(clip, cfg, TubeletEmbedder(E, b, P)).tokens

    args = [r.normal(size=(cfg.patch_size(3), 3)) * 0.1, r.normal(size=3), r.normal(size=(n, 3))]
    assert fd_max_rel_error(build, args, seed) <= 1e-4
