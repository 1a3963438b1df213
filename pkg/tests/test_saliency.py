import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cbv.errors import BadThreshold, LengthMismatch, ShapeMismatch, UnknownClass
from cbv.saliency import (Heatmap, channel_weights, fuse, full_mask, gradcam_map, gradcam_weights,
                          mask_project, saliency_mask, threshold_mask, upsample_normalize)

W = torch.tensor([[0.7, -1.2], [0.0, 2.5]])


def test_weights_of_a_mean_pooled_linear_head():
    maps = torch.rand(2, 2, 2)
    # s^c = sum_k w_ck * mean(A^k): constant gradient w_ck / 4 per pixel, mean w_ck / 4
    alpha = channel_weights(maps, lambda a: a.mean(dim=(2, 3)) @ W.T, 0)
    assert torch.allclose(alpha, W[0] / 4)
    # summed instead of averaged: the spatial mean of the gradient is w_ck itself
    alpha = channel_weights(maps, lambda a: a.sum(dim=(2, 3)) @ W.T, 1)
    assert torch.allclose(alpha, W[1])
    assert float(alpha[0]) == 0.0


def test_duplicate_channels_get_equal_weights():
    a = torch.rand(1, 3, 3)
    maps = torch.cat([a, a])
    alpha = channel_weights(maps, lambda m: torch.tanh(m.sum(1)).mean(dim=(1, 2)).unsqueeze(1)
                            .repeat(1, 2), 0)
    assert torch.equal(alpha[0], alpha[1])


def test_gradcam_weights_errors(small_clf, small_data):
    x = small_data.images[0]
    assert gradcam_weights(small_clf, x, 1).shape == (small_clf.num_channels,)
    with pytest.raises(UnknownClass):
        gradcam_weights(small_clf, x, 9)
    with pytest.raises(ShapeMismatch):
        gradcam_weights(small_clf, torch.zeros(3, 8, 8), 0)


def test_gradcam_map_cases():
    maps = torch.rand(3, 4, 4)
    assert torch.equal(gradcam_map(maps, torch.zeros(3)).values, torch.zeros(4, 4))
    a = torch.rand(1, 4, 4)
    assert torch.allclose(gradcam_map(a, torch.ones(1)).values, a[0])
    m = torch.stack([torch.ones(2, 2), torch.tensor([[0.0, 3.0], [0.0, 0.0]])])
    out = gradcam_map(m, torch.tensor([1.0, -1.0])).values
    assert torch.equal(out, torch.tensor([[1.0, 0.0], [1.0, 1.0]]))
    with pytest.raises(LengthMismatch):
        gradcam_map(maps, torch.ones(2))


def test_gradcam_map_permutation_invariance():
    gen = torch.Generator().manual_seed(0)
    maps, alpha = torch.rand(6, 5, 5, generator=gen), torch.randn(6, generator=gen)
    perm = torch.randperm(6, generator=gen)
    a = gradcam_map(maps, alpha).values
    b = gradcam_map(maps[perm], alpha[perm]).values
    assert torch.allclose(a, b, atol=1e-6)


def test_upsample_degenerate_maps():
    assert torch.equal(upsample_normalize(Heatmap(torch.full((2, 2), 0.3)), 4, 4).values,
                       torch.ones(4, 4))
    assert torch.equal(upsample_normalize(Heatmap(torch.zeros(2, 2)), 4, 4).values, torch.zeros(4, 4))
    with pytest.raises(ShapeMismatch):
        upsample_normalize(Heatmap(torch.zeros(4, 4)), 2, 2)


def _bilinear_oracle(v, n):
    """Corner-aligned bilinear sample of a 2x2 grid at n x n points, by hand."""
    out = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            y, x = i / (n - 1), j / (n - 1)
            out[i][j] = (v[0][0] * (1 - y) * (1 - x) + v[0][1] * (1 - y) * x
                         + v[1][0] * y * (1 - x) + v[1][1] * y * x)
    return torch.tensor(out)


def test_bilinear_against_hand_oracle():
    v = [[0.0, 1.0], [1.0, 0.0]]
    up = upsample_normalize(Heatmap(torch.tensor(v)), 4, 4).values
    assert torch.allclose(up, _bilinear_oracle(v, 4), atol=1e-6)
    # off-grid centre samples of the 4x4 grid sit at 1/3 and 2/3
    assert up[1, 1] == pytest.approx(4 / 9) and up[1, 2] == pytest.approx(5 / 9)
    # an odd grid has a sample exactly at the centre
    assert float(upsample_normalize(Heatmap(torch.tensor(v)), 3, 3).values[1, 1]) == 0.5


def test_upsample_range():
    up = upsample_normalize(Heatmap(torch.rand(8, 8) * 5), 32, 32).values
    assert float(up.min()) == 0.0 and float(up.max()) == 1.0


def test_threshold_cases():
    h = Heatmap(torch.tensor([[0.0, 1.0], [1.0, 0.0]]))
    assert torch.equal(threshold_mask(h, 0.5).mask, h.values)
    r = Heatmap(torch.tensor([[0.1, 1.0], [0.4, 1.0]]))
    assert torch.equal(threshold_mask(r, 0.0).mask, torch.ones(2, 2))
    assert torch.equal(threshold_mask(r, 1.0).mask, torch.tensor([[0.0, 1.0], [0.0, 1.0]]))
    for bad in (-0.1, 1.1):
        with pytest.raises(BadThreshold):
            threshold_mask(r, bad)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 1000))
def test_mask_monotone_in_tau(t1, t2, seed):
    lo, hi = min(t1, t2), max(t1, t2)
    h = Heatmap(torch.rand(6, 6, generator=torch.Generator().manual_seed(seed)))
    big, small = threshold_mask(h, lo).mask, threshold_mask(h, hi).mask
    assert bool((small <= big).all())


def test_fuse_checkerboard_loop_oracle():
    gen = torch.Generator().manual_seed(1)
    x, g = torch.rand(3, 5, 5, generator=gen), torch.rand(3, 5, 5, generator=gen)
    m = torch.tensor([[(i + j) % 2 for j in range(5)] for i in range(5)], dtype=torch.float32)
    out = fuse(x, g, m)
    for c in range(3):
        for i in range(5):
            for j in range(5):
                want = g[c, i, j] if m[i, j] else x[c, i, j]
                assert out[c, i, j] == want


def test_fuse_and_project_identities():
    gen = torch.Generator().manual_seed(2)
    x, g = torch.rand(2, 3, 4, 4, generator=gen), torch.rand(2, 3, 4, 4, generator=gen)
    zero, one = torch.zeros(4, 4), torch.ones(4, 4)
    assert torch.equal(fuse(x, g, zero), x)
    assert torch.equal(fuse(x, g, one), g)
    assert torch.equal(fuse(x, g, full_mask(4, 4)), g)
    assert torch.equal(mask_project(g, zero), torch.zeros_like(g))
    assert torch.equal(mask_project(g, one), g)
    m = (torch.rand(4, 4, generator=gen) > 0.5).float()
    assert torch.equal(mask_project(mask_project(g, m), m), mask_project(g, m))
    # one mask per image of a batch
    ms = torch.stack([zero, one])
    assert torch.equal(fuse(x, g, ms), torch.stack([x[0], g[1]]))
    with pytest.raises(ShapeMismatch):
        fuse(x, g, torch.ones(3, 3))
    with pytest.raises(ShapeMismatch):
        fuse(x, g[:, :2], one)


def test_saliency_mask_pipeline(small_clf, small_data):
    x = small_data.images[3]
    m, heat = saliency_mask(small_clf, x, int(small_data.labels[3]), tau=0.5)
    assert m.mask.shape == (32, 32) and heat.values.shape == (32, 32)
    assert torch.equal(m.mask, (heat.values >= 0.5).float())
    assert 0 < m.count <= 32 * 32
