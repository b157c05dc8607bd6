"""Surrogate identities, symmetry, and fusion convolution oracles."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from msfseg.errors import InputError
from msfseg.fusion import (SurrogateFusion, average, channel_attention,
                           coherence, diversity, surrogate_bundle)
from util import finite_difference_check


def rand_masks(n, h=4, w=4, seed=0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    return [torch.tensor(rng.normal(size=(2, h, w)), dtype=dtype) for _ in range(n)]


def softmax_np(m):
    e = np.exp(m - m.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


class TestCoherence:
    def test_single_mask_collapse(self):
        (m,) = rand_masks(1)
        got = coherence([m])
        np.testing.assert_allclose(got.numpy(), softmax_np(m.numpy()), atol=1e-12)

    def test_identical_masks_power(self):
        (m,) = rand_masks(1, seed=3)
        for n in (2, 3, 5):
            got = coherence([m] * n)
            want = softmax_np(m.numpy()) ** n
            np.testing.assert_allclose(got.numpy(), want, atol=1e-6)

    def test_zero_probability_annihilates(self):
        masks = rand_masks(3, seed=4)
        masks[1][0, 1, 1] = -60.0      # fg probability ~ 0 at pixel (1,1)
        masks[1][1, 1, 1] = 60.0
        got = coherence(masks)
        assert got[0, 1, 1].item() == pytest.approx(0.0, abs=1e-20)

    def test_empty_list_rejected(self):
        with pytest.raises(InputError):
            coherence([])

    def test_range(self):
        masks = rand_masks(4, seed=5)
        got = coherence(masks)
        assert got.min() >= 0 and got.max() <= 1


class TestDiversity:
    def test_single_mask_collapse(self):
        (m,) = rand_masks(1, seed=6)
        np.testing.assert_allclose(diversity([m]).numpy(),
                                   softmax_np(m.numpy()), atol=1e-12)

    def test_identical_masks_scale(self):
        (m,) = rand_masks(1, seed=7)
        got = diversity([m] * 4)
        np.testing.assert_allclose(got.numpy(), 4 * softmax_np(m.numpy()), atol=1e-6)

    def test_disjoint_certain_foregrounds(self):
        a = torch.full((2, 4, 4), -30.0)
        a[1] = 30.0
        b = a.clone()
        a[0, :2, :], a[1, :2, :] = 30.0, -30.0       # certain fg on top half
        b[0, 2:, :], b[1, 2:, :] = 30.0, -30.0       # certain fg on bottom half
        got = diversity([a, b])
        # per-pixel sum oracle over the union of the two certain regions
        want = softmax_np(a.numpy()) + softmax_np(b.numpy())
        np.testing.assert_allclose(got.numpy(), want, atol=1e-12)
        np.testing.assert_allclose(got[0].numpy(), 1.0, atol=1e-9)

    def test_range(self):
        n = 5
        got = diversity(rand_masks(n, seed=8))
        assert got.min() >= 0 and got.max() <= n


class TestChannelAttention:
    def test_equal_channel_means_halve(self):
        rng = np.random.default_rng(9)
        fg = rng.normal(size=(4, 4))
        m = torch.tensor(np.stack([fg, fg[::-1].copy()]))   # equal means
        got = channel_attention([m])
        np.testing.assert_allclose(got.numpy(), 0.5 * m.numpy(), atol=1e-12)

    def test_identical_masks_idempotent(self):
        (m,) = rand_masks(1, seed=10)
        one = channel_attention([m])
        many = channel_attention([m] * 3)
        np.testing.assert_allclose(one.numpy(), many.numpy(), atol=1e-12)

    def test_loop_oracle(self):
        masks = rand_masks(3, seed=11)
        got = channel_attention(masks).numpy()
        acc = np.zeros_like(got)
        for m in masks:
            arr = m.numpy()
            pooled = arr.mean(axis=(1, 2))
            e = np.exp(pooled - pooled.max())
            wts = e / e.sum()
            acc += arr * wts[:, None, None]
        np.testing.assert_allclose(got, acc / len(masks), atol=1e-12)


class TestAverage:
    def test_single_mask_unchanged(self):
        (m,) = rand_masks(1, seed=12)
        np.testing.assert_allclose(average([m]).numpy(), m.numpy(), atol=0)

    def test_opposite_masks_cancel(self):
        (m,) = rand_masks(1, seed=13)
        np.testing.assert_allclose(average([m, -m]).numpy(), 0.0, atol=1e-12)

    def test_loop_oracle(self):
        masks = rand_masks(4, seed=14)
        want = sum(m.numpy() for m in masks) / 4
        np.testing.assert_allclose(average(masks).numpy(), want, atol=1e-12)


class TestSymmetry:
    def test_surrogates_permutation_invariant(self):
        masks = rand_masks(5, seed=15)
        perm = [3, 0, 4, 2, 1]
        shuffled = [masks[i] for i in perm]
        for fn in (coherence, diversity, channel_attention, average, surrogate_bundle):
            a, b = fn(masks), fn(shuffled)
            np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-6)

    @given(st.integers(1, 6), st.integers(0, 2 ** 31 - 1), st.data())
    @settings(max_examples=40, deadline=None)
    def test_bundle_symmetric_and_in_range(self, n, seed, data):
        masks = rand_masks(n, h=3, w=3, seed=seed)
        perm = data.draw(st.permutations(range(n)))
        a = surrogate_bundle(masks)
        b = surrogate_bundle([masks[i] for i in perm])
        np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-6)
        coh, div = a[:, 0], a[:, 1]
        assert coh.min() >= 0 and coh.max() <= 1
        assert div.min() >= 0 and div.max() <= n

    def test_monotonicity_in_fg_probability(self):
        masks = rand_masks(3, seed=16)
        before_div = diversity(masks)[0, 2, 2].item()
        before_coh_bg = coherence(masks)[1, 2, 2].item()
        masks[1][0, 2, 2] += 1.5        # raise fg probability at one pixel
        assert diversity(masks)[0, 2, 2].item() >= before_div
        assert coherence(masks)[1, 2, 2].item() <= before_coh_bg


class TestFusion:
    def test_zero_bundle_zero_bias(self):
        torch.manual_seed(0)
        fusion = SurrogateFusion(out_channels=8)
        with torch.no_grad():
            fusion.conv.bias.zero_()
            fusion.norm.bias.zero_()
        out = fusion(torch.zeros(2, 4, 5, 5))
        assert torch.all(out == 0)

    def test_determinism(self):
        torch.manual_seed(1)
        fusion = SurrogateFusion(out_channels=4)
        bundle = surrogate_bundle(rand_masks(3, seed=17, dtype=torch.float32))
        assert torch.equal(fusion(bundle), fusion(bundle))

    def test_conv_dot_product_oracle(self):
        fusion = SurrogateFusion(out_channels=1, spatial_kernel=1)
        rng = np.random.default_rng(18)
        w = rng.normal(size=(1, 2, 4, 1, 1)).astype(np.float32)
        bias = 0.25
        with torch.no_grad():
            fusion.conv.weight.copy_(torch.tensor(w))
            fusion.conv.bias.fill_(bias)
        bundle = torch.tensor(rng.normal(size=(2, 4, 1, 1)).astype(np.float32))
        out = fusion.conv(bundle.unsqueeze(0))
        want = float((w[0, :, :, 0, 0] * bundle.numpy()[:, :, 0, 0]).sum() + bias)
        assert out.item() == pytest.approx(want, abs=1e-6)

    def test_output_shape(self):
        torch.manual_seed(2)
        fusion = SurrogateFusion(out_channels=16)
        out = fusion.fuse(rand_masks(3, h=6, w=5, seed=19, dtype=torch.float32))
        assert out.shape == (16, 6, 5)

    def test_bad_bundle_shape(self):
        fusion = SurrogateFusion()
        with pytest.raises(InputError):
            fusion(torch.zeros(2, 3, 4, 4))

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(3)
        fusion = SurrogateFusion(out_channels=4).double()
        rng = np.random.default_rng(20)
        leaves = [torch.tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
                  for _ in range(2)]
        w = torch.tensor(rng.normal(size=(4, 3, 3)))

        def loss():
            return (fusion.fuse(leaves) * w).sum()

        finite_difference_check(loss, list(fusion.parameters()) + leaves, rtol=1e-4)
