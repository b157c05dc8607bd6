"""End-to-end network contracts, loss math, and training behavior."""

import math

import numpy as np
import pytest
import torch

from msfseg.config import ModelConfig, TrainConfig
from msfseg.data import Corpus, SupportSequence, SynthConfig, generate_corpus
from msfseg.errors import InputError, TrainingDiverged
from msfseg.model import (MSFSegNet, prediction_from_logits, segmentation_loss,
                          train_episode)
from msfseg.training import (AugmentSpec, augment_support, pseudo_nshot,
                             train_model, warp_image, warp_mask)
from util import finite_difference_check

MINI = ModelConfig(input_size=16, channels=(8, 8), heads=2, head_channels=4,
                   fused_channels=4, decoder_channels=(8, 4))


def mk_support(rng, size, d=1):
    img = rng.random((d, size, size), dtype=np.float32)
    mask = (rng.random((d, size, size)) > 0.6).astype(np.uint8)
    return SupportSequence(slices=img, masks=mask)


@pytest.fixture(scope="module")
def mini_model():
    torch.manual_seed(0)
    return MSFSegNet(MINI)


class TestForward:
    def test_output_shape_default_384(self):
        torch.manual_seed(1)
        model = MSFSegNet(ModelConfig())
        rng = np.random.default_rng(0)
        query = rng.random((384, 384), dtype=np.float32)
        sups = [mk_support(rng, 384) for _ in range(2)]
        logits = model(query, sups)
        assert logits.shape == (2, 384, 384)

    def test_no_supports_rejected(self, mini_model):
        with pytest.raises(InputError):
            mini_model(np.zeros((16, 16), np.float32), [])

    def test_duplicated_support_well_defined(self, mini_model):
        rng = np.random.default_rng(1)
        q = rng.random((16, 16), dtype=np.float32)
        s = mk_support(rng, 16)
        p1 = mini_model.predict(q, [s])
        p2 = mini_model.predict(q, [s, s])
        for p in (p1, p2):
            assert p.logits.shape == (2, 16, 16)
            assert np.isfinite(p.logits).all()
            assert 0.0 <= p.fg_confidence <= 1.0
            np.testing.assert_array_equal(p.mask, p.logits[0] > p.logits[1])

    @pytest.mark.parametrize("n", [2, 3, 5])
    def test_support_order_invariance(self, n):
        torch.manual_seed(2)
        model = MSFSegNet(MINI).double()
        rng = np.random.default_rng(2)
        q = rng.random((16, 16), dtype=np.float32)
        sups = [mk_support(rng, 16) for _ in range(n)]
        perm = list(rng.permutation(n))
        a = model(q, sups).detach().numpy()
        b = model(q, [sups[i] for i in perm]).detach().numpy()
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_sequence_supports(self, mini_model):
        rng = np.random.default_rng(3)
        q = rng.random((16, 16), dtype=np.float32)
        sups = [mk_support(rng, 16, d=3)]
        logits = mini_model(q, sups)
        assert logits.shape == (2, 16, 16)

    def test_argmax_invariant_to_channel_shift(self):
        rng = np.random.default_rng(4)
        logits = torch.tensor(rng.normal(size=(2, 8, 8)))
        base = prediction_from_logits(logits)
        shifted = prediction_from_logits(logits + 3.7)
        np.testing.assert_array_equal(base.mask, shifted.mask)

    def test_empty_prediction_confidence_zero(self):
        logits = torch.zeros(2, 8, 8)
        logits[1] = 10.0
        assert prediction_from_logits(logits).fg_confidence == 0.0


class TestLoss:
    def test_perfect_saturated_prediction(self):
        gt = (np.random.default_rng(0).random((12, 12)) > 0.5).astype(np.uint8)
        logits = torch.zeros(2, 12, 12)
        logits[0] = torch.tensor(np.where(gt, 20.0, -20.0))
        logits[1] = -logits[0]
        assert segmentation_loss(logits, gt).item() <= 1e-3

    def test_uniform_logits_balanced_mask(self):
        gt = np.zeros((4, 4), np.uint8)
        gt[:2] = 1
        ce = segmentation_loss(torch.zeros(2, 4, 4), gt, dice_weight=0.0)
        assert ce.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_nonnegative(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            logits = torch.tensor(rng.normal(size=(2, 6, 6)))
            gt = (rng.random((6, 6)) > 0.5).astype(np.uint8)
            assert segmentation_loss(logits, gt).item() >= 0

    def test_shape_and_binary_validation(self):
        with pytest.raises(InputError):
            segmentation_loss(torch.zeros(2, 4, 4), np.zeros((5, 5)))
        with pytest.raises(InputError):
            segmentation_loss(torch.zeros(2, 4, 4), np.full((4, 4), 0.5))


class TestGradients:
    def test_end_to_end_matches_finite_differences(self):
        torch.manual_seed(6)
        model = MSFSegNet(MINI).double()
        rng = np.random.default_rng(6)
        q = rng.random((16, 16), dtype=np.float32)
        sups = [mk_support(rng, 16) for _ in range(2)]
        gt = (rng.random((16, 16)) > 0.5).astype(np.uint8)

        def loss():
            return segmentation_loss(model(q, sups), gt)

        finite_difference_check(loss, model.parameters(), rtol=1e-3,
                                coords_per_tensor=3)


class TestTrainEpisode:
    def _batch(self, rng, k=2):
        return [(rng.random((16, 16), dtype=np.float32),
                 [mk_support(rng, 16)],
                 (rng.random((16, 16)) > 0.5).astype(np.uint8))
                for _ in range(k)]

    def test_zero_lr_keeps_params(self):
        torch.manual_seed(7)
        model = MSFSegNet(MINI)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        opt = torch.optim.Adam(model.parameters(), lr=0.0)
        train_episode(model, self._batch(np.random.default_rng(7)), opt)
        for k, v in model.state_dict().items():
            assert torch.equal(before[k], v), k

    def test_step_changes_params(self):
        torch.manual_seed(8)
        model = MSFSegNet(MINI)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        train_episode(model, self._batch(np.random.default_rng(8)), opt)
        assert any(not torch.equal(before[k], v)
                   for k, v in model.state_dict().items())

    def test_nonfinite_loss_aborts(self):
        torch.manual_seed(9)
        model = MSFSegNet(MINI)
        with torch.no_grad():
            model.decoder[-1].weight.fill_(float("nan"))
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        with pytest.raises(TrainingDiverged):
            train_episode(model, self._batch(np.random.default_rng(9)), opt)


@pytest.fixture(scope="module")
def tiny_corpus():
    cfg = SynthConfig(shape=(10, 32, 32), volume_count=3, blob_count=1,
                      blob_axes=(4.0, 8.0), tube_count=1,
                      tube_radius=(2.0, 3.0), tube_wander=(1.0, 2.0),
                      noise=0.02, seed=41)
    return generate_corpus(cfg)


class TestTrainModel:
    CFG = TrainConfig(steps=8, batch_size=2, lr=1e-3, n=2, n_min=1, seed=5,
                      model=ModelConfig(input_size=32, channels=(8, 16),
                                        head_channels=8, fused_channels=8,
                                        decoder_channels=(16, 8)))

    def test_same_seed_same_trajectory(self, tiny_corpus):
        r1 = train_model(tiny_corpus, self.CFG)
        r2 = train_model(tiny_corpus, self.CFG)
        assert r1.losses == r2.losses

    def test_loss_decreases_on_two_shape_task(self, tiny_corpus):
        cfg = TrainConfig(steps=200, batch_size=2, lr=2e-3, n=1, seed=1,
                          model=self.CFG.model)
        result = train_model(tiny_corpus, cfg)
        start = float(np.mean(result.losses[:5]))
        end = float(np.mean(result.losses[-20:]))
        assert end <= 0.7 * start, f"smoothed loss {start:.3f} -> {end:.3f}"


class TestPseudoNShot:
    def _support(self, seed=0, size=24):
        rng = np.random.default_rng(seed)
        img = rng.random((1, size, size), dtype=np.float32)
        mask = np.zeros((1, size, size), np.uint8)
        mask[0, 6:14, 8:18] = 1
        return SupportSequence(slices=img, masks=mask)

    def test_n1_returns_original(self):
        sup = self._support()
        out = pseudo_nshot(sup, 1, seed=0)
        assert len(out) == 1 and out[0] is sup

    def test_first_element_unmodified(self):
        sup = self._support()
        out = pseudo_nshot(sup, 4, seed=0)
        assert len(out) == 4 and out[0] is sup

    def test_flip_consistency(self):
        sup = self._support(1)
        spec = AugmentSpec(flip=True)
        aug = augment_support(sup, spec)
        np.testing.assert_array_equal(aug.masks[0], sup.masks[0][:, ::-1])
        np.testing.assert_allclose(aug.slices[0], sup.slices[0][:, ::-1], atol=1e-6)

    def test_identity_transform_is_copy(self):
        sup = self._support(2)
        aug = augment_support(sup, AugmentSpec())
        np.testing.assert_array_equal(aug.slices, sup.slices)
        np.testing.assert_array_equal(aug.masks, sup.masks)

    def test_stored_transform_reproduces_mask(self):
        sup = self._support(3)
        rng = np.random.default_rng(3)
        from msfseg.training import sample_augment
        for _ in range(5):
            spec = sample_augment(rng)
            aug = augment_support(sup, spec)
            np.testing.assert_array_equal(aug.masks[0], warp_mask(sup.masks[0], spec))

    def test_intensity_jitter_never_touches_masks(self):
        sup = self._support(4)
        spec = AugmentSpec(gain=1.1)
        aug = augment_support(sup, spec)
        np.testing.assert_array_equal(aug.masks, sup.masks)
        assert not np.allclose(aug.slices, sup.slices)

    def test_warp_mask_stays_binary(self):
        rng = np.random.default_rng(5)
        mask = (rng.random((20, 20)) > 0.5).astype(np.uint8)
        from msfseg.training import sample_augment
        for _ in range(5):
            out = warp_mask(mask, sample_augment(rng))
            assert set(np.unique(out)) <= {0, 1}

    def test_determinism(self):
        sup = self._support(6)
        a = pseudo_nshot(sup, 3, seed=9)
        b = pseudo_nshot(sup, 3, seed=9)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.slices, y.slices)
            np.testing.assert_array_equal(x.masks, y.masks)
