import math

import numpy as np
import pytest
import torch

from ssmseg.losses import (
    DICE_EPS,
    LossBreakdown,
    TrainingAbortError,
    contrastive_loss,
    cross_entropy_loss,
    cross_supervision_loss,
    dice_loss,
    project_features,
    pseudo_label,
    supervised_loss,
    total_loss,
)
from helpers import fd_gradient, rel_err


def brute_force_dice(probs, target, eps=DICE_EPS):
    """Independent per-class loop implementation of the smoothed Dice loss."""
    b, c, h, w = probs.shape
    scores = []
    for cls in range(c):
        inter = denom = 0.0
        for i in range(b):
            for y in range(h):
                for x in range(w):
                    p = float(probs[i, cls, y, x])
                    g = 1.0 if int(target[i, y, x]) == cls else 0.0
                    inter += p * g
                    denom += p + g
        scores.append((2 * inter + eps) / (denom + eps))
    return 1 - sum(scores) / c


def softmaxed(shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.softmax(torch.randn(*shape, generator=g, dtype=torch.float64), dim=1)


class TestDiceLoss:
    def test_perfect_overlap_near_zero(self):
        target = torch.randint(0, 4, (2, 4, 4))
        probs = torch.nn.functional.one_hot(target, 4).permute(0, 3, 1, 2).double()
        assert dice_loss(probs, target).item() < 1e-5

    def test_disjoint_masks_near_one(self):
        target = torch.ones(1, 2, 2, dtype=torch.long)
        probs = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
        probs[:, 0] = 1.0
        assert dice_loss(probs, target).item() > 1 - 1e-4

    def test_hand_computed_two_pixel_case(self):
        probs = torch.tensor([[[[0.8, 0.4]], [[0.2, 0.6]]]], dtype=torch.float64)
        target = torch.tensor([[[0, 1]]])
        d0 = (2 * 0.8 + 1e-5) / (1.2 + 1.0 + 1e-5)
        d1 = (2 * 0.6 + 1e-5) / (0.8 + 1.0 + 1e-5)
        expected = 1 - (d0 + d1) / 2
        got = dice_loss(probs, target).item()
        assert got == pytest.approx(expected, rel=1e-12)
        assert got == pytest.approx(0.3030, abs=2e-4)
        assert got == pytest.approx(brute_force_dice(probs, target), rel=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        g = torch.Generator().manual_seed(seed)
        probs = softmaxed((2, 3, 3, 4), seed)
        target = torch.randint(0, 3, (2, 3, 4), generator=g)
        assert dice_loss(probs, target).item() == pytest.approx(
            brute_force_dice(probs, target), rel=1e-12)

    def test_range(self):
        for seed in range(5):
            g = torch.Generator().manual_seed(seed)
            probs = softmaxed((1, 4, 3, 3), seed)
            target = torch.randint(0, 4, (1, 3, 3), generator=g)
            v = dice_loss(probs, target).item()
            assert 0 <= v <= 1 + 1e-4

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            dice_loss(softmaxed((1, 3, 2, 2)), torch.zeros(1, 3, 3, dtype=torch.long))
        with pytest.raises(ValueError):
            dice_loss(softmaxed((1, 2, 2, 2)), torch.full((1, 2, 2), 2))

    def test_gradient_matches_fd(self):
        probs = softmaxed((1, 3, 4, 4), 7).requires_grad_(True)
        target = torch.randint(0, 3, (1, 4, 4), generator=torch.Generator().manual_seed(7))
        loss = dice_loss(probs, target)
        (grad,) = torch.autograd.grad(loss, probs)
        with torch.no_grad():
            fd = fd_gradient(lambda: dice_loss(probs, target), probs)
        assert rel_err(grad, fd) < 1e-4


class TestCrossEntropyLoss:
    def test_perfect_prediction_zero(self):
        target = torch.randint(0, 3, (1, 3, 3))
        probs = torch.nn.functional.one_hot(target, 3).permute(0, 3, 1, 2).double()
        assert cross_entropy_loss(probs, target).item() == 0.0

    def test_uniform_four_class(self):
        probs = torch.full((1, 4, 2, 2), 0.25, dtype=torch.float64)
        target = torch.randint(0, 4, (1, 2, 2))
        assert cross_entropy_loss(probs, target).item() == pytest.approx(
            math.log(4), rel=1e-12)

    def test_hand_computed_two_pixel_case(self):
        probs = torch.tensor([[[[0.5, 0.25]], [[0.5, 0.75]]]], dtype=torch.float64)
        target = torch.tensor([[[0, 0]]])
        expected = -(math.log(0.5) + math.log(0.25)) / 2
        assert cross_entropy_loss(probs, target).item() == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(1.039720, abs=1e-6)

    def test_zero_probability_clamped(self):
        probs = torch.zeros(1, 2, 1, 1, dtype=torch.float64)
        probs[:, 1] = 1.0
        target = torch.zeros(1, 1, 1, dtype=torch.long)
        v = cross_entropy_loss(probs, target).item()
        assert math.isfinite(v) and v > 0

    def test_gradient_matches_fd(self):
        probs = (softmaxed((1, 4, 3, 3), 3) * 0.9 + 0.01).requires_grad_(True)
        target = torch.randint(0, 4, (1, 3, 3), generator=torch.Generator().manual_seed(3))
        (grad,) = torch.autograd.grad(cross_entropy_loss(probs, target), probs)
        with torch.no_grad():
            fd = fd_gradient(lambda: cross_entropy_loss(probs, target), probs)
        assert rel_err(grad, fd) < 1e-4


class TestSupervisedLoss:
    def test_confident_correct_logits_near_zero(self):
        target = torch.randint(0, 3, (1, 4, 4))
        logits = (torch.nn.functional.one_hot(target, 3).permute(0, 3, 1, 2).double()
                  * 40 - 20)
        assert supervised_loss(logits, target).item() < 1e-4

    def test_reduces_to_component_oracles(self):
        probs = torch.tensor([[[[0.8, 0.4]], [[0.2, 0.6]]]], dtype=torch.float64)
        target = torch.tensor([[[0, 1]]])
        logits = probs.log()
        expected = cross_entropy_loss(probs, target) + dice_loss(probs, target)
        assert supervised_loss(logits, target).item() == pytest.approx(
            expected.item(), rel=1e-10)

    def test_finite_for_extreme_logits(self):
        g = torch.Generator().manual_seed(0)
        logits = torch.rand(2, 4, 5, 5, generator=g) * 20 - 10
        target = torch.randint(0, 4, (2, 5, 5), generator=g)
        assert math.isfinite(supervised_loss(logits, target).item())


class TestPseudoLabel:
    def test_unique_maxima(self):
        logits = torch.tensor([[[[0.1]], [[2.0]], [[0.5]]]])
        assert pseudo_label(logits).item() == 1

    def test_additive_shift_invariance(self):
        g = torch.Generator().manual_seed(1)
        logits = torch.randn(2, 4, 3, 3, generator=g)
        shift = torch.randn(2, 1, 3, 3, generator=g)
        assert torch.equal(pseudo_label(logits), pseudo_label(logits + shift))

    def test_strictly_increasing_transform_invariance(self):
        g = torch.Generator().manual_seed(2)
        logits = torch.randn(1, 4, 4, 4, generator=g)
        assert torch.equal(pseudo_label(logits), pseudo_label(3 * logits + 1))
        assert torch.equal(pseudo_label(logits), pseudo_label(logits.exp()))

    def test_ties_break_to_lowest_index(self):
        logits = torch.zeros(1, 3, 2, 2)
        assert torch.all(pseudo_label(logits) == 0)
        logits = torch.tensor([[[[0.0]], [[2.0]], [[2.0]]]])
        assert pseudo_label(logits).item() == 1

    def test_detached(self):
        logits = torch.randn(1, 2, 2, 2, requires_grad=True)
        assert not pseudo_label(logits).requires_grad


class TestCrossSupervision:
    def test_saturated_agreement_near_zero(self):
        target = torch.randint(0, 4, (1, 4, 4))
        onehot = torch.nn.functional.one_hot(target, 4).permute(0, 3, 1, 2).double()
        logits = onehot * 50 - 25
        semi1, semi2 = cross_supervision_loss(logits, logits.clone())
        assert semi1.item() < 1e-4 and semi2.item() < 1e-4

    def test_reduces_to_supervised_oracle(self):
        g = torch.Generator().manual_seed(4)
        logits = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64)
        semi1, _ = cross_supervision_loss(logits, logits.clone())
        expected = supervised_loss(logits, pseudo_label(logits))
        assert semi1.item() == pytest.approx(expected.item(), rel=1e-12)

    def test_no_gradient_into_pseudo_label_producer(self):
        g = torch.Generator().manual_seed(5)
        logits1 = torch.randn(1, 3, 3, 3, generator=g, requires_grad=True)
        logits2 = torch.randn(1, 3, 3, 3, generator=g, requires_grad=True)
        semi1, _ = cross_supervision_loss(logits1, logits2)
        g1, g2 = torch.autograd.grad(semi1, [logits1, logits2], allow_unused=True)
        assert g1 is not None and g1.abs().sum() > 0
        assert g2 is None

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            cross_supervision_loss(torch.randn(1, 3, 4, 4), torch.randn(1, 4, 4, 4))


class TestProjectFeatures:
    def test_constant_map_unit_norm(self):
        f = torch.full((1, 8, 16, 16), 3.0, dtype=torch.float64)
        p = project_features(f, grid=4)
        norms = p.norm(dim=1)
        assert (norms - 1).abs().max().item() < 1e-6

    def test_random_unit_norms(self):
        g = torch.Generator().manual_seed(0)
        f = torch.randn(2, 6, 12, 12, generator=g, dtype=torch.float64) + 0.5
        p = project_features(f, grid=3)
        assert (p.norm(dim=1) - 1).abs().max().item() < 1e-6

    def test_hand_pooled_single_channel(self):
        f = torch.tensor([[[[1.0, 1.0], [3.0, 3.0]]]], dtype=torch.float64)
        p = project_features(f, grid=1)
        # pooled mean 2.0, single channel normalizes to 1.0
        assert p.shape == (1, 1, 1, 1)
        assert p.item() == pytest.approx(1.0, rel=1e-12)

    def test_channel_pooling_matches_group_means(self):
        g = torch.Generator().manual_seed(1)
        f = torch.randn(1, 6, 4, 4, generator=g, dtype=torch.float64)
        p = project_features(f, grid=2, channels=2)
        pooled = torch.nn.functional.adaptive_avg_pool2d(f, 2)
        manual = torch.stack([pooled[:, :3].mean(1), pooled[:, 3:].mean(1)], dim=1)
        manual = manual / manual.norm(dim=1, keepdim=True).clamp_min(1e-12)
        assert torch.allclose(p, manual, rtol=1e-12)

    def test_zero_features_map_to_zero(self):
        p = project_features(torch.zeros(1, 3, 4, 4), grid=2)
        assert torch.all(p == 0)

    def test_grid_too_large_rejected(self):
        with pytest.raises(ValueError):
            project_features(torch.randn(1, 3, 4, 4), grid=5)

    def test_gradient_matches_fd(self):
        g = torch.Generator().manual_seed(2)
        f = (torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64) + 0.3
             ).requires_grad_(True)
        w = torch.randn(1, 3, 2, 2, generator=g, dtype=torch.float64)
        loss = (project_features(f, grid=2) * w).sum()
        (grad,) = torch.autograd.grad(loss, f)
        with torch.no_grad():
            fd = fd_gradient(lambda: (project_features(f, 2) * w).sum(), f)
        assert rel_err(grad, fd) < 1e-4


class TestContrastiveLoss:
    def test_identical_features_zero(self):
        p = torch.randn(2, 4, 3, 3)
        assert contrastive_loss(p, p.clone()).item() == 0.0

    def test_scale_invariance_through_projection(self):
        g = torch.Generator().manual_seed(3)
        f1 = torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64)
        f2 = torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64)
        base = contrastive_loss(project_features(f1, 2), project_features(f2, 2))
        scaled = contrastive_loss(project_features(5.5 * f1, 2),
                                  project_features(f2 * 0.03, 2))
        assert scaled.item() == pytest.approx(base.item(), rel=1e-9)

    def test_orthogonal_unit_vectors(self):
        p1 = torch.tensor([1.0, 0.0]).view(1, 2, 1, 1)
        p2 = torch.tensor([0.0, 1.0]).view(1, 2, 1, 1)
        assert contrastive_loss(p1, p2).item() == pytest.approx(1.0)

    def test_nonnegative(self):
        g = torch.Generator().manual_seed(4)
        a = torch.randn(2, 3, 4, 4, generator=g)
        b = torch.randn(2, 3, 4, 4, generator=g)
        assert contrastive_loss(a, b).item() >= 0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            contrastive_loss(torch.randn(1, 2, 2, 2), torch.randn(1, 3, 2, 2))

    def test_gradient_matches_fd(self):
        g = torch.Generator().manual_seed(5)
        a = torch.randn(1, 2, 3, 3, generator=g, dtype=torch.float64, requires_grad=True)
        b = torch.randn(1, 2, 3, 3, generator=g, dtype=torch.float64)
        (grad,) = torch.autograd.grad(contrastive_loss(a, b), a)
        with torch.no_grad():
            fd = fd_gradient(lambda: contrastive_loss(a, b), a)
        assert rel_err(grad, fd) < 1e-4


class TestTotalLoss:
    def test_all_zero(self):
        assert total_loss(0, 0, 0, 0, 0).total == 0

    def test_arithmetic(self):
        lb = total_loss(0.1, 0.2, 0.3, 0.4, 0.5)
        assert lb.total == pytest.approx(1.5, abs=1e-12)

    def test_breakdown_identity(self):
        g = torch.Generator().manual_seed(6)
        vals = torch.rand(5, generator=g).tolist()
        lb = total_loss(*vals)
        assert abs(lb.total - (lb.sup1 + lb.sup2 + lb.semi1 + lb.semi2 + lb.contra)) < 1e-9

    def test_nan_aborts_with_term_name(self):
        with pytest.raises(TrainingAbortError, match="semi2"):
            total_loss(0.1, 0.2, 0.3, float("nan"), 0.5)

    def test_accepts_tensors(self):
        lb = total_loss(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(0.5),
                        torch.tensor(0.25), torch.tensor(0.25))
        assert isinstance(lb, LossBreakdown)
        assert lb.total == 4.0
