"""Training objectives: supervised Dice+CE, cross pseudo-supervision,
and the pooled-feature contrastive consistency term.

All functions take softmax probabilities or raw logits as documented and
are pure; pseudo-labels are detached so no gradient reaches the network
that produced them.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

DICE_EPS = 1e-5
CE_CLAMP = 1e-12


class TrainingAbortError(RuntimeError):
    """Raised when a loss term goes non-finite; names the offending term."""


def _check_probs_target(probs: torch.Tensor, target: torch.Tensor):
    if probs.ndim != 4 or target.ndim != 3:
        raise ValueError("expected probs (B, C, H, W) and target (B, H, W)")
    if probs.shape[0] != target.shape[0] or probs.shape[2:] != target.shape[1:]:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs "
                         f"target {tuple(target.shape)}")
    if int(target.max()) >= probs.shape[1] or int(target.min()) < 0:
        raise ValueError("target labels outside class range")


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - mean over classes of the smoothed soft Dice coefficient."""
    _check_probs_target(probs, target)
    c = probs.shape[1]
    onehot = F.one_hot(target.long(), c).permute(0, 3, 1, 2).to(probs.dtype)
    inter = (probs * onehot).sum(dim=(0, 2, 3))
    denom = probs.sum(dim=(0, 2, 3)) + onehot.sum(dim=(0, 2, 3))
    dice = (2 * inter + eps) / (denom + eps)
    return 1 - dice.mean()


def cross_entropy_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of -log p(target class), with probability clamping."""
    _check_probs_target(probs, target)
    p = probs.gather(1, target.long().unsqueeze(1)).clamp_min(CE_CLAMP)
    return -p.log().mean()


def supervised_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Dice + CE on softmax probabilities against ground-truth labels."""
    probs = torch.softmax(logits, dim=1)
    return cross_entropy_loss(probs, target) + dice_loss(probs, target)


def pseudo_label(logits: torch.Tensor) -> torch.Tensor:
    """Detached per-pixel argmax; ties resolve to the lowest class index."""
    return torch.argmax(logits.detach(), dim=1)


def cross_supervision_loss(logits1: torch.Tensor, logits2: torch.Tensor):
    """Each network learns from the other's detached argmax.

    Returns (semi1, semi2): semi1 trains the first network against the
    second network's pseudo-labels and vice versa.
    """
    if logits1.shape != logits2.shape:
        raise ValueError(f"logit shapes differ: {tuple(logits1.shape)} vs "
                         f"{tuple(logits2.shape)}")
    semi1 = supervised_loss(logits1, pseudo_label(logits2))
    semi2 = supervised_loss(logits2, pseudo_label(logits1))
    return semi1, semi2


def project_features(features: torch.Tensor, grid: int,
                     channels: int | None = None) -> torch.Tensor:
    """Adaptive average pooling followed by channel L2 normalization.

    Pools (B, C, H, W) spatially to (grid, grid). When ``channels`` is
    given, the channel axis is adaptively average-pooled to that width as
    well, so feature maps of different depths become comparable. Zero
    vectors normalize to zero.
    """
    if features.ndim != 4:
        raise ValueError("expected features of shape (B, C, H, W)")
    if grid > features.shape[2] or grid > features.shape[3]:
        raise ValueError(f"grid {grid} larger than feature map "
                         f"{tuple(features.shape[2:])}")
    pooled = F.adaptive_avg_pool2d(features, grid)
    if channels is not None and channels != pooled.shape[1]:
        if channels > pooled.shape[1]:
            raise ValueError("cannot pool channels upward")
        pooled = F.adaptive_avg_pool3d(pooled.unsqueeze(1), (channels, grid, grid)).squeeze(1)
    norm = pooled.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return pooled / norm


def contrastive_loss(p1: torch.Tensor, p2: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between two projected feature grids."""
    if p1.shape != p2.shape:
        raise ValueError(f"projected shapes differ: {tuple(p1.shape)} vs "
                         f"{tuple(p2.shape)}")
    return ((p1 - p2) ** 2).mean()


@dataclass
class LossBreakdown:
    """The five loss terms and their exact unweighted sum."""

    sup1: float
    sup2: float
    semi1: float
    semi2: float
    contra: float
    total: float

    def as_dict(self) -> dict:
        return {"sup1": self.sup1, "sup2": self.sup2, "semi1": self.semi1,
                "semi2": self.semi2, "contra": self.contra, "total": self.total}


def total_loss(sup1, sup2, semi1, semi2, contra) -> LossBreakdown:
    """Sum the five terms with unit weights, aborting on non-finite values."""
    parts = {"sup1": sup1, "sup2": sup2, "semi1": semi1, "semi2": semi2,
             "contra": contra}
    vals = {}
    for name, v in parts.items():
        v = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not torch.isfinite(torch.tensor(v)):
            raise TrainingAbortError(f"loss term {name} is non-finite ({v})")
        vals[name] = v
    return LossBreakdown(total=sum(vals.values()), **vals)
