"""Training objectives: soft Dice, cross-entropy and the composite stage losses."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

ANATOMY_CHANNELS = 3  # MYO, LV, RV
PATHOLOGY_CLASSES = 3  # BG, EDEMA, SCAR
DEFAULT_EPS = 1e-5


@dataclass(frozen=True)
class LossConfig:
    lambda_balance: float = 0.1
    smooth_eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.lambda_balance < 0:
            raise ValueError("lambda_balance must be non-negative")
        if self.smooth_eps <= 0:
            raise ValueError("smooth_eps must be positive")


def soft_dice(pred: torch.Tensor, target: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Smoothed Dice ``(2|a.b| + eps) / (|a| + |b| + eps)``.

    Inputs of shape ``(H, W)`` give a scalar; a leading batch axis ``(B, H, W)`` is
    reduced per sample and then averaged.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    target = target.to(pred.dtype)
    if pred.dim() <= 2:
        inter = (pred * target).sum()
        return (2 * inter + eps) / (pred.sum() + target.sum() + eps)
    dims = tuple(range(1, pred.dim()))
    inter = (pred * target).sum(dims)
    return ((2 * inter + eps) / (pred.sum(dims) + target.sum(dims) + eps)).mean()


def _class_mean_dice(pred: torch.Tensor, target: torch.Tensor, eps: float) -> torch.Tensor:
    # pred/target: (B, C, H, W)
    return torch.stack([soft_dice(pred[:, c], target[:, c], eps) for c in range(pred.shape[1])]).mean()


def loss_reg(warped_ana_labels: dict, cri_ana_label: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Registration loss: minus the sum over moving sequences of the class-mean Dice.

    Labels are ``(B, 3, H, W)`` soft one-hot maps of MYO, LV, RV.
    """
    total = 0.0
    for name, warped in warped_ana_labels.items():
        if warped.shape[1] != ANATOMY_CHANNELS or cri_ana_label.shape[1] != ANATOMY_CHANNELS:
            raise ValueError(f"{name}: expected {ANATOMY_CHANNELS} anatomy channels, got {warped.shape[1]}")
        total = total - _class_mean_dice(warped, cri_ana_label, eps)
    return total


def loss_myo(pred_myo_cri: torch.Tensor, gold_myo_cri: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    return -soft_dice(pred_myo_cri, gold_myo_cri, eps)


def loss_cons(pred_myo: dict, gold_myo: dict, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Constraint loss, each sequence scored in its own (unwarped) frame."""
    total = 0.0
    for name, pred in pred_myo.items():
        total = total - soft_dice(pred, gold_myo[name], eps)
    return total


def loss_hybrid(reg, cons, myo, cfg: LossConfig = LossConfig()):
    return reg + cfg.lambda_balance * (cons + myo)


def loss_pathology(pred_logits: torch.Tensor, gold: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """``-Dice + CE`` over the merged pathology label.

    ``pred_logits``: ``(B, 3, H, W)`` over {BG, EDEMA, SCAR}; ``gold``: ``(B, H, W)``
    class indices in the same order. Dice is averaged over the two foreground classes,
    cross-entropy over every pixel and class.
    """
    gold = gold.long()
    if gold.numel() and (gold.min() < 0 or gold.max() >= PATHOLOGY_CLASSES):
        raise ValueError("gold pathology label contains undeclared classes")
    probs = torch.softmax(pred_logits, dim=1)
    onehot = F.one_hot(gold, PATHOLOGY_CLASSES).movedim(-1, 1).to(probs.dtype)
    dice = _class_mean_dice(probs[:, 1:], onehot[:, 1:], eps)
    ce = F.cross_entropy(pred_logits, gold)
    return -dice + ce
