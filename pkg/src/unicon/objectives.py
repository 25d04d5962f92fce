"""Segmentation losses and the evaluation Dice score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import EmptyAgeGroup, ShapeError

CE_EPS = 1e-7


@dataclass
class LossConfig:
    alpha: float = 0.5
    dice_smooth: float = 1e-5
    ce_literal: bool = False

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.dice_smooth <= 0:
            raise ValueError(f"dice_smooth must be positive, got {self.dice_smooth}")


def dice_loss(probs: torch.Tensor, truth: torch.Tensor, smooth: float = 1e-5, dims=None) -> torch.Tensor:
    """1 - (2 sum(p g) + s) / (sum(p^2) + sum(g^2) + s).

    Sums run over ``dims`` (all elements when None); any remaining leading
    dimensions are averaged.
    """
    if probs.shape != truth.shape:
        raise ShapeError(f"probs {tuple(probs.shape)} and truth {tuple(truth.shape)} differ")
    truth = truth.to(probs.dtype)
    dims = tuple(range(probs.ndim)) if dims is None else dims
    inter = (probs * truth).sum(dim=dims)
    denom = (probs * probs).sum(dim=dims) + (truth * truth).sum(dim=dims)
    return (1 - (2 * inter + smooth) / (denom + smooth)).mean()


def ce_loss(probs: torch.Tensor, truth: torch.Tensor, literal: bool = False, eps: float = CE_EPS) -> torch.Tensor:
    """Mean negative log-probability of the true class.

    ``probs`` holds two-class probabilities with the class axis last
    ([N, 2]). With ``literal`` only foreground pixels contribute, i.e. the
    mean of ``-g log p_fg``.
    """
    if probs.shape[:-1] != truth.shape or probs.shape[-1] != 2:
        raise ShapeError(f"probs {tuple(probs.shape)} must be truth shape {tuple(truth.shape)} + (2,)")
    p = probs.clamp(eps, 1 - eps)
    if literal:
        g = truth.to(probs.dtype)
        return -(g * torch.log(p[..., 1])).mean()
    picked = p.gather(-1, truth.long().unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked).mean()


def segmentation_loss(probs: torch.Tensor, truth: torch.Tensor, cfg: LossConfig | None = None, dice_dims=None) -> torch.Tensor:
    """alpha * Dice + (1 - alpha) * CE on class-last probabilities [..., 2]."""
    cfg = cfg or LossConfig()
    loss = 0.0
    if cfg.alpha > 0:
        loss = cfg.alpha * dice_loss(probs[..., 1], truth, cfg.dice_smooth, dice_dims)
    if cfg.alpha < 1:
        loss = loss + (1 - cfg.alpha) * ce_loss(probs, truth, cfg.ce_literal)
    return loss


def loss_from_logits(logits: torch.Tensor, masks: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    """Batch loss for logits [B, 2, h, w] and masks [B, h, w]; Dice is per sample."""
    probs = logits.softmax(dim=1).permute(0, 2, 3, 1)
    return segmentation_loss(probs, masks, cfg, dice_dims=(1, 2))


def dice_score(pred: np.ndarray, truth: np.ndarray) -> float:
    """2|P & G| / (|P| + |G|), defined as 1 when both masks are empty."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, truth).sum()) / total


def aggregate_by_age(scores, num_ages: int | None = 4) -> dict:
    """Per-age mean of per-slice scores and the unweighted mean of those means.

    ``scores`` is an iterable of ``(age, value)``; the key may be any hashable
    group label. With ``num_ages`` set, every age in ``0..num_ages-1`` must be
    present; with ``None`` the average runs over whichever groups occur.
    Returns ``{group: mean, ..., "avg": mean_of_means}``.
    """
    groups: dict = {}
    for key, value in scores:
        groups.setdefault(key, []).append(float(value))
    if num_ages is not None:
        missing = [a for a in range(num_ages) if a not in groups]
        if missing:
            raise EmptyAgeGroup(f"no scores for age group(s) {missing}")
        keys = list(range(num_ages))
    else:
        if not groups:
            raise EmptyAgeGroup("no scores to aggregate")
        keys = sorted(groups)
    out = {k: float(np.mean(groups[k])) for k in keys}
    out["avg"] = float(np.mean([out[k] for k in keys]))
    return out
