"""Supervised losses for the current step: objectness, focal classification, auxiliary."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ShapeError
from .matching import MatchResult


@dataclass(frozen=True)
class LossConfig:
    focal_gamma: float = 2.0
    prob_eps: float = 1e-7
    dice_eps: float = 1.0


def _clamp(p: Tensor, eps: float) -> Tensor:
    return p.clamp(eps, 1 - eps)


def dice_loss(m: Tensor, g: Tensor, dice_eps: float = 1.0) -> Tensor:
    m, g = m.flatten(-2), g.flatten(-2)
    return 1 - (2 * (m * g).sum(-1) + dice_eps) / (m.sum(-1) + g.sum(-1) + dice_eps)


def mask_loss(m: Tensor, g: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean pixel BCE plus Dice over the trailing [H, W] dims; ``g`` may be soft."""
    if m.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {tuple(m.shape)} vs {tuple(g.shape)}")
    g = g.to(m.dtype)
    mc = _clamp(m, cfg.prob_eps)
    bce = -(g * mc.log() + (1 - g) * (1 - mc).log()).flatten(-2).mean(-1)
    return bce + dice_loss(m, g, cfg.dice_eps)


def objectness_loss(scores: Tensor, masks: Tensor, match: MatchResult, gt_masks: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """Objectness loss of one image: -log s for real slots plus their mask loss, -log(1-s) for padding slots."""
    s = _clamp(scores, cfg.prob_eps)
    matched = torch.as_tensor(match.matched_indices, dtype=torch.long)
    unmatched = torch.as_tensor(match.unmatched_indices, dtype=torch.long)
    loss = -(1 - s[unmatched]).log().sum()
    if len(matched):
        loss = loss - s[matched].log().sum() + mask_loss(masks[matched], gt_masks, cfg).sum()
    return loss


def focal_class_loss(logits: Tensor, targets: Tensor, gamma: float = 2.0, normalizer: int | None = None) -> Tensor:
    """Sigmoid focal loss over the current-step classes.

    logits: [M, |C^t|]; targets: [M] index into the current-step classes, or -1 when the
    GT class lies outside C^t (all entries act as negatives).
    """
    m = logits.shape[0]
    if m == 0:
        return logits.sum() * 0.0
    onehot = F.one_hot(targets.clamp(min=0), logits.shape[1]).to(logits.dtype)
    onehot = onehot * (targets >= 0).to(logits.dtype)[:, None]
    logp, log1mp = F.logsigmoid(logits), F.logsigmoid(-logits)
    p = logits.sigmoid()
    pos = onehot * (1 - p).pow(gamma) * logp
    neg = (1 - onehot) * p.pow(gamma) * log1mp
    return -(pos + neg).sum() / (normalizer or m)


def aux_class_loss(logits: Tensor, targets: Tensor, step: int) -> Tensor:
    """Softmax CE over [merged-old, new_1..new_k] slots; zero at the first step."""
    if step <= 1 or logits.shape[0] == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(logits, targets)


def segmentation_loss(obj: Tensor, cls: Tensor) -> Tensor:
    return obj + cls
