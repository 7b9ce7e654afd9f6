"""Distillation against the frozen previous-step model, and total-loss composition."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor

from .losses_seg import LossConfig, mask_loss

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-8
TERMS = ("obj", "cls", "os_kd", "mask_kd", "pe_kd", "cls_kd_u", "cls_kd_m", "aux")


@dataclass(frozen=True)
class KDConfig:
    beta: float = 2.0
    alpha: float = 0.8
    forward_kl: bool = False  # KL(teacher || student) instead of KL(student || teacher)


@dataclass(frozen=True)
class LossWeights:
    weights: dict = field(default_factory=lambda: {k: 1.0 for k in TERMS})
    enabled: dict = field(default_factory=lambda: {k: True for k in TERMS})

    def weight(self, term: str) -> float:
        return float(self.weights.get(term, 1.0)) if self.enabled.get(term, True) else 0.0

    def on(self, term: str) -> bool:
        return self.weight(term) > 0


def kd_objectness_score(s: Tensor, s_teacher: Tensor, eps: float = 1e-7) -> Tensor:
    """Binary KL(teacher || student) per unmatched proposal, averaged."""
    if s.numel() == 0:
        return s.sum() * 0.0
    sc = s.clamp(eps, 1 - eps)
    t = s_teacher.to(s.dtype)
    kl = torch.xlogy(t, t) - t * sc.log() + torch.xlogy(1 - t, 1 - t) - (1 - t) * (1 - sc).log()
    return kl.mean()


def objectness_weights(s_teacher: Tensor, beta: float) -> Tensor:
    w = s_teacher.pow(beta)
    total = w.sum()
    if total <= 0:
        return torch.zeros_like(w)
    return w / total


def kd_mask(m: Tensor, m_teacher: Tensor, s_teacher: Tensor, cfg: KDConfig = KDConfig(), loss_cfg: LossConfig = LossConfig()) -> tuple[Tensor, Tensor]:
    """Objectness-weighted mask loss against the teacher's soft masks.

    Returns (loss, floor): ``floor`` is the same weighted sum with the student replaced
    by the teacher, the value reached at perfect distillation.
    """
    if m.shape[0] == 0:
        z = m.sum() * 0.0
        return z, z.detach()
    w = objectness_weights(s_teacher.to(m.dtype), cfg.beta)
    if float(w.sum()) == 0.0:
        log.warning("all teacher objectness weights are zero; mask distillation skipped")
        z = m.sum() * 0.0
        return z, z.detach()
    target = m_teacher.to(m.dtype)
    loss = (w * mask_loss(m, target, loss_cfg)).sum()
    floor = (w * mask_loss(target, target, loss_cfg)).sum()
    return loss, floor.detach()


def kd_position(e: Tensor, e_teacher: Tensor, s_teacher: Tensor, cfg: KDConfig = KDConfig()) -> Tensor:
    """Objectness-weighted (1 - cosine) between student and teacher embeddings."""
    if e.shape[0] == 0:
        return e.sum() * 0.0
    w = objectness_weights(s_teacher.to(e.dtype), cfg.beta)
    t = e_teacher.to(e.dtype)
    ne, nt = e.norm(dim=-1), t.norm(dim=-1)
    ok = (ne > NORM_FLOOR) & (nt > NORM_FLOOR)
    if not bool(ok.all()):
        log.warning("%d embedding pair(s) below norm floor treated as orthogonal", int((~ok).sum()))
    cos = (e * t).sum(-1) / (ne.clamp(min=NORM_FLOOR) * nt.clamp(min=NORM_FLOOR))
    cos = torch.where(ok, cos, torch.zeros_like(cos))
    return (w * (1 - cos)).sum()


def select_high_objectness(s_teacher: Tensor, alpha: float) -> Tensor:
    return torch.nonzero(s_teacher > alpha, as_tuple=False).flatten()


def class_kl(student_logits: Tensor, teacher_logits: Tensor, forward: bool = False) -> Tensor:
    """Mean over rows of KL(p || p~) with p, p~ softmax over old classes (reverse order if ``forward``)."""
    if student_logits.shape[0] == 0 or student_logits.shape[1] == 0:
        return student_logits.sum() * 0.0
    logp = F.log_softmax(student_logits, dim=-1)
    logq = F.log_softmax(teacher_logits.to(student_logits.dtype), dim=-1)
    if forward:
        kl = (logq.exp() * (logq - logp)).sum(-1)
    else:
        kl = (logp.exp() * (logp - logq)).sum(-1)
    return kl.mean()


def kd_class_unmatched(student, teacher, e_h: Tensor, e_teacher_h: Tensor, pixels_s: Tensor, pixels_t: Tensor, cfg: KDConfig = KDConfig()) -> Tensor:
    """Student decodes its high-objectness unmatched embeddings, teacher decodes its own."""
    old = list(range(teacher.num_tasks))
    if e_h.shape[0] == 0 or not old:
        return e_h.sum() * 0.0
    z = student.classify(e_h, pixels_s, old).logits
    with torch.no_grad():
        z_t = teacher.classify(e_teacher_h, pixels_t, old).logits
    return class_kl(z, z_t, cfg.forward_kl)


def kd_class_matched(student_old_logits: Tensor, teacher, e_m: Tensor, pixels_t: Tensor, cfg: KDConfig = KDConfig()) -> Tensor:
    """Teacher re-decodes the student's matched embeddings; KL over old-class softmax."""
    old = list(range(teacher.num_tasks))
    if e_m.shape[0] == 0 or not old:
        return e_m.sum() * 0.0
    with torch.no_grad():
        z_t = teacher.classify(e_m.detach(), pixels_t, old).logits
    return class_kl(student_old_logits, z_t, cfg.forward_kl)


def total_loss(components: dict[str, Tensor], weights: LossWeights = LossWeights()) -> Tensor:
    total = None
    for name in TERMS:
        w = weights.weight(name)
        if name not in components or not w:
            continue
        term = components[name] * w
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total
