"""Continual training loop: teacher snapshots, task expansion, optimization, evaluation."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Sample, TaskSchedule, filter_step
from .errors import NumericError, ScheduleError, VersionError
from .evaluation import MetricReport, continual_metrics, miou, panoptic_inference
from .losses_kd import (
    TERMS,
    KDConfig,
    LossWeights,
    kd_class_matched,
    kd_class_unmatched,
    kd_mask,
    kd_objectness_score,
    kd_position,
    select_high_objectness,
    total_loss,
)
from .losses_seg import LossConfig, aux_class_loss, focal_class_loss, objectness_loss
from .matching import MatchConfig, match
from .model import ModelConfig, Segmenter

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    base_iters: int = 2000
    inc_iters_per_class: int = 300
    batch_size: int = 8
    lr: float = 1e-4
    inc_lr_factor: float = 0.5
    weight_decay: float = 0.05
    poly_power: float = 0.9
    grad_clip: float = 0.0
    flip: bool = True
    protocol: str = "overlapped"
    eval_alpha: float = 0.8
    log_every: int = 50
    seed: int = 0

    def iterations(self, t: int, num_new: int) -> int:
        return self.base_iters if t == 1 else self.inc_iters_per_class * num_new


@dataclass
class LossReport:
    step: int
    iteration: int
    lr: float
    terms: dict[str, float]
    mask_kd_floor: float = 0.0
    total: float = 0.0

    def record(self) -> dict:
        d = {"step": self.step, "iteration": self.iteration, "lr": self.lr, "total": self.total}
        d.update({k: self.terms.get(k, 0.0) for k in TERMS})
        d["mask_kd_floor"] = self.mask_kd_floor
        return d


@dataclass
class ContinualState:
    model: Segmenter
    schedule: TaskSchedule
    step: int = 0
    teacher: Segmenter | None = None
    history: list[MetricReport] = field(default_factory=list)


@dataclass
class Objective:
    """Everything that shapes the loss: toggles, weights and per-term settings."""

    weights: LossWeights = field(default_factory=LossWeights)
    loss: LossConfig = field(default_factory=LossConfig)
    kd: KDConfig = field(default_factory=KDConfig)
    matching: MatchConfig = field(default_factory=MatchConfig)
    focal: bool = True
    # teacher-confident unmatched proposals become all-negative rows of the current-task loss
    old_negatives: bool = False
    # "seen": matched proposals also train the earlier classifiers, so new GT is an old-class negative
    cls_scope: str = "current"
    # with "seen" and cls_kd_u on: old classifiers fit the teacher's sigmoids on those proposals too
    old_pseudo: bool = False


def _seed_for(seed: int, *counters: int) -> int:
    return int(np.random.SeedSequence([seed, *counters]).generate_state(1)[0])


def expand_task(state: ContinualState, t: int, seed: int = 0) -> ContinualState:
    if t != state.step + 1 or t > state.schedule.steps:
        raise ScheduleError(f"cannot expand to step {t} from step {state.step} (T = {state.schedule.steps})")
    gen = torch.Generator().manual_seed(_seed_for(seed, t, 7))
    state.model.add_task(len(state.schedule.classes_at(t)), generator=gen)
    state.step = t
    return state


def snapshot_teacher(state: ContinualState) -> ContinualState:
    """Freeze a copy of the current model; a no-op before the first step has been learned."""
    if state.step >= 1:
        state.teacher = state.model.frozen_copy()
    return state


def batch_tensors(samples: Sequence[Sample]):
    images = torch.from_numpy(np.stack([s.image for s in samples]))
    masks = [torch.from_numpy(s.masks) for s in samples]
    classes = [s.classes for s in samples]
    return images, masks, classes


def _old_targets(gt_cls, schedule: TaskSchedule, step: int) -> torch.Tensor:
    pos = {c: i for i, c in enumerate(schedule.classes_upto(step - 1))}
    return torch.tensor([pos.get(int(c), -1) for c in gt_cls], dtype=torch.long)


def compute_losses(model: Segmenter, teacher: Segmenter | None, images, gt_masks, gt_classes, step: int,
                   schedule: TaskSchedule, obj: Objective) -> tuple[dict, dict]:
    """Every loss term of one batch; disabled terms are skipped and reported as 0."""
    w = obj.weights
    current = list(schedule.classes_at(step))
    pos_in_current = {c: i for i, c in enumerate(current)}
    pixels, s1 = model(images)
    level = model.class_level(pixels)
    b = images.shape[0]
    low = s1.low_res_logits.detach().sigmoid()
    props = s1.masks.detach() if obj.matching.full_resolution else low
    use_negatives = obj.old_negatives and w.on("cls")
    need_teacher = teacher is not None and step >= 2 and (use_negatives or obj.matching.teacher_guard > 0 or any(
        w.on(k) for k in ("os_kd", "mask_kd", "pe_kd", "cls_kd_u", "cls_kd_m", "aux")))
    if need_teacher:
        with torch.no_grad():
            t_pixels, t_s1 = teacher(images)
            t_level = teacher.class_level(t_pixels)
        t_props = t_s1.masks if obj.matching.full_resolution else t_s1.low_res_logits.sigmoid()
        guards = [(t_props[i], t_s1.scores[i]) for i in range(b)]
    else:
        guards = [None] * b
    matches = [match(props[i], gt_masks[i], obj.matching, s1.scores[i].detach(), guards[i]) for i in range(b)]
    zero = s1.scores.sum() * 0.0
    comps: dict = {k: zero for k in TERMS}
    extras: dict = {"matches": matches, "mask_kd_floor": 0.0}

    comps["obj"] = torch.stack([
        objectness_loss(s1.scores[i], s1.masks[i], matches[i], gt_masks[i].to(s1.masks.dtype), obj.loss)
        for i in range(b)
    ]).mean()

    b_idx = np.concatenate([np.full(len(m.matched_indices), i) for i, m in enumerate(matches)]).astype(np.int64)
    q_idx = np.concatenate([m.matched_indices for m in matches]).astype(np.int64)
    gt_cls = np.concatenate([np.asarray(c, dtype=np.int64) for c in gt_classes]) if b else np.zeros(0, np.int64)
    b_idx_t, q_idx_t = torch.from_numpy(b_idx), torch.from_numpy(q_idx)
    emb_m = s1.embeddings[b_idx_t, q_idx_t]
    pix_m = level[b_idx_t]
    sizes = model.task_sizes
    old_width = sum(sizes[: step - 1])
    pred = model.classify(emb_m, pix_m)
    cur_logits = pred.logits[:, old_width: old_width + sizes[step - 1]]
    cur_target = torch.tensor([pos_in_current.get(int(c), -1) for c in gt_cls], dtype=torch.long)
    gamma = obj.loss.focal_gamma if obj.focal else 0.0
    if w.on("cls"):
        comps["cls"] = focal_class_loss(cur_logits, cur_target, gamma)
    seen = w.on("cls") and obj.cls_scope == "seen" and old_width > 0
    if seen:
        old_cls = focal_class_loss(pred.logits[:, :old_width], _old_targets(gt_cls, schedule, step), gamma)
        comps["cls"] = comps["cls"] + old_cls

    if not need_teacher:
        return comps, extras

    os_terms, mask_terms, floors, pe_terms = [], [], [], []
    hb, hq = [], []
    for i, m in enumerate(matches):
        u = torch.from_numpy(m.unmatched_indices.astype(np.int64))
        s_t = t_s1.scores[i, u]
        if w.on("os_kd"):
            os_terms.append(kd_objectness_score(s1.scores[i, u], s_t, obj.loss.prob_eps))
        if w.on("mask_kd"):
            loss_i, floor_i = kd_mask(s1.masks[i, u], t_s1.masks[i, u], s_t, obj.kd, obj.loss)
            mask_terms.append(loss_i)
            floors.append(float(floor_i))
        if w.on("pe_kd"):
            pe_terms.append(kd_position(s1.embeddings[i, u], t_s1.embeddings[i, u], s_t, obj.kd))
        h = u[select_high_objectness(s_t, obj.kd.alpha)]
        hb.extend([i] * len(h))
        hq.extend(h.tolist())
    if os_terms:
        comps["os_kd"] = torch.stack(os_terms).mean()
    if mask_terms:
        comps["mask_kd"] = torch.stack(mask_terms).mean()
        extras["mask_kd_floor"] = float(np.mean(floors))
    if pe_terms:
        comps["pe_kd"] = torch.stack(pe_terms).mean()

    hb_t = torch.as_tensor(hb, dtype=torch.long)
    hq_t = torch.as_tensor(hq, dtype=torch.long)
    e_h = s1.embeddings[hb_t, hq_t]
    extras["num_high"] = len(hb)
    if use_negatives and len(hb):
        neg = model.classify(e_h, level[hb_t], [step - 1]).logits
        logits = torch.cat([cur_logits, neg])
        targets = torch.cat([cur_target, torch.full((len(hb),), -1, dtype=torch.long)])
        comps["cls"] = focal_class_loss(logits, targets, gamma, normalizer=max(len(cur_target), 1))
        if seen:
            comps["cls"] = comps["cls"] + old_cls
    if seen and obj.old_pseudo and w.on("cls_kd_u") and len(hb):
        with torch.no_grad():
            target = teacher.classify(t_s1.embeddings[hb_t, hq_t], t_level[hb_t]).logits.sigmoid()
        pseudo = model.classify(e_h, level[hb_t], list(range(step - 1))).logits
        soft = F.binary_cross_entropy_with_logits(pseudo, target, reduction="sum") / max(len(cur_target), 1)
        comps["cls"] = comps["cls"] + soft
    if w.on("cls_kd_u"):
        comps["cls_kd_u"] = kd_class_unmatched(model, teacher, e_h, t_s1.embeddings[hb_t, hq_t], level[hb_t], t_level[hb_t], obj.kd)
    if w.on("cls_kd_m"):
        comps["cls_kd_m"] = kd_class_matched(pred.logits[:, :old_width], teacher, emb_m, t_level[b_idx_t], obj.kd)
    if w.on("aux") and model.aux_head is not None:
        k_new = pred.task_embeddings[:, step - 1]
        k_old = model.task_embeddings(e_h, level[hb_t], [step - 1])[:, 0] if len(hb) else k_new[:0]
        k = torch.cat([k_new, k_old])
        target = torch.cat([cur_target + 1, torch.zeros(len(hb), dtype=torch.long)])
        comps["aux"] = aux_class_loss(model.aux_head(k), target, step)
    return comps, extras


def poly_lr(base: float, it: int, total: int, power: float) -> float:
    return base * (1 - it / max(total, 1)) ** power


def train_step(model: Segmenter, teacher: Segmenter | None, optimizer, samples: Sequence[Sample], step: int,
               schedule: TaskSchedule, obj: Objective, lr: float, iteration: int = 0, grad_clip: float = 0.0,
               dump_dir: str | None = None) -> LossReport:
    for g in optimizer.param_groups:
        g["lr"] = lr
    images, masks, classes = batch_tensors(samples)
    comps, extras = compute_losses(model, teacher, images, masks, classes, step, schedule, obj)
    loss = total_loss(comps, obj.weights)
    if not torch.isfinite(loss):
        path = None
        if dump_dir:
            path = os.path.join(dump_dir, f"nan_batch_step{step}_it{iteration}.npz")
            np.savez(path, images=images.numpy(), classes=np.concatenate(classes))
        terms = {k: float(v.detach()) for k, v in comps.items()}
        raise NumericError(f"non-finite loss at step {step} iteration {iteration}: {terms} (batch dump: {path})")
    optimizer.zero_grad(set_to_none=True)
    if loss.requires_grad:
        loss.backward()
        if grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
        optimizer.step()
    return LossReport(step, iteration, lr, {k: float(v.detach()) for k, v in comps.items()}, extras["mask_kd_floor"], float(loss.detach()))


def make_optimizer(model: Segmenter, lr: float, weight_decay: float):
    return torch.optim.AdamW([p for p in model.parameters() if p.requires_grad], lr=lr, weight_decay=weight_decay)


@torch.no_grad()
def predict(model: Segmenter, images: torch.Tensor, alpha: float) -> tuple[list[np.ndarray], list]:
    """Semantic label maps plus raw (masks, scores) per image."""
    model.eval()
    pixels, s1 = model(images)
    level = model.class_level(pixels)
    maps, raw = [], []
    for i in range(images.shape[0]):
        keep = torch.nonzero(s1.scores[i] > alpha).flatten()
        probs = np.zeros((s1.scores.shape[1], sum(model.task_sizes)))
        if len(keep):
            p = model.classify(s1.embeddings[i, keep], level[i].expand(len(keep), -1, -1, -1)).probs
            probs[keep.numpy()] = p.double().numpy()
        maps.append(panoptic_inference(s1.scores[i].double().numpy(), s1.masks[i].double().numpy(), probs, alpha))
        raw.append((s1.masks[i].numpy(), s1.scores[i].numpy()))
    model.train()
    return maps, raw


def evaluate(model: Segmenter, samples: Sequence[Sample], classes: Sequence[int], step: int, alpha: float = 0.8,
             batch_size: int = 25, include_background: bool = False) -> MetricReport:
    preds, gts = [], []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i: i + batch_size]
        images = torch.from_numpy(np.stack([s.image for s in chunk]))
        maps, _ = predict(model, images, alpha)
        preds.extend(maps)
        gts.extend(s.restrict(classes).label_map() for s in chunk)
    return miou(preds, gts, classes, step, include_background)


def proposals(model: Segmenter, samples: Sequence[Sample], batch_size: int = 25) -> list:
    out = []
    for i in range(0, len(samples), batch_size):
        images = torch.from_numpy(np.stack([s.image for s in samples[i: i + batch_size]]))
        out.extend(predict(model, images, 1.1)[1])
    return out


class BatchSampler:
    """Epoch-wise shuffling with per-sample flips, all drawn from one generator per step."""

    def __init__(self, samples: Sequence[Sample], batch_size: int, seed: int, step: int, flip: bool):
        self.samples = list(samples)
        self.batch_size = batch_size
        self.flip = flip
        self.rng = np.random.default_rng([seed, step, 1])
        self.order: list[int] = []

    def next(self) -> list[Sample]:
        out = []
        while len(out) < self.batch_size:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.samples)))
            s = self.samples[self.order.pop()]
            if self.flip and self.rng.random() < 0.5:
                s = s.flipped()
            out.append(s)
        return out


@dataclass
class RunReport:
    steps: list[MetricReport]
    final: MetricReport
    schedule: TaskSchedule

    def to_dict(self) -> dict:
        return {
            "schedule": self.schedule.to_dict(),
            "steps": [r.to_dict() for r in self.steps],
            "final": self.final.to_dict(),
        }


def run_continual(model_cfg: ModelConfig, train_cfg: TrainConfig, objective: Objective, schedule: TaskSchedule,
                  train: Sequence[Sample], evals: Sequence[Sample], out_dir: str | None = None,
                  resume: str | None = None, stop_after: int | None = None,
                  on_step: Callable[[ContinualState], None] | None = None) -> tuple[RunReport, ContinualState]:
    """Learn steps 1..T, evaluating on the full eval split over C^{1:t} after each."""
    torch.manual_seed(_seed_for(train_cfg.seed, 0))
    if resume:
        model, ck_schedule, done, meta = load_checkpoint(resume, model_cfg)
        if ck_schedule != schedule:
            raise VersionError(f"checkpoint schedule {ck_schedule.name} differs from run schedule {schedule.name}")
        state = ContinualState(model, schedule, done)
        state.history = [MetricReport.from_dict(d) for d in meta["extra"].get("history", [])]
    else:
        state = ContinualState(Segmenter(model_cfg), schedule)
    log_file = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_file = open(os.path.join(out_dir, "train_log.jsonl"), "a" if resume else "w")
    last = schedule.steps if stop_after is None else min(stop_after, schedule.steps)
    try:
        for t in range(state.step + 1, last + 1):
            snapshot_teacher(state)
            expand_task(state, t, train_cfg.seed)
            data = filter_step(train, schedule, t, train_cfg.protocol)
            if not data:
                raise ScheduleError(f"no training images for step {t}")
            iters = train_cfg.iterations(t, len(schedule.classes_at(t)))
            lr0 = train_cfg.lr * (1.0 if t == 1 else train_cfg.inc_lr_factor)
            opt = make_optimizer(state.model, lr0, train_cfg.weight_decay)
            sampler = BatchSampler(data, train_cfg.batch_size, train_cfg.seed, t, train_cfg.flip)
            started = time.time()
            for it in range(iters):
                lr = poly_lr(lr0, it, iters, train_cfg.poly_power)
                rep = train_step(state.model, state.teacher, opt, sampler.next(), t, schedule, objective, lr, it,
                                 train_cfg.grad_clip, out_dir)
                if log_file and (it % train_cfg.log_every == 0 or it == iters - 1):
                    log_file.write(json.dumps(rep.record()) + "\n")
                    log_file.flush()
                if it % max(train_cfg.log_every, 1) == 0:
                    log.info("step %d it %d/%d loss %.4f (%.1fs)", t, it, iters, rep.total, time.time() - started)
            report = evaluate(state.model, evals, schedule.classes_upto(t), t, train_cfg.eval_alpha)
            state.history.append(continual_metrics(state.history + [report], schedule))
            state.teacher = None
            if out_dir:
                save_checkpoint(os.path.join(out_dir, f"step_{t}.ckpt"), state.model, schedule, t,
                                {"history": [r.to_dict() for r in state.history]})
            if on_step:
                on_step(state)
    finally:
        if log_file:
            log_file.close()
    final = state.history[-1] if state.history else MetricReport(step=0, per_class_iou={})
    return RunReport(list(state.history), final, schedule), state
