"""Synthetic shapes corpus, continual task schedules and per-step filtering."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, ScheduleError

BACKGROUND = -1
SHAPE_KINDS = ("disk", "square", "triangle", "ring", "cross", "diamond", "frame", "hbar")
PROTOCOLS = ("sequential", "disjoint", "overlapped")
MIN_VISIBLE_PIXELS = 16


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 8
    image_size: int = 64
    shapes_per_image: tuple[int, int] = (1, 3)
    samples_train: int = 500
    samples_eval: int = 100
    rng_seed: int = 0

    def validate(self) -> None:
        lo, hi = self.shapes_per_image
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        if lo < 1 or hi < lo:
            raise ConfigError(f"shapes_per_image must satisfy 1 <= min <= max, got {self.shapes_per_image}")
        if self.samples_train < 0 or self.samples_eval < 0:
            raise ConfigError("sample counts must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {k: d[k] for k in d if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown dataset field(s): {sorted(unknown)}")
        if "shapes_per_image" in known:
            known["shapes_per_image"] = tuple(known["shapes_per_image"])
        spec = cls(**known)
        spec.validate()
        return spec


@dataclass
class Sample:
    """One image with its disjoint binary GT masks; background is never a target."""

    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    masks: np.ndarray  # bool [M, H, W]
    classes: np.ndarray  # int64 [M]

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool).reshape(-1, *self.image.shape[1:])
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)

    @property
    def label_set(self) -> set[int]:
        return set(int(c) for c in self.classes)

    def label_map(self) -> np.ndarray:
        out = np.full(self.image.shape[1:], BACKGROUND, dtype=np.int64)
        for m, c in zip(self.masks, self.classes):
            out[m] = c
        return out

    def restrict(self, allowed: Iterable[int]) -> "Sample":
        allowed = set(allowed)
        keep = np.array([int(c) in allowed for c in self.classes], dtype=bool)
        return Sample(self.image, self.masks[keep], self.classes[keep])

    def flipped(self) -> "Sample":
        return Sample(self.image[:, :, ::-1].copy(), self.masks[:, :, ::-1].copy(), self.classes.copy())


def class_color(c: int) -> np.ndarray:
    """Fill colour for a class; hue walks the golden ratio, intensity alternates."""
    hue = (c * 0.61803398875 + 0.05) % 1.0
    value = (0.95, 0.65)[(c // len(SHAPE_KINDS)) % 2]
    sat = 0.85
    i = int(hue * 6)
    f = hue * 6 - i
    p, q, t = value * (1 - sat), value * (1 - f * sat), value * (1 - (1 - f) * sat)
    rgb = [(value, t, p), (q, value, p), (p, value, t), (p, q, value), (t, p, value), (value, p, q)][i % 6]
    return np.asarray(rgb, dtype=np.float64)


def shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    if kind == "triangle":
        # apex up, base at cy + 0.7r
        top, base = cy - r, cy + 0.7 * r
        frac = (yy - top) / (base - top)
        return (yy >= top) & (yy <= base) & (np.abs(dx) <= frac * r)
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        w = 0.35 * r
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "frame":
        outer = (np.abs(dy) <= 0.85 * r) & (np.abs(dx) <= 0.85 * r)
        inner = (np.abs(dy) <= 0.45 * r) & (np.abs(dx) <= 0.45 * r)
        return outer & ~inner
    if kind == "hbar":
        return (np.abs(dy) <= 0.4 * r) & (np.abs(dx) <= 1.1 * r)
    raise ValueError(f"unknown shape kind {kind!r}")


def _render_sample(spec: SynthSpec, split: int, index: int, first_class: int) -> Sample:
    rng = np.random.default_rng([spec.rng_seed, split, index])
    size = spec.image_size
    lo, hi = spec.shapes_per_image
    count = int(rng.integers(lo, hi + 1))
    classes = [int(c) for c in rng.integers(0, spec.num_classes, size=count - 1)] + [first_class]
    image = np.empty((3, size, size))
    image[:] = rng.uniform(0.05, 0.2)
    image += rng.normal(0.0, 0.03, size=image.shape)
    owner = np.full((size, size), -1, dtype=np.int64)
    r_lo, r_hi = size / 8, size * 7 / 32
    for slot, c in enumerate(classes):
        r = rng.uniform(r_lo, r_hi)
        cy, cx = rng.uniform(r * 0.6, size - r * 0.6, size=2)
        m = shape_mask(SHAPE_KINDS[c % len(SHAPE_KINDS)], size, cy, cx, r)
        owner[m] = slot
        color = class_color(c)[:, None] + rng.normal(0.0, 0.04, size=(3, int(m.sum())))
        image[:, m] = color
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    masks, labels = [], []
    for slot, c in enumerate(classes):
        m = owner == slot
        if m.sum() >= MIN_VISIBLE_PIXELS:
            masks.append(m)
            labels.append(c)
    return Sample(image.astype(np.float32), np.stack(masks), np.asarray(labels))


def generate_dataset(spec: SynthSpec) -> tuple[list[Sample], list[Sample]]:
    """Deterministic train/eval corpora.

    The topmost shape of sample ``i`` has class ``i % num_classes`` so every class
    appears in at least ``samples // num_classes`` images of each split.
    """
    spec.validate()
    train = [_render_sample(spec, 0, i, i % spec.num_classes) for i in range(spec.samples_train)]
    evals = [_render_sample(spec, 1, i, i % spec.num_classes) for i in range(spec.samples_eval)]
    return train, evals


def class_counts(samples: Sequence[Sample], num_classes: int) -> list[int]:
    counts = [0] * num_classes
    for s in samples:
        for c in s.label_set:
            counts[c] += 1
    return counts


@dataclass(frozen=True)
class TaskSchedule:
    all_classes: tuple[int, ...]
    base_count: int
    increment: int
    steps: int
    step_classes: tuple[tuple[int, ...], ...] = field(repr=False)

    def classes_upto(self, t: int) -> tuple[int, ...]:
        self._check(t)
        return tuple(c for cs in self.step_classes[:t] for c in cs)

    def classes_at(self, t: int) -> tuple[int, ...]:
        self._check(t)
        return self.step_classes[t - 1]

    def classes_after(self, t: int) -> tuple[int, ...]:
        self._check(t)
        return tuple(c for cs in self.step_classes[t:] for c in cs)

    def task_sizes(self, t: int | None = None) -> list[int]:
        t = self.steps if t is None else t
        return [len(cs) for cs in self.step_classes[:t]]

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.steps:
            raise ScheduleError(f"step {t} outside 1..{self.steps}")

    def to_dict(self) -> dict:
        return {"num_classes": len(self.all_classes), "base": self.base_count, "increment": self.increment}

    @property
    def name(self) -> str:
        return f"{self.base_count}-{self.increment}"


def build_schedule(num_classes: int, base: int, increment: int) -> TaskSchedule:
    if base < 1 or increment < 1:
        raise ScheduleError(f"base and increment must be >= 1 (got {base}, {increment})")
    if base > num_classes:
        raise ScheduleError(f"base {base} exceeds class count {num_classes}")
    rest = num_classes - base
    if rest % increment:
        raise ScheduleError(f"{num_classes} - {base} = {rest} is not divisible by increment {increment}")
    steps = 1 + rest // increment
    classes = tuple(range(num_classes))
    step_classes = [classes[:base]]
    step_classes += [classes[base + k * increment: base + (k + 1) * increment] for k in range(steps - 1)]
    return TaskSchedule(classes, base, increment, steps, tuple(step_classes))


def filter_step(dataset: Sequence[Sample], schedule: TaskSchedule, step: int, protocol: str) -> list[Sample]:
    """Training view of ``dataset`` at ``step`` under a continual protocol.

    overlapped: images with any current-step class; only current-step labels kept.
    disjoint: as overlapped, minus images showing any future class.
    sequential: images with any current-step class; labels for every seen class kept.
    """
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    current = set(schedule.classes_at(step))
    future = set(schedule.classes_after(step))
    allowed = set(schedule.classes_upto(step)) if protocol == "sequential" else current
    out = []
    for s in dataset:
        labels = s.label_set
        if not labels & current:
            continue
        if protocol == "disjoint" and labels & future:
            continue
        out.append(s.restrict(allowed))
    return out


# corpus serialization -------------------------------------------------------

def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, alternating, starting with a (possibly empty) background run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: Sequence[int], shape: tuple[int, int]) -> np.ndarray:
    values = np.arange(len(runs)) % 2 == 1
    flat = np.repeat(values, np.asarray(runs, dtype=np.int64))
    if flat.size != shape[0] * shape[1]:
        raise ConfigError(f"RLE covers {flat.size} pixels, expected {shape[0] * shape[1]}")
    return flat.reshape(shape)


def _write_split(root: str, samples: Sequence[Sample]) -> None:
    os.makedirs(root, exist_ok=True)
    for i, s in enumerate(samples):
        pixels = np.round(s.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="RGB").save(os.path.join(root, f"{i:05d}.png"))
        target = {"masks": [rle_encode(m) for m in s.masks], "classes": [int(c) for c in s.classes]}
        with open(os.path.join(root, f"{i:05d}.json"), "w") as f:
            json.dump(target, f)


def _read_split(root: str) -> list[Sample]:
    names = sorted(n[:-4] for n in os.listdir(root) if n.endswith(".png"))
    out = []
    for n in names:
        pixels = np.asarray(Image.open(os.path.join(root, n + ".png")).convert("RGB"))
        image = (pixels.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1).copy()
        with open(os.path.join(root, n + ".json")) as f:
            target = json.load(f)
        shape = image.shape[1:]
        masks = [rle_decode(r, shape) for r in target["masks"]]
        masks = np.stack(masks) if masks else np.zeros((0, *shape), dtype=bool)
        out.append(Sample(image, masks, np.asarray(target["classes"], dtype=np.int64)))
    return out


def corpus_manifest(spec: SynthSpec, train: Sequence[Sample], evals: Sequence[Sample]) -> dict:
    d = asdict(spec)
    d["shapes_per_image"] = list(spec.shapes_per_image)
    return {
        "format": "mtrseg-corpus",
        "version": 1,
        "seed": spec.rng_seed,
        "spec": d,
        "classes": list(range(spec.num_classes)),
        "train_samples": len(train),
        "eval_samples": len(evals),
        "train_class_counts": class_counts(train, spec.num_classes),
        "eval_class_counts": class_counts(evals, spec.num_classes),
    }


def save_corpus(root: str, spec: SynthSpec, train: Sequence[Sample], evals: Sequence[Sample]) -> dict:
    _write_split(os.path.join(root, "train"), train)
    _write_split(os.path.join(root, "eval"), evals)
    manifest = corpus_manifest(spec, train, evals)
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def load_corpus(root: str) -> tuple[list[Sample], list[Sample], dict]:
    with open(os.path.join(root, "manifest.json")) as f:
        manifest = json.load(f)
    return _read_split(os.path.join(root, "train")), _read_split(os.path.join(root, "eval")), manifest
