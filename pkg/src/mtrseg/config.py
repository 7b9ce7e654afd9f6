"""Run configuration: a versioned YAML key tree, presets and ablation matrices.

Schema (``schema_version: 1``)::

    name: toy-4-1
    seed: 0
    out: null                 # run directory; defaults to $MTRSEG_OUT/<name>
    data: {num_classes, image_size, shapes_per_image, samples_train, samples_eval, rng_seed}
    schedule: {base, increment, protocol}
    model: {image_size, in_channels, dim, num_queries, decoder_layers, heads, ffn_dim,
            masked_attention, use_task_queries, copy_task_query}
    train: {base_iters, inc_iters_per_class, batch_size, lr, inc_lr_factor, weight_decay,
            poly_power, grad_clip, flip, eval_alpha, log_every}
    loss:
      enabled: {obj, cls, os_kd, mask_kd, pe_kd, cls_kd_u, cls_kd_m, aux}   # on/off
      weights: {...same keys...}
      focal: true            # false = plain sigmoid BCE on the class logits
      old_negatives: false   # teacher-confident unmatched proposals as current-task negatives
      cls_scope: current     # current | seen (matched proposals also train earlier classifiers)
      old_pseudo: false      # with seen + cls_kd_u: old classifiers fit teacher sigmoids on teacher-confident old proposals
      focal_gamma: 2.0
      beta: 2.0
      alpha: 0.8
      forward_kl: false
      matching: {bce_weight, dice_weight, objectness_weight, full_resolution, teacher_guard}
"""

from __future__ import annotations

import copy
import logging
import os
from dataclasses import dataclass, field, fields

import yaml

from .data import PROTOCOLS, SynthSpec, TaskSchedule, build_schedule
from .engine import Objective, TrainConfig
from .errors import ConfigError
from .losses_kd import TERMS, KDConfig, LossWeights
from .losses_seg import LossConfig
from .matching import MatchConfig
from .model import ModelConfig

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUT_ENV = "MTRSEG_OUT"
KD_TERMS = ("os_kd", "mask_kd", "pe_kd", "cls_kd_u", "cls_kd_m", "aux")
LOSS_KEYS = ("enabled", "weights", "focal", "old_negatives", "cls_scope", "old_pseudo", "focal_gamma", "beta", "alpha", "forward_kl", "matching")


def _defaults() -> dict:
    train = {f.name: f.default for f in fields(TrainConfig) if f.name not in ("protocol", "seed")}
    return {
        "schema_version": SCHEMA_VERSION,
        "name": "custom",
        "seed": 0,
        "out": None,
        "data": {**{f.name: f.default for f in fields(SynthSpec)}, "shapes_per_image": [1, 3]},
        "schedule": {"base": 4, "increment": 1, "protocol": "overlapped"},
        "model": ModelConfig().to_dict(),
        "train": train,
        "loss": {
            "enabled": {k: True for k in TERMS},
            "weights": {k: 1.0 for k in TERMS},
            "focal": True,
            "old_negatives": False,
            "cls_scope": "current",
            "old_pseudo": False,
            "focal_gamma": LossConfig.focal_gamma,
            "beta": KDConfig.beta,
            "alpha": KDConfig.alpha,
            "forward_kl": False,
            "matching": {f.name: f.default for f in fields(MatchConfig)},
        },
    }


# Calibrated toy budgets; see README "Calibration".
_TOY_TRAIN = {"base_iters": 3000, "inc_iters_per_class": 200, "lr": 1e-3, "grad_clip": 1.0}
_TOY_MODEL = {"mask_stride": 2}
_TOY_LOSS = {
    "weights": {"os_kd": 400.0, "mask_kd": 1.0, "pe_kd": 1.0, "cls_kd_u": 1.0, "cls_kd_m": 1.0, "aux": 1.0},
    "old_negatives": True,
    "cls_scope": "seen",
    "old_pseudo": True,
    "matching": {"objectness_weight": 2.0, "teacher_guard": 1.0},
}
FINETUNE = {
    "loss": {"enabled": {k: False for k in KD_TERMS}, "old_negatives": False, "matching": {"teacher_guard": 0.0}},
    "model": {"use_task_queries": False},
}


def _toy(name: str, base: int, increment: int, loss: dict | None = None, **extra) -> dict:
    loss = loss or {}
    merged = {**_TOY_LOSS, **loss, "matching": {**_TOY_LOSS["matching"], **loss.get("matching", {})}}
    return {"name": name, "schedule": {"base": base, "increment": increment}, "train": _TOY_TRAIN,
            "model": {**_TOY_MODEL, **extra.pop("model", {})}, "loss": merged, **extra}


PRESETS = {
    "toy-joint": _toy("toy-joint", 8, 1),
    "toy-4-1": _toy("toy-4-1", 4, 1),
    "toy-4-2": _toy("toy-4-2", 4, 2),
    "finetune-baseline": _toy("finetune-baseline", 4, 1, FINETUNE["loss"], model=FINETUNE["model"]),
}
BASELINES = {"finetune": FINETUNE}


def _off(*terms):
    return {"loss": {"enabled": {t: False for t in terms}}}


# Rows mirror the objectness-KD, class-KD and component ablations of the method.
MATRICES = {
    "objectness": [
        {"name": "mask-kd", "overrides": _off("os_kd", "pe_kd")},
        {"name": "os-kd", "overrides": _off("mask_kd", "pe_kd")},
        {"name": "os+mask-kd", "overrides": _off("pe_kd")},
        {"name": "all", "overrides": {}},
    ],
    "class-kd": [
        {"name": "none", "overrides": _off("cls_kd_u", "cls_kd_m")},
        {"name": "cls-kd-m", "overrides": _off("cls_kd_u")},
        {"name": "cls-kd-u", "overrides": _off("cls_kd_m")},
        {"name": "both", "overrides": {}},
    ],
    "components": [
        {"name": "no-tq", "overrides": {"model": {"use_task_queries": False}}},
        {"name": "no-aux", "overrides": _off("aux")},
        {"name": "no-focal", "overrides": {"loss": {"focal": False}}},
        {"name": "full", "overrides": {}},
    ],
    "forgetting": [
        {"name": "full", "overrides": {}},
        {"name": "no-cls-kd", "overrides": _off("cls_kd_u", "cls_kd_m")},
        {"name": "no-os-kd", "overrides": _off("os_kd")},
        {"name": "no-mask-kd", "overrides": _off("mask_kd")},
        {"name": "finetune", "overrides": FINETUNE},
    ],
}


def merge(base: dict, override: dict, path: str = "") -> dict:
    """Recursive merge; every override key must already exist in ``base``."""
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        where = f"{path}.{k}" if path else k
        if k not in out:
            raise ConfigError(f"unknown config field '{where}'")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = merge(out[k], v, where)
        elif isinstance(out[k], dict):
            raise ConfigError(f"config field '{where}' must be a mapping")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _as_bool(value, where: str) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.lower() in ("on", "off", "true", "false"):
        return value.lower() in ("on", "true")
    raise ConfigError(f"'{where}' must be on/off, got {value!r}")


@dataclass
class RunConfig:
    tree: dict = field(default_factory=_defaults)

    # construction ----------------------------------------------------------

    @classmethod
    def from_tree(cls, tree: dict) -> "RunConfig":
        if not isinstance(tree, dict):
            raise ConfigError("config root must be a mapping")
        version = tree.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {version} unsupported (expected {SCHEMA_VERSION})")
        cfg = cls(merge(_defaults(), tree))
        cfg.validate()
        return cfg

    @classmethod
    def preset(cls, name: str) -> "RunConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls.from_tree(PRESETS[name])

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path) as f:
                tree = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
            raise ConfigError(f"cannot parse {path}{where}: {getattr(exc, 'problem', exc)}") from exc
        return cls.from_tree(tree or {})

    def override(self, tree: dict) -> "RunConfig":
        return RunConfig.from_tree(merge(self.tree, tree))

    def with_toggles(self, toggles: dict[str, str]) -> "RunConfig":
        enabled = {}
        for name, value in toggles.items():
            if name not in TERMS:
                raise ConfigError(f"unknown toggle {name!r}; choose from {list(TERMS)}")
            enabled[name] = _as_bool(value, name)
        return self.override({"loss": {"enabled": enabled}})

    def dump(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=False)

    # validation ------------------------------------------------------------

    def validate(self) -> None:
        t = self.tree
        self.synth_spec()
        self.schedule()
        if t["schedule"]["protocol"] not in PROTOCOLS:
            raise ConfigError(f"schedule.protocol must be one of {PROTOCOLS}")
        m = self.model_config()
        if m.image_size != self.synth_spec().image_size:
            raise ConfigError("model.image_size must equal data.image_size")
        if m.dim % m.heads or m.dim % 8:
            raise ConfigError("model.dim must be divisible by model.heads and by 8")
        if m.num_queries < self.synth_spec().shapes_per_image[1]:
            raise ConfigError("model.num_queries must be at least the maximum shapes per image")
        tc = self.train_config()
        if tc.batch_size < 1 or tc.base_iters < 1 or tc.inc_iters_per_class < 0 or tc.lr <= 0:
            raise ConfigError("train: batch_size and base_iters must be positive, lr > 0")
        loss = t["loss"]
        for key in ("enabled", "weights"):
            unknown = set(loss[key]) - set(TERMS)
            if unknown:
                raise ConfigError(f"unknown loss.{key} term(s): {sorted(unknown)}")
        for k, v in loss["enabled"].items():
            loss["enabled"][k] = _as_bool(v, f"loss.enabled.{k}")
        for k, v in loss["weights"].items():
            if not isinstance(v, (int, float)) or v < 0:
                raise ConfigError(f"loss.weights.{k} must be a nonnegative number")
        if not 0 < loss["alpha"] < 1 or loss["beta"] < 0:
            raise ConfigError("loss.alpha must lie in (0, 1) and loss.beta must be >= 0")

    # typed views -----------------------------------------------------------

    @property
    def name(self) -> str:
        return str(self.tree["name"])

    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    def synth_spec(self) -> SynthSpec:
        return SynthSpec.from_dict(self.tree["data"])

    def schedule(self) -> TaskSchedule:
        s = self.tree["schedule"]
        return build_schedule(int(self.tree["data"]["num_classes"]), int(s["base"]), int(s["increment"]))

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig.from_dict(self.tree["model"])
        except TypeError as exc:
            raise ConfigError(f"bad model section: {exc}") from exc

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**self.tree["train"], protocol=self.tree["schedule"]["protocol"], seed=self.seed)
        except TypeError as exc:
            raise ConfigError(f"bad train section: {exc}") from exc

    def objective(self) -> Objective:
        loss = self.tree["loss"]
        if loss["cls_scope"] not in ("current", "seen"):
            raise ConfigError(f"loss.cls_scope: expected 'current' or 'seen', got {loss['cls_scope']!r}")
        return Objective(
            weights=LossWeights(weights=dict(loss["weights"]), enabled=dict(loss["enabled"])),
            loss=LossConfig(focal_gamma=float(loss["focal_gamma"])),
            kd=KDConfig(beta=float(loss["beta"]), alpha=float(loss["alpha"]), forward_kl=bool(loss["forward_kl"])),
            matching=MatchConfig(**loss["matching"]),
            focal=bool(loss["focal"]),
            old_negatives=bool(loss["old_negatives"]),
            cls_scope=loss["cls_scope"],
            old_pseudo=bool(loss["old_pseudo"]),
        )

    def out_dir(self, override: str | None = None) -> str:
        if override:
            return override
        if self.tree.get("out"):
            return str(self.tree["out"])
        return os.path.join(os.environ.get(OUT_ENV, "runs"), self.name)

    def step_one_key(self) -> str:
        """Everything that influences step 1; runs with equal keys share their step-1 model."""
        t = copy.deepcopy(self.tree)
        for k in ("name", "out"):
            t.pop(k)
        t["train"].pop("inc_iters_per_class")
        t["train"].pop("inc_lr_factor")
        t["model"].pop("use_task_queries")
        t["model"].pop("copy_task_query")
        for k in KD_TERMS:
            t["loss"]["enabled"].pop(k)
            t["loss"]["weights"].pop(k)
        for k in ("beta", "alpha", "forward_kl", "old_negatives", "cls_scope", "old_pseudo"):
            t["loss"].pop(k)
        t["loss"]["matching"].pop("teacher_guard")
        return yaml.safe_dump(t, sort_keys=True)


def load_matrix(spec: str) -> list[dict]:
    """A named matrix or a YAML file holding a list of {name, overrides} rows."""
    if spec in MATRICES:
        rows = MATRICES[spec]
    else:
        try:
            with open(spec) as f:
                rows = yaml.safe_load(f) or []
        except OSError as exc:
            raise ConfigError(f"unknown ablation matrix {spec!r} (not a preset name or readable file)") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse ablation matrix {spec}: {exc}") from exc
    if not isinstance(rows, list):
        raise ConfigError("ablation matrix must be a list of rows")
    out, seen = [], {}
    for i, row in enumerate(rows):
        if not isinstance(row, dict) or "name" not in row:
            raise ConfigError(f"ablation row {i} needs a 'name'")
        overrides = row.get("overrides") or {}
        toggles = row.get("toggles") or {}
        key = yaml.safe_dump([overrides, toggles], sort_keys=True)
        if key in seen:
            log.warning("ablation row %r duplicates row %r; skipped", row["name"], seen[key])
            continue
        seen[key] = row["name"]
        out.append({"name": str(row["name"]), "overrides": overrides, "toggles": toggles})
    return out
