"""Checkpoint container.

Layout: an uncompressed ``.npz`` (zip of ``.npy`` files). Every parameter is stored as
``<group>/<name>`` with dtype ``<f4`` (little-endian float32, shape in the ``.npy``
header). The member ``__meta__`` is a uint8 array holding UTF-8 JSON with keys
``format`` ("mtrseg-checkpoint"), ``version``, ``model`` (ModelConfig), ``task_sizes``,
``schedule`` ({num_classes, base, increment}), ``step`` and ``extra``.
"""

from __future__ import annotations

import hashlib
import io
import json
import os

import numpy as np
import torch

from .data import TaskSchedule, build_schedule
from .errors import VersionError
from .model import ModelConfig, Segmenter

FORMAT = "mtrseg-checkpoint"
VERSION = 1


def _group(name: str) -> str:
    head = name.split(".", 1)[0]
    return {"task_queries": "task_queries", "classifiers": "classifiers", "aux_head": "aux_head"}.get(head, head)


def state_arrays(model: Segmenter) -> dict[str, np.ndarray]:
    out = {}
    for name, t in model.state_dict().items():
        out[f"{_group(name)}/{name}"] = t.detach().cpu().numpy().astype("<f4")
    return out


def state_checksum(model: Segmenter) -> str:
    h = hashlib.sha256()
    for key, arr in sorted(state_arrays(model).items()):
        h.update(key.encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(path: str, model: Segmenter, schedule: TaskSchedule, step: int, extra: dict | None = None) -> None:
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "model": model.cfg.to_dict(),
        "task_sizes": model.task_sizes,
        "has_aux_head": model.aux_head is not None,
        "schedule": schedule.to_dict(),
        "step": step,
        "extra": extra or {},
    }
    arrays = state_arrays(model)
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def read_meta(path: str) -> dict:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
    if meta.get("format") != FORMAT:
        raise VersionError(f"{path} is not an {FORMAT} file")
    if meta.get("version") != VERSION:
        raise VersionError(f"checkpoint version {meta.get('version')} unsupported (expected {VERSION})")
    return meta


def load_checkpoint(path: str, model_cfg: ModelConfig | None = None) -> tuple[Segmenter, TaskSchedule, int, dict]:
    """Rebuild the stored model; ``model_cfg`` may swap flags that leave the stored tensors' shapes intact."""
    meta = read_meta(path)
    model = Segmenter(model_cfg or ModelConfig.from_dict(meta["model"]))
    for size in meta["task_sizes"]:
        model.add_task(size)
    if not meta.get("has_aux_head", True):
        model.aux_head = None
    with np.load(path) as z:
        state = {}
        for key in z.files:
            if key == "__meta__":
                continue
            name = key.split("/", 1)[1]
            state[name] = torch.from_numpy(z[key].astype(np.float32))
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise VersionError(f"{path} does not fit the requested model configuration: {exc}") from exc
    sched = meta["schedule"]
    schedule = build_schedule(sched["num_classes"], sched["base"], sched["increment"])
    return model, schedule, meta["step"], meta
