"""Two-stage segmenter: pixel encoder, mask decoder with objectness, task-query class decoder."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    in_channels: int = 3
    dim: int = 64
    num_queries: int = 20
    decoder_layers: int = 3
    heads: int = 4
    ffn_dim: int = 128
    masked_attention: bool = False
    use_task_queries: bool = True
    copy_task_query: bool = False
    mask_stride: int = 4  # 2 adds a finer mask-feature level for small images

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class PixelEmbeddings(NamedTuple):
    """Four levels of pixel features, coarse to fine: strides 16, 8, 4 and the mask stride (4 or 2)."""

    levels: tuple[Tensor, Tensor, Tensor, Tensor]  # each [B, d, h, w]

    @property
    def mask_features(self) -> Tensor:
        return self.levels[3]

    def select(self, idx: Tensor | Sequence[int]) -> "PixelEmbeddings":
        return PixelEmbeddings(tuple(l[idx] for l in self.levels))


class Stage1Output(NamedTuple):
    embeddings: Tensor  # E_pos [B, N, d]
    mask_logits: Tensor  # [B, N, H, W] upsampled logits
    masks: Tensor  # sigmoid of mask_logits, [B, N, H, W]
    low_res_logits: Tensor  # [B, N, h, w] before upsampling
    score_logits: Tensor  # [B, N]
    scores: Tensor  # objectness in [0, 1], [B, N]


def sine_position(dim: int, h: int, w: int) -> Tensor:
    """Fixed 2-D sinusoidal encoding [h*w, dim]; half the channels per axis."""
    quarter = dim // 4
    freqs = torch.exp(torch.arange(quarter, dtype=torch.float64) * (-math.log(1000.0) / max(quarter, 1)))
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w * 2 * math.pi
    ey = torch.cat([torch.sin(ys[:, None] * freqs * 4), torch.cos(ys[:, None] * freqs * 4)], dim=1)
    ex = torch.cat([torch.sin(xs[:, None] * freqs * 4), torch.cos(xs[:, None] * freqs * 4)], dim=1)
    pos = torch.cat([ey[:, None, :].expand(h, w, -1), ex[None, :, :].expand(h, w, -1)], dim=-1)
    pos = pos.reshape(h * w, -1)
    if pos.shape[1] < dim:
        pos = F.pad(pos, (0, dim - pos.shape[1]))
    return pos.float()


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
    )


class PixelEncoder(nn.Module):
    """Small CNN with a top-down path standing in for backbone + pixel decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.dim
        self.image_size = cfg.image_size
        self.stem = nn.Sequential(_conv(cfg.in_channels, 32, 2), _conv(32, d, 2))  # stride 4
        self.down8 = _conv(d, d, 2)
        self.down16 = _conv(d, d, 2)
        self.lat16 = nn.Conv2d(d, d, 1)
        self.lat8 = nn.Conv2d(d, d, 1)
        self.lat4 = nn.Conv2d(d, d, 1)
        self.out8 = _conv(d, d)
        self.out4 = _conv(d, d)
        self.mask_proj = nn.Conv2d(d, d, 3, padding=1)
        if cfg.mask_stride not in (2, 4):
            raise ConfigError(f"mask_stride must be 2 or 4, got {cfg.mask_stride}")
        self.fine = cfg.mask_stride == 2
        if self.fine:
            self.lat2 = nn.Conv2d(32, d, 1)
            self.out2 = _conv(d, d)

    def forward(self, images: Tensor) -> PixelEmbeddings:
        if images.dim() != 4 or images.shape[-1] != images.shape[-2]:
            raise ShapeError(f"expected a square [B, C, H, W] batch, got {tuple(images.shape)}")
        if images.shape[-1] != self.image_size:
            raise ShapeError(f"expected spatial size {self.image_size}, got {images.shape[-1]}")
        c2 = self.stem[0](images)
        c4 = self.stem[1](c2)
        c8 = self.down8(c4)
        c16 = self.down16(c8)
        p16 = self.lat16(c16)
        p8 = self.out8(self.lat8(c8) + F.interpolate(p16, size=c8.shape[-2:], mode="nearest"))
        p4 = self.out4(self.lat4(c4) + F.interpolate(p8, size=c4.shape[-2:], mode="nearest"))
        if self.fine:
            p2 = self.out2(self.lat2(c2) + F.interpolate(p4, size=c2.shape[-2:], mode="nearest"))
            return PixelEmbeddings((p16, p8, p4, self.mask_proj(p2)))
        return PixelEmbeddings((p16, p8, p4, self.mask_proj(p4)))


class DecoderBlock(nn.Module):
    """Cross-attention to pixels, then self-attention among queries, then FFN (post-norm)."""

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.cross = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(inplace=True), nn.Linear(ffn_dim, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, q: Tensor, keys: Tensor, values: Tensor, attn_mask: Tensor | None = None) -> Tensor:
        q = self.norm1(q + self.cross(q, keys, values, attn_mask=attn_mask, need_weights=False)[0])
        q = self.norm2(q + self.self_attn(q, q, q, need_weights=False)[0])
        return self.norm3(q + self.ffn(q))


def _tokens(level: Tensor, pos_cache: dict) -> tuple[Tensor, Tensor]:
    b, d, h, w = level.shape
    key = (d, h, w)
    if key not in pos_cache:
        pos_cache[key] = sine_position(d, h, w)
    values = level.flatten(2).transpose(1, 2)
    return values + pos_cache[key].to(level.dtype), values


class MaskDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.dim
        self.cfg = cfg
        self.queries = nn.Parameter(torch.randn(cfg.num_queries, d) * 0.5)
        self.blocks = nn.ModuleList(DecoderBlock(d, cfg.heads, cfg.ffn_dim) for _ in range(cfg.decoder_layers))
        self.mask_mlp = nn.Sequential(nn.Linear(d, d), nn.ReLU(inplace=True), nn.Linear(d, d), nn.ReLU(inplace=True), nn.Linear(d, d))
        self.objectness = nn.Linear(d, 1)
        self._pos: dict = {}

    def mask_logits(self, emb: Tensor, mask_features: Tensor) -> Tensor:
        return torch.einsum("bnd,bdhw->bnhw", self.mask_mlp(emb), mask_features)

    def forward(self, pixels: PixelEmbeddings, queries: Tensor | None = None) -> Stage1Output:
        q = self.queries if queries is None else queries
        b = pixels.mask_features.shape[0]
        if q.shape[-1] != pixels.mask_features.shape[1]:
            raise ShapeError(f"query width {q.shape[-1]} != pixel width {pixels.mask_features.shape[1]}")
        q = q.unsqueeze(0).expand(b, -1, -1) if q.dim() == 2 else q
        for i, block in enumerate(self.blocks):
            level = pixels.levels[i % 3]
            keys, values = _tokens(level, self._pos)
            attn_mask = None
            if self.cfg.masked_attention:
                attn_mask = self._attention_mask(q, pixels.mask_features, level.shape[-2:])
            q = block(q, keys, values, attn_mask)
        low = self.mask_logits(q, pixels.mask_features)
        full = F.interpolate(low, size=(self.cfg.image_size,) * 2, mode="bilinear", align_corners=False)
        score_logits = self.objectness(q).squeeze(-1)
        return Stage1Output(q, full, full.sigmoid(), low, score_logits, score_logits.sigmoid())

    def _attention_mask(self, q: Tensor, mask_features: Tensor, size) -> Tensor:
        with torch.no_grad():
            low = F.interpolate(self.mask_logits(q, mask_features), size=tuple(size), mode="bilinear", align_corners=False)
            blocked = low.flatten(2) < 0
            blocked[blocked.all(-1)] = False
        return blocked.repeat_interleave(self.cfg.heads, dim=0)


class ClassDecoder(nn.Module):
    """Shared block over the token pair (e, theta); returns the theta-position output."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.block = DecoderBlock(cfg.dim, cfg.heads, cfg.ffn_dim)
        self._pos: dict = {}

    def forward(self, e: Tensor, theta: Tensor, pixel_level: Tensor) -> Tensor:
        """e: [P, d]; theta: [d] or [P, d]; pixel_level: [P, d, h, w] aligned with e."""
        if e.shape[-1] != pixel_level.shape[1] or theta.shape[-1] != e.shape[-1]:
            raise ShapeError("class decoder inputs must share the embedding width")
        theta = theta.expand_as(e)
        pair = torch.stack([e, theta], dim=1)
        keys, values = _tokens(pixel_level, self._pos)
        return self.block(pair, keys, values)[:, 1]


class ClassPrediction(NamedTuple):
    task_embeddings: Tensor  # [P, t, d]
    logits: Tensor  # [P, sum |C^j|], grouped by task
    probs: Tensor


class Segmenter(nn.Module):
    """Full model plus the growing task context (task queries and task-specific classifiers)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = PixelEncoder(cfg)
        self.mask_decoder = MaskDecoder(cfg)
        self.class_decoder = ClassDecoder(cfg)
        self.task_queries = nn.ParameterList()
        self.classifiers = nn.ModuleList()
        self.aux_head: nn.Linear | None = None

    @property
    def num_tasks(self) -> int:
        return len(self.classifiers)

    @property
    def task_sizes(self) -> list[int]:
        return [c.out_features for c in self.classifiers]

    def add_task(self, num_classes: int, generator: torch.Generator | None = None) -> None:
        d = self.cfg.dim
        if self.cfg.use_task_queries or not len(self.task_queries):
            if self.cfg.copy_task_query and len(self.task_queries):
                theta = self.task_queries[-1].detach().clone()
            else:
                theta = torch.randn(d, generator=generator) * 0.5
            self.task_queries.append(nn.Parameter(theta))
        head = nn.Linear(d, num_classes)
        with torch.no_grad():
            bound = 1 / math.sqrt(d)
            head.weight.copy_(torch.rand(num_classes, d, generator=generator) * 2 * bound - bound)
            head.bias.fill_(-2.0)
        self.classifiers.append(head)
        aux = nn.Linear(d, 1 + num_classes)
        with torch.no_grad():
            aux.weight.copy_(torch.rand(1 + num_classes, d, generator=generator) * 2 * bound - bound)
            aux.bias.zero_()
        self.aux_head = aux

    def task_query(self, j: int) -> Tensor:
        return self.task_queries[j if self.cfg.use_task_queries else 0]

    def encode(self, images: Tensor) -> PixelEmbeddings:
        return self.encoder(images)

    def stage1(self, pixels: PixelEmbeddings) -> Stage1Output:
        return self.mask_decoder(pixels)

    def task_embeddings(self, emb: Tensor, pixel_level: Tensor, tasks: Sequence[int] | None = None) -> Tensor:
        """k[p, j] for every embedding row and task; one decoder call per task keeps tasks independent."""
        tasks = range(self.num_tasks) if tasks is None else tasks
        if not self.cfg.use_task_queries:
            k = self.class_decoder(emb, self.task_query(0), pixel_level)
            return k.unsqueeze(1).expand(-1, len(tasks), -1)
        return torch.stack([self.class_decoder(emb, self.task_query(j), pixel_level) for j in tasks], dim=1)

    def classify(self, emb: Tensor, pixel_level: Tensor, tasks: Sequence[int] | None = None) -> ClassPrediction:
        """Class logits for embeddings ``emb`` [P, d] with per-row pixel features [P, d, h, w]."""
        tasks = list(range(self.num_tasks)) if tasks is None else list(tasks)
        if emb.shape[0] == 0:
            width = sum(self.classifiers[j].out_features for j in tasks)
            z = emb.new_zeros(0, width)
            return ClassPrediction(emb.new_zeros(0, len(tasks), emb.shape[-1]), z, z)
        k = self.task_embeddings(emb, pixel_level, tasks)
        z = torch.cat([self.classifiers[j](k[:, i]) for i, j in enumerate(tasks)], dim=1)
        return ClassPrediction(k, z, z.sigmoid())

    def class_level(self, pixels: PixelEmbeddings) -> Tensor:
        # the class decoder always attends at stride 4; a finer mask level only serves masks
        m = pixels.mask_features
        return F.avg_pool2d(m, 2) if self.cfg.mask_stride == 2 else m

    def forward(self, images: Tensor):
        pixels = self.encode(images)
        return pixels, self.stage1(pixels)

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "encoder": list(self.encoder.parameters()),
            "mask_decoder": [p for n, p in self.mask_decoder.named_parameters() if n != "queries"],
            "positional_queries": [self.mask_decoder.queries],
            "class_decoder": list(self.class_decoder.parameters()),
            "task_queries": list(self.task_queries.parameters()),
            "classifiers": list(self.classifiers.parameters()),
            "aux_head": list(self.aux_head.parameters()) if self.aux_head is not None else [],
        }

    def frozen_copy(self) -> "Segmenter":
        # No dropout or batch statistics anywhere, so the mode flag only picks the attention
        # kernel; keeping the student's mode makes a fresh snapshot bitwise identical.
        teacher = copy.deepcopy(self)
        for p in teacher.parameters():
            p.requires_grad_(False)
        return teacher
