"""Spatial grounding distillation: pushes cross-attention mass into a
ground-truth binary mask via a -log soft-Dice loss, combined with the
ordinary next-token loss at equal weight."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import AttentionRecord
from .model import Model, VisualTokens
from .tensor import Tensor

DICE_EPS = 1e-12


@dataclass
class QuerySpan:
    """Half-open token index range naming the grounded concept."""

    start: int
    end: int

    def __post_init__(self):
        if self.end <= self.start or self.start < 0:
            raise ValueError(f"empty or negative query span [{self.start}, {self.end})")


@dataclass
class GroundingMask:
    full: np.ndarray           # {0,1}^[H, W]
    down: np.ndarray           # {0,1}^[h, w]


@dataclass
class LossReport:
    lm_loss: float
    guidance_loss: float
    total: float
    per_layer_guidance: list = field(default_factory=list)
    guided_count: int = 0


@dataclass
class PreparedSample:
    """One training record rendered to arrays (see data.encode_sample)."""

    token_ids: np.ndarray      # full sequence incl. BOS/SEP/answer/EOS
    lm_ignore: np.ndarray      # bool per target position (True = excluded)
    image: object              # ImageGrid; re-encoded every forward so encoder grads flow
    span: Optional[QuerySpan]
    mask_down: Optional[np.ndarray]
    guided: bool


def downsample_mask(full: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Max-pool a binary H x W mask onto an h x w grid (any hit -> 1)."""
    full = np.asarray(full)
    if not np.isin(full, (0, 1)).all():
        raise ValueError("mask must be strictly binary")
    hh, ww = full.shape
    h, w = target
    if hh % h or ww % w:
        raise ValueError(f"mask {full.shape} not divisible by target {target}")
    blocks = full.reshape(h, hh // h, w, ww // w)
    return blocks.max(axis=(1, 3)).astype(np.uint8)


def aggregate_attention(record: AttentionRecord, span: QuerySpan, grid: tuple[int, int]) -> Tensor:
    """Head- and span-averaged attention, reshaped to the grid and renormalized.

    Differentiable back to the attention logits.
    """
    n_heads, t, n = record.weights.shape
    h, w = grid
    if h * w != n:
        raise ValueError(f"grid {grid} does not cover {n} visual tokens")
    if span.end > t:
        raise ValueError(f"span [{span.start}, {span.end}) outside {t} query rows")
    rows = T.slice_axis(record.weights, 1, span.start, span.end)
    avg = T.mean(rows, axis=(0, 1))                     # [N]
    total = T.sum_(avg)                                 # guard averaging drift
    p = _divide_by_scalar(avg, total)
    record.aggregated = T.reshape(p, (h, w))
    return record.aggregated


def _divide_by_scalar(x: Tensor, s: Tensor) -> Tensor:
    inv = T.Tensor(1.0 / s.data, (s,), lambda g: s._accumulate(-g / (s.data * s.data)))
    return T.mul(x, T.reshape(inv, (1,)))


def dice_guidance_loss(p: Tensor, mask_down: np.ndarray) -> Tensor:
    """-log soft-Dice overlap between attention distribution and binary mask."""
    m = np.asarray(mask_down, dtype=np.float64)
    if m.sum() == 0:
        raise ValueError("all-zero downsampled mask; caller must skip this sample")
    if m.shape != p.shape:
        raise ValueError(f"mask {m.shape} vs attention {p.shape}")
    inter = T.sum_(T.mul(p, m))
    numer = T.add(T.mul(inter, 2.0), DICE_EPS)
    denom = T.add(T.sum_(p), float(m.sum()) + DICE_EPS)
    return T.mul(T.add(T.log(numer), T.mul(T.log(denom), -1.0)), -1.0)


def combined_loss(model: Model, batch: list[PreparedSample],
                  guidance_active: bool) -> tuple[LossReport, Tensor]:
    """Batch objective: pooled next-token loss plus, when active, the dice
    guidance averaged over (guided samples x cross-attention layers)."""
    if not batch:
        raise ValueError("empty batch")
    grid = model.config.grid
    lm_terms = []
    lm_weights = []
    guidance_terms = []
    per_layer = []
    guided_count = 0
    for sample in batch:
        collect = guidance_active and sample.guided
        visual = model.encode_image(sample.image) if sample.image is not None else None
        logits, records = model.forward(sample.token_ids, visual, collect_attention=collect)
        t = sample.token_ids.shape[0]
        pred = T.slice_axis(logits, 0, 0, t - 1)
        targets = sample.token_ids[1:]
        ignore = sample.lm_ignore
        n_kept = int((~ignore).sum())
        lm_terms.append(T.cross_entropy(pred, targets, ignore))
        lm_weights.append(n_kept)
        if collect:
            guided_count += 1
            for record in records:
                p = aggregate_attention(record, sample.span, grid)
                term = dice_guidance_loss(p, sample.mask_down)
                guidance_terms.append(term)
                per_layer.append(term.item())
    total_kept = sum(lm_weights)
    if len(lm_terms) == 1:
        lm = lm_terms[0]
    else:
        lm = T.mul(lm_terms[0], lm_weights[0] / total_kept)
        for term, wgt in zip(lm_terms[1:], lm_weights[1:]):
            lm = T.add(lm, T.mul(term, wgt / total_kept))
    if guidance_terms:
        g = guidance_terms[0]
        for term in guidance_terms[1:]:
            g = T.add(g, term)
        g = T.mul(g, 1.0 / len(guidance_terms))
        total = T.add(lm, g)
        g_val = g.item()
    else:
        total = lm
        g_val = 0.0
    report = LossReport(lm_loss=lm.item(), guidance_loss=g_val,
                        total=total.item(), per_layer_guidance=per_layer,
                        guided_count=guided_count)
    return report, total
