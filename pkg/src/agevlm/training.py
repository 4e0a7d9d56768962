"""Four-stage freeze-schedule training with warmup, CSV logging, and
checkpointing. Stage rows (vision encoder / adapter / cross-attn / self-attn
and which losses apply) follow the staged-alignment recipe; stage 4 comes in
two variants, with and without the guidance loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from .data import DataConfig, GroundingSample, Vocabulary, encode_sample
from .guidance import LossReport, combined_loss
from .model import Model, ModelConfig
from .tensor import AdamW, NumericError

VARIANTS = ("age-vlm", "age-vlm-lm")


@dataclass
class OptimizerConfig:
    lr: float = 1e-5
    weight_decay: float = 0.1
    warmup_ratio: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    batch_size: int = 16

    def __post_init__(self):
        if not 0.0 < self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in (0, 1)")


@dataclass
class StageConfig:
    stage: int
    vision_encoder: str            # "frozen" | "final" | "full"
    adapter: bool
    llm_cross_attn: bool
    llm_self_attn: bool
    use_lm_loss: bool
    use_guidance_loss: bool
    variant: Optional[str] = None  # stage 4 only
    epochs: int = 1
    answer_only_lm: bool = False
    dataset: Optional[str] = None


def stage_config(stage: int, variant: Optional[str] = None, epochs: int = 1,
                 dataset: Optional[str] = None) -> StageConfig:
    """The canonical freeze/loss schedule rows."""
    if stage in (1, 2, 3) and variant is not None:
        raise ValueError("variant applies to stage 4 only")
    if stage == 1:
        return StageConfig(1, "frozen", True, True, False, True, False,
                           epochs=epochs, dataset=dataset)
    if stage == 2:
        return StageConfig(2, "final", True, True, False, True, False,
                           epochs=epochs, dataset=dataset)
    if stage == 3:
        return StageConfig(3, "final", True, True, False, True, True,
                           epochs=epochs, dataset=dataset)
    if stage == 4:
        if variant not in VARIANTS:
            raise ValueError(f"stage 4 needs a variant in {VARIANTS}, got {variant!r}")
        return StageConfig(4, "full", True, True, True, True,
                           variant == "age-vlm-lm", variant=variant,
                           epochs=epochs, answer_only_lm=True, dataset=dataset)
    raise ValueError(f"unknown stage {stage}; expected 1..4")


# Parameter-group membership by dotted-path prefix.
_GROUP_PREFIXES = {
    "encoder_final": ("encoder.final.",),
    "vision_encoder": ("encoder.",),
    "adapter": ("adapter.",),
    "llm_cross_attn": (".cross_attn.",),
    "llm_self_attn": ("embed.", "final_ln.", "lm_head.", ".self_attn.",
                      ".ln1.", ".ln2.", ".mlp."),
}


def group_of(name: str) -> str:
    if ".cross_attn." in name:
        return "llm_cross_attn"
    if name.startswith("encoder.final."):
        return "encoder_final"
    if name.startswith("encoder."):
        return "vision_encoder"
    if name.startswith("adapter."):
        return "adapter"
    for pfx in _GROUP_PREFIXES["llm_self_attn"]:
        if name.startswith(pfx) or pfx in name:
            return "llm_self_attn"
    raise KeyError(f"unknown parameter path prefix: {name}")


def apply_freeze(model: Model, stage: StageConfig) -> None:
    for p in model.parameters():
        grp = group_of(p.name)
        if grp == "encoder_final":
            p.trainable = stage.vision_encoder in ("final", "full")
        elif grp == "vision_encoder":
            p.trainable = stage.vision_encoder == "full"
        elif grp == "adapter":
            p.trainable = stage.adapter
        elif grp == "llm_cross_attn":
            p.trainable = stage.llm_cross_attn
        else:
            p.trainable = stage.llm_self_attn


def lr_schedule(step: int, total_steps: int, cfg: OptimizerConfig) -> float:
    """Linear warmup over ceil(ratio * total) steps, then constant."""
    if not 1 <= step <= total_steps:
        raise ValueError(f"step {step} outside [1, {total_steps}]")
    warmup = math.ceil(cfg.warmup_ratio * total_steps)
    if step <= warmup:
        return cfg.lr * step / warmup
    return cfg.lr


def train_stage(model: Model, stage: StageConfig, opt_cfg: OptimizerConfig,
                samples: list[GroundingSample], vocab: Vocabulary,
                data_cfg: DataConfig, seed: int,
                checkpoint_dir: Optional[str] = None) -> list[dict]:
    """Run one stage; returns the per-step metric rows it logged."""
    if not samples:
        raise ValueError("empty dataset")
    apply_freeze(model, stage)
    prepared = [encode_sample(s, vocab, data_cfg, answer_only=stage.answer_only_lm)
                for s in samples]
    opt = AdamW(model.parameters(), lr=opt_cfg.lr, beta1=opt_cfg.beta1,
                beta2=opt_cfg.beta2, eps=opt_cfg.eps, weight_decay=opt_cfg.weight_decay)
    rng = np.random.default_rng(seed)
    n = len(prepared)
    bs = opt_cfg.batch_size
    steps_per_epoch = math.ceil(n / bs)
    total_steps = steps_per_epoch * stage.epochs
    rows = []
    step = 0
    for _epoch in range(stage.epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            batch = [prepared[i] for i in order[b * bs:(b + 1) * bs]]
            step += 1
            opt.zero_grad()
            report, total = combined_loss(model, batch, stage.use_guidance_loss)
            if not math.isfinite(report.total):
                raise NumericError(f"non-finite loss at stage {stage.stage} step {step}")
            total.backward()
            opt.step(lr=lr_schedule(step, total_steps, opt_cfg))
            guided_frac = report.guided_count / len(batch)
            rows.append({
                "step": step, "stage": stage.stage, "lm_loss": report.lm_loss,
                "guidance_loss": report.guidance_loss, "total": report.total,
                "guided_fraction": guided_frac,
            })
    if checkpoint_dir is not None:
        save_model(checkpoint_dir, model)
    return rows


def pretrain_text(model: Model, opt_cfg: OptimizerConfig,
                  samples: list[GroundingSample], vocab: Vocabulary,
                  data_cfg: DataConfig, seed: int, epochs: int = 1) -> list[dict]:
    """Text-only warmup of the decoder stack before the staged alignment runs.

    The images are withheld, so the decoder can only learn the grammar and
    the marginal answer statistics, mirroring a language backbone that was
    pretrained on text. Vision-side and cross-attention parameters are left
    untouched (they receive no gradient without visual tokens anyway).
    """
    if not samples:
        raise ValueError("empty dataset")
    for p in model.parameters():
        p.trainable = group_of(p.name) == "llm_self_attn"
    prepared = [encode_sample(s, vocab, data_cfg, answer_only=False) for s in samples]
    opt = AdamW(model.parameters(), lr=opt_cfg.lr, beta1=opt_cfg.beta1,
                beta2=opt_cfg.beta2, eps=opt_cfg.eps, weight_decay=opt_cfg.weight_decay)
    rng = np.random.default_rng(seed)
    n, bs = len(prepared), opt_cfg.batch_size
    steps_per_epoch = math.ceil(n / bs)
    total_steps = steps_per_epoch * epochs
    rows = []
    step = 0
    from . import tensor as T
    for _epoch in range(epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            batch = [prepared[i] for i in order[b * bs:(b + 1) * bs]]
            step += 1
            opt.zero_grad()
            losses, weights = [], []
            for prep in batch:
                logits, _ = model.forward(prep.token_ids, None)
                tgt_logits = T.slice_axis(logits, 0, 0, len(prep.token_ids) - 1)
                losses.append(T.cross_entropy(tgt_logits, prep.token_ids[1:],
                                              prep.lm_ignore))
                weights.append(int((~prep.lm_ignore).sum()))
            total_w = sum(weights)
            loss = losses[0] * (weights[0] / total_w)
            for l, w in zip(losses[1:], weights[1:]):
                loss = loss + l * (w / total_w)
            if not math.isfinite(float(loss.data)):
                raise NumericError(f"non-finite loss at warmup step {step}")
            loss.backward()
            opt.step(lr=lr_schedule(step, total_steps, opt_cfg))
            rows.append({"step": step, "stage": 0, "lm_loss": float(loss.data),
                         "guidance_loss": 0.0, "total": float(loss.data),
                         "guided_fraction": 0.0})
    return rows


def save_model(path, model: Model) -> None:
    ckpt.save_checkpoint(path, model.parameters(), model.config.to_dict())


def load_model(path) -> Model:
    config, tensors = ckpt.load_checkpoint(path)
    model = Model(ModelConfig.from_dict(config), seed=0)
    model.load_state(tensors)
    return model


def write_log_csv(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("step,stage,lm_loss,guidance_loss,total,guided_fraction\n")
        for r in rows:
            fh.write(f"{r['step']},{r['stage']},{r['lm_loss']!r},"
                     f"{r['guidance_loss']!r},{r['total']!r},{r['guided_fraction']!r}\n")
