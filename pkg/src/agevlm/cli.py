"""Command-line entry points: gen-data, train, eval, analyze.

All knobs live in a flat YAML config (see README for the schema); any flag
given on the command line overrides the config value. Exit codes: 0 success,
1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import analysis, evaluation, training
from .checkpoint import CheckpointError
from .data import (DataConfig, DataError, config_from_manifest, encode_sample,
                   generate_synthetic, read_dataset, write_dataset)
from .guidance import aggregate_attention
from .model import Model, ModelConfig
from .tensor import NumericError
from .training import OptimizerConfig, stage_config

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(ValueError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


MODEL_KEYS = ("n_layers", "d_model", "n_heads", "vocab_size", "cross_attn_indices",
              "image_size", "patch_size", "encoder_dim", "adapter_hidden",
              "mlp_hidden", "max_seq_len")
OPT_KEYS = ("lr", "weight_decay", "warmup_ratio", "beta1", "beta2", "eps", "batch_size")


def load_config(path) -> dict:
    if path is None:
        return {}
    cfg = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must be a flat key-value mapping")
    return cfg


def merged(cfg: dict, args: argparse.Namespace, keys) -> dict:
    out = {k: cfg[k] for k in keys if k in cfg}
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def write_run_manifest(out_dir: Path, config: dict, seed: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(config, sort_keys=True, default=str)
    digest = hashlib.sha256(blob.encode()).hexdigest()
    (out_dir / "run-manifest.json").write_text(
        json.dumps({"config_hash": digest, "seed": seed, "config": config},
                   indent=1, sort_keys=True, default=str))


def cmd_gen_data(args, cfg) -> int:
    if args.count is None or args.count < 1:
        raise UsageError("--count must be >= 1")
    frac = args.guided_fraction if args.guided_fraction is not None else cfg.get("guided_fraction", 0.10)
    if not 0.0 <= frac <= 1.0:
        raise UsageError(f"guided fraction {frac} outside [0, 1]")
    data_cfg = DataConfig(
        image_size=cfg.get("image_size", 32), patch_size=cfg.get("patch_size", 4),
        guided_fraction=frac, noise_amplitude=cfg.get("noise_amplitude", 1.0),
        pad_border=args.pad_border if args.pad_border is not None else cfg.get("pad_border", 0),
        min_shapes=cfg.get("min_shapes", 1), max_shapes=cfg.get("max_shapes", 3),
        decoy_shapes=cfg.get("decoy_shapes", 0),
    )
    samples, vocab = generate_synthetic(args.seed, args.count, data_cfg)
    write_dataset(args.out, samples, vocab, data_cfg, split=args.split, seed=args.seed)
    guided = sum(1 for s in samples if s.mask is not None)
    print(f"wrote {len(samples)} samples ({guided} guided) to {args.out}")
    return 0


def _model_config(cfg: dict, args) -> ModelConfig:
    kwargs = merged(cfg, args, MODEL_KEYS)
    if "cross_attn_indices" in kwargs and not isinstance(kwargs["cross_attn_indices"], (list, tuple)):
        raise UsageError("cross_attn_indices must be a list")
    if "cross_attn_indices" in kwargs:
        kwargs["cross_attn_indices"] = tuple(kwargs["cross_attn_indices"])
    return ModelConfig(**kwargs)


def cmd_train(args, cfg) -> int:
    if args.stage not in (1, 2, 3, 4):
        raise UsageError(f"--stage must be 1..4, got {args.stage}")
    if args.stage != 4 and args.variant is not None:
        raise UsageError("--variant applies to stage 4 only")
    variant = args.variant if args.stage == 4 else None
    if args.stage == 4 and variant is None:
        variant = cfg.get("variant", "age-vlm")
    dataset = args.dataset or cfg.get("train_data")
    if dataset is None:
        raise UsageError("no dataset: pass --dataset or set train_data in the config")
    out_dir = Path(args.out or cfg.get("out", "runs/default"))
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    epochs = args.epochs if args.epochs is not None else cfg.get("epochs", 1)
    samples, vocab, manifest = read_dataset(dataset)
    data_cfg = config_from_manifest(manifest)
    stage = stage_config(args.stage, variant, epochs=epochs, dataset=str(dataset))
    opt_cfg = OptimizerConfig(**merged(cfg, args, OPT_KEYS))
    if args.resume:
        model = training.load_model(args.resume)
    elif args.stage > 1:
        raise UsageError(f"stage {args.stage} needs --resume with the previous stage checkpoint")
    else:
        model = Model(_model_config(cfg, args), seed=seed)
    if model.config.image_size != manifest["image_size"]:
        raise DataError(f"field image_size: model {model.config.image_size} != dataset {manifest['image_size']}")
    tag = f"stage{args.stage}" + (f"-{variant}" if variant else "")
    rows = training.train_stage(model, stage, opt_cfg, samples, vocab, data_cfg, seed,
                                checkpoint_dir=out_dir / tag)
    training.write_log_csv(out_dir / f"{tag}.csv", rows)
    write_run_manifest(out_dir, {**cfg, "stage": args.stage, "variant": variant,
                                 "epochs": epochs, "dataset": str(dataset)}, seed)
    print(f"{tag}: {len(rows)} steps, final total loss {rows[-1]['total']:.6f}")
    return 0


def _load_eval(args):
    model = training.load_model(args.checkpoint)
    samples, vocab, manifest = read_dataset(args.dataset)
    if model.config.image_size != manifest["image_size"]:
        raise DataError(f"field image_size: checkpoint {model.config.image_size} "
                        f"!= dataset {manifest['image_size']}")
    return model, samples, vocab, config_from_manifest(manifest), manifest


def cmd_eval(args, cfg) -> int:
    model, samples, vocab, data_cfg, _ = _load_eval(args)
    acc = evaluation.answer_accuracy(model, samples, vocab, data_cfg)
    print(f"answer accuracy: {acc:.4f}")
    try:
        mass = evaluation.attention_in_mask(model, samples, vocab, data_cfg)
        print(f"attention-in-mask mass: {mass:.4f}")
    except ValueError:
        print("attention-in-mask mass: n/a (no guided samples)")
    return 0


def cmd_analyze(args, cfg) -> int:
    modes = ("similarity", "heatmap", "padmass")
    if args.mode not in modes:
        raise UsageError(f"unknown mode {args.mode!r}; choose from {modes}")
    model, samples, vocab, data_cfg, manifest = _load_eval(args)
    out_dir = Path(args.out or cfg.get("out", "runs/default"))
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.mode == "similarity":
        report = analysis.similarity_analysis(model, samples, vocab, data_cfg,
                                              pairing_seed=args.seed or 0)
        analysis.write_similarity_report(report, out_dir / "similarity.csv",
                                         out_dir / "similarity_summary.json")
        print(f"similarity AUC: {report.auc:.4f}")
        return 0
    guided = [s for s in samples if s.mask is not None]
    if not guided:
        raise DataError("dataset has no guided samples for attention analysis")
    sample = guided[0] if args.sample_id is None else next(
        (s for s in samples if s.id == args.sample_id), None)
    if sample is None:
        raise DataError(f"sample id {args.sample_id} not found")
    prep = encode_sample(sample, vocab, data_cfg)
    visual = model.encode_image(prep.image)
    _, records = model.forward(prep.token_ids, visual, collect_attention=True)
    if args.mode == "heatmap":
        for rec in records:
            path = out_dir / f"heatmap_layer{rec.layer_index}_sample{sample.id}.pgm"
            analysis.export_attention_heatmap(rec, prep.span, model.config.grid, path)
        print(f"wrote {len(records)} heatmaps to {out_dir}")
        return 0
    h, w = model.config.grid
    border = max(1, manifest.get("pad_border", 0) // data_cfg.patch_size)
    pad = np.zeros((h, w), dtype=bool)
    pad[:border, :] = pad[-border:, :] = pad[:, :border] = pad[:, -border:] = True
    masses = [analysis.padding_attention_mass(
        aggregate_attention(rec, prep.span, (h, w)).data, pad) for rec in records]
    print(f"padding attention mass (border={border} cells): {np.mean(masses):.4f}")
    return 0


def build_parser() -> Parser:
    parser = Parser(prog="agevlm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic grounded dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--guided-fraction", type=float, dest="guided_fraction")
    g.add_argument("--pad-border", type=int, dest="pad_border")
    g.add_argument("--split", default="train")
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config")
    t.add_argument("--stage", type=int, required=True)
    t.add_argument("--variant", choices=training.VARIANTS)
    t.add_argument("--resume", help="checkpoint directory to start from")
    t.add_argument("--dataset")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    for key in OPT_KEYS:
        t.add_argument(f"--{key.replace('_', '-')}", type=float if key != "batch_size" else int,
                       dest=key)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="answer accuracy and attention-in-mask mass")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--config")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="similarity / heatmap / padmass reports")
    a.add_argument("--mode", required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--dataset", required=True)
    a.add_argument("--out")
    a.add_argument("--seed", type=int)
    a.add_argument("--sample-id", type=int, dest="sample_id")
    a.add_argument("--config")
    a.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(getattr(args, "config", None))
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
