"""Experiment command line: pretrain, build-svd, finetune, evaluate, and
export-embeddings, all driven by one config file plus a few overrides.

Figures are not rendered here; downstream tooling plots from the exported
delimited files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from filelock import FileLock

from . import checkpoint as ckpt_io
from .config import ConfigError, RunConfig, config_hash, load_run_config
from .data import DatasetSplits, generate_synthetic_dataset, load_paired_dataset, split_dataset
from .fileio import atomic_write_text, sha256_file
from .finetune import evaluate_model, export_embeddings, finetune_loop, format_report
from .pretraining import pretrain_loop
from .shiftdict import build_shift_dictionary, load_svd, save_svd

PRETRAIN_CKPT = "pretrain.ckpt"
FINETUNE_CKPT = "finetune.ckpt"
SVD_FILE = "shift_dictionary.svd"
SPLIT_CHOICES = ("train", "val", "test")


def _load_splits(cfg: RunConfig) -> DatasetSplits:
    if cfg.dataset.root is not None:
        return load_paired_dataset(cfg.dataset.root, cfg.dataset.ratios, seed=cfg.seeds.data)
    samples = generate_synthetic_dataset(
        num_classes=cfg.net.num_classes,
        pairs_per_class=cfg.dataset.pairs_per_class,
        side=cfg.net.image_side,
        seed=cfg.seeds.data,
        patch_size=cfg.net.patch_size,
    )
    return split_dataset(samples, cfg.net.num_classes, cfg.dataset.ratios, seed=cfg.seeds.data)


def _write_metrics(path: Path, history: list[dict]) -> None:
    lines = [json.dumps(record, sort_keys=True) for record in history]
    atomic_write_text(path, "\n".join(lines) + "\n")


def _split_samples(splits: DatasetSplits, name: str):
    return {"train": splits.train, "val": splits.val, "test": splits.test}[name]


def _seed_dict(cfg: RunConfig) -> dict[str, int]:
    return dataclasses.asdict(cfg.seeds)


def cmd_pretrain(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    splits = _load_splits(cfg)
    result = pretrain_loop(
        splits,
        cfg.net,
        cfg.pretrain,
        init_seed=cfg.seeds.init,
        data_seed=cfg.seeds.data,
        mask_seed=cfg.seeds.mask,
    )
    arrays = ckpt_io.arrays_from_model(result.model)
    arrays.update(
        {f"{ckpt_io.OPTIMIZER_PREFIX}{k}": v for k, v in result.optimizer.state_arrays().items()}
    )
    arrays[f"{ckpt_io.QUEUE_PREFIX}wli.entries"] = result.queue_w.entries
    arrays[f"{ckpt_io.QUEUE_PREFIX}nbi.entries"] = result.queue_n.entries
    extra = {
        "momentum": cfg.pretrain.momentum,
        "queues": {
            "wli": {"cursor": result.queue_w.cursor, "filled": result.queue_w.filled},
            "nbi": {"cursor": result.queue_n.cursor, "filled": result.queue_n.filled},
        },
    }
    ckpt = ckpt_io.Checkpoint(
        stage=ckpt_io.STAGE_PRETRAIN,
        net_config=cfg.net,
        seeds=_seed_dict(cfg),
        config_hash=config_hash(cfg),
        arrays=arrays,
        extra=extra,
    )
    ckpt_io.save_checkpoint(out / PRETRAIN_CKPT, ckpt)
    _write_metrics(out / "pretrain_metrics.jsonl", result.history)
    final = result.history[-1]
    print(f"pretrained {cfg.pretrain.epochs} epochs; final total loss {final['total']:.6f}")
    print(f"checkpoint: {out / PRETRAIN_CKPT}")
    return 0


def cmd_build_svd(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / PRETRAIN_CKPT
    ckpt = ckpt_io.load_checkpoint(ckpt_path)
    splits = _load_splits(cfg)
    svd = build_shift_dictionary(
        ckpt,
        splits.train,
        cfg.svd,
        seed=cfg.seeds.svd,
        checkpoint_hash=sha256_file(ckpt_path),
    )
    save_svd(out / SVD_FILE, svd)
    print(
        f"shift dictionary: {svd.num_clusters} clusters x {svd.vectors_per_cluster} vectors"
        f" x {svd.feature_dim} dims per modality"
    )
    print(f"written: {out / SVD_FILE}")
    return 0


def cmd_finetune(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    splits = _load_splits(cfg)
    start = None
    if args.checkpoint:
        start = ckpt_io.load_checkpoint(args.checkpoint)
    svd = None
    if cfg.finetune.use_svd and cfg.finetune.modality == "both":
        svd_path = Path(args.svd) if args.svd else out / SVD_FILE
        if not svd_path.exists():
            raise ConfigError(
                f"shift dictionary {svd_path} not found; pass --svd or set finetune.use_svd false"
            )
        svd = load_svd(svd_path)
    result = finetune_loop(
        splits,
        cfg.net,
        cfg.finetune,
        start=start,
        svd=svd,
        init_seed=cfg.seeds.init,
        data_seed=cfg.seeds.data,
        shift_seed=cfg.seeds.shifts,
        label_seed=cfg.seeds.data,
    )
    arrays = ckpt_io.arrays_from_model(result.model)
    arrays.update(
        {f"{ckpt_io.EMA_PREFIX}{name}": arr for name, arr in result.best_ema_arrays.items()}
    )
    extra = {
        "momentum": result.model.momentum,
        "best_epoch": result.best_epoch,
        "use_tmc": cfg.finetune.use_tmc,
        "modality": cfg.finetune.modality,
    }
    ckpt = ckpt_io.Checkpoint(
        stage=ckpt_io.STAGE_FINETUNE,
        net_config=cfg.net,
        seeds=_seed_dict(cfg),
        config_hash=config_hash(cfg),
        arrays=arrays,
        extra=extra,
    )
    ckpt_io.save_checkpoint(out / FINETUNE_CKPT, ckpt)
    _write_metrics(out / "finetune_metrics.jsonl", result.history)
    if result.best_val_accuracy == result.best_val_accuracy:
        print(
            f"fine-tuned {cfg.finetune.epochs} epochs;"
            f" best val accuracy {result.best_val_accuracy:.4f} at epoch {result.best_epoch}"
        )
    else:
        print(f"fine-tuned {cfg.finetune.epochs} epochs (no validation split)")
    print(f"checkpoint: {out / FINETUNE_CKPT}")
    return 0


def _model_from_checkpoint(ckpt: ckpt_io.Checkpoint):
    prefix = (
        ckpt_io.EMA_PREFIX if any(k.startswith(ckpt_io.EMA_PREFIX) for k in ckpt.arrays) else ckpt_io.PARAM_PREFIX
    )
    return ckpt_io.restore_model(ckpt, prefix=prefix)


def cmd_evaluate(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / FINETUNE_CKPT
    ckpt = ckpt_io.load_checkpoint(ckpt_path)
    ckpt_io.require_stage(ckpt, ckpt_io.STAGE_FINETUNE)
    if ckpt.net_config != cfg.net:
        raise ConfigError("checkpoint architecture does not match the configured network")
    model = _model_from_checkpoint(ckpt)
    splits = _load_splits(cfg)
    report = evaluate_model(
        model,
        _split_samples(splits, args.split),
        batch_size=cfg.finetune.batch_size,
        use_tmc=bool(ckpt.extra.get("use_tmc", True)),
        modality=str(ckpt.extra.get("modality", "both")),
    )
    text = format_report(report)
    atomic_write_text(out / f"evaluation_{args.split}.txt", text)
    sys.stdout.write(text)
    return 0


def cmd_export_embeddings(cfg: RunConfig, args: argparse.Namespace, out: Path) -> int:
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / FINETUNE_CKPT
    ckpt = ckpt_io.load_checkpoint(ckpt_path)
    model = _model_from_checkpoint(ckpt)
    splits = _load_splits(cfg)
    text = export_embeddings(model, _split_samples(splits, args.split), cfg.finetune.batch_size)
    path = out / f"embeddings_{args.split}.tsv"
    atomic_write_text(path, text)
    print(f"embeddings: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairmodal",
        description="Semi-supervised paired-modality classification pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, default=None, help="YAML config file")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override every seed")

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("build-svd", help="build the shift vector dictionary")
    add_common(p)
    p.add_argument("--checkpoint", type=Path, default=None, help="pretraining checkpoint")
    p.set_defaults(func=cmd_build_svd)

    p = sub.add_parser("finetune", help="supervised fusion fine-tuning")
    add_common(p)
    p.add_argument(
        "--checkpoint", type=Path, default=None, help="pretraining checkpoint (omit to train from scratch)"
    )
    p.add_argument("--svd", type=Path, default=None, help="shift dictionary file")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="evaluate a fine-tuned checkpoint")
    add_common(p)
    p.add_argument("--checkpoint", type=Path, default=None, help="fine-tuned checkpoint")
    p.add_argument("--split", choices=SPLIT_CHOICES, default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-embeddings", help="export fused features as delimited text")
    add_common(p)
    p.add_argument("--checkpoint", type=Path, default=None, help="checkpoint to embed with")
    p.add_argument("--split", choices=SPLIT_CHOICES, default="test")
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args.config, {"out_dir": args.out, "seed": args.seed})
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        # One run at a time per output directory.
        with FileLock(out / ".lock"):
            return args.func(cfg, args, out)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
