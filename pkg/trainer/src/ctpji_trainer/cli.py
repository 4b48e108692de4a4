"""Command-line front end: train, predict, gradcam.

Exit codes follow the pipeline convention: 0 success, 1 runtime error,
2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from .data import (
    EmptyDataset,
    config_patients,
    load_dataset,
    load_manifest_labels,
    load_splits,
    read_pgm,
)
from .gradcam import METHODS, SCORES, compute_cam, encode_heatmap_pgm
from .model import ModelConfig, load_checkpoint
from .predict import IoFailure, predict_export
from .train import TrainConfig, train

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part)


def cmd_train(args: argparse.Namespace) -> int:
    for path in (args.patches, args.manifest, args.splits):
        if not Path(path).exists():
            _log(f"error: {path} does not exist")
            return EXIT_USAGE
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_cfg = ModelConfig(
        radix=args.radix,
        cardinality=args.cardinality,
        stem_channels=args.stem_channels,
        stage_channels=args.channels,
        stage_blocks=args.blocks,
    )
    train_cfg = TrainConfig(
        epochs=args.epochs,
        learning_rate=args.learning_rate,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        jacobian_lambda=args.jacobian_lambda,
        n_projections=args.projections,
        seed=args.seed,
        early_stop_acc=args.early_stop_acc,
    )
    try:
        labels = load_manifest_labels(Path(args.manifest))
        splits = load_splits(Path(args.splits))
        train_ids, valid_ids = config_patients(splits, args.config)
        train_set = load_dataset(Path(args.patches), labels, train_ids)
        valid_set = load_dataset(Path(args.patches), labels, valid_ids)
        result = train(
            train_set,
            valid_set,
            model_cfg,
            train_cfg,
            log_path=out_dir / "training_log.jsonl",
            checkpoint_path=out_dir / "checkpoint.pt",
        )
    except (EmptyDataset, OSError, ValueError, KeyError, RuntimeError) as exc:
        _log(f"error: {exc}")
        return EXIT_RUNTIME
    _log(
        f"best epoch {result.best_epoch} "
        f"(valid patient-mean slice accuracy {result.best_valid_acc:.3f}); "
        f"checkpoint at {out_dir / 'checkpoint.pt'}"
    )
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    if not Path(args.checkpoint).is_file():
        _log(f"error: checkpoint {args.checkpoint} does not exist")
        return EXIT_USAGE
    if not Path(args.patches).is_dir():
        _log(f"error: patch directory {args.patches} does not exist")
        return EXIT_USAGE
    try:
        model, _extra = load_checkpoint(Path(args.checkpoint))
        records = predict_export(model, Path(args.patches), Path(args.out))
    except (IoFailure, OSError, ValueError, KeyError) as exc:
        _log(f"error: {exc}")
        return EXIT_RUNTIME
    _log(f"wrote {len(records)} predictions to {args.out}")
    return EXIT_OK


def cmd_gradcam(args: argparse.Namespace) -> int:
    if not Path(args.checkpoint).is_file() or not Path(args.patch).is_file():
        _log("error: checkpoint and patch files must exist")
        return EXIT_USAGE
    try:
        model, _extra = load_checkpoint(Path(args.checkpoint))
        patch = torch.from_numpy(read_pgm(Path(args.patch))).unsqueeze(0)
        heatmap = compute_cam(model, patch, method=args.method, score=args.score)
        Path(args.out).write_bytes(encode_heatmap_pgm(heatmap.upsampled))
    except (OSError, ValueError, KeyError) as exc:
        _log(f"error: {exc}")
        return EXIT_RUNTIME
    _log(f"wrote {args.method} heatmap to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctpji-train",
        description="Split-attention CNN training and inspection on equalized CT patches.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one configuration")
    p_train.add_argument("--patches", required=True)
    p_train.add_argument("--manifest", required=True)
    p_train.add_argument("--splits", required=True)
    p_train.add_argument("--config", type=int, default=1, choices=(1, 2, 3, 4))
    p_train.add_argument("--out", required=True, help="directory for checkpoint and log")
    p_train.add_argument("--epochs", type=int, default=100)
    p_train.add_argument("--learning-rate", type=float, default=1e-4)
    p_train.add_argument("--weight-decay", type=float, default=1e-4)
    p_train.add_argument("--batch-size", type=int, default=4)
    p_train.add_argument("--jacobian-lambda", type=float, default=0.01)
    p_train.add_argument("--projections", type=int, default=1)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--early-stop-acc", type=float, default=None)
    p_train.add_argument("--radix", type=int, default=2)
    p_train.add_argument("--cardinality", type=int, default=1)
    p_train.add_argument("--stem-channels", type=int, default=16)
    p_train.add_argument("--channels", type=_int_tuple, default=(16, 32, 64, 128))
    p_train.add_argument("--blocks", type=_int_tuple, default=(1, 1, 1, 1))
    p_train.set_defaults(func=cmd_train)

    p_predict = sub.add_parser("predict", help="export the predictions CSV")
    p_predict.add_argument("--checkpoint", required=True)
    p_predict.add_argument("--patches", required=True)
    p_predict.add_argument("--out", required=True)
    p_predict.set_defaults(func=cmd_predict)

    p_cam = sub.add_parser("gradcam", help="export a class-activation heatmap")
    p_cam.add_argument("--checkpoint", required=True)
    p_cam.add_argument("--patch", required=True)
    p_cam.add_argument("--out", required=True)
    p_cam.add_argument("--method", choices=METHODS, default="gradcam")
    p_cam.add_argument("--score", choices=SCORES, default="logit")
    p_cam.set_defaults(func=cmd_gradcam)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
