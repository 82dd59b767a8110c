"""Command-line entry point: synthesize data, train, predict, evaluate.

Exit codes: 0 success, 1 user error (bad flags, missing or malformed
files), 2 internal error.
"""

from __future__ import annotations

import os

# Cap BLAS threads before numpy loads; numba is capped in _kernels.
_threads = os.environ.get("CPNET_THREADS", "").strip()
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import sys
import traceback
from pathlib import Path

from .data import load_manifest, load_mask, load_sample, synth_generate, write_synth_dataset
from .inference import EnsembleConfig, predict_batch
from .metrics import ConfusionCounts, accumulate_confusion, compute_ber
from .model import ModelConfig, build
from .training import TrainConfig, load_checkpoint, save_checkpoint, train, write_history_csv


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_size(text: str) -> tuple[int, int]:
    for sep in ("x", "X", "×"):
        if sep in text:
            h, _, w = text.partition(sep)
            try:
                return int(h), int(w)
            except ValueError:
                break
    raise UserError(f"--size must look like 192x192, got {text!r}")


def _parse_scales(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise UserError(f"--scales must be comma-separated integers, got {text!r}")


def _load_training_pairs(manifest: str):
    samples = []
    for img, mask in load_manifest(manifest):
        if mask is None:
            raise UserError(f"{manifest}: entry {img} has no mask column (required for training)")
        samples.append(load_sample(img, mask))
    return samples


def _cmd_synth(args) -> int:
    size = _parse_size(args.size)
    samples = synth_generate(args.seed, args.count, size)
    manifest = write_synth_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out} (manifest: {manifest})")
    return 0


def _cmd_train(args) -> int:
    train_samples = _load_training_pairs(args.train_manifest)
    val_samples = _load_training_pairs(args.val_manifest) if args.val_manifest else []
    config = TrainConfig(
        epochs=args.epochs, batch_size=args.batch, global_seed=args.seed,
        lr=args.lr, input_size=args.input_size, checkpoint_path=args.out,
        train_manifest=args.train_manifest, val_manifest=args.val_manifest)
    model = build(ModelConfig(base_width=args.base_width), seed=args.seed)

    def log(row):
        ber = "n/a" if row.val_ber is None else f"{row.val_ber:.4f}"
        print(f"epoch {row.epoch:3d}  train_loss {row.train_loss:+.4f}  val_ber {ber}")

    result = train(model, train_samples, val_samples, config, log=log)
    write_history_csv(result.history, f"{args.out}.history.csv")
    if result.best_epoch is not None:
        print(f"best val_ber {result.best_val_ber:.4f} at epoch {result.best_epoch}; "
              f"checkpoint: {args.out}")
    else:
        print(f"checkpoint (final epoch): {args.out}")
    return 0


def _cmd_predict(args) -> int:
    model, _meta = load_checkpoint(args.ckpt)
    mode = {"or": "or_of_masks", "mean": "threshold_of_mean"}[args.ensemble]
    config = EnsembleConfig(scales=_parse_scales(args.scales), mode=mode,
                            threshold=args.threshold)
    result = predict_batch(model, args.manifest, config, args.out)
    print(f"wrote {len(result.mask_paths)} masks to {args.out}")
    if result.report is not None:
        print(result.report.as_keyvalues())
    else:
        print("no ground truth in manifest; skipping evaluation")
    if result.skipped:
        print(f"warning: skipped {len(result.skipped)} unreadable image(s)", file=sys.stderr)
        return 1
    return 0


def _cmd_eval(args) -> int:
    pred_dir = Path(args.pred_dir)
    counts = ConfusionCounts()
    scored = 0
    for img, truth_path in load_manifest(args.manifest):
        if truth_path is None:
            continue
        pred_path = pred_dir / f"{Path(img).stem}_mask.png"
        if not pred_path.exists():
            raise UserError(f"missing prediction file {pred_path}")
        counts = accumulate_confusion(load_mask(pred_path), load_mask(truth_path), counts)
        scored += 1
    if not scored:
        raise UserError(f"{args.manifest}: no entries with ground-truth masks to score")
    report = compute_ber(counts)
    print(report.as_keyvalues())
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="cpnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parser_class=_Parser,
                       help="generate a synthetic shadow dataset + manifest")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", required=True, help="HxW, both divisible by 32 (e.g. 192x192)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", parser_class=_Parser, help="train on a manifest dataset")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", default=None)
    p.add_argument("--base-width", type=int, default=32)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--input-size", type=int, default=192,
                   help="square training resolution, divisible by 32 (default 192)")
    p.add_argument("--out", required=True, help="checkpoint path (history CSV goes next to it)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", parser_class=_Parser,
                       help="write multi-scale ensemble masks for a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--scales", default="192,256,384,480")
    p.add_argument("--ensemble", choices=("or", "mean"), default="or")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output directory for <stem>_mask.png files")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("eval", parser_class=_Parser,
                       help="score previously written masks against a manifest")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    except (UserError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
