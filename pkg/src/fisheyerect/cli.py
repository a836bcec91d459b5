"""Command-line entry point: ``fisheyerect <subcommand> ...``.

Exit codes: 0 success, 1 validation error (bad flags or values), 2 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checks
from .dataset import (SOURCE_KINDS, DatasetError, DatasetIOError, load_dataset, load_image,
                      load_sources, read_manifest, save_image, synthesize_dataset,
                      synthetic_sources)
from .geometry import warp
from .metrics import MetricReport, psnr, ssim
from .model import ModelConfig
from .nncore import CheckpointError
from .nncore.checkpoint import INDEX
from .rectify import load_model, rectify
from .train import TrainConfig, finetune, pretrain

log = logging.getLogger("fisheyerect")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default, which here means an I/O failure
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def resolve_checkpoint(path, stage: str = "finetune") -> Path:
    """A checkpoint directory, or a training output dir holding ``<stage>_epoch*``."""
    path = Path(path)
    if (path / INDEX).exists():
        return path
    found = sorted(path.glob(f"{stage}_epoch*"))
    if not found:
        raise CheckpointError(path, f"no checkpoint (no {INDEX} and no {stage}_epoch* dirs)")
    return found[-1]


def _model_config(args, manifest: dict) -> ModelConfig:
    size = manifest["image_size"]
    patch = args.patch_size or manifest.get("patch_size", 16)
    if args.desk:
        return ModelConfig.desk(image_size=size, patch_size=patch)
    return ModelConfig(image_size=size, patch_size=patch)


def _train_config(args, stage: str) -> TrainConfig:
    manifest = read_manifest(args.dataset)
    kw = dict(stage=stage, seed=args.seed, dataset=args.dataset, checkpoint_dir=args.out,
              batch_size=args.batch, max_lr=args.lr, steps=args.steps,
              model=_model_config(args, manifest))
    if args.epochs is not None:
        kw["epochs"] = args.epochs
    if stage == "finetune":
        kw["n_f"] = args.nf
    else:
        kw["shuffle"] = not args.no_shuffle
    return TrainConfig(**kw)


# -- subcommands -----------------------------------------------------------

def cmd_synth(args) -> int:
    if args.count < 1:
        raise ValueError("--count must be >= 1")
    if args.sources:
        sources = load_sources(args.sources, args.image_size)
    else:
        sources = synthetic_sources(args.num_sources, args.image_size, args.seed, args.kind)
    manifest = synthesize_dataset(sources, args.count, args.seed, args.out,
                                  image_size=args.image_size, patch_size=args.patch_size or 16)
    print(f"wrote {manifest['count']} records to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    result = pretrain(_train_config(args, "pretrain"))
    con, pos = result.series("L_con"), result.series("L_pos")
    print(f"pretrain done: L_con {con[-1]:.4f} L_pos {pos[-1]:.4f} checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    pretrained = resolve_checkpoint(args.checkpoint, "pretrain") if args.checkpoint else None
    result = finetune(_train_config(args, "finetune"), pretrained=pretrained)
    flow, mask = result.series("L_flow"), result.series("L_mask")
    print(f"finetune done: L_flow {flow[-1]:.4f} L_mask {mask[-1]:.4f} checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_rectify(args) -> int:
    net = load_model(resolve_checkpoint(args.checkpoint))
    inputs = [Path(p) for p in args.images]
    out = Path(args.out)
    if len(inputs) > 1 or out.is_dir():
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / f"{p.stem}_rectified.png" for p in inputs]
    else:
        targets = [out]
    for src, dst in zip(inputs, targets):
        timings: dict = {}
        save_image(dst, rectify(load_image(src), net, sigma=args.sigma, timings=timings))
        print(f"{src} -> {dst} (model {timings['model']:.3f}s, warp {timings['warp']:.3f}s)")
    return EXIT_OK


def side_by_side(*images: np.ndarray, gap: int = 4) -> np.ndarray:
    h = max(im.shape[0] for im in images)
    cols = []
    for i, im in enumerate(images):
        pad = np.zeros((h, im.shape[1], 3))
        pad[:im.shape[0]] = im
        cols.append(pad)
        if i < len(images) - 1:
            cols.append(np.ones((h, gap, 3)))
    return np.concatenate(cols, axis=1)


def evaluate(dataset, checkpoint=None, oracle: bool = False, out=None, sigma=None) -> MetricReport:
    """Rectify every record and score it against its distortion-free source.

    The reference is the source masked by M_gt; PSNR is computed inside M_gt
    and SSIM over the whole image.
    """
    if not oracle and checkpoint is None:
        raise ValueError("eval needs --checkpoint unless --oracle is given")
    manifest, records = load_dataset(dataset)
    net = None if oracle else load_model(resolve_checkpoint(checkpoint))
    report = MetricReport()
    out = None if out is None else Path(out)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for entry, rec in zip(manifest["records"], records):
        if rec.source is None:
            raise DatasetError(f"record {entry['id']} has no stored source image")
        if oracle:
            result = warp(rec.distorted, rec.flow_gt, rec.mask_gt)
        else:
            result = rectify(rec.distorted, net, sigma=sigma)
        reference = rec.source * rec.mask_gt[..., None]
        report.add(entry["id"], psnr(result, reference, rec.mask_gt), ssim(result, reference))
        if out is not None:
            save_image(out / f"{entry['id']}_compare.png", side_by_side(rec.distorted, result, reference))
    if out is not None:
        try:
            (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
        except OSError as exc:
            raise DatasetIOError(out / "report.csv", exc) from exc
    return report


def cmd_eval(args) -> int:
    report = evaluate(args.dataset, args.checkpoint, args.oracle, args.out, args.sigma)
    mode = "oracle" if args.oracle else "model"
    print(f"{mode}: {report.count} images, PSNR {report.mean_psnr:.2f} dB, SSIM {report.mean_ssim:.4f}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    t0 = time.perf_counter()
    results = checks.run_all(quick=args.quick)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name}: {r.detail}")
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if failed == 0 else EXIT_INVALID


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fisheyerect", description="Fisheye rectification toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="synthesize a distorted dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sources", help="directory of source images (default: generated)")
    s.add_argument("--kind", choices=sorted(SOURCE_KINDS), default="smooth")
    s.add_argument("--num-sources", type=int, default=16)
    s.add_argument("--image-size", type=int, default=256)
    s.add_argument("--patch-size", type=int)
    s.set_defaults(func=cmd_synth)

    for name, func in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        t = sub.add_parser(name, help=f"{name} stage")
        t.add_argument("--dataset", required=True)
        t.add_argument("--out", required=True, help="checkpoint directory")
        t.add_argument("--seed", type=int, default=0)
        t.add_argument("--epochs", type=int)
        t.add_argument("--steps", type=int, help="overrides --epochs")
        t.add_argument("--batch", type=int, default=4)
        t.add_argument("--lr", type=float, default=1e-4)
        t.add_argument("--patch-size", type=int)
        t.add_argument("--desk", action="store_true", help="small CPU-scale model")
        if name == "finetune":
            t.add_argument("--checkpoint", help="pretrained checkpoint (omit to train from scratch)")
            t.add_argument("--nf", type=int, help="encoder layers to transfer")
        else:
            t.add_argument("--no-shuffle", action="store_true")
        t.set_defaults(func=func)

    r = sub.add_parser("rectify", help="rectify images of any size")
    r.add_argument("images", nargs="+")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True, help="output file, or directory for several inputs")
    r.add_argument("--sigma", type=float)
    r.set_defaults(func=cmd_rectify)

    e = sub.add_parser("eval", help="rectify a dataset and report PSNR/SSIM")
    e.add_argument("--dataset", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--oracle", action="store_true", help="warp with the ground-truth flow")
    e.add_argument("--out", help="directory for report.csv and comparison images")
    e.add_argument("--sigma", type=float)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("selfcheck", help="class counts, radial round trip, gradient checks")
    c.add_argument("--quick", action="store_true")
    c.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
