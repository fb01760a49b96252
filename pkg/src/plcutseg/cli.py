"""Command-line entry point: ``plcutseg <command> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import ConfigError, RunConfig
from .data import IMAGE_SUFFIXES, DataError, Provenance, SplitManifest, ingest_dataset, load_image, make_split
from .evaluation import ReportGrid, ReportRow, evaluate_model, render_report, report_to_csv, score_folders
from .toy import ToyCounts, generate_toy_dataset

logger = logging.getLogger("plcutseg")


class CommandError(RuntimeError):
    pass


def _set_workers(n: int) -> None:
    if n and n > 0:
        torch.set_num_threads(n)


def _emit_report(grid: ReportGrid, csv_path: str | None) -> None:
    sys.stdout.write(render_report(grid))
    if csv_path:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        Path(csv_path).write_text(report_to_csv(grid))


# --------------------------------------------------------------------------
# commands


def cmd_split(args) -> int:
    real_root = Path(args.real)
    mask_dir = args.real_masks
    has_masks = mask_dir is not None or (real_root / "masks").is_dir()
    if args.beta > 0 and not has_masks:
        raise CommandError(f"--beta {args.beta} needs ground truth for the real set "
                           f"(no {real_root / 'masks'} and no --real-masks)")
    provenance = Provenance.LABELED_REAL if has_masks else Provenance.UNLABELED_REAL
    real = ingest_dataset(real_root, provenance, mask_dir=mask_dir, prefix="real")
    synthetic = ingest_dataset(args.synthetic, Provenance.SYNTHETIC, prefix="synthetic")
    manifest = make_split(real, synthetic, args.beta, args.seed, dataset=args.dataset or real_root.name)
    manifest.write(args.out)
    c = manifest.counts
    print(f"labeled: {c['labeled']}")
    print(f"unlabeled: {c['unlabeled']}")
    print(f"synthetic: {c['synthetic']}")
    print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    from .trainer import load_checkpoint, train

    if args.config:
        cfg = RunConfig.load(args.config)
    elif args.resume:
        cfg = RunConfig.from_dict(load_checkpoint(args.resume)["config"])
    else:
        raise CommandError("--config is required unless resuming from a checkpoint")
    if args.manifest:
        cfg.data.manifest = args.manifest
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.workers is not None:
        cfg.data.workers = args.workers
    if not cfg.data.manifest:
        raise ConfigError("data.manifest: no manifest given (set it in the config or pass --manifest)")
    if not Path(cfg.data.manifest).is_file():
        raise ConfigError(f"data.manifest: file not found: {cfg.data.manifest}")
    _set_workers(cfg.data.workers)

    manifest = SplitManifest.read(cfg.data.manifest)
    result = train(cfg, manifest, resume=args.resume, progress=True)
    grid = ReportGrid(list(result.reports[-1].metrics), ["mdice", "iou"]) if result.reports else None
    if grid is not None and grid.datasets:
        last = result.reports[-1]
        values = {(d, m): last.metrics[d][m] for d in grid.datasets for m in grid.metrics}
        grid.rows.append(ReportRow(f"epoch {last.epoch}", f"{cfg.train.beta:g}%", values))
        text = render_report(grid)
        (result.output_dir / "report.txt").write_text(text)
        (result.output_dir / "report.csv").write_text(report_to_csv(grid))
        sys.stdout.write(text)
    return 0


def _resolve_datasets(text: str, cfg: RunConfig) -> dict[str, str]:
    known = cfg.data.test_sets
    out = {}
    for item in [s.strip() for s in text.split(",") if s.strip()]:
        if "=" in item:
            name, path = item.split("=", 1)
            out[name] = path
        elif item in known:
            out[item] = known[item]
        else:
            raise CommandError(f"unknown dataset {item!r}; known names: {', '.join(sorted(known)) or '(none)'}"
                               " (or pass name=DIR)")
    if not out:
        raise CommandError("--datasets is empty")
    return out


def cmd_eval(args) -> int:
    from .trainer import load_segmentation_net

    _set_workers(args.workers)
    U, cfg = load_segmentation_net(args.checkpoint)
    datasets = _resolve_datasets(args.datasets, cfg)
    size = args.image_size or cfg.eval_image_size()
    results = []
    for name, root in datasets.items():
        refs = ingest_dataset(root, Provenance.LABELED_REAL, prefix=name)
        results.append(evaluate_model(U, refs, size, dataset=name, threshold=cfg.eval.threshold))
    grid = ReportGrid([r.dataset for r in results], ["mdice", "iou"])
    grid.add(args.method or Path(args.checkpoint).stem, args.labels or f"{cfg.train.beta:g}%", results)
    _emit_report(grid, args.report_csv)
    return 0


def cmd_score(args) -> int:
    result = score_folders(args.pred, args.gt, dataset=args.name)
    grid = ReportGrid([result.dataset], ["mdice", "iou"])
    grid.add(args.method, args.labels, [result])
    _emit_report(grid, args.report_csv)
    return 0


def cmd_translate(args) -> int:
    from .core import denormalize, normalize
    from .trainer import load_generator

    G, _ = load_generator(args.checkpoint)
    src, dst = Path(args.inp), Path(args.out)
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if src.is_dir() else []
    if not files:
        raise CommandError(f"no images found in {src}")
    dst.mkdir(parents=True, exist_ok=True)
    k = G.downsampling
    with torch.no_grad():
        for path in files:
            img = load_image(path)
            h, w = img.shape[-2:]
            th, tw = -(-h // k) * k, -(-w // k) * k
            x = normalize(img).unsqueeze(0)
            if (th, tw) != (h, w):
                x = F.interpolate(x, size=(th, tw), mode="bilinear", align_corners=False)
            z = G(x)
            if (th, tw) != (h, w):
                z = F.interpolate(z, size=(h, w), mode="bilinear", align_corners=False)
            out = denormalize(z[0]).clamp(0, 1).permute(1, 2, 0).numpy()
            Image.fromarray((out * 255).round().astype(np.uint8), mode="RGB").save(dst / path.name)
    print(f"translated {len(files)} images into {dst}")
    return 0


def cmd_gen_toy(args) -> int:
    counts = ToyCounts.parse(args.counts)
    root = generate_toy_dataset(args.out, counts, size=args.size, seed=args.seed)
    print(f"wrote toy dataset to {root}: {counts.synthetic} synthetic, {counts.real} real, {counts.test} test")
    return 0


def cmd_ablate(args) -> int:
    from .desk import run_desk_ablation
    from .trainer import VARIANTS

    levels = [float(b) for b in args.betas.split(",")]
    cells = [(v, b) for v in VARIANTS for b in levels]
    seeds = [int(s) for s in args.seeds.split(",")]
    results = run_desk_ablation(args.out, cells, seeds, args.epochs)
    grid = ReportGrid([f"{b:g}%" for b in levels], ["mdice"])
    for v in VARIANTS:
        values = {(f"{b:g}%", "mdice"): results[(v, b)].median_best for b in levels}
        grid.rows.append(ReportRow(v, "median", values))
    _emit_report(grid, args.report_csv)
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="plcutseg", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="write a labeled/unlabeled/synthetic split manifest", formatter_class=fmt)
    p.add_argument("--real", required=True, help="real dataset root (images/ [masks/])")
    p.add_argument("--real-masks", default=None, help="ground-truth mask folder for the real set")
    p.add_argument("--synthetic", required=True, help="synthetic dataset root (images/ masks/)")
    p.add_argument("--beta", type=float, default=0.0, help="percentage of labeled real samples")
    p.add_argument("--seed", type=int, default=0, help="split seed")
    p.add_argument("--dataset", default=None, help="dataset name stored in the manifest")
    p.add_argument("--out", required=True, help="manifest file to write")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train end-to-end from a config and manifest", formatter_class=fmt)
    p.add_argument("--config", default=None, help="YAML run config")
    p.add_argument("--manifest", default=None, help="split manifest (overrides data.manifest)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    p.add_argument("--output-dir", default=None, help="override output_dir (env PLCUTSEG_OUTPUT_DIR wins)")
    p.add_argument("--workers", type=int, default=None, help="torch intra-op threads")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on test sets", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--datasets", required=True, help="comma list of known test set names or name=DIR")
    p.add_argument("--image-size", type=int, default=None, help="inference resolution")
    p.add_argument("--method", default=None, help="row label (default: checkpoint stem)")
    p.add_argument("--labels", default=None, help="label-level column text")
    p.add_argument("--report-csv", default=None, help="write the machine-readable grid here")
    p.add_argument("--workers", type=int, default=0, help="torch intra-op threads")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="score a folder of predicted masks", formatter_class=fmt)
    p.add_argument("--pred", required=True, help="predicted mask folder")
    p.add_argument("--gt", required=True, help="ground-truth mask folder")
    p.add_argument("--name", default=None, help="dataset name (default: gt folder name)")
    p.add_argument("--method", default="predictions", help="row label")
    p.add_argument("--labels", default="-", help="label-level column text")
    p.add_argument("--report-csv", default=None, help="write the machine-readable grid here")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("translate", help="translate a folder of images with a trained generator",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--in", dest="inp", required=True, help="input image folder")
    p.add_argument("--out", required=True, help="output folder (filenames mirrored)")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("gen-toy", help="generate the procedural toy dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output root")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--counts", default="200,100,40", help="synthetic,real,test image counts")
    p.add_argument("--size", type=int, default=64, help="frame size in pixels")
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("ablate", help="desk-scale ablation grid on the toy dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="working directory")
    p.add_argument("--betas", default="0,15,30", help="label levels (percent)")
    p.add_argument("--seeds", default="0,1,2", help="training seeds")
    p.add_argument("--epochs", type=int, default=30, help="epochs per run")
    p.add_argument("--report-csv", default=None, help="write the machine-readable grid here")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CommandError, DataError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
