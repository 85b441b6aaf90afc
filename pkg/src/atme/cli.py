"""Command line entry point: ``atme {train,infer,eval,plot,make-toy}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from PIL import Image

from . import config as cfgmod
from .data import IMAGE_SUFFIXES, PairedImageDataset, make_toy_dataset, normalize, read_rgb, split_ab, to_uint8
from .engine import CheckpointError, NonFiniteLossError, Trainer, infer, load_model, read_checkpoint
from .kid import extract_features, kid, make_extractor
from .monitor import plot_history, read_history

log = logging.getLogger("atme")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _image_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise UsageError(f"no such file or directory: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise UsageError(f"no images found in {path}")
    return files


def _load_images(path: Path, size: Optional[int] = None) -> torch.Tensor:
    images = []
    for f in _image_files(path):
        x = normalize(read_rgb(f)).permute(2, 0, 1)[None]
        if size is None:
            size = x.shape[-1]
        if x.shape[-2:] != (size, size):
            x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        images.append(x)
    return torch.cat(images)


def write_manifest(out_dir: Path, cfg: dict, config_path: Optional[str]) -> Path:
    path = out_dir / "manifest.json"
    if path.exists():
        return path
    manifest = {
        "config": cfg,
        "config_hash": cfgmod.config_hash(cfg),
        "config_source": config_path,
        "seeds": {"train": cfg["train.seed"], "data": cfg["data.seed"]},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "artifacts": {"config": "config.yaml", "history": "history.csv", "checkpoints": "checkpoint_*.pt"},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def cmd_train(args) -> int:
    if args.resume:
        ckpt = Path(args.resume)
        if not ckpt.is_file():
            raise UsageError(f"checkpoint not found: {ckpt}")
        cfg = cfgmod.resolve(json.loads(read_checkpoint(ckpt)["meta"])["config"], args.set)
    else:
        if not args.config:
            raise UsageError("--config is required unless --resume is given")
        try:
            cfg = cfgmod.load_config(args.config, args.set)
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from exc
    if not cfg["data.root"]:
        raise UsageError("data.root is not set")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg, args.config)
    cfgmod.dump_config(cfg, out / "config.yaml")
    dataset = PairedImageDataset(cfg["data.root"], cfg["data.split"], cfg["data.direction"])
    if dataset.skipped:
        log.warning("%d unreadable files skipped", dataset.skipped)
    trainer = Trainer.from_checkpoint(args.resume, dataset.pairs, cfg) if args.resume else Trainer(cfg, dataset.pairs)
    trainer.train(out_dir=out, checkpoint_every=args.checkpoint_every)
    print(f"trained {trainer.epoch} epochs; history at {out / 'history.csv'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model, cfg = load_model(args.checkpoint)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = _image_files(Path(args.input))
    for idx, f in enumerate(files):
        arr = read_rgb(f)
        if args.composite:
            x = split_ab(arr, cfg["data.direction"], f.name).source
        else:
            x = normalize(arr).permute(2, 0, 1)
        if tuple(x.shape[-2:]) != (model.image_size,) * 2:
            raise UsageError(f"{f}: resolution {tuple(x.shape[-2:])} does not match model size {model.image_size}")
        y = infer(model, x, seed=args.seed + idx)
        Image.fromarray(to_uint8(y)).save(out / f"{f.stem}.png")
    print(f"wrote {len(files)} images to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    extractor = make_extractor(args.extractor)
    real = _load_images(Path(args.real_dir), args.image_size)
    fake = _load_images(Path(args.fake_dir), args.image_size or real.shape[-1])
    res = kid(extract_features(real, extractor), extract_features(fake, extractor), args.subset_size,
              args.n_subsets, args.seed)
    doc = {**res.to_dict(), "extractor": extractor.extractor_id, "n_real": len(real), "n_fake": len(fake)}
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_plot(args) -> int:
    path = Path(args.history)
    if not path.is_file():
        raise UsageError(f"history file not found: {path}")
    records = read_history(path)
    if not records:
        log.error("history %s is empty", path)
        return EXIT_FAILURE
    plot_history(records, args.out, args.window)
    print(f"plot written to {args.out}")
    return EXIT_OK


def cmd_make_toy(args) -> int:
    out = make_toy_dataset(args.root, args.n, args.size, args.seed)
    print(f"wrote {args.n} pairs to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atme", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="flat dotted-key YAML/JSON config")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--checkpoint-every", type=int, default=None)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="translate images with a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True, help="image file or directory")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out-dir", required=True)
    i.add_argument("--composite", action="store_true", help="inputs are AB composites")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="KID between two image folders")
    e.add_argument("--real-dir", required=True)
    e.add_argument("--fake-dir", required=True)
    e.add_argument("--extractor", choices=("inception", "random-proj"), default="inception")
    e.add_argument("--subset-size", type=int, default=None)
    e.add_argument("--n-subsets", type=int, default=50)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--image-size", type=int, default=None)
    e.add_argument("--out", help="also write the JSON result here")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="plot -L_GAN history against log 4")
    pl.add_argument("--history", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--window", type=int, default=5)
    pl.set_defaults(func=cmd_plot)

    m = sub.add_parser("make-toy", help="write a procedural paired dataset")
    m.add_argument("--root", required=True)
    m.add_argument("--n", type=int, default=500)
    m.add_argument("--size", type=int, default=64)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_make_toy)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, NonFiniteLossError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
