"""``spgnet`` command line: train, eval, profile, visualize, selftest.

Exit status: 0 on success, 2 for usage or configuration errors, 1 for
failures while running a workflow.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    pass


def _input_size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"illegal input size {text!r}")
    return h, w


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spgnet", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (metrics.jsonl, checkpoints/); default paths.output_dir")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="synth://seed/count/classes/size or a Cityscapes root")
    p.add_argument("--split", default="val")
    p.add_argument("--strategy", choices=["gap", "tiled", "ap"], default="gap")
    p.add_argument("--crop", type=int, default=769)
    p.add_argument("--overlap", type=float, default=1 / 3)
    p.add_argument("--scales", type=float, nargs="+", default=[1.0])
    p.add_argument("--flip", action="store_true")
    p.add_argument("--out", help="write the JSON report here instead of stdout")

    p = sub.add_parser("profile", help="count parameters and FLOPs")
    p.add_argument("--config", required=True)
    p.add_argument("--input-size", type=_input_size, default=(1024, 2048))
    p.add_argument("--per-layer", action="store_true")
    p.add_argument("--json", action="store_true", help="emit the report as JSON")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("visualize", help="render guided-attention maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="classes", action="append", required=True, help="class name or index")
    p.add_argument("--topk", type=int, default=15)
    p.add_argument("--colormap", default="viridis")
    p.add_argument("--out", required=True)

    sub.add_parser("selftest", help="run the invariant checks")
    return parser


def cmd_train(args):
    from spgnet.config import load_config
    from spgnet.datapipe import open_dataset
    from spgnet.engine import train

    cfg = load_config(args.config, args.set, args.seed)
    uri = cfg.paths.get("data_uri")
    if not uri:
        raise UsageError("no data: set paths.data_uri or SPGNET_DATA_ROOT")
    out_dir = args.out or cfg.paths.get("output_dir")
    if not out_dir:
        raise UsageError("no output directory: pass --out or set paths.output_dir")
    data = open_dataset(uri, cfg.paths.get("split", "train"))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    result = train(cfg.network, data, cfg.train, out)
    final = result.log[-1]["total_loss"] if result.log else None
    print(json.dumps({"iterations": result.iteration, "final_loss": final, "checkpoints": len(result.checkpoints)}))


def cmd_eval(args):
    from spgnet.datapipe import IMAGENET_MEAN, IMAGENET_STD, open_dataset
    from spgnet.engine import load_checkpoint
    from spgnet.evaluate import EvalStrategy, evaluate_dataset

    strategy = EvalStrategy(args.strategy, args.crop, args.overlap, args.scales, args.flip)
    ckpt = load_checkpoint(args.checkpoint)
    data = open_dataset(args.data, args.split)
    names = getattr(data, "class_names", None)
    if names is not None and len(names) != ckpt.plan.num_classes:
        raise UsageError(f"dataset has {len(names)} classes, checkpoint {ckpt.plan.num_classes}")
    aug = ckpt.train_config.augment if ckpt.train_config else None
    mean, std = (aug.mean, aug.std) if aug else (IMAGENET_MEAN, IMAGENET_STD)
    report = evaluate_dataset(ckpt.model, data, strategy, mean, std)
    report["checkpoint"] = str(args.checkpoint)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    else:
        print(text)


def cmd_profile(args):
    from spgnet.config import load_config
    from spgnet.profiler import build_meta, profile

    cfg = load_config(args.config, args.set, args.seed)
    report = profile(build_meta(cfg.network), *args.input_size)
    if args.json:
        print(json.dumps(report.to_dict(args.per_layer), indent=2))
    else:
        print(report.table(args.per_layer))


def _resolve_class(name, class_names, num_classes):
    if name.isdigit():
        idx = int(name)
    elif class_names and name in class_names:
        idx = class_names.index(name)
    else:
        raise UsageError(f"unknown class {name!r}")
    if not 0 <= idx < num_classes:
        raise UsageError(f"class index {idx} outside [0, {num_classes})")
    return idx


def cmd_visualize(args):
    from spgnet.datapipe import IMAGENET_MEAN, IMAGENET_STD, normalize, read_label_table
    from spgnet.engine import load_checkpoint
    from spgnet.visualize import render_attention

    ckpt = load_checkpoint(args.checkpoint)
    c = ckpt.plan.num_classes
    names = read_label_table()[1] if c == 19 else [str(i) for i in range(c)]
    classes = [_resolve_class(n, names, c) for n in args.classes]
    path = Path(args.image)
    if not path.is_file():
        raise UsageError(f"image not found: {path}")
    image = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    aug = ckpt.train_config.augment if ckpt.train_config else None
    mean, std = (aug.mean, aug.std) if aug else (IMAGENET_MEAN, IMAGENET_STD)
    paths = render_attention(ckpt.model, image, normalize(image, mean, std), classes, args.out, args.topk,
                             colormap=args.colormap, class_names=names)
    for p in paths:
        print(p)


def cmd_selftest(args):
    from spgnet import selftest

    if not selftest.run():
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "profile": cmd_profile,
    "visualize": cmd_visualize,
    "selftest": cmd_selftest,
}


def dispatch(argv=None) -> int:
    from spgnet.config import ConfigError

    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return EXIT_OK if exit_.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args) or EXIT_OK
    except (ConfigError, UsageError) as err:
        print(f"spgnet {args.command}: configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:
        print(f"spgnet {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
