"""Command-line entry point: ``amil {synth,train,eval,heatmap}``.

Options may also come from ``--config FILE`` (UTF-8 ``key = value`` lines,
keys spelled like the long flags without dashes, ``-`` or ``_`` alike).
Flags given on the command line override the file.  Unknown keys are a usage
error.  Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from . import tensor as T
from .bags import SourceImage, TilingSpec, load_dataset, split_train_val, synth_generate, tile
from .checkpoint import load_model
from .errors import AmilError, GeometryError
from .imageio import read_image, write_image
from .localization import DEFAULT_ALPHA, attention_to_heatmap, render_overlay, write_heatmap_csv
from .model import POOLING_MODES, forward_bag
from .training import TrainConfig, evaluate, fit, predict

EPILOG = "Precedence: command-line flags > --config file > built-in defaults."


class UsageError(Exception):
    pass


def _grid(text: str) -> tuple[int, int]:
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like ROWSxCOLS, got {text!r}") from None
    if rows < 1 or cols < 1:
        raise argparse.ArgumentTypeError(f"grid extents must be positive, got {text!r}")
    return rows, cols


def _flag(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _unit(text: str) -> float:
    value = float(text)
    if not 0 <= value <= 1:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amil", description=__doc__.splitlines()[0], epilog=EPILOG)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_):
        p = sub.add_parser(name, help=help_, description=help_, epilog=EPILOG)
        p.add_argument("--config", help="key = value file; flags override its values")
        p.add_argument("--out", default=".", help="output directory (default: current directory)")
        p.add_argument("--seed", type=int, default=0, help="single source of all randomness (default 0)")
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress to stderr")
        return p

    p = command("synth", "write a synthetic motif dataset (images, labels.csv, motifs.csv)")
    p.add_argument("--bags", type=int, default=200)
    p.add_argument("--grid", type=_grid, default=(5, 5), help="patch grid ROWSxCOLS (default 5x5)")
    p.add_argument("--patch", type=int, default=28, help="patch size in pixels (default 28)")
    p.add_argument("--positive-fraction", type=_unit, default=0.5)
    p.add_argument("--motif-rate", type=float, default=0.15)
    p.add_argument("--format", choices=("png", "ppm"), default="png")

    p = command("train", "train on a labelled image folder and write metrics.csv and checkpoints")
    _dataset_args(p)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.001, help="learning rate (default 0.001); batch size is always 1")
    p.add_argument("--pooling", choices=POOLING_MODES, default="attention")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--augment", type=_flag, nargs="?", const=True, default=False,
                   help="random flip/rotation per image per epoch")
    p.add_argument("--hidden", type=int, default=128, help="attention hidden size (default 128)")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--record-time", type=_flag, nargs="?", const=True, default=False,
                   help="write wall-clock seconds to metrics.csv (makes it non-reproducible)")
    p.add_argument("--resume", type=_flag, nargs="?", const=True, default=False,
                   help="continue from last.* in --out")

    p = command("eval", "print accuracy of a checkpoint and write predictions.csv")
    _dataset_args(p, tiling=False)
    p.add_argument("--checkpoint", required=False, help="checkpoint stem (path without .manifest)")
    p.add_argument("--subset", choices=("all", "train", "val"), default="all",
                   help="evaluate the whole dataset or one side of the --seed split")
    p.add_argument("--train-fraction", type=float, default=0.8)

    p = command("heatmap", "write <image>.overlay.png and <image>.attention.csv per input image")
    p.add_argument("images", nargs="*")
    p.add_argument("--checkpoint")
    p.add_argument("--alpha", type=_unit, default=DEFAULT_ALPHA)
    p.add_argument("--stride", type=int, default=None, help="tiling stride (default: checkpoint's)")
    return parser


def _dataset_args(p, tiling=True):
    p.add_argument("--data", help="dataset root directory")
    p.add_argument("--labels", default="labels.csv", help="labels CSV, relative to --data (default labels.csv)")
    if tiling:
        p.add_argument("--patch", type=int, default=28)
        p.add_argument("--stride", type=int, default=None, help="tiling stride (default: patch size)")


def read_config(path) -> dict[str, str]:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def _apply_config(subparser: argparse.ArgumentParser, path) -> None:
    actions = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    try:
        values = read_config(path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    defaults = {}
    for key, raw in values.items():
        if key not in actions:
            raise UsageError(f"{path}: unknown key {key!r} for '{subparser.prog}'; known: {', '.join(sorted(actions))}")
        action = actions[key]
        try:
            value = action.type(raw) if action.type else raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{path}: bad value for {key}: {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{path}: {key} must be one of {list(action.choices)}, got {value!r}")
        if action.nargs == "*":
            value = raw.split()
        defaults[key] = value
    subparser.set_defaults(**defaults)


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        command = next((a for a in argv if a in subparsers.choices), None)
        if command not in subparsers.choices:
            parser.error("--config needs a subcommand")
        try:
            _apply_config(subparsers.choices[command], known.config)
        except UsageError as exc:
            subparsers.choices[command].error(str(exc))
    return parser, parser.parse_args(argv)


# ----------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.bags < 1:
        raise UsageError("--bags must be at least 1")
    if args.patch < 1:
        raise UsageError("--patch must be at least 1")
    if not 0 < args.motif_rate <= 1:
        raise UsageError("--motif-rate must be in (0, 1]")
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    samples = synth_generate(args.bags, args.grid, args.patch, args.positive_fraction, args.motif_rate, args.seed)
    with open(out / "labels.csv", "w", newline="", encoding="utf-8") as lf, \
            open(out / "motifs.csv", "w", newline="", encoding="utf-8") as mf:
        lw, mw = csv.writer(lf, lineterminator="\n"), csv.writer(mf, lineterminator="\n")
        lw.writerow(["path", "label"])
        mw.writerow(["path", "motif_cells"])
        for s in samples:
            rel = f"images/{s.image.identifier}.{args.format}"
            write_image(out / rel, s.image.pixels)
            lw.writerow([rel, s.image.label])
            mw.writerow([rel, ";".join(str(c) for c in s.motif_cells)])
    n_pos = sum(s.image.label for s in samples)
    n_cells = sum(len(s.motif_cells) for s in samples)
    rows, cols = args.grid
    print(f"wrote {len(samples)} images ({n_pos} positive, {len(samples) - n_pos} negative, {n_cells} motif cells) "
          f"on a {rows}x{cols} grid of {args.patch}px patches to {out}")
    return 0


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _load(args):
    _require(args, "data")
    images = load_dataset(args.data, args.labels)
    if not images:
        raise AmilError(f"no images listed in {args.labels}")
    return images


def cmd_train(args) -> int:
    if args.epochs < 1:
        raise UsageError("--epochs must be at least 1")
    if not 0 < args.train_fraction < 1:
        raise UsageError("--train-fraction must be in (0, 1)")
    if args.lr <= 0:
        raise UsageError("--lr must be positive")
    images = _load(args)
    tiling = TilingSpec(args.patch, args.stride or args.patch)
    train, val = split_train_val(images, args.train_fraction, args.seed)
    if not val:
        raise AmilError("the validation split is empty; add images or lower --train-fraction")
    config = TrainConfig(
        learning_rate=args.lr, epochs=args.epochs, seed=args.seed, pooling_mode=args.pooling,
        augmentation_enabled=args.augment, optimizer=args.optimizer, weight_decay=args.weight_decay,
        tiling=tiling, hidden=args.hidden,
    )
    for img in images:
        tiling.grid(img.width, img.height)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, metrics = fit(train, val, config, checkpoint_dir=out, resume=args.resume, record_time=args.record_time)
    best = max(m.val_acc for m in metrics)
    print(f"trained {len(metrics)} epochs on {len(train)} bags; best val_acc={best:.4f}; "
          f"wrote {out / 'metrics.csv'} and {out / 'best.manifest'}")
    return 0


def _checkpoint(args):
    _require(args, "checkpoint")
    model, _, meta = load_model(args.checkpoint)
    return model, meta


def cmd_eval(args) -> int:
    model, meta = _checkpoint(args)
    images = _load(args)
    tiling = TilingSpec(model.patch_size, int(meta.get("stride", model.patch_size)))
    if args.subset != "all":
        train, val = split_train_val(images, args.train_fraction, args.seed)
        images = train if args.subset == "train" else val
    bags = [tile(img, tiling, dtype=model.dtype) for img in images]
    probs = predict(model, bags)
    acc = evaluate(model, bags)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "probability", "predicted"])
        for img, p in zip(images, probs):
            w.writerow([img.identifier, img.label, repr(float(p)), int(p > 0.5)])
    print(f"accuracy={acc:.4f}")
    return 0


def cmd_heatmap(args) -> int:
    if not args.images:
        raise UsageError("give at least one image")
    model, meta = _checkpoint(args)
    if model.pooling_mode != "attention":
        raise AmilError(f"checkpoint uses {model.pooling_mode} pooling; heatmaps need an attention model")
    tiling = TilingSpec(model.patch_size, args.stride or int(meta.get("stride", model.patch_size)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        image = SourceImage(read_image(path), 0, os.path.basename(path))
        try:
            bag = tile(image, tiling, dtype=model.dtype)
        except GeometryError as exc:
            raise GeometryError(f"{path}: {exc} (checkpoint patch size {model.patch_size})") from exc
        with T.no_grad():
            _, att = forward_bag(bag, model)
        heat = attention_to_heatmap(att, bag)
        stem = os.path.basename(path)
        write_image(out / f"{stem}.overlay.png", render_overlay(image, heat, args.alpha).pixels)
        write_heatmap_csv(out / f"{stem}.attention.csv", heat)
        print(f"{path}: {heat.grid[0]}x{heat.grid[1]} cells, max attention {heat.weights.max():.4f}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "heatmap": cmd_heatmap}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser, args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"amil {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (AmilError, OSError) as exc:
        print(f"amil {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
