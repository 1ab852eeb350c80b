"""Command-line entry point: ``sscpgan <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure. Every error goes to stderr prefixed with ``error-code: <n>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
HELP_WIDTH = 100


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("formatter_class",
                          lambda prog: argparse.HelpFormatter(prog, width=HELP_WIDTH))
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sscpgan", description="Self-supervised cut-and-paste GAN toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--seed", type=int, default=None, help="random seed (default: command-specific)")
        return p

    p = add("train", "Train a model from a JSON config; flags override config values.")
    p.add_argument("--config", required=True, help="JSON file with TrainConfig fields")
    p.add_argument("--out", default=None, help="run directory (default: <runs_dir>/<name> from the config)")
    p.add_argument("--steps", type=int, default=None, help="override total_steps")
    p.add_argument("--mode", choices=("ss-cpgan", "cpgan-baseline"), default=None, help="override mode")

    p = add("eval", "Evaluate a checkpoint and print a JSON report.")
    p.add_argument("--checkpoint", required=True, help="checkpoint file (step_<n>.ckpt)")
    p.add_argument("--data", default=None,
                   help="dataset: synthetic://<seed>/<size> or a folder (default: the training set)")
    p.add_argument("--extractor-seed", type=int, default=0, help="proxy feature extractor seed")
    p.add_argument("--size", type=int, default=None, help="evaluate only the first N images")
    p.add_argument("--out", default=None, help="also write the report to this JSON file")

    p = add("pseudolabel", "Compute GrabCut pseudo-label masks for every image in a folder.")
    p.add_argument("--in", dest="inp", metavar="DIR", required=True, help="input image folder")
    p.add_argument("--out", required=True, help="output folder for 8-bit 0/255 mask PNGs")
    p.add_argument("--iters", type=int, default=5, help="GrabCut refinement rounds")

    p = add("composite", "Blend a foreground onto a background through a grey-scale mask.")
    p.add_argument("--fg", required=True, help="foreground image")
    p.add_argument("--bg", required=True, help="background image (same size)")
    p.add_argument("--mask", required=True, help="mask image (same size, 255 = foreground)")
    p.add_argument("--out", required=True, help="output PNG")

    p = add("synth-data", "Write a synthetic foreground/background/mask dataset as PNG folders.")
    p.add_argument("--count", type=int, required=True, help="number of samples")
    p.add_argument("--resolution", type=int, default=64, help="image side length")
    p.add_argument("--out", required=True, help="output root (foreground/, background/, masks/)")

    p = add("plot", "Plot losses, proxy FID and the loss weight from a metrics CSV.")
    p.add_argument("--metrics", required=True, help="metrics.csv from a run directory")
    p.add_argument("--out", required=True, help="output PNG")
    return parser


def help_text() -> str:
    """Top-level help followed by every subcommand's help."""
    parser = build_parser()
    parts = [parser.format_help()]
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, p in sub.choices.items():
        parts.append(p.format_help())
    return "\n".join(parts)


# --------------------------------------------------------------------------
# commands

def _cmd_train(args) -> int:
    from .trainer import TrainConfig, train

    try:
        raw = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    config = TrainConfig.from_dict(raw)
    if args.seed is not None:
        config.seed = args.seed
    if args.steps is not None:
        config.total_steps = args.steps
    if args.mode is not None:
        config.mode = args.mode
    if args.out is not None:
        out = Path(args.out)
        config.runs_dir, config.name = str(out.parent), out.name
    config.validate()

    def progress(rec):
        if rec.proxy_fid is not None:
            print(json.dumps({"step": rec.step, "L_D": rec.L_D, "L_G": rec.L_G, "lambda": rec.lam,
                              "proxy_fid": rec.proxy_fid, "miou": rec.miou}), flush=True)

    run_dir = train(config, progress=progress)
    print(f"run directory: {run_dir}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .trainer import evaluate

    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    report = evaluate(args.checkpoint, args.data, args.extractor_seed, args.size, args.seed)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


def _read_rgb(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0


def _write_png(path, arr) -> None:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    a = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(a.transpose(1, 2, 0) if a.ndim == 3 else a).save(path)


def _cmd_pseudolabel(args) -> int:
    from .data import IMAGE_SUFFIXES
    from .pseudolabel import grabcut

    src = Path(args.inp)
    if not src.is_dir():
        raise FileNotFoundError(f"input folder not found: {src}")
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no images in {src}")
    n_degenerate = 0
    for p in files:
        label = grabcut(_read_rgb(p), iters=args.iters, seed=args.seed or 0)
        n_degenerate += label.degenerate
        _write_png(Path(args.out) / f"{p.stem}.png", label.mask)
    print(json.dumps({"images": len(files), "degenerate": n_degenerate, "out": args.out}))
    return EXIT_OK


def _cmd_composite(args) -> int:
    from PIL import Image

    from .compositing import composite

    fg, bg = _read_rgb(args.fg), _read_rgb(args.bg)
    with Image.open(args.mask) as im:
        mask = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    if fg.shape != bg.shape or mask.shape != fg.shape[1:]:
        raise ValueError(f"image sizes differ: fg {fg.shape[1:]}, bg {bg.shape[1:]}, mask {mask.shape}")
    out = composite(fg[None], bg[None], mask[None, None])[0]
    _write_png(args.out, out)
    return EXIT_OK


def _cmd_synth_data(args) -> int:
    from .data import DatasetSpec, synth_sample

    DatasetSpec("synthetic", None, args.resolution, args.count, args.seed or 0).validate()
    root = Path(args.out)
    for i in range(args.count):
        s = synth_sample(args.seed or 0, i, args.resolution)
        _write_png(root / "foreground" / f"{i:05d}.png", s.fg)
        _write_png(root / "background" / f"{i:05d}.png", s.bg)
        _write_png(root / "masks" / f"{i:05d}.png", s.gt_mask)
    print(json.dumps({"count": args.count, "resolution": args.resolution, "out": str(root)}))
    return EXIT_OK


def _cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .trainer import read_metrics

    rows = read_metrics(args.metrics)
    if not rows:
        raise ValueError(f"{args.metrics} has no rows")

    def col(name, subset=None):
        rs = rows if subset is None else subset
        return np.array([float(r[name]) if r[name] not in ("", None) else np.nan for r in rs])

    step = col("step")
    evals = [r for r in rows if r.get("proxy_fid") not in ("", None)]
    fig, axes = plt.subplots(3, 1, figsize=(7, 7), sharex=True,
                             gridspec_kw={"height_ratios": [3, 3, 1]})
    axes[0].plot(step, col("L_D"), label="L_D", lw=0.8)
    axes[0].plot(step, col("L_G"), label="L_G", lw=0.8)
    axes[0].plot(step, col("L_ss"), label="L_ss", lw=0.8)
    axes[0].set_ylabel("loss")
    axes[0].legend(loc="upper right")
    if evals:
        axes[1].plot(col("step", evals), col("proxy_fid", evals), "o-", label="proxy FID")
        m = col("miou", evals)
        if np.isfinite(m).any():
            ax2 = axes[1].twinx()
            ax2.plot(col("step", evals), m, "s--", color="tab:green", label="mIoU")
            ax2.set_ylabel("mIoU")
    axes[1].set_ylabel("proxy FID")
    axes[2].step(step, col("lambda"), where="post", color="tab:red")
    axes[2].set_ylabel("lambda")
    axes[2].set_ylim(-0.05, 0.55)
    axes[2].set_xlabel("step")
    fig.tight_layout()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.out, dpi=100)
    plt.close(fig)
    return EXIT_OK


COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "pseudolabel": _cmd_pseudolabel,
            "composite": _cmd_composite, "synth-data": _cmd_synth_data, "plot": _cmd_plot}


def _fail(code: int, message: str) -> int:
    print(f"error-code: {code}: {message}", file=sys.stderr)
    return code


def run_cli(argv=None) -> int:
    from PIL import UnidentifiedImageError

    from .data import DataError
    from .networks import ArchiveError, ConfigError
    from .numerics import NonFiniteError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_USAGE, str(exc))
    except NonFiniteError as exc:
        return _fail(EXIT_NUMERIC, str(exc))
    except (DataError, ArchiveError, UnidentifiedImageError, OSError, ValueError) as exc:
        return _fail(EXIT_DATA, str(exc))


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
