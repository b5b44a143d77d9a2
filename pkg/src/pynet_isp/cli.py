"""Command-line entry point: ``pynet-isp <subcommand>``.

Exit codes: 0 success, 1 usage error (bad flags, missing inputs, refused
overwrite), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import yaml

from . import alignkit, evalkit, rawio
from .checkpoint import read_checkpoint
from .errors import ConfigError, PyNetError
from .model import PyNetConfig, build, infer_full

log = logging.getLogger("pynet_isp")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _threshold(text: str) -> float:
    value = float(text)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError(f"threshold must be in (0, 1], got {value}")
    return value


def _add_meta_flags(p) -> None:
    p.add_argument("--cfa", choices=[c.value for c in rawio.CFALayout], help="CFA layout override")
    p.add_argument("--bit-depth", type=int)
    p.add_argument("--black-level", type=float)
    p.add_argument("--white-level", type=float)


def _meta(args) -> dict:
    return {
        "cfa_layout": args.cfa,
        "bit_depth": args.bit_depth,
        "black_level": args.black_level,
        "white_level": args.white_level,
    }


def _require(path, kind: str = "file") -> Path:
    path = Path(path)
    ok = path.is_dir() if kind == "dir" else path.is_file()
    if not ok:
        raise UsageError(f"{kind} not found: {path}")
    return path


def _claim_output(path, force: bool, is_dir: bool = False) -> Path:
    """Refuse to clobber existing outputs unless --force."""
    path = Path(path)
    exists = path.exists() and (not is_dir or any(path.iterdir()))
    if exists and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")
    if exists and is_dir:
        shutil.rmtree(path)
    return path


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pynet-isp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-dataset", help="align RAW/DSLR captures into training patches")
    p.add_argument("--raw-dir", required=True)
    p.add_argument("--dslr-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=_threshold, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=int, default=448)
    p.add_argument("--max-shift", type=int, default=8)
    p.add_argument("--shift-step", type=int, default=1)
    p.add_argument("--max-rotation", type=float, default=1.5)
    p.add_argument("--rotation-step", type=float, default=0.5)
    p.add_argument("--val-fraction", type=float, default=0.05)
    p.add_argument("--test-fraction", type=float, default=0.05)
    p.add_argument("--workers", type=int, default=0)
    p.add_argument("--force", action="store_true")
    _add_meta_flags(p)

    p = sub.add_parser("train", help="progressive level-wise training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint and metrics directory")
    p.add_argument("--config", help="YAML file with TrainConfig keys and an optional 'model' section")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--level", type=int, choices=range(6), help="train only this level")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--perceptual-weights")
    p.add_argument("--workers", type=int)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("evaluate", help="PSNR / MS-SSIM on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--name", default="PyNET")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--out", help="directory for results.csv, per_image.csv and table.txt")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("infer", help="full-resolution RAW to RGB reconstruction")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--raw", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tile", type=int, default=512, help="tile side in packed pixels")
    p.add_argument("--overlap", type=int, default=32, help="tile overlap in packed pixels")
    p.add_argument("--force", action="store_true")
    _add_meta_flags(p)

    p = sub.add_parser("visualize-raw", help="render a RAW mosaic with a simple ISP")
    p.add_argument("--raw", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _add_meta_flags(p)

    p = sub.add_parser("report", help="merge result CSVs into one comparison table")
    p.add_argument("--results", nargs="+", required=True)
    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_build_dataset(args) -> int:
    _require(args.raw_dir, "dir")
    _require(args.dslr_dir, "dir")
    try:
        cfg = alignkit.AlignmentConfig(args.window, args.threshold, args.max_shift, args.shift_step,
                                       args.max_rotation, args.rotation_step)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    out = _claim_output(args.out, args.force, is_dir=True)
    log.info("build-dataset config: %s", cfg)
    try:
        summary = alignkit.build_dataset(args.raw_dir, args.dslr_dir, out, cfg, args.seed, args.workers,
                                         _meta(args), args.val_fraction, args.test_fraction)
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    print(
        f"captures={summary['captures']} windows={summary['windows']} admitted={summary['admitted']} "
        f"rejected={summary['rejected']} rejection_rate={summary['rejection_rate']:.4f} "
        f"registration_failures={summary['registration_failures']}"
    )
    return EXIT_OK


def _load_train_config(args):
    from .trainer import TrainConfig

    raw: dict = {}
    if args.config:
        raw = yaml.safe_load(_require(args.config).read_text()) or {}
        if not isinstance(raw, dict):
            raise UsageError(f"{args.config}: expected a mapping")
    model_cfg = raw.pop("model", None)
    overrides = {
        "learning_rate": args.lr,
        "seed": args.seed,
        "epochs_per_level": args.epochs,
        "max_steps_per_level": args.max_steps,
        "batch_size_per_level": args.batch_size,
        "perceptual_weights": args.perceptual_weights,
        "workers": args.workers,
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    raw["checkpoint_dir"] = str(Path(args.out))
    raw.setdefault("metrics_csv", str(Path(args.out) / "metrics.csv"))
    unknown = set(raw) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    try:
        cfg = TrainConfig(**raw)
        net_cfg = PyNetConfig(**model_cfg) if model_cfg else PyNetConfig()
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg, net_cfg


def cmd_train(args) -> int:
    from .trainer import LEVELS, PairDataset, TrainHistory, train_progressive

    _require(args.data, "dir")
    cfg, net_cfg = _load_train_config(args)
    resume = read_checkpoint(_require(args.resume)) if args.resume else None
    if resume is None:
        _claim_output(args.out, args.force, is_dir=True)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    log.info("train config: %s", json.dumps(cfg.to_dict(), default=str))

    train_set = PairDataset(args.data, "train")
    if len(train_set) == 0:
        raise UsageError(f"{args.data}: empty training split")
    val_names = rawio.read_split(args.data, "val") if (Path(args.data) / "splits" / "val.txt").is_file() else []
    val_set = PairDataset(args.data, "val") if val_names else None

    if resume is not None:
        model, history = resume.model, TrainHistory.from_dict(resume.history)
    else:
        model, history = build(net_cfg, cfg.seed), TrainHistory()
    levels = (args.level,) if args.level is not None else LEVELS
    model = train_progressive(model, train_set, cfg, history=history, val_dataset=val_set,
                              resume=resume, levels=levels)
    print(f"trained_level={model.trained_level} steps={len(history.steps)} "
          f"checkpoint={Path(args.out) / 'latest.ckpt'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .trainer import PairDataset

    _require(args.data, "dir")
    ckpt = read_checkpoint(_require(args.ckpt))
    if args.out:
        _claim_output(args.out, args.force, is_dir=True)
    result = evalkit.evaluate(ckpt.model, PairDataset(args.data, args.split), args.batch, args.name)
    if args.out:
        evalkit.write_results(args.out, result)
    print(evalkit.summary_csv_text(result))
    print()
    print(evalkit.report_table([result]))
    return EXIT_OK


def cmd_infer(args) -> int:
    model = read_checkpoint(_require(args.ckpt)).model
    frame = rawio.load_raw_mosaic(_require(args.raw), _meta(args))
    out = _claim_output(args.out, args.force)
    rgb = infer_full(model, rawio.pack_rggb(rawio.normalize(frame)), args.tile, args.overlap)
    rawio.write_rgb(out, rgb)
    print(f"wrote {out} ({rgb.data.shape[1]}x{rgb.data.shape[0]})")
    return EXIT_OK


def cmd_visualize_raw(args) -> int:
    frame = rawio.load_raw_mosaic(_require(args.raw), _meta(args))
    out = _claim_output(args.out, args.force)
    rawio.write_rgb(out, rawio.visualize_raw(frame))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    results = []
    for path in args.results:
        results += evalkit.read_results(_require(path))
    print(evalkit.report_table(results))
    return EXIT_OK


COMMANDS = {
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "infer": cmd_infer,
    "visualize-raw": cmd_visualize_raw,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    log.info("%s %s", args.command, json.dumps({k: v for k, v in vars(args).items()}, default=str))
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (PyNetError, OSError, RuntimeError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
