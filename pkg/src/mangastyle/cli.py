"""``mangastyle`` command line.

Every command reads an optional INI-style config (``key = value`` lines,
section headers allowed and ignored) and ``--set key=value`` overrides, and
writes its artifacts under ``<out>/<command>/<tag>/`` together with the
resolved config. The tag defaults to a digest of the resolved settings, so
rerunning an identical command lands in (and reproduces) the same directory.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import checkpoint as ckpt
from .dataset import TripletFolder, split
from .errors import ConfigError, MangaStyleError, MissingCheckpoint
from .evaluation import ablation, colorize, evaluate, format_table, model_fn
from .synthgen import StyleParams, generate_dataset
from .training import BASELINES, CONFIG_FIELDS, TrainConfig, train

RUN_KEYS = {"data": str, "stage1": str, "checkpoint": str, "n_train": int, "kind": str}
SEED_ENV = "MANGASTYLE_SEED"


def _pair(text: str, cast):
    parts = text.replace("x", ",").replace("(", "").replace(")", "").split(",")
    parts = [p.strip() for p in parts if p.strip()]
    if len(parts) != 2:
        raise ValueError("expected two comma-separated values")
    return tuple(cast(p) for p in parts)


def _convert(key: str, raw: str):
    try:
        if key in RUN_KEYS:
            return RUN_KEYS[key](raw)
        if key == "working_size":
            return _pair(raw, int)
        if key == "adam_betas":
            return _pair(raw, float)
        # dataclass annotations are strings under postponed evaluation
        return int(raw) if CONFIG_FIELDS[key].type == "int" else float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse value {raw!r} for key {key!r}") from None


def parse_config(path=None, overrides=(), env=None) -> tuple[TrainConfig, dict]:
    """Merge config file and ``key=value`` overrides (overrides win) into a TrainConfig and run settings."""
    env = os.environ if env is None else env
    values: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
        parser.optionxform = str
        try:
            parser.read_string("[__top__]\n" + path.read_text())
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        for section in parser.sections():
            values.update(parser.items(section))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        values[key.strip()] = raw.strip()

    if "seed" not in values and env.get(SEED_ENV):
        values["seed"] = env[SEED_ENV]

    train_kw, run = {}, {}
    for key, raw in values.items():
        if key not in CONFIG_FIELDS and key not in RUN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        value = _convert(key, raw)
        (run if key in RUN_KEYS else train_kw)[key] = value
    try:
        return TrainConfig(**train_kw), run
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def _write_config(cfg: TrainConfig, run: dict, path: Path):
    lines = ["[train]"]
    for k, v in dataclasses.asdict(cfg).items():
        lines.append(f"{k} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
    lines.append("")
    lines.append("[run]")
    lines += [f"{k} = {v}" for k, v in sorted(run.items())]
    path.write_text("\n".join(lines) + "\n")


def _run_dir(args, cfg: TrainConfig, run: dict, *extra) -> Path:
    tag = args.tag
    if tag is None:
        blob = json.dumps([args.command, dataclasses.asdict(cfg), run, extra], sort_keys=True, default=str)
        tag = hashlib.sha256(blob.encode()).hexdigest()[:12]
    out = Path(args.out) / args.command / tag
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, run, out / "config.ini")
    return out


def _data(run: dict):
    if "data" not in run:
        raise ConfigError("no dataset given (use --data or the 'data' config key)")
    return split(TripletFolder(run["data"]), run.get("n_train", 0))


def _require(run: dict, key: str, what: str) -> str:
    if not run.get(key):
        raise MissingCheckpoint(f"{what} is required (use --{key.replace('_', '-')} or the '{key}' config key)")
    if not Path(run[key]).is_file():
        raise MissingCheckpoint(f"{what} not found: {run[key]}")
    return run[key]


def cmd_synth(args, cfg, run):
    dest = Path(args.dest) if args.dest else Path(args.out) / "synth" / (args.tag or f"n{args.n}-seed{args.seed}")
    style = StyleParams(args.shade, args.highlight, args.softness)
    ids = generate_dataset(args.n, args.seed, dest, canvas=_pair(args.canvas, int), style=style)
    print(f"wrote {len(ids)} triplets ({3 * len(ids)} PNGs) + manifest to {dest}")


def _train_cmd(stage):
    def cmd(args, cfg, run):
        train_set, _ = _data(run)
        stage_name = stage
        stage1 = None
        if stage == 2 and cfg.lambda2 > 0:
            stage1 = _require(run, "stage1", "stage-1 checkpoint (G_A)")
        if stage == "baseline":
            stage_name = run.get("kind", "tone_only")
            if stage_name not in BASELINES:
                raise ConfigError(f"kind must be one of {BASELINES}, got {stage_name!r}")
        out = _run_dir(args, cfg, run)
        result = train(stage_name, cfg, train_set, stage1=stage1, out_dir=out, log_every=args.log_every)
        last = result.history[-1]
        print(f"{len(result.history)} steps; final l1_direct={last.l1_direct:.4f} total_g={last.total_g:.4f}")
        for role, p in result.paths.items():
            print(f"  {role}: {p}")
    return cmd


def cmd_infer(args, cfg, run):
    path = _require(run, "checkpoint", "G_B checkpoint")
    tone = np.asarray(Image.open(args.tone).convert("L"))
    flat = np.asarray(Image.open(args.flat).convert("RGB"))
    out = colorize(path, tone, flat)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out).save(args.output)
    print(f"wrote {args.output}")


def cmd_eval(args, cfg, run):
    paths = args.checkpoint or ([run["checkpoint"]] if run.get("checkpoint") else [])
    if not paths:
        raise MissingCheckpoint("eval needs at least one generator checkpoint (--checkpoint)")
    _, test_set = _data(run)
    out = _run_dir(args, cfg, run, *paths)
    reports = []
    for p in paths:
        net = ckpt.load_network(p)
        report = evaluate(model_fn(net), test_set, name=net.role)
        report.to_csv(out / f"{net.role}.csv")
        reports.append(report)
    print(format_table(reports))


def cmd_ablate(args, cfg, run):
    train_set, test_set = _data(run)
    stage1 = _require(run, "stage1", "stage-1 checkpoint (G_A)")
    out = _run_dir(args, cfg, run)
    result = ablation(cfg, train_set, stage1, test_set, out_dir=out)
    print(format_table([result.full, result.ablated]))


HANDLERS = {
    "synth": cmd_synth,
    "train1": _train_cmd(1),
    "train2": _train_cmd(2),
    "baseline": _train_cmd("baseline"),
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    common.add_argument("--out", default="runs", help="artifact root (default: runs)")
    common.add_argument("--tag", help="run directory name (default: digest of the settings)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset directory (shorthand for --set data=...)")
    data.add_argument("--n-train", type=int, help="first N ids train, the rest test")

    parser = argparse.ArgumentParser(prog="mangastyle", description="Two-stage screentone + flat-color manga colorization.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic triplets")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--canvas", default="128x128", help="H x W")
    p.add_argument("--dest", help="dataset directory (default: <out>/synth/<tag>)")
    p.add_argument("--shade", type=float, default=StyleParams.shade_strength)
    p.add_argument("--highlight", type=float, default=StyleParams.highlight_strength)
    p.add_argument("--softness", type=float, default=StyleParams.gradient_softness)

    p = sub.add_parser("train1", parents=[common, data], help="train stage 1 (G_A, D_A)")
    p.add_argument("--log-every", type=int, default=0)
    p = sub.add_parser("train2", parents=[common, data], help="train stage 2 (G_B, D_B) with frozen G_A")
    p.add_argument("--stage1", help="stage-1 G_A checkpoint")
    p.add_argument("--log-every", type=int, default=0)
    p = sub.add_parser("baseline", parents=[common, data], help="train a single-input pix2pix baseline")
    p.add_argument("--kind", choices=BASELINES)
    p.add_argument("--log-every", type=int, default=0)

    p = sub.add_parser("infer", parents=[common], help="colorize one page")
    p.add_argument("--checkpoint", help="G_B checkpoint")
    p.add_argument("--tone", required=True)
    p.add_argument("--flat", required=True)
    p.add_argument("--output", required=True)

    p = sub.add_parser("eval", parents=[common, data], help="PSNR table for one or more generators")
    p.add_argument("--checkpoint", action="append", help="generator checkpoint (repeatable)")

    p = sub.add_parser("ablate", parents=[common, data], help="stage 2 with vs without the cycle term")
    p.add_argument("--stage1", help="stage-1 G_A checkpoint")
    return parser


def _flag_overrides(args) -> list[str]:
    extra = []
    for key, attr in (("data", "data"), ("n_train", "n_train"), ("stage1", "stage1"), ("kind", "kind")):
        value = getattr(args, attr, None)
        if value is not None:
            extra.append(f"{key}={value}")
    if args.command == "infer" and args.checkpoint:
        extra.append(f"checkpoint={args.checkpoint}")
    return extra


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg, run_settings = parse_config(args.config, args.set + _flag_overrides(args))
        HANDLERS[args.command](args, cfg, run_settings)
    except MangaStyleError as e:
        print(f"mangastyle {args.command}: error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
