"""Command-line entry point: gen-data, train, eval, export-masks."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import train as TR
from .checkpoint import CheckpointError
from .synthdata import DatasetFormatError, GeneratorConfig, generate_many, read_dataset, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(p: argparse.ArgumentParser, cls, skip=()) -> None:
    for f in fields(cls):
        if f.name not in skip:
            p.add_argument(_flag(f.name), dest=f.name, default=None, metavar="VALUE")


def _generator_config(args) -> GeneratorConfig:
    values = {}
    if args.config:
        for lineno, line in enumerate(Path(args.config).read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise TR.ConfigError(f"line {lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            values[key] = raw
    for f in fields(GeneratorConfig):
        raw = getattr(args, f.name, None)
        if raw is not None:
            values[f.name] = raw
    known = {f.name: f for f in fields(GeneratorConfig)}
    out = {}
    for key, raw in values.items():
        if key not in known:
            raise TR.ConfigError(f"unknown generator key {key!r}")
        default = known[key].default
        if isinstance(default, bool):
            out[key] = str(raw).lower() in ("1", "true", "yes")
        elif isinstance(default, tuple):
            out[key] = tuple(s.strip() for s in str(raw).split(",") if s.strip())
        else:
            try:
                out[key] = type(default)(raw)
            except ValueError:
                raise TR.ConfigError(f"{key}: cannot parse {raw!r}") from None
    return GeneratorConfig(**out)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="srl", description="Synergistic slot learning on synthetic videos")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    gen = sub.add_parser("gen-data", help="write a synthetic video dataset")
    gen.add_argument("--config", help="key = value generator config file")
    gen.add_argument("--out", required=True)
    gen.add_argument("--count", type=int, default=64)
    _add_dataclass_flags(gen, GeneratorConfig)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--config", help="key = value training config file")
    tr.add_argument("--out", help="checkpoint path (overrides config 'checkpoint')")
    tr.add_argument("--resume", help="continue from this checkpoint")
    tr.add_argument("--stop-after", type=int, default=None, help="halt after this many total steps")
    _add_dataclass_flags(tr, TR.TrainConfig, skip=("checkpoint",))

    ev = sub.add_parser("eval", help="score a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--out", required=True, help="metrics CSV path")
    ev.add_argument("--config", help="optional training config to check against the checkpoint")
    ev.add_argument("--seed", default=None)

    ex = sub.add_parser("export-masks", help="write per-frame slot-id PGM images")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--dataset", required=True)
    ex.add_argument("--out", required=True, help="output directory")
    ex.add_argument("--config", help="optional training config to check against the checkpoint")
    ex.add_argument("--seed", default=None)
    return parser


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _load_for_eval(args) -> tuple[TR.TrainState, list]:
    videos = read_dataset(_require(args.dataset))
    cfg = TR.load_config(args.config, seed=args.seed) if args.config else None
    state = TR.load_state(_require(args.checkpoint), cfg)
    if args.seed is not None and cfg is None:
        state.config.seed = int(args.seed)
    return state, videos


def run(args) -> int:
    if args.command == "gen-data":
        cfg = _generator_config(args)
        write_dataset(generate_many(cfg, args.count), args.out)
        print(f"wrote {args.count} videos to {args.out}")
    elif args.command == "train":
        overrides = {f.name: getattr(args, f.name) for f in fields(TR.TrainConfig) if f.name != "checkpoint"}
        if args.out:
            overrides["checkpoint"] = args.out
        cfg = TR.load_config(args.config, **overrides)
        _require(cfg.dataset)
        state = TR.train(cfg, resume=args.resume, stop_after=args.stop_after, log_every=100)
        print(f"trained to step {state.step}; checkpoint {cfg.checkpoint}; loss log {cfg.loss_log}")
    elif args.command == "eval":
        state, videos = _load_for_eval(args)
        rows = TR.evaluate(state, videos, args.out)
        summary = TR.summarize(rows)
        print(" ".join(f"{k}={v:.4f}" for k, v in summary.items()))
    elif args.command == "export-masks":
        state, videos = _load_for_eval(args)
        manifest = TR.export_masks(state, videos, args.out)
        print(f"wrote masks; manifest {manifest}")
    else:
        raise UsageError("a subcommand is required: gen-data, train, eval, export-masks")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return run(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except TR.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DatasetFormatError, CheckpointError, TR.TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
