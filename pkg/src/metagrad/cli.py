"""``metagrad`` command line: train, eval and reproduce.

Exit codes: 0 success, 2 invalid configuration or checkpoint mismatch,
3 numerical abort. Failures also print a JSON error record on stderr and, when
the output directory is known, write it to ``error.json`` there.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources
from pathlib import Path

from . import autodiff as ad
from . import harness
from .config import ConfigError, ExperimentConfig, load, parse_text
from .models import CheckpointError
from .parallel import default_workers

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
OUTPUT_ENV = "METAGRAD_OUTPUT_DIR"


def preset_names() -> list[str]:
    files = resources.files("metagrad") / "presets"
    return sorted(p.name[:-4] for p in files.iterdir() if p.name.endswith(".cfg"))


def preset_text(name: str) -> str:
    path = resources.files("metagrad") / "presets" / f"{name}.cfg"
    if not path.is_file():
        raise ConfigError(f"unknown experiment {name!r}; available: {', '.join(preset_names())}", "name")
    return path.read_text(encoding="utf-8")


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}", item)
        out[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        out["experiment.seed"] = str(args.seed)
    if os.environ.get(OUTPUT_ENV):
        out["experiment.output_dir"] = os.environ[OUTPUT_ENV]
    return out


def _error(code: int, kind: str, message: str, field: str | None, out_dir: str | None) -> int:
    record = {"exit_code": code, "error": kind, "message": message}
    if field:
        record["field"] = field
    text = json.dumps(record, sort_keys=True)
    print(text, file=sys.stderr)
    if out_dir:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "error.json").write_text(text + "\n", encoding="utf-8")
        except OSError:
            pass
    return code


def _guarded(fn, args) -> int:
    cfg: ExperimentConfig | None = None
    out_dir = os.environ.get(OUTPUT_ENV) or None
    try:
        if args.command == "reproduce":
            cfg = parse_text(preset_text(args.name), _overrides(args))
        else:
            cfg = load(args.config, _overrides(args))
        out_dir = cfg.output_dir
        path = fn(cfg, args)
    except ConfigError as exc:
        return _error(EXIT_CONFIG, "config", str(exc), exc.field, out_dir)
    except (CheckpointError, harness.SpecMismatch) as exc:
        return _error(EXIT_CONFIG, "checkpoint", str(exc), None, out_dir)
    except ad.NonFiniteError as exc:
        return _error(EXIT_NUMERIC, "numerical", str(exc), None, out_dir)
    except OSError as exc:
        return _error(EXIT_CONFIG, "io", str(exc), None, out_dir)
    print(f"results written to {path}")
    return EXIT_OK


def _train(cfg, args):
    return harness.run_experiment(cfg, args.workers)


def _eval(cfg, args):
    return harness.evaluate_checkpoint(cfg, args.checkpoint, args.workers)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metagrad", description="Gradient-based meta-learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--workers", type=int, default=default_workers(),
                       help="worker processes for per-task work (default: CPU count)")
        p.add_argument("--seed", type=int, default=None, help="override experiment.seed")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value; repeatable")

    p = sub.add_parser("train", help="train and evaluate the methods named in a config")
    p.add_argument("--config", required=True)
    common(p)
    p.set_defaults(func=_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    common(p)
    p.set_defaults(func=_eval)

    p = sub.add_parser("reproduce", help="run a checked-in preset experiment")
    p.add_argument("name", help="one of: " + ", ".join(preset_names()))
    common(p)
    p.set_defaults(func=_train)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.workers < 1:
        return _error(EXIT_CONFIG, "config", "--workers must be >= 1", "workers", None)
    return _guarded(args.func, args)


if __name__ == "__main__":
    sys.exit(main())
