"""Command line entry point: ``fedleak run|attack|report|presets``."""

from __future__ import annotations

import argparse
import logging
import sys

from .data import CACHE_ENV
from .fl import ConfigError, FLAbort

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fedleak",
        description="Federated learning privacy attack benchmark.",
        epilog=f"Datasets are cached under ${CACHE_ENV} (default ~/.cache/fedleak).")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="train with FedAvg and attack captured updates")
    run.add_argument("config", help="YAML/JSON config file or preset name")
    run.add_argument("-o", "--output", help="bundle directory (default <output_dir>/<name>)")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                     help="override a config key, e.g. --set fl.rounds=5 (repeatable)")

    att = sub.add_parser("attack", help="replay attacks on updates stored in a run directory")
    att.add_argument("run_dir")
    att.add_argument("attack_config", help="file with an 'attacks' list")
    att.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE")

    rep = sub.add_parser("report", help="validate results.json and print the summary table")
    rep.add_argument("run_dir")

    pre = sub.add_parser("presets", help="shipped experiment presets")
    pre.add_argument("action", choices=["list", "show"])
    pre.add_argument("name", nargs="?")
    return p


def _resolve(config: str) -> str:
    from pathlib import Path

    from .harness import preset_names, preset_path

    if not Path(config).exists() and config in preset_names():
        return str(preset_path(config))
    return config


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from . import harness

    try:
        if args.verb == "presets":
            if args.action == "list":
                for name in harness.preset_names():
                    print(f"{name:<22}{harness.preset_description(name)}")
            else:
                if not args.name:
                    raise ConfigError("presets show needs a preset name")
                print(harness.preset_path(args.name).read_text(), end="")
            return EXIT_OK
        if args.verb == "run":
            out, code = harness.run_experiment(_resolve(args.config), args.output, args.overrides)
            print((out / "summary.txt").read_text(), end="")
            print(f"bundle written to {out}")
            return code
        if args.verb == "attack":
            code = harness.replay_attacks(args.run_dir, args.attack_config, args.overrides)
            print(harness.emit_report(args.run_dir).read_text(), end="")
            return code
        if args.verb == "report":
            from pathlib import Path

            if not (Path(args.run_dir) / "results.json").is_file():
                raise ConfigError(f"{args.run_dir} has no results.json")
            print(harness.emit_report(args.run_dir).read_text(), end="")
            return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FLAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
