"""``border-flux`` command line entry point.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 privacy-scan
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .ingest import IngestError
from .pipeline import ConfigError, PrivacyScanError, RunConfig, StageError, run_pipeline
from .privacy import PrivacyError, PublishedStore, make_server

log = logging.getLogger("border_flux")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PRIVACY = 0, 1, 2, 3

STAGE_COMMANDS = {
    "ingest": ["ingest"],
    "cohort": ["cohort"],
    "mobility": ["placements", "mobility", "flows"],
    "social": ["social"],
    "sentiment": ["sentiment"],
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="border-flux", description="Border mobility analytics over xDR and tweet exports.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic world")
    s.add_argument("--config", required=True, help="synth.toml")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="override the configured seed")

    def run_opts(sp):
        sp.add_argument("--config", required=True, help="run configuration TOML")
        sp.add_argument("--out", help="override the output directory")
        sp.add_argument("--workers", type=int, help="threads for placement")

    for name in STAGE_COMMANDS:
        run_opts(sub.add_parser(name, help=f"run the {name} stage(s)"))
    r = sub.add_parser("run", help="run several stages in dependency order")
    run_opts(r)
    r.add_argument("--stages", default="all", help="comma-separated stages or 'all'")

    v = sub.add_parser("serve", help="serve aggregate queries over a completed run")
    v.add_argument("--store", required=True, help="published output directory")
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=8000)
    v.add_argument("--token", help="require this bearer token")
    return p


def _run_config(args) -> RunConfig:
    from pathlib import Path

    overrides = {}
    if args.out:
        overrides["output"] = Path(args.out)
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        overrides["workers"] = args.workers
    return RunConfig.from_toml(args.config, **overrides)


def _cmd_synth(args) -> int:
    from .synth import SynthConfig, SynthError, write_world

    try:
        cfg = SynthConfig.from_toml(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        manifest = write_world(cfg, args.out)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None
    except (SynthError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    print(json.dumps({"subscribers": manifest["n_subscribers"], "events": manifest["n_events"]}))
    return EXIT_OK


def _cmd_serve(args) -> int:
    server = make_server(PublishedStore(args.store), args.host, args.port, args.token)
    host, port = server.server_address[:2]
    print(f"serving {args.store} on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "serve":
            return _cmd_serve(args)
        cfg = _run_config(args)
        stages = args.stages if args.command == "run" else STAGE_COMMANDS[args.command]
        manifest = run_pipeline(cfg, stages)
        print(json.dumps({"status": manifest["status"], "outputs": manifest["outputs"]}, indent=1))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PrivacyScanError as exc:
        print(f"privacy scan failed: {exc}", file=sys.stderr)
        return EXIT_PRIVACY
    except PrivacyError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, IngestError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
