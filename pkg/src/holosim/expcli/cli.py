"""Command line entry point: init, run, grid, analyze, replay."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from ..brains import BackendError, make_brain
from ..domain import InvalidConfig, SimConfig
from ..engine import read_events, run_simulation
from .analyze import analyze, bundle_summary
from .config import ExperimentConfig, load_config, write_default_config
from .grid import GridSpec, run_grid

log = logging.getLogger("holosim")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 by default; usage errors are 1 here
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    brain = argparse.ArgumentParser(add_help=False)
    brain.add_argument("--brain", choices=("deterministic", "llm"), help="decision backend (overrides the config)")
    p = _Parser(prog="holosim", description="Holacracy organization simulator and analysis pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("init", help="write the default config file")
    s.add_argument("--out", default="holosim.yaml", help="config path to write (default: holosim.yaml)")
    s.add_argument("--force", action="store_true", help="overwrite an existing file")

    s = sub.add_parser("run", parents=[brain], help="run one organization")
    s.add_argument("--config", help="config file (defaults when omitted)")
    s.add_argument("--seed", type=int, help="run seed (overrides the config)")
    s.add_argument("--out", help="artifact directory (default: runs/seed-<seed>)")

    s = sub.add_parser("grid", parents=[brain], help="run the experiment grid")
    s.add_argument("--config", help="config file (defaults when omitted)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--parallel", type=int, default=1, help="cells run at once (default: 1)")

    s = sub.add_parser("analyze", help="regressions, network exports and sign summary for a grid")
    s.add_argument("--manifest", required=True, help="manifest.json written by grid")
    s.add_argument("--out", required=True, help="report directory")

    s = sub.add_parser("replay", help="rerun a logged run and compare event-log hashes")
    s.add_argument("--events", required=True, help="events.jsonl of the run")
    s.add_argument("--config", help="config.json of the run (default: next to the events file)")
    return p


def _experiment(args) -> ExperimentConfig:
    exp = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if getattr(args, "brain", None):
        changes["brain"] = args.brain
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if changes:
        exp = ExperimentConfig(exp.sim.replace(**changes), exp.grid, exp.llm)
    return exp


def cmd_init(args) -> int:
    path = Path(args.out)
    if path.exists() and not args.force:
        print(f"{path} exists; pass --force to overwrite", file=sys.stderr)
        return EXIT_RUNTIME
    write_default_config(path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_run(args) -> int:
    exp = _experiment(args)
    cfg = exp.sim
    out = Path(args.out or f"runs/seed-{cfg.seed}")
    started = time.perf_counter()
    artifact = run_simulation(cfg, make_brain(cfg, exp.llm))
    digests = artifact.write(out)
    print(f"run seed={cfg.seed} brain={cfg.brain} status={artifact.status} events={len(artifact.events)} "
          f"seconds={time.perf_counter() - started:.2f}")
    print(f"events sha256 {digests['events.jsonl']}")
    print(f"artifacts in {out}")
    if artifact.status != "complete":
        print(f"run aborted: {artifact.error}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_grid(args) -> int:
    if args.parallel < 1:
        raise UsageError("--parallel must be >= 1")
    exp = _experiment(args)
    manifest = run_grid(GridSpec.from_experiment(exp), args.out, args.parallel, exp.llm)
    failed = [r for r in manifest["runs"] if r["status"] != "complete"]
    print(f"grid: {manifest['n']} runs in {args.out}, {len(failed)} not complete")
    for r in failed:
        print(f"  {r['run_id']}: {r['status']} {r.get('error')}", file=sys.stderr)
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_analyze(args) -> int:
    bundle = analyze(args.manifest, args.out)
    print(json.dumps(bundle_summary(bundle), indent=2))
    return EXIT_OK


def cmd_replay(args) -> int:
    events_path = Path(args.events)
    config_path = Path(args.config) if args.config else events_path.with_name("config.json")
    stored = hashlib.sha256(events_path.read_bytes()).hexdigest()
    cfg = SimConfig.from_dict(json.loads(config_path.read_text(encoding="utf-8")))
    if cfg.brain != "deterministic":
        print("replay is only defined for the deterministic brain", file=sys.stderr)
        return EXIT_RUNTIME
    read_events(events_path)  # the log must at least parse
    artifact = run_simulation(cfg)
    replayed = artifact.events_digest()
    print(f"stored   sha256 {stored}")
    print(f"replayed sha256 {replayed}")
    if replayed != stored:
        print("MISMATCH: the log does not reproduce", file=sys.stderr)
        return EXIT_RUNTIME
    print("match")
    return EXIT_OK


COMMANDS = {"init": cmd_init, "run": cmd_run, "grid": cmd_grid, "analyze": cmd_analyze, "replay": cmd_replay}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"holosim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"holosim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidConfig, BackendError, OSError, ValueError, KeyError) as exc:
        print(f"holosim: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
