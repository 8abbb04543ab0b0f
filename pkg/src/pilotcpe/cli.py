"""Command-line entry point: ``pilotcpe run|validate|list-experiments``.

Exit codes: 0 success, 2 invalid spec, 3 runtime failure. Errors are
printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import sys

from .experiments import DESCRIPTIONS, WORKERS_ENV, SpecError, load_spec_file, parse_yaml, resolve_spec, run_experiment, set_path

EXIT_OK, EXIT_SPEC, EXIT_RUNTIME = 0, 2, 3


def _overrides(args) -> dict:
    over: dict = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise SpecError([{"field": "--set", "message": f"expected KEY=VALUE, got {item!r}"}])
        set_path(over, key, parse_yaml(value))
    if args.output is not None:
        over["output"] = args.output
    if args.seed is not None:
        over["seed"] = args.seed
    if args.full_scale:
        over["full_scale"] = True
    return over


def _error(kind: str, message: str, details=None) -> None:
    rec = {"error": kind, "message": message}
    if details:
        rec["details"] = details
    print(json.dumps(rec), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pilotcpe", description="Pilot-distribution experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run an experiment spec"), ("validate", "check a spec without running it")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("spec_file")
        s.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a spec value, e.g. system.snr_db=20 (repeatable)")
        s.add_argument("--output", "-o")
        s.add_argument("--seed", type=int)
        s.add_argument("--full-scale", action="store_true",
                       help="N=10000, 20 GBd, 200 kHz and larger Monte-Carlo budgets")
        if name == "run":
            s.add_argument("--workers", type=int, help=f"process count (default ${WORKERS_ENV} or 1)")
    sub.add_parser("list-experiments", help="list experiment ids")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-experiments":
        for name, text in DESCRIPTIONS.items():
            print(f"{name:16s} {text}")
        return EXIT_OK
    try:
        spec = resolve_spec(load_spec_file(args.spec_file), _overrides(args))
    except SpecError as exc:
        _error("validation", str(exc), exc.errors)
        return EXIT_SPEC
    if args.command == "validate":
        print(json.dumps({"status": "ok", "experiment": spec.experiment}))
        return EXIT_OK
    try:
        manifest = run_experiment(spec, args.workers)
    except SpecError as exc:
        _error("validation", str(exc), exc.errors)
        return EXIT_SPEC
    except Exception as exc:  # noqa: BLE001 - reported as machine-readable JSON
        _error("runtime", f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    print(json.dumps({"status": "ok", "outputs": manifest["outputs"], "wall_time_s": manifest["wall_time_s"]}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
