"""Command-line entry point: ``sdelab run|list|dump-path``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import SdeLabError, ValidationError
from .experiments import OUTPUT_ENV, REGISTRY, ScenarioConfig, list_scenarios, resolve_output_dir, run_scenario, tomllib
from .grid import RngStream, TimeGrid, dump_path, dump_sheet, sample_lower_path, sample_sheet

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2, 3

_FLAG_FIELDS = ("m", "n", "d", "drift", "x0", "n_sheets", "n_inner", "n_paths", "nested_mid", "nested_inner", "eps", "seed")


def _parse_set(items) -> dict:
    """``key=value`` pairs with TOML-typed values; dotted keys address the map fields."""
    out: dict = {}
    for item in items or ():
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}", field="set")
        key, raw = item.split("=", 1)
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        if "." in key:
            head, sub = key.split(".", 1)
            out.setdefault(head, {})[sub] = value
        else:
            out[key] = value
    return out


def build_config(args) -> ScenarioConfig:
    """Defaults, then the config file, then command-line flags."""
    data: dict = {}
    if args.config:
        try:
            data = tomllib.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ValidationError(f"cannot read config: {exc}", field="config") from None
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"config is not valid TOML: {exc}", field="config") from None
    if args.scenario:
        if data.get("scenario", args.scenario) != args.scenario:
            raise ValidationError("scenario on the command line differs from the config file", field="scenario")
        data["scenario"] = args.scenario
    for key, value in _parse_set(args.set).items():
        if isinstance(value, dict):
            data[key] = {**data.get(key, {}), **value}
        else:
            data[key] = value
    for name in _FLAG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    if args.out is not None:
        data["out_dir"] = args.out
    return ScenarioConfig.from_mapping(data)


def _error_record(exc: Exception) -> dict:
    return {"type": type(exc).__name__, "field": getattr(exc, "field", None), "message": str(exc)}


def _cmd_run(args) -> int:
    try:
        config = build_config(args)
    except ValidationError as exc:
        record = _error_record(exc)
        print(json.dumps({"error": record}), file=sys.stderr)
        return EXIT_CONFIG
    report = run_scenario(config)
    out = resolve_output_dir(config)
    for m in report.metrics:
        print(f"{'PASS' if m.passed else 'FAIL'}  {m.name}  value={m.value:.6g}  {m.op} {m.threshold:.6g}")
    if report.error:
        print(json.dumps({"error": report.error}), file=sys.stderr)
    print(f"{config.scenario}: {'PASS' if report.passed else 'FAIL'} ({report.wall_clock:.1f} s), report in {out}")
    return report.exit_code


def _cmd_list(args) -> int:
    items = list_scenarios()
    if args.json:
        print(json.dumps(items, indent=2))
        return EXIT_PASS
    for it in items:
        print(f"{it['name']:28s} {it['expected_runtime']:>9s}  {it['description']}")
        print(f"{'':28s} {'':>9s}  anchor: {it['anchor']}")
    return EXIT_PASS


def _cmd_dump(args) -> int:
    try:
        grid = TimeGrid(args.m, args.n if args.sheet else 1, args.d)
    except (ValidationError, ValueError) as exc:
        print(json.dumps({"error": _error_record(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    rng = RngStream(args.seed)
    if args.sheet:
        payload = dump_sheet(sample_sheet(grid, rng))
    else:
        payload = dump_path(sample_lower_path(grid, 1.0, rng))
    Path(args.output).write_bytes(payload)
    print(args.output)
    return EXIT_PASS


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdelab", description="Run the discrete Wiener-space scenario suite.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("scenario", nargs="?", choices=sorted(REGISTRY), help="scenario name (or set it in --config)")
    run.add_argument("--config", help="flat TOML config file")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV}/<scenario>)")
    for name in ("m", "n", "d", "n_sheets", "n_inner", "n_paths", "nested_mid", "nested_inner"):
        run.add_argument(f"--{name.replace('_', '-')}", dest=name, type=int)
    run.add_argument("--drift", help="catalog drift kind, or 'catalog'")
    run.add_argument("--x0", type=float)
    run.add_argument("--eps", type=float)
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="any config field, e.g. tolerances.tau=0.5")
    run.set_defaults(func=_cmd_run)

    ls = sub.add_parser("list", help="list registered scenarios")
    ls.add_argument("--json", action="store_true")
    ls.set_defaults(func=_cmd_list)

    dp = sub.add_parser("dump-path", help="write a sampled path or sheet in the binary format")
    dp.add_argument("output")
    dp.add_argument("--m", type=int, default=16)
    dp.add_argument("--n", type=int, default=16)
    dp.add_argument("--d", type=int, default=1)
    dp.add_argument("--seed", type=int, default=0)
    dp.add_argument("--sheet", action="store_true", help="dump an upper-floor sheet instead of a path")
    dp.set_defaults(func=_cmd_dump)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except SdeLabError as exc:
        print(json.dumps({"error": _error_record(exc)}), file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
