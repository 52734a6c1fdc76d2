"""Command-line experiment harness.

Every command reads one JSON config, applies ``--set`` overrides, writes a
CSV to ``--out`` and a manifest next to it (``<out>.manifest.json``) holding
the effective-config hash, seed, package versions and headline results.
Nothing time-dependent is written, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .analytics import (
    SWEEP_COLUMNS,
    asymptotic_sweep,
    conditional_virtual_blocking,
    row_seed,
    write_rows_csv,
)
from .core import config_from_dict
from .distributions import merge_classes
from .policies import DPInstance, dp_solve
from .pricing import PRICING_COLUMNS, DemandCurve, cross_validate_nlp1, solve_nlp2
from .simulate import BENCH_COLUMNS, benchmark, benchmark_discrete, scale_config

COMMANDS = ("sweep", "bench", "blocking", "pricing", "dp")

# Keys an override may set even when the config file omits them.
KNOWN_KEYS = {
    "": {"capacity", "epsilon", "horizon", "warmup_fraction", "classes", "seed",
         "sweep", "bench", "blocking", "pricing", "dp"},
    "sweep": {"regime", "lambda_grid", "n_samples", "epsilon", "cells"},
    "bench": {"policies", "replications", "capacities", "reference", "workers", "n_episodes",
              "periods", "delta"},
    "blocking": {"n_samples", "cells"},
    "pricing": {"curves", "grid_points", "tol"},
    "dp": {"periods", "capacity", "classes", "max_states", "n_episodes"},
}

BLOCKING_COLUMNS = ["d", "s", "C", "estimate", "std_error", "n_samples", "seed"]
DP_COLUMNS = ["t", "state", "window_start", "window_end", "critical_reward"]


class ConfigError(ValueError):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(raw: dict, assignment: str) -> None:
    """Set ``a.b.c=value`` in ``raw``; list elements are addressed by index."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not KEY=VALUE")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"malformed override key {key!r}")
    node, section = raw, ""
    for depth, part in enumerate(parts):
        last = depth == len(parts) - 1
        if isinstance(node, list):
            if not part.isdigit() or int(part) >= len(node):
                raise ConfigError(f"unknown override key {key!r}: bad list index {part!r}")
            part = int(part)
        elif isinstance(node, dict):
            allowed = KNOWN_KEYS.get(section) if depth <= 1 and section in KNOWN_KEYS else None
            if part not in node and (allowed is None or part not in allowed):
                raise ConfigError(f"unknown override key {key!r}")
            if depth == 0:
                section = part
        else:
            raise ConfigError(f"unknown override key {key!r}: {parts[depth - 1]!r} is a scalar")
        if last:
            node[part] = _parse_value(text)
        else:
            if isinstance(node, dict) and part not in node:
                node[part] = {}
            node = node[part]


def load_raw(path: str, overrides) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    for item in overrides or ():
        apply_override(raw, item)
    return raw


def config_hash(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True).encode()).hexdigest()


def _section(raw, name):
    sec = raw.get(name)
    if sec is None:
        raise ConfigError(f"config has no {name!r} section")
    return sec


def _cells(value):
    return None if value is None else [tuple(int(x) for x in c) for c in value]


def cmd_sweep(raw, seed, args):
    sec = _section(raw, "sweep")
    config = config_from_dict(raw)
    dist = merge_classes(config.classes)
    base = dist.with_rate(1.0)
    regime = sec.get("regime", "critical")
    eps = float(sec.get("epsilon", raw.get("epsilon", 0.01)))
    rows = asymptotic_sweep(
        regime, base, [float(x) for x in sec["lambda_grid"]], int(sec.get("n_samples", 100_000)),
        seed=seed, epsilon=eps, cells=_cells(sec.get("cells")),
    )
    for r in rows:
        r["regime"] = regime
    return rows, ["regime"] + SWEEP_COLUMNS, {"rows": len(rows)}


def cmd_blocking(raw, seed, args):
    sec = raw.get("blocking", {})
    config = config_from_dict(raw)
    dist = merge_classes(config.classes)
    n = int(sec.get("n_samples", 100_000))
    rows = []
    for i, (d, s) in enumerate(_cells(sec.get("cells")) or dist.support):
        rs = row_seed(seed, i)
        est, se = conditional_virtual_blocking(dist, d, s, config.capacity, n, rs)
        rows.append({"d": d, "s": s, "C": config.capacity, "estimate": est, "std_error": se,
                     "n_samples": n, "seed": rs})
    return rows, BLOCKING_COLUMNS, {"rows": len(rows)}


def _dp_instance(raw, sec_name="dp"):
    sec = _section(raw, sec_name)
    return DPInstance.from_dict(sec), int(sec.get("max_states", 10**7))


def cmd_bench(raw, seed, args):
    sec = raw.get("bench", {})
    policies = list(sec.get("policies", ["icsp", "admit_all"]))
    reps = args.replications or int(sec.get("replications", 5))
    if "dp" in policies:
        if "dp" in raw:
            inst, max_states = _dp_instance(raw)
        else:
            config = config_from_dict(raw)
            periods = int(sec.get("periods", config.horizon))
            inst = DPInstance.from_config(config, periods, float(sec.get("delta", 1.0)))
            max_states = int(sec.get("max_states", 10**7))
        eps = float(raw.get("epsilon", 0.01))
        episodes = args.replications or int(sec.get("n_episodes", 2000))
        rows = benchmark_discrete(inst, policies, episodes, seed, eps, max_states)
        return rows, BENCH_COLUMNS, {"rows": len(rows), "dp_value": rows[0]["reference"]}
    config = config_from_dict(raw)
    capacities = sec.get("capacities") or [config.capacity]
    rows = []
    for C in capacities:
        scaled = scale_config(config, int(C)) if int(C) != config.capacity else config
        rows += benchmark(
            scaled, policies, reps, seed, sec.get("reference", "lp"),
            int(sec.get("workers", 1)), sensitivity=int(C),
        )
    return rows, BENCH_COLUMNS, {"rows": len(rows)}


def cmd_pricing(raw, seed, args):
    sec = _section(raw, "pricing")
    config = config_from_dict(raw)
    curves_raw = {int(c.get("class_id", i + 1)): c for i, c in enumerate(sec["curves"])}
    ids = [c.class_id for c in config.classes]
    missing = [k for k in ids if k not in curves_raw]
    if missing:
        raise ConfigError(f"pricing.curves lacks classes {missing}")
    curves = [DemandCurve.from_dict(curves_raw[k]) for k in ids]
    pmfs = [{key: float(p) for key, p in c.joint_pmf.items()} for c in config.classes]
    result = solve_nlp2(curves, pmfs, config.capacity, config.epsilon, float(sec.get("tol", 1e-9)))
    summary = {"theta": result.theta, "objective": result.objective}
    if sec.get("grid_points"):
        cv = cross_validate_nlp1(curves, pmfs, config.capacity, config.epsilon, int(sec["grid_points"]))
        summary.update(nlp1_objective=cv.nlp1_objective, gap=cv.gap, error_bound=cv.error_bound)
    return result.rows(ids), PRICING_COLUMNS, summary


def cmd_dp(raw, seed, args):
    inst, max_states = _dp_instance(raw)
    oracle = dp_solve(inst, max_states=max_states)
    rows = oracle.threshold_table()
    return rows, DP_COLUMNS, {"V1": float(oracle.optimal_value), "rows": len(rows)}


HANDLERS = {
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "blocking": cmd_blocking,
    "pricing": cmd_pricing,
    "dp": cmd_dp,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advres", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", required=True, help="output CSV path")
        p.add_argument("--seed", type=int, default=None, help="master seed (default: config seed or 0)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, dotted keys for nesting; repeatable")
        p.add_argument("--replications", type=int, default=None)
    return parser


def versions() -> dict:
    return {
        "advres": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def run(args) -> dict:
    raw = load_raw(args.config, args.set)
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    original = copy.deepcopy(raw)
    rows, columns, summary = HANDLERS[args.command](raw, seed, args)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True)
    write_rows_csv(out, rows, columns)
    manifest = {
        "command": args.command,
        "config_sha256": config_hash(original),
        "seed": seed,
        "overrides": list(args.set),
        "replications": args.replications,
        "columns": columns,
        "summary": summary,
        "versions": versions(),
    }
    Path(str(out) + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return summary


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        summary = run(args)
    except (ConfigError, ValueError, KeyError, TypeError, OSError) as exc:
        msg = f"missing config key {exc.args[0]!r}" if isinstance(exc, KeyError) else exc
        print(f"advres {args.command}: error: {msg}", file=sys.stderr)
        return 2
    for key in sorted(summary):
        print(f"{key}: {summary[key]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
