"""``probe-lab`` command line: reproducible experiments with CSV and JSON outputs.

Every command reads a JSON config (``schema_version`` 1), writes
``<name>.csv`` and ``<name>.json`` into ``--out``, and exits 0 on success,
1 when a checked property is violated, 2 on a bad config.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from .bounds import bound_rows, trend_check
from .cellprobe import AdaptiveMock, ConfigError, ContractViolation, measure, verify_nonadaptive
from .compression import cell_sample_for, run_compression_demo
from .game import GameConfig, run_game
from .hashing import SketchSeed
from .sketches import SketchConfig

SCHEMA_VERSION = 1
COMMANDS = ("verify-nonadaptive", "run-game", "compress-demo", "cell-sample", "bounds-report", "sweep")
SEED_ENV = "PROBE_LAB_SEED"
TIMESTAMP_KEY = "generated_at"

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG = 0, 1, 2


@dataclass
class ExperimentConfig:
    command: str
    params: dict[str, Any]
    master_seed: int = 0
    trials: int = 1
    name: str | None = None
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}")
        allowed = {"schema_version", "command", "params", "master_seed", "trials", "name"}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        if data.get("command") not in COMMANDS:
            raise ConfigError(f"command must be one of {COMMANDS}")
        cfg = cls(**data)
        if not isinstance(cfg.params, dict):
            raise ConfigError("params must be an object")
        if not isinstance(cfg.master_seed, int) or not 0 <= cfg.master_seed < 1 << 64:
            raise ConfigError("master_seed must be an unsigned 64-bit integer")
        if not isinstance(cfg.trials, int) or cfg.trials < 1:
            raise ConfigError("trials must be a positive integer")
        return cfg

    @property
    def output_name(self) -> str:
        return self.name or self.command

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


@dataclass
class CommandResult:
    rows: list[dict]
    columns: list[str]
    summary: dict
    violations: list[str] = field(default_factory=list)


# -- outputs -------------------------------------------------------------------------------


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def render_csv(columns: Sequence[str], rows: Sequence[dict], config_hash: str) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=[*columns, "config_hash"], lineterminator="\r\n",
                            quoting=csv.QUOTE_MINIMAL, extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({**row, "config_hash": config_hash})
    return buf.getvalue()


def render_json(config: ExperimentConfig, result: CommandResult, timestamp: str | None) -> str:
    doc = {
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "summary": _jsonable(result.summary),
        "violations": result.violations,
    }
    if timestamp is not None:
        doc[TIMESTAMP_KEY] = timestamp
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def strip_timestamp(json_text: str) -> str:
    doc = json.loads(json_text)
    doc.pop(TIMESTAMP_KEY, None)
    return json.dumps(doc, indent=2, sort_keys=True)


# -- commands -----------------------------------------------------------------------------


def _sketch_configs(params: dict) -> list[SketchConfig]:
    return [SketchConfig.from_dict(s) for s in params.get("sketches", [])]


def _game_config(block: dict, cfg: ExperimentConfig) -> GameConfig:
    block = dict(block)
    clash = {"trials", "master_seed"} & set(block)
    if clash:
        raise ConfigError(f"set {sorted(clash)} at the top level of the config, not inside a game block")
    return GameConfig.from_dict({**block, "trials": cfg.trials, "master_seed": cfg.master_seed})


def cmd_verify_nonadaptive(cfg: ExperimentConfig, threads: int = 1) -> CommandResult:
    params = cfg.params
    trials = int(params.get("trials", cfg.trials))
    jobs = [(s.name, s.factory()) for s in _sketch_configs(params)]
    if params.get("include_mock"):
        n = int(params.get("mock_n", 64))
        jobs.append(("adaptive_mock", lambda seed, memory=None: AdaptiveMock(n, seed, memory)))
    rows, violations = [], []
    for label, factory in jobs:
        report = verify_nonadaptive(factory, trials, SketchSeed(cfg.master_seed).child("verify", label))
        rows.append({"sketch": report.sketch, "trials": report.trials, "violations": report.violations,
                     "probe_events": report.probe_events, "ok": report.ok,
                     "offenders": ";".join(f"{t}:{i}" for t, i in report.offenders[:10])})
        if not report.ok:
            violations.append(f"{report.sketch}: {report.violations} adaptive updates")
    summary = {"sketches": len(rows), "all_ok": not violations}
    return CommandResult(rows, ["sketch", "trials", "violations", "probe_events", "ok", "offenders"],
                         summary, violations)


_TRIAL_COLUMNS = ["trial_id", "problem", "n", "a", "C", "success", "queries_used", "message_bits",
                  "max_probes_per_update", "query_errors", "scored_queries", "failure"]


def cmd_run_game(cfg: ExperimentConfig, threads: int = 1) -> CommandResult:
    game = _game_config(cfg.params.get("game", cfg.params), cfg)
    stats = run_game(game, threads=threads)
    rows = [asdict(r) for r in stats.records]
    violations = []
    if stats.level_identity_violations or stats.hh_uniqueness_violations:
        violations.append(f"{stats.level_identity_violations} level-identity and "
                          f"{stats.hh_uniqueness_violations} heavy-hitter uniqueness violations")
    return CommandResult(rows, _TRIAL_COLUMNS, stats.summary(), violations)


def cmd_compress_demo(cfg: ExperimentConfig, threads: int = 1) -> CommandResult:
    params = cfg.params
    rows, summaries, violations = [], [], []
    for gi, block in enumerate(params.get("games", [])):
        game = _game_config(block, cfg)
        report = run_compression_demo(game, max_tries=int(params.get("max_tries", 20_000)),
                                      identity_first=bool(params.get("identity_first", False)))
        label = f"{game.sketch.name}/{game.problem}"
        summary = report.summary()
        summary["game"] = label
        summary["bound_column"] = "ok" if report.preconditions_met else "precondition unmet"
        summaries.append(summary)
        for r in report.records:
            rows.append({"game": label, **asdict(r)})
        if report.equal_non_erring != report.non_erring:
            violations.append(f"{label}: compressed answers differ on "
                              f"{report.non_erring - report.equal_non_erring} non-erring trials")
        if report.certificate_failures:
            violations.append(f"{label}: pigeonhole certificate failed {report.certificate_failures} times")
        if report.preconditions_met and report.max_compressed_bits is not None \
                and report.max_compressed_bits > report.bound_bits:
            violations.append(f"{label}: compressed message exceeds the bit bound")
    columns = ["game", "trial_id", "covered_size", "perm_index", "full_bits", "compressed_bits",
               "full_success", "compressed_success", "non_erring", "answers_equal"]
    return CommandResult(rows, columns, {"games": summaries}, violations)


def cmd_cell_sample(cfg: ExperimentConfig, threads: int = 1) -> CommandResult:
    rows, violations = [], []
    for i, s in enumerate(_sketch_configs(cfg.params)):
        sketch = s.factory()(SketchSeed(cfg.master_seed).child("cell-sample", i))
        sample = cell_sample_for(sketch)
        rows.append({"sketch": sketch.name, "n": sketch.n, "S": sample.S, "t_u": sample.t_u,
                     "covered": sample.size, "classes": len(sample.class_counts),
                     "pigeonhole_floor": sketch.n / math.comb(sample.S, sample.t_u),
                     "certificate_ok": sample.certificate_ok,
                     "cells": " ".join(map(str, sample.cells))})
        if not sample.certificate_ok:
            violations.append(f"{sketch.name}: |I^C|={sample.size} below n / C(S, t_u)")
    columns = ["sketch", "n", "S", "t_u", "covered", "classes", "pigeonhole_floor", "certificate_ok", "cells"]
    return CommandResult(rows, columns, {"sketches": len(rows), "all_ok": not violations}, violations)


def cmd_bounds_report(cfg: ExperimentConfig, threads: int = 1) -> CommandResult:
    params = cfg.params
    c = float(params.get("c", 1.0))
    rows = []
    for i, s in enumerate(_sketch_configs(params)):
        sketch = s.factory()(SketchSeed(cfg.master_seed).child("bounds", i))
        for row in bound_rows(measure(sketch), params.get("deltas", ()), params.get("k"), c):
            rows.append(asdict(row))
    exponents = params.get("trend_exponents", list(range(10, 31)))
    trends = {}
    violations = []
    if exponents:
        for regime in ("log", "loglog"):
            tr = trend_check(regime, exponents, c=c)
            trends[regime] = {"kappa": tr.kappa, "max_rel_dev": tr.max_rel_dev, "ok": tr.ok,
                              "points": [list(p) for p in tr.points]}
            if not tr.ok:
                violations.append(f"trend {regime}: deviation {tr.max_rel_dev:.3f} > {tr.tolerance}")
    columns = ["sketch", "n", "S_measured", "t_u_measured", "det_bound", "rand_bound", "preconditions_met", "delta"]
    summary = {"rows": len(rows), "trends": trends, "note": "bounds are shape functions with explicit c"}
    return CommandResult(rows, columns, summary, violations)


def cmd_sweep(cfg: ExperimentConfig, threads: int = 1) -> CommandResult:
    """Run the game over the cartesian product of ``vary`` (top-level game keys only)."""
    params = cfg.params
    base = dict(params.get("game", {}))
    vary = params.get("vary", {})
    keys = sorted(vary)
    rows = []
    for values in itertools.product(*(vary[k] for k in keys)):
        point = {**base, **dict(zip(keys, values))}
        if "sketch" in point and isinstance(point["sketch"], dict):
            point["sketch"] = {**point["sketch"], "n": point["n"]}
        stats = run_game(_game_config(point, cfg), threads=threads)
        summary = stats.summary()
        rows.append({**{k: v for k, v in zip(keys, values)}, **summary})
    columns = keys + ["problem", "sketch", "trials", "success_rate", "wilson_low", "wilson_high",
                      "mean_message_bits", "mean_queries", "max_probes_per_update", "per_query_failure",
                      "information_bits"]
    return CommandResult(rows, columns, {"points": len(rows), "vary": vary}, [])


HANDLERS = {
    "verify-nonadaptive": cmd_verify_nonadaptive,
    "run-game": cmd_run_game,
    "compress-demo": cmd_compress_demo,
    "cell-sample": cmd_cell_sample,
    "bounds-report": cmd_bounds_report,
    "sweep": cmd_sweep,
}


# -- entry point ------------------------------------------------------------------------------


def load_config(path: str | Path, command: str, seed: int | None, trials: int | None) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = ExperimentConfig.from_dict(data)
    if cfg.command != command:
        raise ConfigError(f"config is for {cfg.command!r}, not {command!r}")
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cfg.master_seed = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    if seed is not None:
        cfg.master_seed = seed
    if trials is not None:
        cfg.trials = trials
    return ExperimentConfig.from_dict(cfg.to_dict())


def run_command(cfg: ExperimentConfig, out: Path, threads: int = 1, timestamp: bool = True) -> int:
    result = HANDLERS[cfg.command](cfg, threads=threads)
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.hash()
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds") if timestamp else None
    (out / f"{cfg.output_name}.csv").write_text(render_csv(result.columns, result.rows, digest), newline="")
    (out / f"{cfg.output_name}.json").write_text(render_json(cfg, result, stamp))
    for v in result.violations:
        print(f"violation: {v}", file=sys.stderr)
    return EXIT_VIOLATION if result.violations else EXIT_OK


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="probe-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=_u64, help="master seed (overrides config and $" + SEED_ENV + ")")
        p.add_argument("--trials", type=int, help="override the config's trial count")
        p.add_argument("--threads", type=int, default=1, help="trial-level worker threads")
        p.add_argument("--out", default="out", help="output directory")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.command, args.seed, args.trials)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return run_command(cfg, Path(args.out), threads=args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_VIOLATION


if __name__ == "__main__":
    sys.exit(main())
