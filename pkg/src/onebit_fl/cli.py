"""Command-line front end: run experiments, check the analysis constants,
print the communication ledger, and benchmark the kernels."""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__, diagnostics
from .errors import ConfigError, DataFormatError, NumericError, PayloadError
from .federation import (CSV_HEADER, FederationConfig, cost_report, resolve_spec,
                         run, sketch_dim)
from .sketch import fwht_in_place

# Config file keys map 1:1 onto FederationConfig fields except for the
# reserved word "lambda".
_KEY_TO_FIELD = {f.name: f.name for f in fields(FederationConfig)}
_KEY_TO_FIELD["lambda"] = "lam"
del _KEY_TO_FIELD["lam"]
_FIELD_TYPES = {f.name: f.type for f in fields(FederationConfig)}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, field_name: str, raw: str):
    kind = _FIELD_TYPES[field_name]
    if kind == "bool":
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"config key {key!r} expects a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r} expects a {kind}, got {raw!r}") from None
    return raw


def parse_config(path=None, overrides=None) -> FederationConfig:
    """Build a validated config from a flat key=value file plus overrides.

    Blank lines and '#' comments are ignored; CLI overrides win over file
    keys. Unknown keys fail fast with the list of valid keys.
    """
    values = {}
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in _KEY_TO_FIELD:
                raise ConfigError(
                    f"{path}:{lineno}: unknown config key {key!r}; valid keys: "
                    + ", ".join(sorted(_KEY_TO_FIELD)))
            field_name = _KEY_TO_FIELD[key]
            values[field_name] = _coerce(key, field_name, raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return FederationConfig(**values).validate()


def canonical_config_text(config: FederationConfig) -> str:
    """Deterministic key = value rendering, sufficient to reproduce a run."""
    lines = []
    for key in sorted(_KEY_TO_FIELD):
        value = getattr(config, _KEY_TO_FIELD[key])
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _config_dict(config: FederationConfig) -> dict:
    return {key: getattr(config, _KEY_TO_FIELD[key]) for key in sorted(_KEY_TO_FIELD)}


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _write_run_outputs(config: FederationConfig, result, out_dir: Path, wall: float):
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    rows = [CSV_HEADER] + [row.csv_row() for row in result.metrics]
    csv_path.write_text("\n".join(rows) + "\n")
    (out_dir / "config.txt").write_text(canonical_config_text(config))
    last = result.metrics[-1] if result.metrics else None
    summary = {
        "rounds": len(result.metrics),
        "final_accuracy": last.mean_test_accuracy if last else None,
        "final_train_loss": last.mean_train_loss if last else None,
        "initial_potential": result.initial_potential,
        "final_potential": last.potential_estimate if last else result.initial_potential,
        "total_uplink_bits": int(sum(r.uplink_bits for r in result.metrics)),
        "total_downlink_bits": int(sum(r.downlink_bits for r in result.metrics)),
        "max_weight_sq": result.max_weight_sq,
        "wall_time_s": wall,
        "git_describe": _git_describe(),
        "config": _config_dict(config),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return csv_path, summary


def _cmd_run(args) -> int:
    config = parse_config(args.config, _overrides(args))
    start = time.perf_counter()
    result = run(config)
    wall = time.perf_counter() - start
    out_dir = Path(config.output_dir)
    csv_path, summary = _write_run_outputs(config, result, out_dir, wall)
    print(f"wrote {csv_path} ({summary['rounds']} rounds) and {out_dir / 'summary.json'}")
    if summary["final_accuracy"] is not None:
        print(f"final mean test accuracy: {summary['final_accuracy']:.4f}")
    print(f"potential: {summary['initial_potential']:.6g} -> {summary['final_potential']:.6g}")
    return 0


def _cmd_check(args) -> int:
    report = diagnostics.run_check_suite(seed=args.seed)
    print(json.dumps(report, indent=2, sort_keys=True, default=float))
    ok = True
    for name in sorted(report):
        passed = bool(report[name]["pass"])
        ok = ok and passed
        print(f"check {name}: {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


def _cmd_cost(args) -> int:
    config = parse_config(args.config, _overrides(args))
    spec = resolve_spec(config)
    n = spec.n
    m = sketch_dim(n, config.m_ratio)
    report = cost_report(n, m, config.S)
    print(f"model parameters n = {n}, sketch dimension m = {m} "
          f"(ratio {m / n:.4f}), participants S = {config.S}")
    print(f"nominal uplink reduction at ratio {config.m_ratio}: "
          f"{100.0 * (1.0 - config.m_ratio / 32.0):.2f}% (1 - {config.m_ratio}/32)")
    print(f"configured uplink reduction: {100.0 * report['uplink_reduction']:.2f}%")
    print(f"per-round uplink: sketch {report['sketch_uplink_bits']} bits vs "
          f"fedavg {report['fedavg_uplink_bits']} bits")
    print("per-round downlink (unicast): "
          f"one-bit {report['sketch_downlink_bits_onebit']} bits, "
          f"trit {report['sketch_downlink_bits_trit']} bits, "
          f"fedavg {report['fedavg_downlink_bits']} bits")
    print("per-round downlink (broadcast once): "
          f"one-bit {report['sketch_downlink_bits_onebit_broadcast']} bits, "
          f"trit {report['sketch_downlink_bits_trit_broadcast']} bits")
    print(f"per-round total: sketch {report['sketch_round_mb_onebit']:.2f} MB (one-bit) / "
          f"{report['sketch_round_mb_trit']:.2f} MB (trit) vs "
          f"fedavg {report['fedavg_round_mb']:.2f} MB "
          f"(reduction {100.0 * report['round_reduction_onebit']:.2f}%)")
    return 0


def _cmd_bench(args) -> int:
    rng_local = np.random.default_rng(0)
    print("fwht timings:")
    for exp in range(10, args.max_log2 + 1):
        n = 1 << exp
        x = rng_local.standard_normal(n)
        reps = max(1, (1 << 22) // n)
        start = time.perf_counter()
        for _ in range(reps):
            fwht_in_place(x)
        per = (time.perf_counter() - start) / reps
        print(f"  n = 2^{exp:<2d}  {per * 1e6:10.1f} us/transform")
    config = parse_config(None, {"K": 4, "S": 2, "T": 1, "dim": args.bench_dim,
                                 "samples_per_client": 256})
    from .client import client_update
    from .federation import build_clients, build_problem
    from .sketch import ConsensusVector
    problem = build_problem(config)
    clients = build_clients(config, problem.dataset, problem.partitions, problem.spec)
    v = ConsensusVector.zeros(problem.op.m)
    start = time.perf_counter()
    reps = 20
    for _ in range(reps):
        client_update(clients[0], v, problem.op, problem.spec, problem.hp, problem.dataset)
    per = (time.perf_counter() - start) / reps
    print(f"client_update (dim={args.bench_dim}, R={config.R}, batch={config.batch_size}): "
          f"{per * 1e3:.2f} ms")
    return 0


def _overrides(args) -> dict:
    pairs = {
        "algorithm": getattr(args, "algo", None),
        "T": getattr(args, "rounds", None),
        "K": getattr(args, "clients", None),
        "S": getattr(args, "participants", None),
        "m_ratio": getattr(args, "m_ratio", None),
        "seed": getattr(args, "seed", None),
        "output_dir": getattr(args, "out", None),
        "potential": getattr(args, "potential", None),
    }
    for flag in ("train_all_clients", "strict_onebit_downlink", "broadcast_once"):
        if getattr(args, flag, False):
            pairs[flag] = True
    return {k: v for k, v in pairs.items() if v is not None}


def _add_common(parser):
    parser.add_argument("--config", help="flat key = value configuration file")
    parser.add_argument("--algo", choices=["pfed1bs", "fedavg", "local"])
    parser.add_argument("--rounds", type=int)
    parser.add_argument("--clients", type=int)
    parser.add_argument("--participants", type=int)
    parser.add_argument("--m-ratio", dest="m_ratio", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    parser.add_argument("--train-all-clients", action="store_true")
    parser.add_argument("--strict-onebit-downlink", action="store_true")
    parser.add_argument("--broadcast-once", action="store_true")
    parser.add_argument("--potential", choices=["exact", "sampled"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="onebit-fl",
                                     description="one-bit sketched federated learning simulator")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="run an experiment and write metrics")
    _add_common(run_p)
    check_p = sub.add_parser("check", help="run the diagnostics suite")
    check_p.add_argument("--seed", type=int, default=0)
    cost_p = sub.add_parser("cost", help="print the communication ledger")
    _add_common(cost_p)
    bench_p = sub.add_parser("bench", help="time the transform and a client update")
    bench_p.add_argument("--max-log2", type=int, default=18)
    bench_p.add_argument("--bench-dim", type=int, default=200)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"run": _cmd_run, "check": _cmd_check, "cost": _cmd_cost, "bench": _cmd_bench}
    try:
        return handlers[args.command](args)
    except (ConfigError, DataFormatError, PayloadError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
