"""Experiment harness: parameter sweeps, skewness CDF and worked examples.

    rebalance-lab run --sweep theta_max=0.02,0.08,0.2 --algorithms mixed,min_table --out results
    rebalance-lab cdf --instances 40 --out results
    rebalance-lab golden
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .core import AssignmentFunction, TopologyConfig
from .core import loads as instance_loads
from .errors import ConfigError, InvalidInput, Unreachable
from .sim import METRIC_COLUMNS, Simulator
from .workload import GeneratorConfig, fluctuate, zipf_interval

SCHEMA_VERSION = 1
SEED_ENV = "REBALANCE_LAB_SEED"

DEFAULTS = {
    "keys": 10_000,
    "skew": 0.85,
    "fluctuation": 1.0,
    "theta_max": 0.08,
    "beta": 1.5,
    "level_r": 3,
    "window": 5,
    "instances": 15,
    "upstream": 10,
    "table_capacity": 3000,
    "tuples_per_interval": 10_000_000,
    "intervals": 50,
}

# name -> (type, minimum)
_PARAMS = {
    "keys": (int, 1),
    "skew": (float, 0.0),
    "fluctuation": (float, 0.0),
    "theta_max": (float, 0.0),
    "beta": (float, 0.0),
    "level_r": (int, 0),
    "window": (int, 1),
    "instances": (int, 1),
    "upstream": (int, 1),
    "table_capacity": (int, 0),
    "tuples_per_interval": (int, 0),
    "intervals": (int, 1),
}

ALGORITHM_NAMES = {
    "mixed": "mixed", "minmig": "min_mig", "min_mig": "min_mig", "mintable": "min_table",
    "min_table": "min_table", "mixedbf": "mixed_bf", "mixed_bf": "mixed_bf",
    "hashonly": "hash_only", "hash_only": "hash_only",
}

DEVIATIONS = [
    "key_count defaults to 1e4 instead of 1e6",
    "50 intervals per run",
    "tuples are simulated as sampled stubs, not executed",
]


@dataclass
class ExperimentSpec:
    params: dict
    seed: int = 0
    sweeps: dict = field(default_factory=dict)
    repeats: int = 1
    algorithms: list = field(default_factory=lambda: ["mixed"])
    output_dir: str = "results"
    planner: str = "compact"
    timing: bool = True

    def topology(self, seed=None, **over) -> TopologyConfig:
        p = {**self.params, **over}
        return TopologyConfig(
            n_upstream=p["upstream"], n_downstream=p["instances"], window=p["window"],
            theta_max=p["theta_max"], table_capacity=p["table_capacity"], beta=p["beta"],
            r=p["level_r"], seed=self.seed if seed is None else seed,
        )

    def generator(self, seed=None, **over) -> GeneratorConfig:
        p = {**self.params, **over}
        return GeneratorConfig(
            key_count=p["keys"], skew=p["skew"], fluctuation=p["fluctuation"],
            tuples_per_interval=p["tuples_per_interval"],
            seed=self.seed if seed is None else seed,
        )


def _coerce(name: str, value):
    kind, lo = _PARAMS[name]
    if isinstance(value, bool):
        raise ConfigError(name, "expected a number")
    try:
        v = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(name, f"expected {kind.__name__}, got {value!r}") from None
    if kind is int and isinstance(value, float) and value != int(value):
        raise ConfigError(name, f"expected an integer, got {value!r}")
    if not np.isfinite(v) or v < lo:
        raise ConfigError(name, f"must be >= {lo}, got {value!r}")
    return v


def _seed(value, where):
    try:
        s = int(value)
    except (TypeError, ValueError):
        raise ConfigError(where, f"expected an integer seed, got {value!r}") from None
    if not 0 <= s < 2**64:
        raise ConfigError(where, "seed must fit in 64 unsigned bits")
    return s


def parse_config(file=None, overrides: dict | None = None, env=None) -> ExperimentSpec:
    """File values override defaults; ``overrides`` (CLI flags) override both."""
    env = os.environ if env is None else env
    raw = {}
    if file is not None:
        try:
            text = Path(file).read_text()
        except OSError as e:
            raise ConfigError("config", f"cannot read {file}: {e}") from None
        if text.strip():
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError("config", f"{file}: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config", "top level must be an object")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    merged = {**raw, **overrides}

    known = set(_PARAMS) | {"seed", "sweeps", "repeats", "algorithms", "out", "planner", "timing"}
    for k in merged:
        if k not in known:
            raise ConfigError(k, "unknown parameter")
    params = {k: _coerce(k, merged.get(k, DEFAULTS[k])) for k in _PARAMS}

    if "seed" in overrides:
        seed = _seed(overrides["seed"], "seed")
    elif "seed" in raw:
        seed = _seed(raw["seed"], "seed")
    elif env.get(SEED_ENV):
        seed = _seed(env[SEED_ENV], SEED_ENV)
    else:
        seed = 0

    sweeps = merged.get("sweeps", {}) or {}
    if not isinstance(sweeps, dict):
        raise ConfigError("sweeps", "expected an object of name -> list")
    clean = {}
    for name, values in sweeps.items():
        if name not in _PARAMS:
            raise ConfigError(f"sweeps.{name}", "not a sweepable parameter")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweeps.{name}", "expected a non-empty list")
        clean[name] = [_coerce(name, v) for v in values]

    repeats = merged.get("repeats", 1)
    if isinstance(repeats, bool) or not isinstance(repeats, int) or repeats < 1:
        raise ConfigError("repeats", f"must be an integer >= 1, got {repeats!r}")
    algos = merged.get("algorithms", ["mixed"])
    if isinstance(algos, str):
        algos = [a for a in algos.split(",") if a]
    if not algos:
        raise ConfigError("algorithms", "empty algorithm list")
    norm = []
    for a in algos:
        key = str(a).lower().replace("-", "_")
        if key not in ALGORITHM_NAMES:
            raise ConfigError("algorithms", f"unknown algorithm {a!r}")
        norm.append(ALGORITHM_NAMES[key])
    planner = merged.get("planner", "compact")
    if planner not in ("compact", "full"):
        raise ConfigError("planner", f"expected compact or full, got {planner!r}")
    timing = merged.get("timing", True)
    if not isinstance(timing, bool):
        raise ConfigError("timing", "expected true or false")
    return ExperimentSpec(params, seed, clean, repeats, norm, str(merged.get("out", "results")),
                          planner, timing)


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _point_label(value) -> str:
    return _fmt(value)


def run_point(spec: ExperimentSpec, algorithm: str, over: dict) -> tuple:
    """Runs every repeat of one sweep point; returns (averaged rows, per-run means)."""
    n = spec.params["intervals"] if "intervals" not in over else over["intervals"]
    per_run = []
    series = []
    for rep in range(spec.repeats):
        seed = spec.seed + rep
        sim = Simulator(spec.topology(seed, **over), spec.generator(seed, **over), algorithm,
                        spec.planner, timing=spec.timing)
        res = sim.run(n)
        m = np.array([[getattr(r, c) for c in METRIC_COLUMNS] for r in res.metrics], dtype=np.float64)
        series.append(m)
        per_run.append(m[:, 1:].mean(axis=0))
    avg = np.mean(series, axis=0)
    rows = []
    for r in avg:
        rows.append([int(r[0]), float(r[1]), float(r[2]), float(r[3]),
                     int(round(r[4])), float(r[5])])
    return rows, np.array(per_run)


def _csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def run_matrix(spec: ExperimentSpec, log=None) -> list:
    """One CSV per (algorithm, sweep point) plus a summary.json per sweep."""
    out = Path(spec.output_dir)
    sweeps = spec.sweeps or {"base": [None]}
    written = []
    for name in sorted(sweeps):
        points = []
        for value in sweeps[name]:
            over = {} if value is None else {name: value}
            for algo in spec.algorithms:
                rows, per_run = run_point(spec, algo, over)
                label = "base" if value is None else f"{name}={_point_label(value)}"
                path = out / name / f"{algo}__{label}.csv"
                try:
                    write_atomic(path, _csv_text(rows))
                except OSError as e:
                    raise OSError(f"writing {path}: {e}") from e
                written.append(path)
                if log:
                    log(f"wrote {path}")
                agg = {}
                for j, col in enumerate(METRIC_COLUMNS[1:]):
                    v = per_run[:, j]
                    agg[col] = {"mean": float(v.mean()), "min": float(v.min()), "max": float(v.max())}
                points.append({"parameter": name, "value": value, "algorithm": algo,
                               "repeats": spec.repeats, "file": path.name, "metrics": agg})
        points.sort(key=lambda p: (p["algorithm"], -np.inf if p["value"] is None else p["value"]))
        summary = {
            "schema_version": SCHEMA_VERSION,
            "sweep": name,
            "seed": spec.seed,
            "planner": spec.planner,
            "timing": spec.timing,
            "base": spec.params,
            "deviations": DEVIATIONS + ([] if spec.timing else ["plan_micros not measured"]),
            "points": points,
        }
        path = out / name / "summary.json"
        write_atomic(path, json.dumps(summary, indent=2, sort_keys=True) + "\n")
        written.append(path)
    return written


def skewness_cdf(spec: ExperimentSpec) -> list:
    """Average per-instance load under plain hashing, sorted, with percentiles."""
    gen = spec.generator()
    n_d = spec.params["instances"]
    f = AssignmentFunction.hash_only(n_d)
    snap = zipf_interval(gen, 0)
    acc = instance_loads(f, snap).astype(np.float64)
    for _ in range(spec.params["intervals"] - 1):
        snap = fluctuate(snap, gen.fluctuation, f, gen.seed, window=spec.params["window"])
        acc += instance_loads(f, snap)
    acc /= spec.params["intervals"]
    mean = acc.mean()
    order = np.argsort(acc, kind="stable")
    rows = []
    for rank, d in enumerate(order.tolist()):
        rows.append([rank, d, float(acc[d]), float(acc[d] / mean) if mean else 0.0,
                     100.0 * (rank + 1) / n_d])
    return rows


CDF_COLUMNS = ("rank", "instance", "avg_load", "load_ratio", "percentile")


def _add_params(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", help="64-bit seed (falls back to $%s, then 0)" % SEED_ENV)
    p.add_argument("--keys", help="number of keys K")
    p.add_argument("--skew", help="Zipf exponent z")
    p.add_argument("--fluctuation", help="fluctuation rate f")
    p.add_argument("--theta-max", dest="theta_max", help="imbalance tolerance")
    p.add_argument("--beta", help="cost exponent in the migration priority")
    p.add_argument("--level-r", dest="level_r", help="discretization exponent r (R = 2^r)")
    p.add_argument("--window", help="memory window w")
    p.add_argument("--instances", help="downstream instances N_D")
    p.add_argument("--upstream", help="upstream instances N_U")
    p.add_argument("--table-capacity", dest="table_capacity", help="routing table capacity A_max")
    p.add_argument("--tuples", dest="tuples_per_interval", help="tuples per interval")
    p.add_argument("--intervals", help="intervals per run")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rebalance-lab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment matrix")
    _add_params(r)
    r.add_argument("--repeats", type=int, help="seeds per sweep point")
    r.add_argument("--algorithms", help="comma list: mixed,min_table,min_mig,mixed_bf,hash_only")
    r.add_argument("--sweep", action="append", default=[], metavar="NAME=V1,V2",
                   help="sweep one parameter (repeatable)")
    r.add_argument("--planner", choices=("compact", "full"))
    r.add_argument("--no-timing", dest="timing", action="store_false", default=None,
                   help="write plan_micros as 0 so outputs are byte-reproducible")

    c = sub.add_parser("cdf", help="skewness CDF under plain hashing")
    _add_params(c)

    sub.add_parser("golden", help="check the small worked examples")
    return ap


_FLAG_KEYS = ("out", "seed", "keys", "skew", "fluctuation", "theta_max", "beta", "level_r", "window",
              "instances", "upstream", "table_capacity", "tuples_per_interval", "intervals")


def _overrides(args) -> dict:
    over = {k: getattr(args, k, None) for k in _FLAG_KEYS}
    for k in ("repeats", "algorithms", "planner", "timing"):
        if getattr(args, k, None) is not None:
            over[k] = getattr(args, k)
    sweeps = {}
    for item in getattr(args, "sweep", []) or []:
        name, _, vals = item.partition("=")
        name = name.strip().replace("-", "_")
        if not vals:
            raise ConfigError(f"sweeps.{name}", "expected NAME=V1,V2,...")
        sweeps[name] = [v for v in vals.split(",") if v]
    if sweeps:
        over["sweeps"] = sweeps
    return over


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "golden":
            from .golden import run_golden

            results = run_golden()
            for name, ok, detail in results:
                print(f"{'PASS' if ok else 'FAIL'}  {name}  [{detail}]")
            return 0 if all(ok for _, ok, _ in results) else 1
        spec = parse_config(args.config, _overrides(args))
        if args.command == "run":
            paths = run_matrix(spec, log=lambda m: print(m, file=sys.stderr))
            print(f"{len(paths)} files under {spec.output_dir}")
            return 0
        rows = skewness_cdf(spec)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CDF_COLUMNS)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
        path = Path(spec.output_dir) / "cdf.csv"
        write_atomic(path, buf.getvalue())
        ratio = rows[-1][2] / rows[0][2] if rows[0][2] else float("inf")
        print(f"wrote {path}; max/min load ratio {ratio:.3f}")
        return 0
    except (ConfigError, InvalidInput) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Unreachable as e:
        print(f"error: {e}; lower --fluctuation or raise --keys", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
