"""Experiment registry, convergence diagnostics and verdict reports.

An ``ExperimentSpec`` names a dataset, loss, algorithm and geometry, carries
default parameters with a type schema, and points to a runner. Running a
spec yields a ``Trajectory`` and a ``VerificationReport`` whose verdict is
derived from a list of ``Check`` objects.
"""

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import problems

VERDICTS = ("confirmed", "refuted-as-expected", "inconclusive")
# metric family required by each loss family
PLAN_METRICS = {"unique-finite-root": "limit-point", "strict-monotone": "limit-direction"}
CAUCHY_WINDOW = 100
CAUCHY_TOL = 1e-4


class ExperimentAborted(RuntimeError):
    """A runner raised; carries the partial trajectory."""

    def __init__(self, message, trajectory):
        super().__init__(message)
        self.trajectory = trajectory


# ---------------------------------------------------------------------------
# diagnostics


def _norm_of(norm, v):
    v = np.asarray(v, dtype=float)
    if norm is None:
        return float(np.linalg.norm(v))
    return float(norm.value(v))


def direction_distance(w, w_ref, norm=None):
    """``|| w/||w|| - w_ref/||w_ref|| ||`` in ``norm`` (Euclidean or Frobenius by default)."""
    a = _norm_of(norm, w)
    b = _norm_of(norm, w_ref)
    if a == 0 or b == 0:
        raise ValueError("direction_distance needs nonzero inputs")
    return _norm_of(norm, np.asarray(w, dtype=float) / a - np.asarray(w_ref, dtype=float) / b)


def margin_gap(dataset, w, certificate, norm=None):
    """``gamma - min_n y_n <w, x_n> / ||w||``."""
    nrm = _norm_of(norm, w)
    if nrm == 0:
        raise ValueError("margin_gap needs a nonzero iterate")
    return float(certificate.gamma - dataset.margins(np.asarray(w, dtype=float)).min() / nrm)


def cauchy_gap(snapshots, norm=None, window=CAUCHY_WINDOW):
    """Largest direction distance from the last snapshot over the final ``window`` snapshots."""
    tail = list(snapshots)[-window:]
    if len(tail) < 2:
        return math.inf
    last = tail[-1]
    return max(direction_distance(s, last, norm) for s in tail[:-1])


# ---------------------------------------------------------------------------
# checks and reports


@dataclass(frozen=True)
class Check:
    """One numeric assertion: ``value < tolerance`` or ``value > tolerance``.

    ``expect`` is ``"confirm"`` for checks of a claimed property and
    ``"refute"`` for checks that witness a counterexample.
    """

    name: str
    value: float
    tolerance: float
    relation: str = "<"
    expect: str = "confirm"
    skipped: bool = False
    note: str = ""

    def __post_init__(self):
        if self.relation not in ("<", ">"):
            raise ValueError(f"relation must be '<' or '>', got {self.relation!r}")
        if self.expect not in ("confirm", "refute"):
            raise ValueError(f"expect must be 'confirm' or 'refute', got {self.expect!r}")
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "tolerance", float(self.tolerance))

    @property
    def passed(self):
        if self.skipped:
            return None
        if not math.isfinite(self.value):
            return False
        return self.value < self.tolerance if self.relation == "<" else self.value > self.tolerance

    def to_dict(self):
        return {
            "name": self.name,
            "value": self.value,
            "tolerance": self.tolerance,
            "relation": self.relation,
            "expect": self.expect,
            "skipped": self.skipped,
            "passed": self.passed,
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, data):
        keys = ("name", "value", "tolerance", "relation", "expect", "skipped", "note")
        return cls(**{k: data[k] for k in keys if k in data})


def verdict_for(checks, counterexample):
    """``inconclusive`` if any active check fails, else by experiment kind."""
    active = [c for c in checks if not c.skipped]
    if not active or not all(c.passed for c in active):
        return "inconclusive"
    return "refuted-as-expected" if counterexample else "confirmed"


@dataclass
class VerificationReport:
    experiment: str
    verdict: str
    checks: list
    metrics: dict
    iterations: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")

    @property
    def failed(self):
        return [c for c in self.checks if c.passed is False]

    def to_dict(self):
        return {
            "experiment": self.experiment,
            "verdict": self.verdict,
            "iterations": int(self.iterations),
            "checks": [c.to_dict() for c in self.checks],
            "metrics": _plain(self.metrics),
            "metadata": _plain(self.metadata),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            experiment=data["experiment"],
            verdict=data["verdict"],
            checks=[Check.from_dict(c) for c in data["checks"]],
            metrics=data.get("metrics", {}),
            iterations=int(data.get("iterations", 0)),
            metadata=data.get("metadata", {}),
        )


def _plain(obj):
    """Convert numpy containers and scalars to JSON-serializable Python objects."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def dump_json(obj, path):
    """Write JSON; floats use the shortest repr that round-trips exactly."""
    with Path(path).open("w") as fh:
        json.dump(_plain(obj), fh, indent=2, sort_keys=False)
        fh.write("\n")


# ---------------------------------------------------------------------------
# trajectories


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


class Trajectory:
    """Rows of named values recorded during a run, written as CSV.

    ``every`` thins recording: a row is kept when its iteration counter is a
    multiple of ``every`` or when ``force`` is set.
    """

    def __init__(self, every=1):
        if every < 1:
            raise ValueError("emission cadence must be at least 1")
        self.every = int(every)
        self.rows = []
        self.columns = []

    def record(self, force=False, **values):
        t = values.get("t", 0)
        if not force and int(t) % self.every:
            return
        for key in values:
            if key not in self.columns:
                self.columns.append(key)
        self.rows.append(dict(values))

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path):
        write_rows(path, self.rows, self.columns)


def write_rows(path, rows, columns=None):
    """Write dict rows as CSV with 17-significant-digit floats; missing cells stay empty."""
    if columns is None:
        columns = []
        for row in rows:
            for key in row:
                if key not in columns:
                    columns.append(key)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(["" if row.get(k) is None else _fmt(row[k]) for k in columns])


def vector_columns(prefix, v):
    """``{"w0": v[0], "w1": v[1], ...}`` for flat CSV rows."""
    return {f"{prefix}{i}": float(x) for i, x in enumerate(np.asarray(v, dtype=float).ravel())}


# ---------------------------------------------------------------------------
# specs


@dataclass
class Outcome:
    """What a runner returns: checks, metrics, iteration count and figure rows."""

    checks: list
    metrics: dict = field(default_factory=dict)
    iterations: int = 0
    figures: dict = field(default_factory=dict)


def _coerce(name, kind, value):
    """Validate one parameter value against its schema kind."""
    def bad(msg):
        return ValueError(f"parameter {name!r}: {msg}, got {value!r}")

    if kind == "seed":
        if isinstance(value, bool) or not float(value).is_integer() or int(value) < 0:
            raise bad("must be a nonnegative integer")
        return int(value)
    if kind == "count":
        if isinstance(value, bool) or not float(value).is_integer() or int(value) < 1:
            raise bad("must be a positive integer")
        return int(value)
    if kind == "positive":
        if isinstance(value, bool):
            raise bad("must be a positive number")
        v = float(value)
        if not (math.isfinite(v) and v > 0):
            raise bad("must be a positive finite number")
        return v
    if kind == "nonnegative":
        if isinstance(value, bool):
            raise bad("must be a nonnegative number")
        v = float(value)
        if not (math.isfinite(v) and v >= 0):
            raise bad("must be a nonnegative finite number")
        return v
    if kind == "step-constant":
        if isinstance(value, bool):
            raise bad("must be a number in (0, sqrt(2)]")
        v = float(value)
        if not 0 < v <= math.sqrt(2):
            raise bad("must lie in (0, sqrt(2)]")
        return v
    if kind == "momentum":
        if isinstance(value, bool):
            raise bad("must be a number in [0, 1)")
        v = float(value)
        if not 0 <= v < 1:
            raise bad("must lie in [0, 1)")
        return v
    if kind.startswith("list:"):
        inner = kind[5:]
        if np.ndim(value) == 0:
            value = [value]
        out = [_coerce(name, inner, v) for v in value]
        if not out:
            raise bad("must be nonempty")
        return out
    if kind == "exponents":
        from .geometry import format_exponent, parse_exponent

        if isinstance(value, (str, int, float)):
            value = [value]
        return [format_exponent(parse_exponent(v)) for v in value]
    raise ValueError(f"unknown schema kind {kind!r}")


@dataclass(frozen=True)
class ExperimentSpec:
    """A registered experiment.

    ``params`` maps parameter names to ``(schema kind, default)``; ``flags``
    maps command-line flag names (``eta``, ``beta``, ...) to parameter names.
    ``metric`` must agree with the loss family: limit points for losses with
    a unique finite root, limit directions for strictly monotone losses.
    """

    id: str
    claim: str
    dataset: str
    loss: str
    algorithm: str
    geometry: str
    oracle: str
    metric: str
    runner: object
    params: dict
    flags: dict = field(default_factory=dict)
    counterexample: bool = False

    def __post_init__(self):
        family = problems.Loss(self.loss).family
        if PLAN_METRICS[family] != self.metric:
            raise ValueError(
                f"{self.id}: a {family} loss needs the {PLAN_METRICS[family]} metric, not {self.metric}"
            )
        for flag, name in self.flags.items():
            if name not in self.params:
                raise ValueError(f"{self.id}: flag {flag!r} maps to unknown parameter {name!r}")
        for name, (kind, default) in self.params.items():
            _coerce(name, kind, default)

    def defaults(self):
        return {name: _coerce(name, kind, default) for name, (kind, default) in self.params.items()}

    def resolve(self, overrides=None):
        """Defaults updated by ``overrides``; unknown names and bad values raise ``ValueError``."""
        out = self.defaults()
        for name, value in (overrides or {}).items():
            if name not in self.params:
                raise ValueError(f"{self.id} has no parameter {name!r}; known: {sorted(self.params)}")
            out[name] = _coerce(name, self.params[name][0], value)
        return out

    def flag_overrides(self, flags):
        """Translate ``{flag: value}`` into parameter overrides, rejecting flags the spec lacks."""
        out = {}
        for flag, value in flags.items():
            if value is None:
                continue
            if flag not in self.flags:
                raise ValueError(f"{self.id} does not accept --{flag}")
            out[self.flags[flag]] = value
        return out

    def describe(self):
        return {
            "id": self.id,
            "claim": self.claim,
            "dataset": self.dataset,
            "loss": self.loss,
            "algorithm": self.algorithm,
            "geometry": self.geometry,
            "oracle": self.oracle,
            "metric": self.metric,
            "counterexample": self.counterexample,
        }


def registry():
    """Built-in experiments keyed by id, in order."""
    from .experiments import EXPERIMENTS

    return EXPERIMENTS


def get_spec(experiment_id):
    specs = registry()
    key = str(experiment_id).upper()
    if key not in specs:
        raise KeyError(f"unknown experiment {experiment_id!r}; registered: {', '.join(specs)}")
    return specs[key]


def package_version():
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def run_experiment(spec, overrides=None, every=1):
    """Execute ``spec`` with parameter ``overrides``; returns ``(trajectory, report, figures)``.

    Runner exceptions are re-raised as ``ExperimentAborted`` carrying the
    partial trajectory.
    """
    if isinstance(spec, str):
        spec = get_spec(spec)
    params = spec.resolve(overrides)
    traj = Trajectory(every)
    start = time.perf_counter()
    try:
        outcome = spec.runner(params, traj)
    except Exception as err:
        raise ExperimentAborted(f"{spec.id} aborted: {type(err).__name__}: {err}", traj) from err
    elapsed = time.perf_counter() - start
    report = VerificationReport(
        experiment=spec.id,
        verdict=verdict_for(outcome.checks, spec.counterexample),
        checks=list(outcome.checks),
        metrics=outcome.metrics,
        iterations=outcome.iterations,
        metadata={
            "spec": spec.describe(),
            "params": params,
            "every": every,
            "elapsed_seconds": elapsed,
            "version": package_version(),
        },
    )
    return traj, report, outcome.figures


def write_run(out_dir, traj, report, figures=None):
    """Write ``report.json`` and ``trajectory.csv`` under ``out_dir`` plus any figure CSVs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_json(report.to_dict(), out_dir / "report.json")
    traj.to_csv(out_dir / "trajectory.csv")
    written = {}
    for name, rows in (figures or {}).items():
        path = out_dir / f"{name}.csv"
        write_rows(path, rows)
        written[name] = str(path)
    return written


def _run_one(args):
    experiment_id, overrides, every = args
    try:
        traj, report, figures = run_experiment(get_spec(experiment_id), overrides, every)
        return experiment_id, traj, report, figures, None
    except ExperimentAborted as err:
        return experiment_id, err.trajectory, None, {}, str(err)


def worker_count(requested=None):
    """Worker pool size: ``requested``, capped by ``IBLAB_THREADS`` and the CPU count."""
    cap = os.environ.get("IBLAB_THREADS")
    n = requested or os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def run_many(jobs, workers=None):
    """Run ``[(id, overrides, every), ...]`` concurrently; results come back in job order."""
    jobs = list(jobs)
    n = min(worker_count(workers), len(jobs)) if jobs else 1
    if n <= 1:
        return [_run_one(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_run_one, jobs))


def write_bundle(out_dir, results):
    """Write every run under ``out_dir/<id>/``, figure CSVs at the top level and ``index.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {"runs": [], "figures": {}}
    for key, traj, report, figures, error in results:
        run_dir = out_dir / key
        run_dir.mkdir(parents=True, exist_ok=True)
        traj.to_csv(run_dir / "trajectory.csv")
        entry = {"id": key, "trajectory": str(run_dir / "trajectory.csv")}
        if report is not None:
            dump_json(report.to_dict(), run_dir / "report.json")
            entry.update(verdict=report.verdict, report=str(run_dir / "report.json"))
        else:
            entry.update(verdict="error", error=error)
        for name, rows in figures.items():
            path = out_dir / f"{name}.csv"
            write_rows(path, rows)
            index["figures"][name] = str(path)
        index["runs"].append(entry)
    dump_json(index, out_dir / "index.json")
    return index
