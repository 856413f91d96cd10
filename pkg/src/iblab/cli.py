"""Command-line front end: ``list``, ``run``, ``sweep`` and ``verify-all``.

Exit codes: 0 when every verdict is confirmed or refuted-as-expected (or every
acceptance criterion passes), 2 when a verdict is inconclusive, 1 on an
execution error or a failed criterion, 64 on a bad command line or config.
"""

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path

from . import acceptance, harness

EXIT_OK, EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_USAGE = 0, 1, 2, 64
FLAGS = ("seed", "eta", "beta", "gamma", "budget", "tol")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


@dataclass
class RunConfig:
    """What to run and where: experiment id, output directory, parameter overrides and row cadence."""

    experiment: str
    out: str = "results"
    overrides: dict = field(default_factory=dict)
    every: int = 1

    def __post_init__(self):
        spec = harness.get_spec(self.experiment)
        self.experiment = spec.id
        self.overrides = dict(self.overrides)
        spec.resolve(self.overrides)
        if not isinstance(self.every, int) or isinstance(self.every, bool) or self.every < 1:
            raise ValueError(f"emission cadence must be a positive integer, got {self.every!r}")

    @property
    def spec(self):
        return harness.get_spec(self.experiment)

    def params(self):
        return self.spec.resolve(self.overrides)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {"experiment", "out", "overrides", "every"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "experiment" not in data:
            raise ValueError("config needs an 'experiment' entry")
        return cls(**data)


def _parse_value(text):
    """``"0.1"`` becomes ``0.1``; ``"0.1,0.2"`` becomes ``[0.1, 0.2]``."""
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    if not parts:
        raise ValueError(f"empty value {text!r}")
    values = []
    for p in parts:
        try:
            values.append(int(p) if p.lstrip("-").isdigit() else float(p))
        except ValueError:
            raise ValueError(f"not a number: {p!r}") from None
    return values if len(values) > 1 else values[0]


def _flag_values(args):
    return {f: getattr(args, f) for f in FLAGS if getattr(args, f, None) is not None}


def _config_from_args(args):
    base = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            base = json.load(fh)
        if not isinstance(base, dict):
            raise ValueError("config file must hold a JSON object")
    experiment = args.experiment or base.get("experiment")
    if experiment is None:
        raise ValueError("no experiment given")
    spec = harness.get_spec(experiment)
    overrides = dict(base.get("overrides", {}))
    flags = {k: _parse_value(v) for k, v in _flag_values(args).items()}
    overrides.update(spec.flag_overrides(flags))
    data = {**base, "experiment": spec.id, "overrides": overrides}
    if args.out is not None:
        data["out"] = args.out
    if args.every is not None:
        data["every"] = args.every
    return RunConfig.from_dict(data)


def _exit_for(verdicts):
    if any(v == "error" for v in verdicts):
        return EXIT_FAIL
    if any(v == "inconclusive" for v in verdicts):
        return EXIT_INCONCLUSIVE
    return EXIT_OK


def _summary(report):
    return f"{report.experiment}: {report.verdict} ({report.iterations} iterations, {len(report.failed)} failed checks)"


def cmd_list(args=None, out=None):
    out = out or sys.stdout
    for spec in harness.registry().values():
        tag = " [counterexample]" if spec.counterexample else ""
        print(f"{spec.id:<4} {spec.claim}{tag}", file=out)
    return EXIT_OK


def _execute(configs, workers=None):
    jobs = [(c.experiment, c.overrides, c.every) for c in configs]
    return harness.run_many(jobs, workers)


def cmd_run(config, workers=None, out=None):
    out = out or sys.stdout
    (key, traj, report, figures, error), = _execute([config], workers)
    run_dir = Path(config.out)
    if report is not None:
        report.metadata["config"] = config.to_dict()
    index = harness.write_bundle(run_dir, [(key, traj, report, figures, error)])
    if report is None:
        print(f"{key}: error: {error}", file=sys.stderr)
        return EXIT_FAIL
    print(_summary(report), file=out)
    for check in report.failed:
        print(f"  failed: {check.name} = {check.value:.6g} (needs {check.relation} {check.tolerance:g})", file=out)
    print(f"report: {index['runs'][0]['report']}", file=out)
    return _exit_for([report.verdict])


def cmd_sweep(config, grid, workers=None, out=None):
    """Run the Cartesian product of ``grid`` (parameter -> list of values) as separate runs."""
    out = out or sys.stdout
    names = list(grid)
    defaults = config.spec.defaults()
    configs = []
    for values in product(*(grid[n] for n in names)):
        point = {n: ([v] if isinstance(defaults[n], list) else v) for n, v in zip(names, values)}
        configs.append(RunConfig(config.experiment, config.out, {**config.overrides, **point}, config.every))
    results = _execute(configs, workers)
    renamed, verdicts = [], []
    for k, (cfg, (key, traj, report, figures, error)) in enumerate(zip(configs, results)):
        if report is not None:
            report.metadata["config"] = cfg.to_dict()
        figures = {f"{name}-{k:03d}": rows for name, rows in figures.items()}
        renamed.append((f"{key}-{k:03d}", traj, report, figures, error))
        verdicts.append("error" if report is None else report.verdict)
        label = ", ".join(f"{n}={cfg.overrides[n]}" for n in names)
        print(f"{key}-{k:03d} [{label}]: {verdicts[-1]}", file=out)
    harness.write_bundle(Path(config.out), renamed)
    return _exit_for(verdicts)


def cmd_verify_all(filter_text=None, out_dir=None, workers=None, out=None):
    out = out or sys.stdout
    criteria = acceptance.select_criteria(filter_text)
    results, reports = acceptance.evaluate(criteria, workers)
    for r in results:
        print(r.line(), file=out)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for rep in reports.values():
            harness.dump_json(rep.to_dict(), out_dir / f"{rep.experiment}.json")
        harness.dump_json({"criteria": [{"number": r.number, "title": r.title, "passed": r.passed,
                                         "checks": [c.to_dict() for c in r.checks]} for r in results]},
                          out_dir / "acceptance.json")
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} criteria passed", file=out)
    return EXIT_OK if passed == len(results) else EXIT_FAIL


def build_parser():
    parser = _Parser(prog="iblab", description="Implicit-bias experiments and acceptance checks.")
    parser.add_argument("--workers", type=int, default=None, help="worker processes (capped by IBLAB_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("list", help="list registered experiments")
    for name, text in (("run", "run one experiment"), ("sweep", "run a grid of comma-separated flag values")):
        p = sub.add_parser(name, help=text)
        p.add_argument("experiment", nargs="?", help="experiment id, e.g. E1")
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", default=None, help="output directory (default: results)")
        p.add_argument("--every", type=int, default=None, help="record every k-th trajectory row")
        p.add_argument("--seed", default=None)
        for flag in ("eta", "beta", "gamma", "budget", "tol"):
            p.add_argument(f"--{flag}", default=None)
    p = sub.add_parser("verify-all", help="run the acceptance suite")
    p.add_argument("--filter", default=None, help="comma-separated experiment ids or criterion numbers")
    p.add_argument("--out", default=None, help="directory for reports")
    return parser


def _sweep_setup(args):
    """Split sweep flags into a base config and a grid of parameter values."""
    grid_flags = {k: _parse_value(v) for k, v in _flag_values(args).items() if k != "seed"}
    if not grid_flags:
        raise ValueError("sweep needs at least one of --eta, --beta, --gamma, --budget, --tol")
    config = _config_from_args(argparse.Namespace(**{**vars(args), **{k: None for k in grid_flags}}))
    grid = {}
    for flag, values in grid_flags.items():
        (param,) = config.spec.flag_overrides({flag: values})
        grid[param] = values if isinstance(values, list) else [values]
        for v in grid[param]:
            config.spec.resolve({**config.overrides, param: v})
    return config, grid


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "verify-all":
            acceptance.select_criteria(args.filter)
        elif args.command == "run":
            config = _config_from_args(args)
        elif args.command == "sweep":
            config, grid = _sweep_setup(args)
    except SystemExit as err:
        # --help
        return int(err.code or 0)
    except (UsageError, ValueError, KeyError, OSError) as err:
        print(f"iblab: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "list":
            return cmd_list()
        if args.command == "verify-all":
            return cmd_verify_all(args.filter, args.out, args.workers)
        if args.command == "run":
            return cmd_run(config, args.workers)
        return cmd_sweep(config, grid, args.workers)
    except Exception as err:
        print(f"iblab: execution failed: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
