"""Acceptance criteria over experiment reports plus standalone reduction and oracle checks.

``CRITERIA`` lists each criterion with the experiments it reads. Criteria
13 and 14 need no experiment and compute their checks directly.
"""

from dataclasses import dataclass, field

import numpy as np

from . import optimizers, oracles, problems
from .geometry import Entropy, Norm, Quadratic, SquaredEuclidean, SquaredLp
from .harness import Check, run_many

REDUCTION_TOL = 1e-10
GRID_TOL = 1e-4


@dataclass
class CriterionResult:
    number: int
    title: str
    checks: list
    notes: list = field(default_factory=list)

    @property
    def passed(self):
        active = [c for c in self.checks if not c.skipped]
        return bool(active) and all(c.passed for c in active)

    def line(self):
        failed = [c for c in self.checks if c.passed is False]
        status = "PASS" if self.passed else "FAIL"
        extra = "" if not failed else f" (failed: {'; '.join(f'{c.name} = {c.value:.3g}' for c in failed[:3])})"
        return f"[{status}] criterion {self.number:2d}: {self.title}{extra}"


def _select(report, *prefixes, contains=None):
    out = [c for c in report.checks if c.name.startswith(prefixes)] if prefixes else list(report.checks)
    if contains is not None:
        out = [c for c in out if contains in c.name]
    return out


def _verdict_check(report, verdict):
    return Check(f"{report.experiment} verdict is {verdict}", float(report.verdict == verdict), 0.5, ">",
                 note=report.verdict)


def c1(reports):
    return _select(reports["E2"], "example1", "potentials")


def c2(reports):
    return list(reports["E3"].checks)


def c3(reports):
    return _select(reports["E2"], "dual momentum")


def c4(reports):
    return _select(reports["E2"], "primal") + [_verdict_check(reports["E2"], "refuted-as-expected")]


def c5(reports):
    return _select(reports["E4"], "min pairwise", "hybrid: off-manifold")


def c6(reports):
    return _select(reports["E5"], "min pairwise", "flow limit")


def c7(reports):
    keep = ("compiled run", "normalized margin gap", "log-loss increase", "squared gradient tail",
            "lower-bound violation")
    return [c for c in reports["E6"].checks if any(k in c.name for k in keep)]


def c8(reports):
    return _select(reports["E6"], contains="weak duality")


def c9(reports):
    return _select(reports["E7"], contains="normalized margin gap")


def c10(reports):
    return list(reports["E10"].checks) + [_verdict_check(reports["E10"], "refuted-as-expected")]


def c11(reports):
    return list(reports["E9"].checks)


def c12(reports):
    return list(reports["E8"].checks)


# ---------------------------------------------------------------------------
# reductions between update rules


def _trajectory(step, state, n_steps):
    points = []
    for _ in range(n_steps):
        state = step(state)
        points.append(state.w)
    return np.array(points)


def _max_gap(a, b):
    return float(np.max(np.abs(a - b)))


def reduction_checks(seed=0, n_steps=100):
    """Trajectory equalities between update rules on random problems."""
    rng = np.random.default_rng([seed, 13])
    sq = problems.Loss("squared")
    ex = problems.Loss("exponential")
    reg = problems.random_regression(seed, 3, 6)
    reg = problems.Dataset(reg.features / np.sqrt(6), reg.labels)
    sep = problems.random_separable(seed, 10, 3, 0.3)
    w0 = rng.standard_normal(6)
    cfg = optimizers.OptimizerConfig(eta=0.1)
    init = optimizers.init_state
    checks = []

    gd = _trajectory(lambda s: optimizers.gd_step(s, reg, sq, cfg), init(w0), n_steps)
    sd2 = _trajectory(lambda s: optimizers.sd_step(s, reg, sq, Norm("lp", 2), cfg), init(w0), n_steps)
    checks.append(Check("steepest descent in l2 equals gradient descent", _max_gap(gd, sd2), REDUCTION_TOL))

    md = _trajectory(lambda s: optimizers.md_step(s, reg, sq, SquaredEuclidean(), cfg),
                     init(w0, SquaredEuclidean()), n_steps)
    checks.append(Check("mirror descent with the squared-euclidean potential equals gradient descent",
                        _max_gap(gd, md), REDUCTION_TOL))

    A = rng.standard_normal((6, 6))
    quad = Quadratic(A @ A.T / 6 + np.eye(6))
    ngd = _trajectory(lambda s: optimizers.ngd_step(s, reg, sq, quad, cfg), init(w0, quad), n_steps)
    mdq = _trajectory(lambda s: optimizers.md_step(s, reg, sq, quad, cfg), init(w0, quad), n_steps)
    checks.append(Check("natural gradient equals mirror descent for a quadratic potential",
                        _max_gap(ngd, mdq), REDUCTION_TOL))

    G0 = 4.0
    frozen = optimizers.OptimizerConfig(eta=0.1, adapt=False)
    ada = _trajectory(lambda s: optimizers.adagrad_step(s, reg, sq, frozen), init(w0, G0=G0), n_steps)
    scaled = optimizers.OptimizerConfig(eta=0.1 / np.sqrt(G0))
    gd_scaled = _trajectory(lambda s: optimizers.gd_step(s, reg, sq, scaled), init(w0), n_steps)
    checks.append(Check("AdaGrad with a frozen accumulator equals scaled gradient descent",
                        _max_gap(ada, gd_scaled), REDUCTION_TOL))

    adaptive = optimizers.OptimizerConfig(policy="loss-adaptive", c=1.0)
    start = np.zeros(sep.dim)
    sd1 = _trajectory(lambda s: optimizers.sd_step(s, sep, ex, Norm("lp", 1), adaptive), init(start), n_steps)
    cd = _trajectory(lambda s: optimizers.coordinate_step(s, sep, ex, adaptive), init(start), n_steps)
    checks.append(Check("steepest descent in l1 equals coordinate descent", _max_gap(sd1, cd), REDUCTION_TOL))
    return checks


def c13(_reports=None):
    return reduction_checks()


# ---------------------------------------------------------------------------
# oracle soundness


def _two_point():
    return problems.Dataset([[1.0, 0.0], [0.0, 1.0]], [1.0, 1.0], "two-point")


def margin_grid_checks(n_2d=10, seeds_3d=(0, 1)):
    """``max_margin`` against brute-force grids, and the Euclidean case against the SVM dual."""
    worst, svm_worst, count = 0.0, 0.0, 0
    cases = [(_two_point(), p) for p in ("1", "2", "inf")]
    cases += [(problems.random_separable(s, 10, 2, 0.3), p) for s in range(n_2d)
              for p in ("1", "4/3", "3/2", "2", "3", "inf")]
    cases += [(problems.random_separable(s, 10, 3, 0.3), p) for s in seeds_3d for p in ("1", "4/3", "2", "inf")]
    for data, p in cases:
        norm = Norm("lp", p)
        cert = oracles.max_margin(norm, data, check_degenerate=False)
        grid_gamma, _ = oracles.grid_max_margin(norm, data)
        worst = max(worst, abs(cert.gamma - grid_gamma))
        count += 1
        if p == "2":
            svm_worst = max(svm_worst, abs(cert.gamma - oracles.svm_margin(data)[0]))
    return [
        Check(f"max margin versus grid search over {count} certificates", worst, GRID_TOL),
        Check("Euclidean max margin versus the SVM dual", svm_worst, GRID_TOL),
    ]


def nuclear_grid_checks(seeds=range(5)):
    worst = 0.0
    for s in seeds:
        data = problems.random_psd_separable(s, 5, 2, 3.0)
        cert = oracles.nuclear_margin(data, check_degenerate=False)
        worst = max(worst, abs(cert.gamma - oracles.grid_nuclear_margin(data)[0]))
    return [Check("nuclear margin versus 2x2 PSD grid", worst, GRID_TOL)]


def _null_space(X):
    _, s, Vt = np.linalg.svd(X)
    rank = int(np.sum(s > 1e-12 * s[0]))
    return Vt[rank:].T


def projection_checks(n_perturb=1000, seeds=range(3)):
    """Bregman projections against random feasible points in the null space around them."""
    worst = -np.inf
    for s in seeds:
        rng = np.random.default_rng([s, 14])
        data = problems.random_positive_regression(s, 3, 6)
        A = rng.standard_normal((6, 6))
        cases = [
            (Entropy(), np.ones(6)),
            (Quadratic(A @ A.T / 6 + np.eye(6)), rng.standard_normal(6)),
            (SquaredLp("3/2"), rng.standard_normal(6)),
            (SquaredEuclidean(), rng.standard_normal(6)),
        ]
        N = _null_space(data.features)
        for pot, w0 in cases:
            star = oracles.bregman_projection(pot, data, w0).w_star
            base = pot.bregman(star, w0)
            scales = 10.0 ** rng.uniform(-4, 0, n_perturb)
            dirs = rng.standard_normal((n_perturb, N.shape[1])) @ N.T
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            for scale, v in zip(scales, dirs):
                w = star + scale * v
                if not pot.in_domain(w):
                    # shrink until the point is back in the domain
                    while not pot.in_domain(w):
                        scale *= 0.5
                        w = star + scale * v
                worst = max(worst, base - pot.bregman(w, w0))
    return [Check("projection divergence minus best random feasible divergence", worst, 0.0)]


def c14(_reports=None):
    return margin_grid_checks() + nuclear_grid_checks() + projection_checks()


CRITERIA = [
    (1, "mirror descent limits equal Bregman projections", ("E2",), c1),
    (2, "exponentiated gradient reaches the maximum-entropy solution", ("E3",), c2),
    (3, "dual momentum and minibatch mirror descent stay on the dual manifold", ("E2",), c3),
    (4, "one-step primal momentum converges off the Bregman projection", ("E2",), c4),
    (5, "natural gradient limits depend on the step size", ("E4",), c5),
    (6, "l4/3 steepest descent limits depend on the step size", ("E5",), c6),
    (7, "loss-adaptive steepest descent reaches the max-margin value", ("E6",), c7),
    (8, "simplex weighted feature sums respect the margin", ("E6",), c8),
    (9, "coordinate descent reaches the l1 max margin", ("E7",), c9),
    (10, "AdaGrad accumulators settle and the direction depends on the step size", ("E10",), c10),
    (11, "normalized negative gradients approach the support-vector cone", ("E9",), c11),
    (12, "factorized descent reaches a stationary nuclear-norm margin point", ("E8",), c12),
    (13, "reductions between update rules hold step by step", (), c13),
    (14, "oracles agree with brute force and beat random feasible points", (), c14),
]


def select_criteria(filter_text=None):
    """Criteria matching ``filter_text``: experiment ids (``E2``) or numbers, comma separated."""
    if not filter_text:
        return list(CRITERIA)
    tokens = {t.strip().upper() for t in str(filter_text).split(",") if t.strip()}
    out = [c for c in CRITERIA if str(c[0]) in tokens or tokens & set(c[2])]
    if not out:
        raise ValueError(f"filter {filter_text!r} matches no criterion")
    return out


def evaluate(criteria=None, workers=None, reports=None):
    """Run the experiments the criteria need (unless given) and evaluate each criterion."""
    criteria = list(CRITERIA if criteria is None else criteria)
    needed = sorted({e for _, _, exps, _ in criteria for e in exps}, key=lambda e: int(e[1:]))
    reports = dict(reports or {})
    missing = [e for e in needed if e not in reports]
    errors = {}
    for key, _, report, _, error in run_many([(e, None, 1) for e in missing], workers):
        if report is None:
            errors[key] = error
        else:
            reports[key] = report
    results = []
    for number, title, exps, fn in criteria:
        failed = [e for e in exps if e in errors]
        if failed:
            checks = [Check(f"{e} ran", 0.0, 0.5, ">", note=errors[e]) for e in failed]
            results.append(CriterionResult(number, title, checks, [errors[e] for e in failed]))
            continue
        results.append(CriterionResult(number, title, fn(reports)))
    return results, reports
