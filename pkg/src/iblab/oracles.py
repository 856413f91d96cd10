"""Reference solutions and certificates that optimizer limits are checked against.

Regression oracles compute Bregman projections onto the interpolation set.
Classification oracles compute maximum-margin directions (any norm, or the
nuclear norm over PSD matrices) with support sets and nonnegative dual
weights. Brute-force grid searches serve as ground truth at ``d <= 3``.
"""

import math
import warnings
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
from scipy.optimize import minimize, minimize_scalar, nnls

from . import problems
from .geometry import Norm, ProjectionError, bregman_project

SUPPORT_RTOL = 1e-6
# direction spread (l2) of the near-optimal face above which a certificate is degenerate
DEGENERATE_WIDTH = 1e-2


class DegenerateCertificateError(ValueError):
    """A certificate cannot be formed (for example, a vanishing direction)."""


@dataclass
class BregmanProjectionResult:
    w_star: np.ndarray
    dual_coefficients: np.ndarray
    stationarity_residual: float
    feasibility_residual: float


@dataclass
class MarginCertificate:
    """Maximum-margin direction with its margin, support set and dual weights.

    ``direction`` is unit norm in the geometry (a vector, or a trace-one PSD
    matrix for nuclear-norm certificates); it is ``None`` when the data are
    not separable.
    """

    gamma: float
    direction: np.ndarray
    support: list
    alpha: np.ndarray
    degenerate: bool = False
    residuals: dict = field(default_factory=dict)

    @property
    def separable(self):
        return self.direction is not None and self.gamma > 0

    def to_dict(self):
        return {
            "gamma": float(self.gamma),
            "direction": None if self.direction is None else np.asarray(self.direction).tolist(),
            "support": [int(i) for i in self.support],
            "alpha": np.asarray(self.alpha, dtype=float).tolist(),
            "degenerate": bool(self.degenerate),
            "residuals": {k: float(v) for k, v in self.residuals.items()},
        }

    @classmethod
    def from_dict(cls, data):
        direction = data.get("direction")
        return cls(
            gamma=float(data["gamma"]),
            direction=None if direction is None else np.array(direction, dtype=float),
            support=list(data["support"]),
            alpha=np.array(data["alpha"], dtype=float),
            degenerate=bool(data["degenerate"]),
            residuals=dict(data.get("residuals", {})),
        )


# ---------------------------------------------------------------------------
# regression


def kkt_residual(potential, dataset, w0, w):
    """``(stationarity, feasibility)`` for the Bregman projection of ``w0``.

    Stationarity is the norm of ``grad psi(w) - grad psi(w0)`` off the span
    of the features; feasibility is the largest interpolation error.
    """
    w = potential.check(w)
    shift = potential.grad(w) - potential.grad(w0)
    stationarity = float(np.linalg.norm(dataset.off_span(shift)))
    if dataset.n_examples == 0:
        return stationarity, 0.0
    feasibility = float(np.max(np.abs(dataset.features @ w - dataset.labels)))
    return stationarity, feasibility


def bregman_projection(potential, dataset, w0):
    """``argmin D_psi(w, w0)`` over ``{w : <w, x_n> = y_n for all n}``."""
    w0 = potential.check(w0)
    X, y = dataset.features, dataset.labels
    try:
        w, nu, _ = bregman_project(potential, X, y, w0)
    except ProjectionError as err:
        raise ProjectionError(f"{err} (best point {err.w})", err.w, err.residual) from err
    stationarity = float(np.linalg.norm(potential.grad(w) - potential.grad(w0) - X.T @ nu))
    feasibility = float(np.max(np.abs(X @ w - y), initial=0.0))
    return BregmanProjectionResult(w, nu, stationarity, feasibility)


def min_norm_interpolant(norm, dataset):
    """``argmin ||w||`` subject to ``X w = y``, by conic programming."""
    w = cp.Variable(dataset.dim)
    prob = cp.Problem(cp.Minimize(_cvx_norm(norm, w)), [dataset.features @ w == dataset.labels])
    _solve(prob)
    return np.asarray(w.value, dtype=float)


# ---------------------------------------------------------------------------
# margins


def _cvx_norm(norm, w):
    if norm.kind == "quadratic":
        L = np.linalg.cholesky(norm.D)
        return cp.norm(L.T @ w, 2)
    if norm.p == math.inf:
        return cp.norm(w, "inf")
    if norm.p == 1:
        return cp.norm1(w)
    return cp.pnorm(w, p=norm.p)


def _solve(prob):
    for solver in ("CLARABEL", "SCS"):
        try:
            with warnings.catch_warnings():
                # inaccurate solutions are refined or cross-checked by callers
                warnings.simplefilter("ignore", UserWarning)
                prob.solve(solver=solver)
        except cp.error.SolverError:
            continue
        if prob.status in ("optimal", "optimal_inaccurate", "infeasible", "unbounded"):
            return prob.status
    raise RuntimeError(f"conic solver failed with status {prob.status}")


def support_vectors(dataset, direction, rtol=SUPPORT_RTOL):
    """Indices whose margin is within relative ``rtol`` of the smallest margin."""
    direction = np.asarray(direction, dtype=float)
    if not np.any(direction):
        raise ValueError("direction must be nonzero")
    m = dataset.margins(direction)
    low = m.min()
    return [int(i) for i in np.flatnonzero(m - low <= rtol * max(abs(low), 1e-300))]


def _face_width(norm, dataset, gamma, w_star):
    """Largest l2 distance from ``w_star`` along coordinates over the near-optimal face."""
    delta = 1e-7 * max(abs(gamma), 1e-3)
    w = cp.Variable(dataset.dim)
    cons = [_cvx_norm(norm, w) <= 1, dataset.signed_features @ w >= gamma - delta]
    width = 0.0
    for i in range(dataset.dim):
        for sense in (cp.Maximize, cp.Minimize):
            prob = cp.Problem(sense(w[i]), cons)
            _solve(prob)
            if w.value is not None:
                width = max(width, abs(float(w.value[i]) - w_star[i]))
    return width


def max_margin(norm, dataset, check_degenerate=True):
    """Maximum margin ``max_{||w|| <= 1} min_n y_n <w, x_n>`` with a certificate.

    Solved as the conic program ``max t`` subject to ``y_n <w, x_n> >= t`` and
    ``||w|| <= 1``. The solver direction is rescaled to unit norm and the
    margin recomputed from it. Dual weights of the margin constraints form a
    simplex vector supported on the support set.
    """
    if not dataset.is_classification:
        raise ValueError("max_margin needs labels in {-1, +1}")
    Z = dataset.signed_features
    w = cp.Variable(dataset.dim)
    t = cp.Variable()
    margin_cons = Z @ w >= t
    prob = cp.Problem(cp.Maximize(t), [margin_cons, _cvx_norm(norm, w) <= 1])
    _solve(prob)
    if w.value is None or t.value is None or t.value <= 1e-10:
        gamma = float(t.value) if t.value is not None else 0.0
        return MarginCertificate(min(gamma, 0.0), None, [], np.zeros(0), False, {"solver_margin": gamma})

    direction = np.asarray(w.value, dtype=float)
    direction /= norm.value(direction)
    margins = Z @ direction
    gamma = float(margins.min())
    support = support_vectors(dataset, direction)
    alpha = np.zeros(dataset.n_examples)
    raw = np.clip(np.asarray(margin_cons.dual_value, dtype=float), 0.0, None)
    alpha[support] = raw[support]
    if alpha.sum() <= 0:
        alpha[support] = 1.0
    alpha /= alpha.sum()
    dual_gap = abs(norm.dual_value(Z.T @ alpha) - gamma)
    residuals = {
        "norm_error": abs(norm.value(direction) - 1.0),
        "solver_gap": abs(float(t.value) - gamma),
        "dual_gap": dual_gap,
        "alignment_gap": abs(float(direction @ (Z.T @ alpha)) - gamma),
    }
    degenerate = False
    if check_degenerate:
        width = _face_width(norm, dataset, gamma, direction)
        residuals["face_width"] = width
        degenerate = width > DEGENERATE_WIDTH
    return MarginCertificate(gamma, direction, support, alpha, degenerate, residuals)


def svm_margin(dataset):
    """Euclidean margin from the hard-margin SVM dual, solved by bound-constrained L-BFGS.

    Maximizes ``sum(a) - 0.5 ||Z^T a||^2`` over ``a >= 0``; the primal
    solution is ``w = Z^T a`` and the margin ``1 / ||w||``. Independent of the
    conic solver used by ``max_margin``.
    """
    Z = dataset.signed_features
    K = Z @ Z.T

    def fun(a):
        Ka = K @ a
        return 0.5 * float(a @ Ka) - float(a.sum()), Ka - 1.0

    a0 = np.full(dataset.n_examples, 1.0 / max(np.trace(K), 1e-12))
    res = minimize(fun, a0, jac=True, method="L-BFGS-B", bounds=[(0, None)] * len(a0),
                   options={"ftol": 1e-16, "gtol": 1e-12, "maxiter": 10000})
    w = Z.T @ res.x
    nrm = float(np.linalg.norm(w))
    direction = w / nrm
    return float((Z @ direction).min()), direction


def _unit_directions_2d(norm, resolution):
    theta = np.arange(0.0, 2 * np.pi, resolution)
    V = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return theta, V


def _normalize_rows(norm, V):
    if norm.kind == "lp":
        scale = np.linalg.norm(V, ord=float(norm.p), axis=1)
    else:
        scale = np.sqrt(np.einsum("ij,jk,ik->i", V, norm.D, V))
    return V / scale[:, None]


def grid_max_margin(norm, dataset, resolution=1e-3, chunk=500_000):
    """Brute-force maximum margin over a dense unit-sphere grid, then local polish.

    Works for ``d`` in {1, 2, 3}. Returns ``(gamma, direction)``.
    """
    Z = dataset.signed_features
    d = dataset.dim

    def margin_of(v):
        v = np.asarray(v, dtype=float)
        return float((Z @ (v / norm.value(v))).min())

    if d == 1:
        best = max((np.array([1.0]), np.array([-1.0])), key=margin_of)
        return margin_of(best), best / norm.value(best)
    if d == 2:
        theta, V = _unit_directions_2d(norm, resolution)
        scores = (_normalize_rows(norm, V) @ Z.T).min(axis=1)
        k = int(np.argmax(scores))

        def neg(th):
            return -margin_of([math.cos(th), math.sin(th)])

        res = minimize_scalar(neg, bounds=(theta[k] - 2 * resolution, theta[k] + 2 * resolution),
                              method="bounded", options={"xatol": 1e-13})
        th = res.x if -res.fun >= scores[k] else theta[k]
        v = np.array([math.cos(th), math.sin(th)])
        return margin_of(v), v / norm.value(v)
    if d == 3:
        n = int(math.ceil(4 * math.pi / resolution ** 2))
        best_score, best_v = -np.inf, None
        for start in range(0, n, chunk):
            stop = min(n, start + chunk)
            i = np.arange(start, stop) + 0.5
            phi = np.arccos(1 - 2 * i / n)
            theta = np.pi * (1 + 5 ** 0.5) * i
            V = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
            scores = (_normalize_rows(norm, V) @ Z.T).min(axis=1)
            k = int(np.argmax(scores))
            if scores[k] > best_score:
                best_score, best_v = float(scores[k]), V[k]

        def neg(v):
            return -margin_of(v)

        res = minimize(neg, best_v, method="Nelder-Mead",
                       options={"xatol": 1e-13, "fatol": 1e-15, "maxiter": 20000})
        v = res.x if -res.fun >= best_score else best_v
        return margin_of(v), v / norm.value(v)
    raise ValueError("grid search is limited to d <= 3")


def nonneg_span_residual(dataset, support, z):
    """``min_{a >= 0} ||z - sum_{n in S} a_n y_n x_n||_2`` via nonnegative least squares."""
    z = np.asarray(z, dtype=float)
    support = list(support)
    if not support:
        return float(np.linalg.norm(z))
    A = dataset.signed_features[support].T
    _, residual = nnls(A, z)
    return float(residual)


# ---------------------------------------------------------------------------
# factorized models


def _softmax_weights(margins):
    w = np.exp(-(margins - margins.min()))
    return w / w.sum()


def _symmetric_negative_gradient(dataset, W):
    """Normalized ``-grad L(W)`` (softmax-weighted signed features), symmetrized."""
    weights = _softmax_weights(dataset.margins(W))
    Z = np.einsum("n,nij->ij", weights, dataset.signed_features)
    return (Z + Z.T) / 2, weights


def factored_stationarity_residual(U, dataset):
    """``||U_bar - Z U_bar / ||Z U_bar|| ||_F`` with ``U_bar = U / ||U||_F``.

    ``Z`` is the normalized negative loss gradient at ``W = U U^T``. A small
    value certifies that ``U`` is, up to scaling, a first-order stationary
    point of the minimum-nuclear-norm margin problem.
    """
    U = np.asarray(U, dtype=float)
    nrm = np.linalg.norm(U)
    if nrm == 0:
        raise DegenerateCertificateError("factor is zero")
    U_bar = U / nrm
    Z, _ = _symmetric_negative_gradient(dataset, U @ U.T)
    Z = Z / np.linalg.norm(Z)
    ZU = Z @ U_bar
    zu = np.linalg.norm(ZU)
    if zu < 1e-14:
        raise DegenerateCertificateError("gradient direction annihilates the factor")
    return float(np.linalg.norm(U_bar - ZU / zu))


def factored_kkt(U, dataset):
    """Stationarity residual plus dual weights and complementary slackness.

    ``U`` is rescaled so the smallest margin is one; the dual weights are the
    softmax loss weights divided by the Rayleigh quotient of the gradient
    direction on that factor, and the slackness violation is
    ``max_n alpha_n (margin_n - 1)``.
    """
    U = np.asarray(U, dtype=float)
    W = U @ U.T
    margins = dataset.margins(W)
    m_min = float(margins.min())
    if m_min <= 0:
        raise DegenerateCertificateError("factor does not separate the data")
    Z, weights = _symmetric_negative_gradient(dataset, W)
    U_unit = U / math.sqrt(m_min)
    rayleigh = float(np.sum(U_unit * (Z @ U_unit)) / np.sum(U_unit * U_unit))
    alpha = weights / rayleigh
    scaled = margins / m_min
    return {
        "stationarity": factored_stationarity_residual(U, dataset),
        "alpha": alpha,
        "complementary_slackness": float(np.max(alpha * (scaled - 1.0))),
        "normalized_margin": m_min / float(np.trace(W)),
    }


def _nuclear_face_width(dataset, gamma, W_star):
    delta = 1e-7 * max(abs(gamma), 1e-3)
    d = dataset.dim
    W = cp.Variable((d, d), PSD=True)
    cons = [cp.trace(W) <= 1]
    cons += [cp.sum(cp.multiply(Z, W)) >= gamma - delta for Z in dataset.signed_features]
    width = 0.0
    for i in range(d):
        for j in range(i, d):
            for sense in (cp.Maximize, cp.Minimize):
                prob = cp.Problem(sense(W[i, j]), cons)
                _solve(prob)
                if W.value is not None:
                    width = max(width, abs(float(W.value[i, j]) - W_star[i, j]))
    return width


def nuclear_margin(dataset, check_degenerate=True):
    """Maximum margin over PSD matrices of unit trace (the nuclear norm on the PSD cone).

    Equivalent to ``min ||W||_*`` over ``W >= 0`` with ``y_n <W, X_n> >= 1``:
    the minimizer is ``direction / gamma``. Solved as a semidefinite program.
    """
    d = dataset.dim
    W = cp.Variable((d, d), PSD=True)
    t = cp.Variable()
    margin_cons = [cp.sum(cp.multiply(Z, W)) >= t for Z in dataset.signed_features]
    prob = cp.Problem(cp.Maximize(t), margin_cons + [cp.trace(W) <= 1])
    _solve(prob)
    if W.value is None or t.value is None or t.value <= 1e-10:
        gamma = float(t.value) if t.value is not None else 0.0
        return MarginCertificate(min(gamma, 0.0), None, [], np.zeros(0), False, {"solver_margin": gamma})

    vals, vecs = np.linalg.eigh((W.value + W.value.T) / 2)
    vals = np.clip(vals, 0.0, None)
    direction = (vecs * vals) @ vecs.T
    direction /= np.trace(direction)
    margins = dataset.margins(direction)
    gamma = float(margins.min())
    support = [int(i) for i in np.flatnonzero(margins - gamma <= SUPPORT_RTOL * gamma)]
    raw = np.clip(np.array([c.dual_value for c in margin_cons], dtype=float).reshape(-1), 0.0, None)
    alpha = np.zeros(dataset.n_examples)
    alpha[support] = raw[support]
    if alpha.sum() <= 0:
        alpha[support] = 1.0
    alpha /= alpha.sum()
    # weights in the unit-margin scaling, where the minimizer is direction / gamma
    alpha_unit = alpha / gamma
    slack = float(np.max(alpha_unit * (margins / gamma - 1.0)))
    dual_matrix = np.einsum("n,nij->ij", alpha, dataset.signed_features)
    residuals = {
        "solver_gap": abs(float(t.value) - gamma),
        "complementary_slackness": slack,
        "dual_feasibility": max(0.0, float(np.linalg.eigvalsh((dual_matrix + dual_matrix.T) / 2)[-1] - gamma)),
    }
    degenerate = False
    if check_degenerate:
        width = _nuclear_face_width(dataset, gamma, direction)
        residuals["face_width"] = width
        degenerate = width > DEGENERATE_WIDTH
    return MarginCertificate(gamma, direction, support, alpha, degenerate, residuals)


def grid_nuclear_margin(dataset, resolution=1e-3):
    """Brute-force PSD margin at ``d = 2`` over ``[[a, b], [b, 1 - a]]`` with ``b^2 <= a(1 - a)``.

    The best grid point is polished by a local simplex search.
    """
    if dataset.dim != 2:
        raise ValueError("grid_nuclear_margin is limited to d = 2")
    a = np.linspace(0.0, 1.0, int(round(1 / resolution)) + 1)
    s = np.linspace(-1.0, 1.0, int(round(2 / resolution)) + 1)
    A, S = np.meshgrid(a, s, indexing="ij")
    B = S * np.sqrt(A * (1 - A))
    Z = dataset.signed_features
    margins = (A[..., None] * Z[:, 0, 0] + B[..., None] * (Z[:, 0, 1] + Z[:, 1, 0])
               + (1 - A[..., None]) * Z[:, 1, 1])
    scores = margins.min(axis=-1)
    i, j = np.unravel_index(int(np.argmax(scores)), scores.shape)

    def matrix(x):
        a, t = np.clip(x[0], 0.0, 1.0), np.clip(x[1], -1.0, 1.0)
        b = t * math.sqrt(a * (1 - a))
        return np.array([[a, b], [b, 1 - a]])

    def neg_score(x):
        return -float(dataset.margins(matrix(x)).min())

    # polish the best grid point
    res = minimize(neg_score, [A[i, j], S[i, j]], method="Nelder-Mead",
                   options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 4000})
    if -res.fun >= scores[i, j]:
        return float(-res.fun), matrix(res.x)
    return float(scores[i, j]), matrix([A[i, j], S[i, j]])
