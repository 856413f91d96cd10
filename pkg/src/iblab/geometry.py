"""Potentials (mirror maps) and norms (steepest-descent geometries).

A potential exposes its value, link map ``grad``, the inverse link, the
inverse-Hessian action and the convex conjugate. A norm exposes its value,
its dual norm and the duality map used by steepest descent.
"""

import math
from fractions import Fraction

import numpy as np

TIE_TOL = 1e-12


class DomainError(ValueError):
    """An iterate left the domain of a potential."""


class ProjectionError(RuntimeError):
    """The Bregman projection solver did not reach its tolerance."""

    def __init__(self, message, w=None, residual=None):
        super().__init__(message)
        self.w = w
        self.residual = residual


def parse_exponent(p):
    """Parse a norm exponent; ``"4/3"`` becomes ``Fraction(4, 3)``, ``"inf"`` becomes ``math.inf``."""
    if isinstance(p, Fraction):
        return p
    if isinstance(p, str):
        s = p.strip().lower()
        if s in ("inf", "infinity", "linf"):
            return math.inf
        if "/" in s:
            return Fraction(s)
        p = float(s)
    if isinstance(p, int) or (isinstance(p, float) and math.isfinite(p) and p == int(p)):
        return Fraction(int(p))
    return float(p)


def conjugate_exponent(p):
    """Hölder conjugate ``q`` with ``1/p + 1/q = 1``."""
    if p == 1:
        return math.inf
    if p == math.inf:
        return Fraction(1)
    return p / (p - 1)


def format_exponent(p):
    if p == math.inf:
        return "inf"
    if isinstance(p, Fraction):
        return str(p.numerator) if p.denominator == 1 else f"{p.numerator}/{p.denominator}"
    return repr(float(p))


def _lp(v, p):
    return float(np.linalg.norm(v, ord=float(p)))


def _lp_link(v, p):
    """Gradient of ``0.5 ||v||_p^2``: ``sign(v)|v|^(p-1) ||v||_p^(2-p)``."""
    p = float(p)
    nrm = _lp(v, p)
    if nrm == 0.0:
        return np.zeros_like(v)
    return np.sign(v) * np.abs(v / nrm) ** (p - 1) * nrm


# ---------------------------------------------------------------------------
# potentials


class Potential:
    kind = "potential"

    def in_domain(self, w):
        return bool(np.all(np.isfinite(w)))

    def check(self, w):
        w = np.asarray(w, dtype=float)
        if not self.in_domain(w):
            raise DomainError(f"{self.kind} potential: point {w} is outside the domain")
        return w

    def value(self, w):
        raise NotImplementedError

    def grad(self, w):
        raise NotImplementedError

    def grad_inverse(self, z):
        raise NotImplementedError

    def conjugate(self, z):
        """Convex conjugate value at ``z``."""
        raise NotImplementedError

    def inverse_link_jacobian(self, z):
        """Jacobian of ``grad_inverse`` at ``z`` (equals the inverse Hessian at ``grad_inverse(z)``)."""
        raise NotImplementedError

    def hessian_inverse_apply(self, w, g):
        w = self.check(w)
        return self.inverse_link_jacobian(self.grad(w)) @ np.asarray(g, dtype=float)

    def bregman(self, w, w_ref):
        w = self.check(w)
        w_ref = self.check(w_ref)
        return self.value(w) - self.value(w_ref) - float(self.grad(w_ref) @ (w - w_ref))

    def minimizer(self, dim):
        """The unconstrained minimizer of the potential."""
        return np.zeros(dim)

    def to_dict(self):
        return {"kind": self.kind}


class SquaredEuclidean(Potential):
    """``0.5 ||w||_2^2``; mirror descent reduces to gradient descent."""

    kind = "squared-euclidean"

    def value(self, w):
        w = np.asarray(w, dtype=float)
        return 0.5 * float(w @ w)

    def grad(self, w):
        return np.array(w, dtype=float)

    def grad_inverse(self, z):
        return np.array(z, dtype=float)

    def conjugate(self, z):
        return self.value(z)

    def inverse_link_jacobian(self, z):
        return np.eye(len(z))

    def hessian_inverse_apply(self, w, g):
        return np.array(g, dtype=float)


class Entropy(Potential):
    """Unnormalized negative entropy ``sum w log w - w`` on the positive orthant."""

    kind = "entropy"

    def in_domain(self, w):
        w = np.asarray(w)
        return bool(np.all(np.isfinite(w)) and np.all(w > 0))

    def value(self, w):
        w = self.check(w)
        return float(np.sum(w * np.log(w) - w))

    def grad(self, w):
        return np.log(self.check(w))

    def grad_inverse(self, z):
        return np.exp(np.asarray(z, dtype=float))

    def conjugate(self, z):
        return float(np.sum(np.exp(z)))

    def inverse_link_jacobian(self, z):
        return np.diag(np.exp(z))

    def hessian_inverse_apply(self, w, g):
        return self.check(w) * np.asarray(g, dtype=float)

    def minimizer(self, dim):
        return np.ones(dim)


class Quadratic(Potential):
    """``0.5 w^T D w`` for a symmetric positive-definite ``D``."""

    kind = "quadratic"

    def __init__(self, D):
        D = np.array(D, dtype=float)
        if D.ndim != 2 or D.shape[0] != D.shape[1]:
            raise ValueError("D must be a square matrix")
        if not np.allclose(D, D.T, rtol=0, atol=1e-12 * max(1.0, np.abs(D).max())):
            raise ValueError("D must be symmetric")
        D = (D + D.T) / 2
        if np.linalg.eigvalsh(D)[0] <= 0:
            raise ValueError("D must be positive definite")
        self.D = D
        self._chol = np.linalg.cholesky(D)
        self.D_inv = np.linalg.inv(D)

    def _solve(self, g):
        y = np.linalg.solve(self._chol, g)
        return np.linalg.solve(self._chol.T, y)

    def value(self, w):
        w = np.asarray(w, dtype=float)
        return 0.5 * float(w @ self.D @ w)

    def grad(self, w):
        return self.D @ np.asarray(w, dtype=float)

    def grad_inverse(self, z):
        return self._solve(np.asarray(z, dtype=float))

    def conjugate(self, z):
        z = np.asarray(z, dtype=float)
        return 0.5 * float(z @ self._solve(z))

    def inverse_link_jacobian(self, z):
        return self.D_inv.copy()

    def hessian_inverse_apply(self, w, g):
        return self._solve(np.asarray(g, dtype=float))

    def to_dict(self):
        return {"kind": self.kind, "D": self.D.tolist()}


class SquaredLp(Potential):
    """``0.5 ||w||_p^2`` for ``p`` in (1, 2]."""

    kind = "squared-lp"

    def __init__(self, p):
        p = parse_exponent(p)
        if not 1 < p <= 2:
            raise ValueError(f"squared-lp potential requires p in (1, 2], got {p}")
        self.p = p
        self.q = conjugate_exponent(p)

    def value(self, w):
        return 0.5 * _lp(np.asarray(w, dtype=float), self.p) ** 2

    def grad(self, w):
        return _lp_link(np.asarray(w, dtype=float), self.p)

    def grad_inverse(self, z):
        return _lp_link(np.asarray(z, dtype=float), self.q)

    def conjugate(self, z):
        return 0.5 * _lp(np.asarray(z, dtype=float), self.q) ** 2

    def inverse_link_jacobian(self, z):
        z = np.asarray(z, dtype=float)
        q = float(self.q)
        nrm = _lp(z, q)
        if nrm == 0.0:
            return np.eye(len(z)) if q == 2 else np.zeros((len(z), len(z)))
        r = np.abs(z) / nrm
        a = np.sign(z) * r ** (q - 1)
        return (q - 1) * np.diag(r ** (q - 2)) + (2 - q) * np.outer(a, a)

    def to_dict(self):
        return {"kind": self.kind, "p": format_exponent(self.p)}


def potential_value(potential, w):
    return potential.value(w)


def potential_grad(potential, w):
    return potential.grad(w)


def potential_grad_inverse(potential, z):
    return potential.grad_inverse(z)


def bregman_divergence(potential, w, w_ref):
    return potential.bregman(w, w_ref)


def hessian_inverse_apply(potential, w, g):
    return potential.hessian_inverse_apply(w, g)


def bregman_project(potential, A, b, w_ref, tol=1e-13, max_iter=500):
    """Bregman projection of ``w_ref`` onto ``{w : A w = b}``.

    Maximizes the concave dual ``<nu, b> - psi*(grad psi(w_ref) + A^T nu)`` by
    damped Newton with Armijo backtracking; a plain gradient step is used when
    the Newton system is singular. Returns ``(w, nu, residual)``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float)
    z0 = potential.grad(w_ref)
    m = A.shape[0]
    if m == 0:
        return potential.grad_inverse(z0), np.zeros(0), 0.0

    def dual(nu):
        return float(nu @ b) - potential.conjugate(z0 + A.T @ nu)

    scale = 1.0 + np.max(np.abs(b))
    nu = np.zeros(m)
    w = potential.grad_inverse(z0)
    value = dual(nu)
    for _ in range(max_iter):
        resid = b - A @ w
        res_norm = float(np.max(np.abs(resid)))
        if res_norm <= tol * scale:
            return w, nu, res_norm
        H = A @ potential.inverse_link_jacobian(z0 + A.T @ nu) @ A.T
        try:
            step = np.linalg.solve(H, resid)
            if not np.all(np.isfinite(step)) or step @ resid <= 0:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = resid
        t = 1.0
        for _ in range(60):
            nu_new = nu + t * step
            with np.errstate(over="ignore", invalid="ignore"):
                value_new = dual(nu_new)
            if np.isfinite(value_new):
                w_new = potential.grad_inverse(z0 + A.T @ nu_new)
                res_new = float(np.max(np.abs(b - A @ w_new)))
                if value_new >= value + 1e-4 * t * float(step @ resid) or (
                    # near the solution dual increments fall below rounding; accept residual decrease
                    value_new >= value - 1e-12 * (1.0 + abs(value)) and res_new < res_norm
                ):
                    break
            t *= 0.5
        else:
            raise ProjectionError("Bregman projection line search failed", w, res_norm)
        nu, w, value = nu_new, w_new, value_new
    res_norm = float(np.max(np.abs(b - A @ w)))
    if res_norm <= 1e-9 * scale:
        return w, nu, res_norm
    raise ProjectionError(f"Bregman projection did not converge (residual {res_norm:.3g})", w, res_norm)


def potential_from_config(cfg):
    kind = cfg["kind"]
    if kind == "squared-euclidean":
        return SquaredEuclidean()
    if kind == "entropy":
        return Entropy()
    if kind == "quadratic":
        return Quadratic(cfg["D"])
    if kind == "squared-lp":
        return SquaredLp(cfg["p"])
    raise ValueError(f"unknown potential kind {kind!r}")


# ---------------------------------------------------------------------------
# norms


def coordinate_direction(g, tie_rule="average"):
    """Coordinate-descent direction: ``-g[j] e_j`` over the largest ``|g[j]|``.

    Coordinates whose magnitude is within a relative ``1e-12`` of the maximum
    count as tied; ``"average"`` averages the tied updates, ``"first-index"``
    keeps the lowest index.
    """
    g = np.asarray(g, dtype=float)
    out = np.zeros_like(g)
    mags = np.abs(g)
    top = mags.max(initial=0.0)
    if top == 0.0:
        return out
    tied = np.flatnonzero(mags >= top * (1 - TIE_TOL))
    if tie_rule == "first-index":
        tied = tied[:1]
    elif tie_rule != "average":
        raise ValueError(f"unknown tie rule {tie_rule!r}")
    out[tied] = -g[tied] / len(tied)
    return out


class Norm:
    """A norm on R^d with its dual norm and steepest-descent duality map."""

    def __init__(self, kind="lp", p=2, D=None, tie_rule="average"):
        self.kind = kind
        self.tie_rule = tie_rule
        if kind == "lp":
            self.p = parse_exponent(p)
            if not self.p >= 1:
                raise ValueError(f"lp norm requires p >= 1, got {p}")
            self.q = conjugate_exponent(self.p)
            self.D = None
        elif kind == "quadratic":
            self._quad = Quadratic(D)
            self.D = self._quad.D
            self.p = self.q = None
        else:
            raise ValueError(f"unknown norm kind {kind!r}")

    def __repr__(self):
        if self.kind == "lp":
            return f"Norm(lp, p={format_exponent(self.p)})"
        return f"Norm(quadratic, D={self.D.tolist()})"

    @property
    def label(self):
        return f"l{format_exponent(self.p)}" if self.kind == "lp" else "quadratic"

    def value(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "lp":
            return _lp(v, self.p)
        return math.sqrt(max(float(v @ self.D @ v), 0.0))

    def dual_value(self, g):
        g = np.asarray(g, dtype=float)
        if self.kind == "lp":
            return _lp(g, self.q)
        return math.sqrt(max(2.0 * self._quad.conjugate(g), 0.0))

    def dual(self):
        if self.kind == "lp":
            return Norm("lp", self.q, tie_rule=self.tie_rule)
        return Norm("quadratic", D=self._quad.D_inv)

    def duality_map(self, g):
        """Steepest-descent step ``dw`` with ``<dw, -g> = ||dw||^2 = ||g||_*^2``."""
        g = np.asarray(g, dtype=float)
        if self.kind == "quadratic":
            return -self._quad.grad_inverse(g)
        if self.p == 1:
            direction = coordinate_direction(g, self.tie_rule)
            return direction * (np.abs(g).max(initial=0.0) / max(np.abs(direction).sum(), 1e-300))
        if self.p == math.inf:
            return -np.abs(g).sum() * np.sign(g)
        return -_lp_link(g, self.q)

    def to_dict(self):
        if self.kind == "lp":
            return {"kind": "lp", "p": format_exponent(self.p)}
        return {"kind": "quadratic", "D": self.D.tolist()}


def norm_value(norm, v):
    return norm.value(v)


def dual_norm_value(norm, g):
    return norm.dual_value(g)


def duality_map(norm, g):
    return norm.duality_map(g)


def norm_from_config(cfg):
    kind = cfg.get("kind", "lp")
    if kind == "lp":
        return Norm("lp", cfg.get("p", 2), tie_rule=cfg.get("tie_rule", "average"))
    if kind == "quadratic":
        return Norm("quadratic", D=cfg["D"])
    raise ValueError(f"unknown norm kind {kind!r}")


def geometry_from_config(cfg):
    """Build a potential or norm from ``{"potential": {...}}`` or ``{"norm": {...}}``."""
    if "potential" in cfg:
        return potential_from_config(cfg["potential"])
    if "norm" in cfg:
        return norm_from_config(cfg["norm"])
    raise ValueError("geometry config needs a 'potential' or 'norm' entry")
