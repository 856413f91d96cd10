"""First-order update rules, step-size policies and continuous-time flows.

Every step function maps an ``OptimizerState`` to a new state and never
mutates its input. Steps evaluate the gradient on the batch selected by the
config for the current iteration, so seeded minibatch runs replay exactly.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import solve_ivp

from . import problems
from .geometry import DomainError, Norm, bregman_project, coordinate_direction

POLICIES = ("constant", "loss-adaptive", "loss-adaptive-damped")
BATCH_MODES = ("full", "subsets", "minibatch")
MAX_HALVINGS = 60


class OptimizationError(RuntimeError):
    """A step produced non-finite values or an undefined update."""


def _schedule_at(value, t):
    if np.ndim(value) == 0:
        return float(value)
    return float(value[t]) if t < len(value) else 0.0


@dataclass(frozen=True)
class OptimizerConfig:
    """Step sizes, momentum schedules, batching and stopping rules.

    ``beta`` and ``gamma`` are constants or per-iteration lists (zero past the
    end of the list). ``policy`` is ``"constant"`` (step ``eta``),
    ``"loss-adaptive"`` (step ``c / (B^2 L)``, optionally capped by
    ``eta_max``) or ``"loss-adaptive-damped"`` (the loss-adaptive step further
    divided by ``max(1, ||W||_F)``, used for factorized runs).
    """

    eta: float = 0.1
    policy: str = "constant"
    c: float = 1.0
    eta_max: float = None
    bound: float = None
    beta: object = 0.0
    gamma: object = 0.0
    batch: str = "full"
    subsets: tuple = ()
    batch_size: int = 1
    seed: int = 0
    max_iterations: int = 100_000
    loss_tol: float = 1e-12
    margin_tol: float = 1e-4
    backtrack: bool = False
    adapt: bool = True
    epsilon: float = None

    def __post_init__(self):
        if not (math.isfinite(self.eta) and self.eta >= 0):
            raise ValueError(f"step size must be finite and nonnegative, got {self.eta}")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown step-size policy {self.policy!r}")
        if self.policy != "constant" and not 0 < self.c <= math.sqrt(2) + 1e-15:
            raise ValueError(f"loss-adaptive constant c must lie in (0, sqrt(2)], got {self.c}")
        if self.eta_max is not None and not self.eta_max > 0:
            raise ValueError("eta_max must be positive")
        if self.batch not in BATCH_MODES:
            raise ValueError(f"unknown batch mode {self.batch!r}")
        if self.batch == "subsets" and not self.subsets:
            raise ValueError("batch mode 'subsets' needs a nonempty list of subsets")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        for name in ("beta", "gamma"):
            value = getattr(self, name)
            if np.ndim(value):
                object.__setattr__(self, name, tuple(float(v) for v in value))
        object.__setattr__(self, "subsets", tuple(tuple(int(i) for i in s) for s in self.subsets))

    def beta_at(self, t):
        return _schedule_at(self.beta, t)

    def gamma_at(self, t):
        return _schedule_at(self.gamma, t)

    def batch_at(self, t, n_examples):
        """Indices used at iteration ``t`` (``None`` means all examples)."""
        if self.batch == "full":
            return None
        if self.batch == "subsets":
            return np.array(self.subsets[t % len(self.subsets)], dtype=int)
        rng = np.random.default_rng([self.seed, t])
        size = min(self.batch_size, n_examples)
        return np.sort(rng.choice(n_examples, size=size, replace=False))

    def to_dict(self):
        out = {}
        for key in self.__dataclass_fields__:
            value = getattr(self, key)
            if isinstance(value, tuple):
                value = [list(v) if isinstance(v, tuple) else v for v in value]
            out[key] = value
        return out


@dataclass(frozen=True)
class OptimizerState:
    """Iterate plus whatever buffers the algorithm needs.

    ``w`` is the primal iterate (``U`` for factorized runs), ``z`` the dual
    iterate of mirror-type methods, ``dw``/``dz`` the previous primal and dual
    displacements and ``G``/``G_lo`` the AdaGrad accumulator with its
    compensation term.
    """

    w: np.ndarray = None
    z: np.ndarray = None
    dw: np.ndarray = None
    dz: np.ndarray = None
    G: np.ndarray = None
    G_lo: np.ndarray = None
    U: np.ndarray = None
    t: int = 0
    eta: float = 0.0

    @property
    def accumulator(self):
        return None if self.G is None else self.G + self.G_lo

    @property
    def W(self):
        return None if self.U is None else self.U @ self.U.T


def init_state(w0=None, potential=None, G0=None, U0=None):
    """Initial state; the dual iterate is set when a potential is given."""
    if U0 is not None:
        U0 = np.array(U0, dtype=float)
        return OptimizerState(U=U0, dw=np.zeros_like(U0))
    w0 = np.array(w0, dtype=float)
    z0 = None
    if potential is not None:
        z0 = potential.grad(w0)
    G = G_lo = None
    if G0 is not None:
        G = np.array(np.diag(G0) if np.ndim(G0) == 2 else np.broadcast_to(G0, w0.shape), dtype=float)
        if np.any(G < 0):
            raise ValueError("AdaGrad accumulator must be nonnegative")
        G_lo = np.zeros_like(G)
    return OptimizerState(
        w=w0,
        z=z0,
        dw=np.zeros_like(w0),
        dz=None if z0 is None else np.zeros_like(z0),
        G=G,
        G_lo=G_lo,
    )


def step_size_loss_adaptive(c, B, current_loss, eta_max=None):
    """``c / (B^2 L)``, optionally capped at ``eta_max``."""
    if not current_loss > 0:
        raise ValueError(f"loss-adaptive step needs a positive loss, got {current_loss}")
    if not B > 0:
        raise ValueError("feature bound B must be positive")
    eta = c / (B * B * current_loss)
    return eta if eta_max is None else min(eta, eta_max)


def feature_bound(dataset, norm=None):
    """``max_n ||x_n||_*`` for ``norm`` (Euclidean when ``None``)."""
    if norm is None:
        return dataset.feature_bound(lambda x: float(np.linalg.norm(x)), key="l2")
    return dataset.feature_bound(norm.dual_value, key=repr(norm))


def _loss(loss):
    return loss if isinstance(loss, problems.Loss) else problems.Loss(loss)


def _check_finite(arr, what, t):
    if not np.all(np.isfinite(arr)):
        raise OptimizationError(f"non-finite {what} at iteration {t}")
    return arr


def _scaled_gradient(dataset, loss, point, subset, config, bound, t):
    """Return ``(eta, g)`` so that the step is ``eta * map(g)`` for a 1-homogeneous map.

    For the exponential loss under a loss-adaptive policy the gradient is
    normalized by the loss, which keeps the step finite when ``L`` underflows.
    """
    if config.policy == "constant":
        g = problems.gradient(dataset, loss, point, subset)
        return config.eta, _check_finite(g, "gradient", t)
    B = config.bound if config.bound is not None else bound
    if loss.kind == "exponential":
        log_L = problems.log_objective(dataset, point)
        g_norm = problems.normalized_gradient(dataset, point, subset)
        eta_n = config.c / (B * B)
        if config.eta_max is not None and log_L < math.log(eta_n / config.eta_max):
            return config.eta_max, math.exp(log_L) * g_norm
        return eta_n, _check_finite(g_norm, "gradient", t)
    L = problems.objective(dataset, loss, point)
    g = problems.gradient(dataset, loss, point, subset)
    return step_size_loss_adaptive(config.c, B, L, config.eta_max), _check_finite(g, "gradient", t)


def _accept(make, eta, state, dataset, loss, config, potential=None):
    """Build the next state; with backtracking, halve ``eta`` until the loss does not increase."""
    if not config.backtrack:
        new = make(eta)
        if potential is not None and new.w is not None and not potential.in_domain(new.w):
            raise DomainError(
                f"iterate left the {potential.kind} domain at iteration {state.t + 1}; reduce the step size"
            )
        return new
    current = problems.objective(dataset, loss, state.w)
    for _ in range(MAX_HALVINGS):
        new = make(eta)
        if (potential is None or potential.in_domain(new.w)) and np.all(np.isfinite(new.w)):
            if problems.objective(dataset, loss, new.w) <= current * (1 + 1e-14):
                return new
        eta *= 0.5
    raise OptimizationError(f"backtracking failed to find a descent step at iteration {state.t}")


def _bound_for(dataset, config, norm=None):
    if config.policy == "constant" or config.bound is not None:
        return config.bound
    return feature_bound(dataset, norm)


def momentum_step(state, dataset, loss, config):
    """``w + beta dw_prev - eta grad L(w + gamma dw_prev)``; plain GD when both are zero."""
    loss = _loss(loss)
    t = state.t
    beta, gamma = config.beta_at(t), config.gamma_at(t)
    subset = config.batch_at(t, dataset.n_examples)
    point = state.w + gamma * state.dw
    eta, g = _scaled_gradient(dataset, loss, point, subset, config, _bound_for(dataset, config), t)

    def make(eta):
        w = state.w + beta * state.dw - eta * g
        return replace(state, w=w, dw=w - state.w, t=t + 1, eta=eta)

    return _accept(make, eta, state, dataset, loss, config)


def gd_step(state, dataset, loss, config):
    """Gradient descent ``w - eta grad L(w)``."""
    return momentum_step(state, dataset, loss, replace(config, beta=0.0, gamma=0.0))


def md_step(state, dataset, loss, potential, config):
    """Mirror descent: ``grad psi(w') = grad psi(w) - eta grad L(w)``."""
    return md_dual_momentum_step(state, dataset, loss, potential, replace(config, beta=0.0, gamma=0.0))


def md_dual_momentum_step(state, dataset, loss, potential, config):
    """Dual momentum: ``z' = z + beta dz_prev - eta grad L(w + gamma dw_prev)``."""
    loss = _loss(loss)
    t = state.t
    beta, gamma = config.beta_at(t), config.gamma_at(t)
    subset = config.batch_at(t, dataset.n_examples)
    point = state.w + gamma * state.dw
    eta, g = _scaled_gradient(dataset, loss, point, subset, config, _bound_for(dataset, config), t)

    def make(eta):
        z = state.z + beta * state.dz - eta * g
        w = potential.grad_inverse(z)
        return replace(state, w=w, z=z, dw=w - state.w, dz=z - state.z, t=t + 1, eta=eta)

    return _accept(make, eta, state, dataset, loss, config, potential)


def md_primal_momentum_step(state, dataset, loss, potential, config):
    """Primal momentum: ``z' = grad psi(w + beta dw_prev) - eta grad L(w + gamma dw_prev)``."""
    loss = _loss(loss)
    t = state.t
    beta, gamma = config.beta_at(t), config.gamma_at(t)
    subset = config.batch_at(t, dataset.n_examples)
    anchor = state.w + beta * state.dw
    if not potential.in_domain(anchor):
        raise DomainError(f"momentum point left the {potential.kind} domain at iteration {t}; reduce beta or eta")
    point = state.w + gamma * state.dw
    eta, g = _scaled_gradient(dataset, loss, point, subset, config, _bound_for(dataset, config), t)
    z_anchor = potential.grad(anchor)

    def make(eta):
        z = z_anchor - eta * g
        w = potential.grad_inverse(z)
        return replace(state, w=w, z=z, dw=w - state.w, dz=z - state.z, t=t + 1, eta=eta)

    return _accept(make, eta, state, dataset, loss, config, potential)


def md_constrained_step(state, dataset, loss, potential, constraint, config):
    """Mirror descent step followed by a Bregman projection onto ``{w : G w = h}``.

    ``constraint`` is a pair ``(G, h)``; an empty ``G`` gives the plain step.
    """
    loss = _loss(loss)
    G, h = constraint
    G = np.asarray(G, dtype=float).reshape(-1, dataset.dim)
    h = np.asarray(h, dtype=float).reshape(-1)
    t = state.t
    subset = config.batch_at(t, dataset.n_examples)
    eta, g = _scaled_gradient(dataset, loss, state.w, subset, config, _bound_for(dataset, config), t)

    def make(eta):
        unconstrained = potential.grad_inverse(state.z - eta * g)
        w, _, _ = bregman_project(potential, G, h, unconstrained)
        z = potential.grad(w)
        return replace(state, w=w, z=z, dw=w - state.w, dz=z - state.z, t=t + 1, eta=eta)

    return _accept(make, eta, state, dataset, loss, config, potential)


def ngd_step(state, dataset, loss, potential, config):
    """Natural gradient ``w - eta H(w)^{-1} grad L(w)`` with ``H`` the potential Hessian."""
    loss = _loss(loss)
    t = state.t
    subset = config.batch_at(t, dataset.n_examples)
    eta, g = _scaled_gradient(dataset, loss, state.w, subset, config, _bound_for(dataset, config), t)
    direction = potential.hessian_inverse_apply(state.w, g)

    def make(eta):
        w = state.w - eta * direction
        return replace(state, w=w, dw=w - state.w, t=t + 1, eta=eta)

    return _accept(make, eta, state, dataset, loss, config, potential)


def sd_step(state, dataset, loss, norm, config):
    """Steepest descent ``w + eta * duality_map(grad L(w))`` for the given norm."""
    loss = _loss(loss)
    t = state.t
    subset = config.batch_at(t, dataset.n_examples)
    eta, g = _scaled_gradient(dataset, loss, state.w, subset, config, _bound_for(dataset, config, norm), t)
    direction = norm.duality_map(g)

    def make(eta):
        w = state.w + eta * direction
        return replace(state, w=w, dw=w - state.w, t=t + 1, eta=eta)

    return _accept(make, eta, state, dataset, loss, config)


def coordinate_step(state, dataset, loss, config, tie_rule="average"):
    """Coordinate descent along the largest-magnitude gradient coordinates."""
    loss = _loss(loss)
    t = state.t
    subset = config.batch_at(t, dataset.n_examples)
    l1 = Norm("lp", 1)
    eta, g = _scaled_gradient(dataset, loss, state.w, subset, config, _bound_for(dataset, config, l1), t)
    direction = coordinate_direction(g, tie_rule)

    def make(eta):
        w = state.w + eta * direction
        return replace(state, w=w, dw=w - state.w, t=t + 1, eta=eta)

    return _accept(make, eta, state, dataset, loss, config)


def _neumaier_add(hi, lo, x):
    s = hi + x
    big = np.abs(hi) >= np.abs(x)
    lo = lo + np.where(big, (hi - s) + x, (x - s) + hi)
    return s, lo


def adagrad_step(state, dataset, loss, config):
    """Diagonal AdaGrad: accumulate squared gradients, then ``w - eta G^{-1/2} g``.

    The accumulator is summed with compensation so long runs keep the tiny
    late increments. With ``config.adapt`` false the accumulator stays frozen.
    """
    loss = _loss(loss)
    t = state.t
    subset = config.batch_at(t, dataset.n_examples)
    g = _check_finite(problems.gradient(dataset, loss, state.w, subset), "gradient", t)
    G, G_lo = state.G, state.G_lo
    if config.adapt:
        G, G_lo = _neumaier_add(G, G_lo, g * g)
    total = G + G_lo
    if config.epsilon is not None:
        total = total + config.epsilon
    if np.any(total <= 0):
        raise OptimizationError(
            f"AdaGrad accumulator has a zero entry at iteration {t}; configure epsilon or a positive G0"
        )
    w = state.w - config.eta * g / np.sqrt(total)
    return replace(state, w=w, dw=w - state.w, G=G, G_lo=G_lo, t=t + 1, eta=config.eta)


def factored_gradient(dataset, loss, U):
    """Gradient of ``U -> L(U U^T)``: ``(grad L(W) + grad L(W)^T) U``."""
    G = problems.matrix_gradient(dataset, loss, U @ U.T)
    return (G + G.T) @ U


def factored_gd_step(state, dataset, loss, config):
    """Gradient step on the factor ``U`` of ``W = U U^T``."""
    loss = _loss(loss)
    U = state.U
    if U.ndim != 2 or U.shape[0] != dataset.dim:
        raise ValueError(f"factor shape {U.shape} does not match dimension {dataset.dim}")
    W = U @ U.T
    if config.policy == "constant":
        eta = config.eta
        G = problems.matrix_gradient(dataset, loss, W)
    else:
        B = config.bound if config.bound is not None else dataset.feature_bound()
        if loss.kind == "exponential":
            eta = config.c / (B * B)
            G = problems.matrix_normalized_gradient(dataset, W)
        else:
            eta = step_size_loss_adaptive(config.c, B, problems.matrix_objective(dataset, loss, W))
            G = problems.matrix_gradient(dataset, loss, W)
        if config.policy == "loss-adaptive-damped":
            eta /= max(1.0, float(np.linalg.norm(W)))
    _check_finite(G, "gradient", state.t)
    U_new = U - eta * (G + G.T) @ U
    return replace(state, U=U_new, dw=U_new - U, t=state.t + 1, eta=eta)


def iterate(step, state, n_steps, callback=None, stop=None):
    """Apply ``step`` up to ``n_steps`` times.

    ``callback(state)`` sees every new state; ``stop(state)`` ends the run
    early when it returns true.
    """
    for _ in range(n_steps):
        state = step(state)
        if callback is not None:
            callback(state)
        if stop is not None and stop(state):
            break
    return state


# ---------------------------------------------------------------------------
# continuous-time flows


@dataclass
class FlowTrajectory:
    times: np.ndarray
    points: np.ndarray
    status: str = "ok"
    events: dict = field(default_factory=dict)

    @property
    def final(self):
        return self.points[-1]


def _flow_rhs(kind, dataset, loss, geometry):
    loss = _loss(loss)
    if kind in ("mirror", "ngd"):
        def rhs(_, w):
            return -geometry.hessian_inverse_apply(w, problems.gradient(dataset, loss, w))
    elif kind == "steepest":
        def rhs(_, w):
            return geometry.duality_map(problems.gradient(dataset, loss, w))
    else:
        raise ValueError(f"unknown flow kind {kind!r}")
    return rhs


def integrate_flow(kind, start, dataset, loss, geometry, time_grid=None, t_end=None,
                   rtol=1e-10, atol=1e-13, loss_tol=None):
    """Integrate the continuous-time limit of mirror/natural-gradient or steepest descent.

    ``kind`` is ``"mirror"`` (same as ``"ngd"``: ``dw/dt = -H(w)^{-1} grad L``)
    or ``"steepest"`` (``dw/dt = duality_map(grad L)``). Integration uses an
    adaptive explicit Runge-Kutta pair. With ``loss_tol`` the run stops as soon
    as the objective falls below it. Leaving the potential domain raises
    ``DomainError`` carrying the exit time.
    """
    start = np.array(start, dtype=float)
    loss = _loss(loss)
    rhs = _flow_rhs(kind, dataset, loss, geometry)
    if time_grid is not None:
        time_grid = np.asarray(time_grid, dtype=float)
        t_end = float(time_grid[-1])
    if t_end is None:
        raise ValueError("integrate_flow needs a time grid or t_end")
    if kind in ("mirror", "ngd"):
        geometry.check(start)

    events = []
    domain_guard = hasattr(geometry, "in_domain") and geometry.kind == "entropy"
    if domain_guard:
        def leave_domain(_, w):
            return float(np.min(w))
        leave_domain.terminal = True
        leave_domain.direction = -1
        events.append(leave_domain)
    if loss_tol is not None:
        def converged(_, w):
            return problems.objective(dataset, loss, w) - loss_tol
        converged.terminal = True
        converged.direction = -1
        events.append(converged)

    if loss_tol is not None and problems.objective(dataset, loss, start) <= loss_tol:
        return FlowTrajectory(np.array([0.0]), start[None, :], "converged")
    sol = solve_ivp(rhs, (0.0, t_end), start, method="RK45", t_eval=time_grid, rtol=rtol, atol=atol,
                    events=events or None)
    if not sol.success:
        raise OptimizationError(f"flow integration failed: {sol.message}")
    status = "ok"
    ev = {}
    if domain_guard and sol.t_events[0].size:
        raise DomainError(f"flow left the entropy domain at time {sol.t_events[0][0]:.17g}")
    if loss_tol is not None and sol.t_events[-1].size:
        status = "converged"
        ev["converged_at"] = float(sol.t_events[-1][0])
    times, points = sol.t, sol.y.T
    if status == "converged" and time_grid is not None:
        times = np.append(times, sol.t_events[-1][0])
        points = np.vstack([points, sol.y_events[-1][0]])
    return FlowTrajectory(times, points, status, ev)


def flow_limit(kind, start, dataset, loss, geometry, loss_tol=1e-16, t_end=1e6, **kwargs):
    """Endpoint of a flow integrated until the objective drops below ``loss_tol``.

    ``loss_tol`` must sit above the accuracy floor set by ``atol``; below it the
    integrator never reaches the target and runs to ``t_end``.
    """
    traj = integrate_flow(kind, start, dataset, loss, geometry, t_end=t_end, loss_tol=loss_tol, **kwargs)
    if traj.status != "converged":
        raise OptimizationError(f"flow did not reach loss {loss_tol:g} by time {t_end:g}")
    return traj.final
