"""Datasets, losses and empirical objectives for vector and factorized problems.

Vector problems hold features as an ``(N, d)`` array; matrix problems hold an
``(N, d, d)`` stack and use the Frobenius inner product. All containers copy
their inputs and mark the arrays read-only.
"""

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, logsumexp

LOSS_KINDS = ("squared", "exponential", "logistic")
FAMILIES = {
    "squared": "unique-finite-root",
    "exponential": "strict-monotone",
    "logistic": "strict-monotone",
}

# objective values above this are reported as saturated instead of inf
LOSS_CAP = 1e300
_LOG_CAP = math.log(LOSS_CAP)


class LossSaturationWarning(RuntimeWarning):
    """Raised (as a warning) when an objective hits the saturation cap."""


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Loss:
    """A scalar loss ``l(u, y)`` of the prediction ``u`` and label ``y``."""

    kind: str

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")

    @property
    def family(self):
        return FAMILIES[self.kind]

    @property
    def is_monotone(self):
        return self.family == "strict-monotone"

    def value(self, u, y):
        return loss_value(self.kind, u, y)

    def derivative(self, u, y):
        return loss_derivative(self.kind, u, y)


def _as_loss(loss):
    return loss if isinstance(loss, Loss) else Loss(loss)


def loss_value(kind, u, y):
    """Elementwise loss value. Exponential values are clipped at ``LOSS_CAP``."""
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    if kind == "squared":
        out = (u - y) ** 2
    elif kind == "exponential":
        out = np.exp(np.minimum(-u * y, _LOG_CAP))
    elif kind == "logistic":
        out = np.logaddexp(0.0, -u * y)
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return out if out.ndim else float(out)


def loss_derivative(kind, u, y):
    """Derivative of the loss in its first argument."""
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    if kind == "squared":
        out = 2.0 * (u - y)
    elif kind == "exponential":
        out = -y * np.exp(np.minimum(-u * y, _LOG_CAP))
    elif kind == "logistic":
        out = -y * expit(-u * y)
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Dataset:
    """Labeled feature vectors ``x_n`` (rows of ``features``) with labels ``y_n``."""

    features: np.ndarray
    labels: np.ndarray
    name: str = ""
    _bounds: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        X = _frozen(self.features)
        y = _frozen(self.labels)
        if X.ndim != 2:
            raise ValueError(f"features must be a 2-d array, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise ValueError(f"labels shape {y.shape} does not match {X.shape[0]} examples")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("features and labels must be finite")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def n_examples(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def is_classification(self):
        return self.n_examples > 0 and bool(np.all(np.abs(self.labels) == 1.0))

    @property
    def signed_features(self):
        """Rows ``y_n x_n``; margins of ``w`` are ``signed_features @ w``."""
        return self.labels[:, None] * self.features

    def subset(self, indices):
        idx = np.asarray(indices, dtype=int)
        return Dataset(self.features[idx], self.labels[idx], self.name)

    def span_basis(self, tol=1e-12):
        """Orthonormal basis (columns) of span{x_n}."""
        if self.n_examples == 0:
            return np.zeros((self.dim, 0))
        u, s, _ = np.linalg.svd(self.features.T, full_matrices=False)
        rank = int(np.sum(s > tol * max(1.0, s[0])))
        return u[:, :rank]

    def off_span(self, v):
        """Component of ``v`` orthogonal to span{x_n}."""
        v = np.asarray(v, dtype=float)
        basis = self.span_basis()
        return v - basis @ (basis.T @ v)

    def feature_bound(self, dual_norm, key=None):
        """``B = max_n ||x_n||_*`` for a callable dual norm, cached under ``key``."""
        if key is not None and key in self._bounds:
            return self._bounds[key]
        value = max(dual_norm(x) for x in self.features)
        if key is not None:
            self._bounds[key] = value
        return value

    def margins(self, w):
        return self.signed_features @ np.asarray(w, dtype=float)

    def to_dict(self):
        return {
            "features": self.features.tolist(),
            "labels": self.labels.tolist(),
            "kind": "vector",
        }


@dataclass(frozen=True)
class MatrixDataset:
    """Labeled ``d x d`` feature matrices for the factorized setting.

    Labels are +1/-1 for classification; real labels are accepted for
    squared-loss matrix regression.
    """

    features: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        X = _frozen(self.features)
        y = _frozen(self.labels)
        if X.ndim != 3 or X.shape[1] != X.shape[2]:
            raise ValueError(f"features must have shape (N, d, d), got {X.shape}")
        if y.shape != (X.shape[0],):
            raise ValueError(f"labels shape {y.shape} does not match {X.shape[0]} examples")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("features and labels must be finite")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def n_examples(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def is_classification(self):
        return self.n_examples > 0 and bool(np.all(np.abs(self.labels) == 1.0))

    @property
    def signed_features(self):
        return self.labels[:, None, None] * self.features

    def margins(self, W):
        return np.einsum("nij,ij->n", self.signed_features, np.asarray(W, dtype=float))

    def feature_bound(self):
        """Largest Frobenius norm of a feature matrix."""
        return float(np.max(np.linalg.norm(self.features, axis=(1, 2))))

    def to_dict(self):
        return {
            "features": self.features.tolist(),
            "labels": self.labels.tolist(),
            "kind": "matrix",
        }


def _check_dim(dataset, w):
    w = np.asarray(w, dtype=float)
    if w.shape != (dataset.dim,):
        raise ValueError(f"parameter shape {w.shape} does not match dimension {dataset.dim}")
    return w


def _check_shape(dataset, W):
    W = np.asarray(W, dtype=float)
    if W.shape != (dataset.dim, dataset.dim):
        raise ValueError(f"parameter shape {W.shape} does not match ({dataset.dim}, {dataset.dim})")
    return W


def _sum_capped(terms, cap):
    with np.errstate(over="ignore"):
        total = float(np.sum(terms))
    saturated = not total < cap
    return (min(total, cap) if saturated else total), saturated


def objective_with_status(dataset, loss, w, cap=LOSS_CAP):
    """Return ``(L(w), saturated)`` where ``saturated`` flags a capped value."""
    loss = _as_loss(loss)
    w = _check_dim(dataset, w)
    u = dataset.features @ w
    if loss.kind == "exponential":
        log_total = log_objective(dataset, w)
        if log_total >= math.log(cap):
            return cap, True
        # direct sum is safe below the cap and exact for small inputs
        return float(np.sum(np.exp(-dataset.margins(w)))), False
    return _sum_capped(loss_value(loss.kind, u, dataset.labels), cap)


def objective(dataset, loss, w, cap=LOSS_CAP):
    """Empirical objective ``sum_n l(<w, x_n>, y_n)``."""
    value, saturated = objective_with_status(dataset, loss, w, cap)
    if saturated:
        warnings.warn(f"objective saturated at cap {cap:g}", LossSaturationWarning, stacklevel=2)
    return value


def gradient(dataset, loss, w, subset=None):
    """Gradient of the objective restricted to ``subset`` (all examples by default)."""
    loss = _as_loss(loss)
    w = _check_dim(dataset, w)
    X, y = dataset.features, dataset.labels
    if subset is not None:
        idx = np.asarray(subset, dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= dataset.n_examples):
            raise IndexError("subset index out of range")
        X, y = X[idx], y[idx]
    if X.shape[0] == 0:
        return np.zeros(dataset.dim)
    return loss_derivative(loss.kind, X @ w, y) @ X


def log_objective(dataset, w):
    """``log L(w)`` for the exponential loss, computed without overflow."""
    w = _check_dim(dataset, w)
    return float(logsumexp(-dataset.margins(w)))


def normalized_gradient(dataset, w, subset=None):
    """``grad L_S(w) / L(w)`` for the exponential loss.

    ``L`` is the full objective and ``L_S`` its restriction to ``subset``, so
    the result is a softmax-weighted sum of signed features.
    """
    w = _check_dim(dataset, w)
    Z = dataset.signed_features
    m = Z @ w
    weights = np.exp(-(m - m.min()))
    weights /= weights.sum()
    if subset is not None:
        idx = np.asarray(subset, dtype=int)
        return -(weights[idx] @ Z[idx]) if idx.size else np.zeros(dataset.dim)
    return -(weights @ Z)


def matrix_objective(dataset, loss, W, cap=LOSS_CAP):
    """Objective ``sum_n l(<W, X_n>, y_n)`` with the Frobenius inner product."""
    loss = _as_loss(loss)
    W = _check_shape(dataset, W)
    if loss.kind == "exponential":
        log_total = matrix_log_objective(dataset, W)
        return cap if log_total >= math.log(cap) else math.exp(log_total)
    u = np.einsum("nij,ij->n", dataset.features, W)
    return _sum_capped(loss_value(loss.kind, u, dataset.labels), cap)[0]


def matrix_gradient(dataset, loss, W):
    """Gradient ``sum_n l'(<W, X_n>, y_n) X_n`` as a ``d x d`` matrix."""
    loss = _as_loss(loss)
    W = _check_shape(dataset, W)
    u = np.einsum("nij,ij->n", dataset.features, W)
    return np.einsum("n,nij->ij", loss_derivative(loss.kind, u, dataset.labels), dataset.features)


def matrix_log_objective(dataset, W):
    W = _check_shape(dataset, W)
    return float(logsumexp(-dataset.margins(W)))


def matrix_normalized_gradient(dataset, W):
    """``grad L(W) / L(W)`` for the exponential loss."""
    W = _check_shape(dataset, W)
    m = dataset.margins(W)
    weights = np.exp(-(m - m.min()))
    weights /= weights.sum()
    return -np.einsum("n,nij->ij", weights, dataset.signed_features)


def is_realizable_underdetermined(dataset, tol=1e-9):
    """True when ``N < d`` and ``<w, x_n> = y_n`` has a solution."""
    if dataset.n_examples >= dataset.dim:
        return False
    w, *_ = np.linalg.lstsq(dataset.features, dataset.labels, rcond=None)
    return bool(np.max(np.abs(dataset.features @ w - dataset.labels), initial=0.0) <= tol)


# ---------------------------------------------------------------------------
# generators


def random_regression(seed, n_examples=3, dim=10, name=None):
    """Gaussian features and labels; realizable whenever ``N < d`` (almost surely)."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_examples, dim))
    y = rng.standard_normal(n_examples)
    return Dataset(X, y, name or f"regression-{seed}")


def random_positive_regression(seed, n_examples=2, dim=5, name=None):
    """Regression data whose constraint set meets the positive orthant.

    Labels are generated from a strictly positive planted solution so that
    entropy-type potentials have a feasible point in their domain.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_examples, dim))
    w_planted = rng.uniform(0.5, 1.5, dim)
    return Dataset(X, X @ w_planted, name or f"positive-regression-{seed}")


def random_separable(seed, n_examples=10, dim=2, shift=0.3, name=None):
    """Linearly separable Gaussian data.

    A unit direction ``u`` is drawn, points are labeled by ``sign(<u, x>)`` and
    pushed away from the boundary by ``shift`` along ``y u``.
    """
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    X = rng.standard_normal((n_examples, dim))
    y = np.sign(X @ u)
    y[y == 0] = 1.0
    X = X + shift * y[:, None] * u
    return Dataset(X, y, name or f"separable-{seed}")


def random_psd_separable(seed, n_examples=5, dim=2, shift=1.0, name=None):
    """Symmetric Gaussian matrices separable by a rank-one PSD matrix ``u u^T``."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    P = np.outer(u, u)
    Xs = rng.standard_normal((n_examples, dim, dim))
    Xs = (Xs + Xs.transpose(0, 2, 1)) / 2
    y = np.sign(np.einsum("ij,nij->n", P, Xs))
    y[y == 0] = 1.0
    Xs = Xs + shift * y[:, None, None] * P
    return MatrixDataset(Xs, y, name or f"psd-separable-{seed}")


# ---------------------------------------------------------------------------
# built-ins and file IO

BUILTIN_DATASETS = {
    "example1": lambda: Dataset([[1.0, 2.0]], [1.0], "example1"),
    "example2": lambda: Dataset([[1.0, 2.0]], [1.0], "example2"),
    "example3": lambda: Dataset([[1.0, 1.0, 1.0], [1.0, 2.0, 0.0]], [1.0, 10.0], "example3"),
}


def builtin_dataset(name):
    try:
        return BUILTIN_DATASETS[name]()
    except KeyError:
        raise KeyError(f"unknown dataset {name!r}; built-ins are {sorted(BUILTIN_DATASETS)}") from None


def dataset_from_dict(data, name=""):
    kind = data.get("kind", "vector")
    if kind == "vector":
        return Dataset(data["features"], data["labels"], name)
    if kind == "matrix":
        return MatrixDataset(data["features"], data["labels"], name)
    raise ValueError(f"unknown dataset kind {kind!r}")


def load_dataset(ref):
    """Load a built-in dataset by name or a JSON dataset file by path."""
    if str(ref) in BUILTIN_DATASETS:
        return builtin_dataset(str(ref))
    path = Path(ref)
    with path.open() as fh:
        return dataset_from_dict(json.load(fh), path.stem)


def save_dataset(dataset, path):
    with Path(path).open("w") as fh:
        json.dump(dataset.to_dict(), fh)
