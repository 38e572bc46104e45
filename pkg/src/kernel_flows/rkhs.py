"""Kernels, Gram systems, RKHS interpolation and the rho objective.

Labels are always carried as ``(n, d_Y)`` matrices; scalar labels are the
``d_Y == 1`` case and every quadratic form below is the trace form
``Tr(y^T M y)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from .errors import (
    DegenerateLabels,
    DimensionMismatch,
    FactorizationFailure,
    InsufficientPoints,
    RhoOutOfRange,
)

RHO_TOL = 1e-8
DEGENERATE_DENOM = 1e-14
# Cholesky pivots below this fraction of the largest diagonal entry are
# treated as numerical singularity.
PIVOT_RTOL = 1e-15
# Above this input dimension squared distances use the BLAS expansion
# |x|^2 + |y|^2 - 2 x.y instead of explicit differences.
_DIRECT_DIM = 32


def as_points(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise DimensionMismatch(f"points must be 2-D, got shape {X.shape}")
    return X


def as_labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2:
        raise DimensionMismatch(f"labels must be 1-D or 2-D, got shape {y.shape}")
    return y


def sq_distances(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    if X.shape[1] != Y.shape[1]:
        raise DimensionMismatch(
            f"point dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if X.shape[1] <= _DIRECT_DIM:
        return cdist(X, Y, "sqeuclidean")
    D = (np.einsum("ij,ij->i", X, X)[:, None]
         + np.einsum("ij,ij->i", Y, Y)[None, :]
         - 2.0 * (X @ Y.T))
    np.maximum(D, 0.0, out=D)
    return D


class Kernel:
    """Base class for kernels on R^d.

    Subclasses provide ``cross`` and ``grad_x``. The nugget is added to
    diagonal Gram entries only (by index), never to off-diagonal entries of
    coincident points.
    """

    nugget: float = 0.0

    def cross(self, X, Y) -> np.ndarray:
        raise NotImplementedError

    def grad_x(self, X, Y) -> np.ndarray:
        """Gradient in the first argument, shape ``(n, m, d)``."""
        raise NotImplementedError

    def weighted_grad(self, X, M) -> np.ndarray:
        """Return ``sum_t M[i, t] * grad_x K(X_i, X_t)`` for every row ``i``."""
        G = self.grad_x(X, X)
        return np.einsum("it,its->is", M, G)

    def __call__(self, x, y) -> float:
        return float(self.cross(as_points(np.atleast_2d(x)),
                                as_points(np.atleast_2d(y)))[0, 0])

    def gram(self, X) -> np.ndarray:
        X = as_points(X)
        K = self.cross(X, X)
        K = 0.5 * (K + K.T)
        if self.nugget:
            K[np.diag_indices_from(K)] += self.nugget
        return K


@dataclass(frozen=True)
class GaussianKernel(Kernel):
    """``K(x, x') = exp(-gamma |x - x'|^2)``, optionally with a diagonal nugget."""

    gamma: float
    nugget: float = 0.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.nugget < 0:
            raise ValueError(f"nugget must be nonnegative, got {self.nugget}")

    def cross(self, X, Y) -> np.ndarray:
        return np.exp(-self.gamma * sq_distances(as_points(X), as_points(Y)))

    def gram(self, X) -> np.ndarray:
        X = as_points(X)
        D = sq_distances(X, X)
        D = 0.5 * (D + D.T)
        np.fill_diagonal(D, 0.0)
        K = np.exp(-self.gamma * D)
        if self.nugget:
            K[np.diag_indices_from(K)] += self.nugget
        return K

    def grad_x(self, X, Y) -> np.ndarray:
        X, Y = as_points(X), as_points(Y)
        diff = X[:, None, :] - Y[None, :, :]
        return -2.0 * self.gamma * diff * self.cross(X, Y)[:, :, None]

    def weighted_grad(self, X, M) -> np.ndarray:
        X = as_points(X)
        D = sq_distances(X, X)
        np.fill_diagonal(D, 0.0)
        MK = M * np.exp(-self.gamma * D)
        return -2.0 * self.gamma * (X * MK.sum(axis=1)[:, None] - MK @ X)

    @classmethod
    def with_offset_nugget(cls, gamma: float, offset: float = 6.0) -> "GaussianKernel":
        """Nugget ``exp(-gamma * offset**2)``, the kernel's value at distance ``offset``."""
        return cls(gamma=gamma, nugget=float(np.exp(-gamma * offset ** 2)))


def cholesky(theta: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor with singularity detection."""
    if not np.all(np.isfinite(theta)):
        raise FactorizationFailure("Gram matrix has non-finite entries")
    try:
        L = scipy.linalg.cholesky(theta, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise FactorizationFailure(
            f"Gram matrix ({theta.shape[0]}x{theta.shape[0]}) is not positive "
            "definite; coincident points without a nugget?") from exc
    piv = np.diag(L) ** 2
    scale = np.max(np.diag(theta)) if theta.size else 1.0
    if piv.size and piv.min() < PIVOT_RTOL * scale:
        raise FactorizationFailure(
            f"Gram matrix numerically singular (min pivot {piv.min():.3e}, "
            f"max diagonal {scale:.3e}); add a nugget or drop close points")
    return L


def cho_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    return scipy.linalg.cho_solve((L, True), b, check_finite=False)


@dataclass
class GramSystem:
    """A factorized Gram matrix together with its labels and coefficients.

    ``coeffs`` solves ``theta @ coeffs = labels``. Arrays are made read-only
    once factorized.
    """

    theta: np.ndarray
    labels: Optional[np.ndarray] = None
    points: Optional[np.ndarray] = None
    kernel: Optional[Kernel] = None
    chol: np.ndarray = field(init=False, repr=False)
    coeffs: Optional[np.ndarray] = field(init=False, repr=False, default=None)

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=float)
        n = self.theta.shape[0]
        if self.theta.shape != (n, n):
            raise DimensionMismatch(f"Gram matrix must be square, got {self.theta.shape}")
        self.chol = cholesky(self.theta)
        if self.labels is not None:
            self.labels = as_labels(self.labels).copy()
            if self.labels.shape[0] != n:
                raise DimensionMismatch(
                    f"{self.labels.shape[0]} labels for a {n}x{n} Gram matrix")
            self.coeffs = cho_solve(self.chol, self.labels)
            self.labels.flags.writeable = False
            self.coeffs.flags.writeable = False
        self.theta.flags.writeable = False
        self.chol.flags.writeable = False

    @classmethod
    def from_points(cls, kernel: Kernel, X, labels=None) -> "GramSystem":
        X = as_points(X)
        return cls(kernel.gram(X), labels=labels, points=X, kernel=kernel)

    @property
    def size(self) -> int:
        return self.theta.shape[0]

    def solve(self, b) -> np.ndarray:
        return cho_solve(self.chol, b)

    def with_labels(self, labels) -> "GramSystem":
        return GramSystem(self.theta, labels=labels, points=self.points, kernel=self.kernel)

    def _require_labels(self):
        if self.labels is None:
            raise ValueError("GramSystem has no labels")
        return self.labels


def gram(kernel: Kernel, X, labels=None) -> GramSystem:
    X = as_points(X)
    if X.shape[0] == 0:
        raise InsufficientPoints("cannot build a Gram matrix on zero points")
    if not np.all(np.isfinite(X)):
        raise ValueError("points must be finite")
    return GramSystem.from_points(kernel, X, labels)


def interpolate(system: GramSystem, x) -> np.ndarray:
    """Evaluate ``v(x) = coeffs^T K(X, x)`` at one query (1-D) or many (2-D)."""
    if system.points is None or system.kernel is None:
        raise ValueError("interpolation needs a GramSystem built from points")
    system._require_labels()
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    Q = np.atleast_2d(x)
    if Q.shape[1] != system.points.shape[1]:
        raise DimensionMismatch(
            f"query dimension {Q.shape[1]} != point dimension {system.points.shape[1]}")
    v = system.kernel.cross(Q, system.points) @ system.coeffs
    return v[0] if single else v


def rkhs_norm_sq(system: GramSystem) -> float:
    """``Tr(y^T Theta^{-1} y)``."""
    y = system._require_labels()
    return float(np.sum(y * system.coeffs))


@dataclass(frozen=True)
class Batch:
    """``fine`` indexes the dataset, ``coarse`` indexes positions within ``fine``."""

    fine: np.ndarray
    coarse: np.ndarray

    @property
    def n_f(self) -> int:
        return len(self.fine)

    @property
    def n_c(self) -> int:
        return len(self.coarse)

    @property
    def coarse_global(self) -> np.ndarray:
        return self.fine[self.coarse]


def half(n: int) -> int:
    """``round(n / 2)`` with halves rounded up."""
    return int(np.floor(n / 2 + 0.5))


def sample_batch(active, n_f: int, n_c: Optional[int], rng: np.random.Generator) -> Batch:
    """Uniform sampling without replacement of ``fine`` from ``active`` and
    ``coarse`` from ``range(n_f)``."""
    active = np.asarray(active)
    if n_c is None:
        n_c = half(n_f)
    if not (len(active) >= n_f >= n_c >= 1):
        raise InsufficientPoints(
            f"need |active| >= N_f >= N_c >= 1, got {len(active)}, {n_f}, {n_c}")
    fine = rng.choice(active, size=n_f, replace=False)
    coarse = rng.choice(n_f, size=n_c, replace=False)
    return Batch(fine=np.asarray(fine), coarse=np.asarray(coarse))


Coarse = Union[Batch, np.ndarray, list]


def _coarse_idx(coarse: Coarse) -> np.ndarray:
    if isinstance(coarse, Batch):
        return coarse.coarse
    idx = np.asarray(coarse, dtype=int)
    if len(np.unique(idx)) != len(idx):
        raise ValueError("coarse indices must be distinct")
    return idx


@dataclass(frozen=True)
class RhoTerms:
    """Everything the rho derivatives need.

    ``y_hat = Theta^{-1} y``; ``z_hat = pi^T (pi Theta pi^T)^{-1} pi y``;
    ``denom = Tr(y^T Theta^{-1} y)``; ``raw`` is rho before clamping.
    """

    rho: float
    raw: float
    y_hat: np.ndarray
    z_hat: np.ndarray
    denom: float
    numer: float
    coarse: np.ndarray
    coarse_chol: np.ndarray


def rho_terms(system: GramSystem, coarse: Coarse) -> RhoTerms:
    y = system._require_labels()
    idx = _coarse_idx(coarse)
    denom = float(np.sum(y * system.coeffs))
    if denom < DEGENERATE_DENOM:
        raise DegenerateLabels(f"y^T Theta^-1 y = {denom:.3e} is degenerate")
    Lc = cholesky(np.ascontiguousarray(system.theta[np.ix_(idx, idx)]))
    yc = y[idx]
    zc = cho_solve(Lc, yc)
    numer = float(np.sum(yc * zc))
    z_hat = np.zeros_like(y)
    z_hat[idx] = zc
    raw = 1.0 - numer / denom
    if raw < -RHO_TOL or raw > 1.0 + RHO_TOL:
        raise RhoOutOfRange(f"rho = {raw!r} outside [0, 1] beyond tolerance {RHO_TOL}")
    return RhoTerms(rho=min(max(raw, 0.0), 1.0), raw=raw, y_hat=system.coeffs,
                    z_hat=z_hat, denom=denom, numer=numer, coarse=idx, coarse_chol=Lc)


def rho(system: GramSystem, coarse: Coarse) -> float:
    """Relative RKHS error from interpolating with the coarse subset only."""
    return rho_terms(system, coarse).rho


def error_norm_sq(system: GramSystem, coarse: Coarse) -> float:
    """``||v_full - v_coarse||^2 = y^T A y - y^T A~ y``."""
    t = rho_terms(system, coarse)
    return t.denom - t.numer


def rho_directional_derivative(system: GramSystem, coarse: Coarse, T) -> float:
    """First-order coefficient of ``rho(Theta + eps T)`` in ``eps``."""
    T = np.asarray(T, dtype=float)
    t = rho_terms(system, coarse)
    return directional_from_terms(t, T)


def directional_from_terms(t: RhoTerms, T: np.ndarray) -> float:
    qy = np.sum(t.y_hat * (T @ t.y_hat))
    qz = np.sum(t.z_hat * (T @ t.z_hat))
    return float(-((1.0 - t.rho) * qy - qz) / t.denom)


def coarse_predictions(system: GramSystem, coarse: Coarse) -> np.ndarray:
    """Values at every batch point of the interpolant of the coarse subset."""
    y = system._require_labels()
    idx = _coarse_idx(coarse)
    Lc = cholesky(np.ascontiguousarray(system.theta[np.ix_(idx, idx)]))
    return system.theta[:, idx] @ cho_solve(Lc, y[idx])


def e2_metric(system: GramSystem, coarse: Coarse) -> float:
    """``(2 / N_f) * sum_i |y_i - v_coarse(x_i)|^2`` over the whole batch."""
    y = system._require_labels()
    resid = y - coarse_predictions(system, coarse)
    return float(2.0 / y.shape[0] * np.sum(resid ** 2))
