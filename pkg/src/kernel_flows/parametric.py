"""Gradient descent of rho over a finite-dimensional kernel parameter vector."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .errors import ConfigError, FactorizationFailure
from .rkhs import (
    Batch,
    GaussianKernel,
    GramSystem,
    RhoTerms,
    as_labels,
    as_points,
    half,
    rho_terms,
    sample_batch,
)

log = logging.getLogger(__name__)


class ParametricKernelFamily:
    """A kernel ``K(x, x', W)`` restricted to a fixed set of ``n_points`` inputs.

    Subclasses implement :meth:`gram`. :meth:`gram_derivatives` falls back to
    forward differences; :meth:`derivative_quadratic_forms` falls back to
    contracting the full derivative stack, and may be overridden when the
    family has a cheaper route to ``v^T (dTheta/dW_i) v``.
    """

    n_params: int
    n_points: int
    fd_step: float = 1e-7

    def gram(self, W: np.ndarray, idx: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gram_derivatives(self, W: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Stack of ``dTheta/dW_i``, shape ``(n_params, n, n)``."""
        W = np.asarray(W, dtype=float)
        base = self.gram(W, idx)
        out = np.empty((len(W),) + base.shape)
        for i in range(len(W)):
            h = self.fd_step * max(1.0, abs(W[i]))
            Wp = W.copy()
            Wp[i] += h
            D = (self.gram(Wp, idx) - base) / h
            out[i] = 0.5 * (D + D.T)
        return out

    def derivative_quadratic_forms(self, W, idx, V) -> np.ndarray:
        """``Tr(V^T (dTheta/dW_i) V)`` for every parameter ``i``."""
        dT = self.gram_derivatives(W, idx)
        return np.einsum("ak,pab,bk->p", V, dT, V)


class GaussianGammaFamily(ParametricKernelFamily):
    """Gaussian kernel on fixed points with ``W = (gamma,)``."""

    n_params = 1

    def __init__(self, points, nugget: float = 0.0):
        self.points = as_points(points)
        self.n_points = len(self.points)
        self.nugget = nugget

    def gram(self, W, idx):
        return GaussianKernel(gamma=float(W[0]), nugget=self.nugget).gram(self.points[idx])

    def gram_derivatives(self, W, idx):
        X = self.points[idx]
        D = ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1)
        return (-D * np.exp(-float(W[0]) * D))[None]


class ScaledFamily(ParametricKernelFamily):
    """``Theta(w) = exp(w) * Theta_0``; rho is constant along this family."""

    n_params = 1

    def __init__(self, theta0):
        self.theta0 = np.asarray(theta0, dtype=float)
        self.n_points = self.theta0.shape[0]

    def gram(self, W, idx):
        return np.exp(W[0]) * self.theta0[np.ix_(idx, idx)]

    def gram_derivatives(self, W, idx):
        return self.gram(W, idx)[None]


def grad_rho_w(family: ParametricKernelFamily, W, labels, batch: Batch):
    """Return ``(grad, terms)`` with ``grad[i] = d rho / d W_i`` on ``batch``."""
    W = np.asarray(W, dtype=float)
    y = as_labels(labels)[batch.fine]
    system = GramSystem(family.gram(W, batch.fine), labels=y)
    terms = rho_terms(system, batch.coarse)
    return gradient_from_terms(family, W, batch, terms), terms


def gradient_from_terms(family, W, batch: Batch, terms: RhoTerms) -> np.ndarray:
    qy = family.derivative_quadratic_forms(W, batch.fine, terms.y_hat)
    qz = family.derivative_quadratic_forms(W, batch.fine, terms.z_hat)
    return -((1.0 - terms.rho) * qy - qz) / terms.denom


@dataclass
class TrainConfig:
    n_f: int
    n_c: Optional[int] = None
    step_rule: str = "normalized"
    step_size: float = 0.01
    iterations: int = 100
    seed: int = 0
    plateau_window: Optional[int] = None
    plateau_tol: float = 1e-6
    max_failures: int = 3

    def __post_init__(self):
        if self.n_c is None:
            self.n_c = half(self.n_f)
        if self.step_rule not in ("normalized", "fixed"):
            raise ConfigError(f"unknown step rule {self.step_rule!r}")
        if not self.step_size > 0:
            raise ConfigError("step size must be positive")
        if not (1 <= self.n_c < self.n_f):
            raise ConfigError(f"need 1 <= N_c < N_f, got N_c={self.n_c}, N_f={self.n_f}")

    def validate_for(self, n_points: int):
        if self.n_f > n_points:
            raise ConfigError(f"N_f={self.n_f} exceeds N={n_points}")


@dataclass
class StepRecord:
    step: int
    W: np.ndarray
    rho: float
    grad_norm: float
    batch: Batch = field(repr=False)


@dataclass
class Trajectory:
    steps: List[StepRecord]
    W: np.ndarray

    @property
    def rhos(self) -> np.ndarray:
        return np.array([s.rho for s in self.steps])

    @property
    def weights(self) -> np.ndarray:
        return np.array([s.W for s in self.steps])


def _plateaued(rhos: List[float], window: int, tol: float) -> bool:
    if len(rhos) < window + 1:
        return False
    r = np.asarray(rhos[-(window + 1):])
    rel = np.abs(np.diff(r)) / np.maximum(np.abs(r[:-1]), 1e-300)
    return float(rel.mean()) < tol


def run_algorithm1(family: ParametricKernelFamily, W0, labels, config: TrainConfig,
                   rng: Optional[np.random.Generator] = None,
                   callback: Optional[Callable[[StepRecord, RhoTerms], None]] = None,
                   ) -> Trajectory:
    """Stochastic gradient descent of rho over ``W``.

    Each step resamples the batch, records ``(W, rho)`` *before* the update
    and then moves ``W`` against the gradient.
    """
    config.validate_for(family.n_points)
    if rng is None:
        rng = np.random.default_rng(config.seed)
    W = np.array(W0, dtype=float)
    labels = as_labels(labels)
    everyone = np.arange(family.n_points)
    history: List[StepRecord] = []
    failures = 0
    for step in range(config.iterations):
        batch = sample_batch(everyone, config.n_f, config.n_c, rng)
        try:
            grad, terms = grad_rho_w(family, W, labels, batch)
        except FactorizationFailure as exc:
            failures += 1
            log.warning("step %d: factorization failed (%s)", step, exc)
            if failures > config.max_failures:
                raise FactorizationFailure(
                    f"{failures} consecutive factorization failures at step {step}: {exc}"
                ) from exc
            continue
        failures = 0
        gnorm = float(np.linalg.norm(grad))
        rec = StepRecord(step=step, W=W.copy(), rho=terms.rho, grad_norm=gnorm, batch=batch)
        history.append(rec)
        if callback is not None:
            callback(rec, terms)
        if config.step_rule == "normalized":
            if gnorm > 0:
                W = W - (config.step_size / gnorm) * grad
        else:
            W = W - config.step_size * grad
        if config.plateau_window and _plateaued([h.rho for h in history],
                                                config.plateau_window, config.plateau_tol):
            log.info("rho plateaued at step %d", step)
            break
    return Trajectory(steps=history, W=W)
