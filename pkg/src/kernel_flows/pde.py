"""1-D elliptic testbed: Green's-function kernels of ``-(b u')' = f`` on (0, 1).

The operator is discretized with P1 tent elements on a uniform mesh with
``2**level`` elements and homogeneous Dirichlet conditions. The coefficient is
sampled once per element at its midpoint. For a conductivity ``b`` the
discrete Green's function is ``A(b)^{-1}``, so the Gram matrix of the kernel
``G_b`` on a set of nodes is a principal submatrix of ``A(b)^{-1}``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.linalg

from .errors import ConfigError, DimensionMismatch
from .parametric import (
    ParametricKernelFamily,
    StepRecord,
    TrainConfig,
    Trajectory,
    run_algorithm1,
)
from .rkhs import GramSystem, Kernel, RhoTerms, as_points, rho

DEFAULT_LEVEL = 8
DEFAULT_MODES = 64


@dataclass(frozen=True)
class Mesh1D:
    level: int = DEFAULT_LEVEL

    @property
    def n_elements(self) -> int:
        return 2 ** self.level

    @property
    def size(self) -> int:
        """Number of interior nodes."""
        return 2 ** self.level - 1

    @property
    def h(self) -> float:
        return 2.0 ** -self.level

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(1, self.n_elements) * self.h

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.n_elements) + 0.5) * self.h

    def dyadic_nodes(self, k: int) -> np.ndarray:
        """Indices (into ``nodes``) of the points ``i / 2**k``, ``0 < i < 2**k``."""
        if not 1 <= k <= self.level:
            raise ValueError(f"k must lie in [1, {self.level}], got {k}")
        step = 2 ** (self.level - k)
        return np.arange(1, 2 ** k) * step - 1

    def node_index(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        i = np.rint(x / self.h).astype(int)
        if np.any(np.abs(i * self.h - x) > 1e-12) or np.any((i < 1) | (i > self.size)):
            raise DimensionMismatch("points must be interior mesh nodes")
        return i - 1


@dataclass(frozen=True)
class ConductivityField:
    """``b(x) = exp(sum_i Wc_i cos(2 pi i x) + Ws_i sin(2 pi i x))``.

    ``W`` stacks the cosine coefficients before the sine coefficients.
    """

    W: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W, dtype=float).ravel()
        if W.size % 2:
            raise ValueError("W needs as many sine as cosine coefficients")
        if not np.all(np.isfinite(W)):
            raise ValueError("W must be finite")
        object.__setattr__(self, "W", W)

    @property
    def n_modes(self) -> int:
        return self.W.size // 2

    @classmethod
    def constant(cls, n_modes: int = DEFAULT_MODES) -> "ConductivityField":
        return cls(np.zeros(2 * n_modes))

    @classmethod
    def rough(cls, rng: np.random.Generator, n_modes: int = DEFAULT_MODES) -> "ConductivityField":
        """Independent uniform(-1, 1) coefficients damped by ``1 / i``."""
        decay = 1.0 / np.arange(1, n_modes + 1)
        c = rng.uniform(-1.0, 1.0, n_modes) * decay
        s = rng.uniform(-1.0, 1.0, n_modes) * decay
        return cls(np.concatenate([c, s]))

    def basis(self, x) -> np.ndarray:
        return fourier_basis(self.n_modes, x)

    def log(self, x) -> np.ndarray:
        return self.W @ self.basis(x)

    def __call__(self, x) -> np.ndarray:
        return np.exp(self.log(x))


def fourier_basis(n_modes: int, x) -> np.ndarray:
    """Rows ``cos(2 pi i x)`` for i = 1..n_modes, then ``sin(2 pi i x)``."""
    x = np.asarray(x, dtype=float)
    arg = 2 * np.pi * np.outer(np.arange(1, n_modes + 1), x)
    return np.vstack([np.cos(arg), np.sin(arg)])


def _element_values(conductivity, mesh: Mesh1D) -> np.ndarray:
    if isinstance(conductivity, ConductivityField):
        c = conductivity(mesh.midpoints)
    elif callable(conductivity):
        c = np.asarray(conductivity(mesh.midpoints), dtype=float)
    else:
        c = np.broadcast_to(np.asarray(conductivity, dtype=float), (mesh.n_elements,))
    return np.asarray(c, dtype=float)


def stiffness_from_elements(c: np.ndarray, h: float) -> np.ndarray:
    """Dense P1 stiffness for per-element coefficients ``c`` (length M + 1)."""
    main = (c[:-1] + c[1:]) / h
    off = -c[1:-1] / h
    return np.diag(main) + np.diag(off, 1) + np.diag(off, -1)


def assemble_stiffness(conductivity, mesh: Mesh1D) -> np.ndarray:
    """Tridiagonal SPD stiffness matrix with midpoint-sampled coefficient.

    ``conductivity`` may be a :class:`ConductivityField`, any callable, or a
    scalar / per-element array.
    """
    c = _element_values(conductivity, mesh)
    if np.any(c <= 0):
        raise ValueError("conductivity must be positive")
    return stiffness_from_elements(c, mesh.h)


class GreenOperator:
    """Factorized ``A(b)`` for one conductivity with Green's-function helpers."""

    def __init__(self, conductivity, mesh: Mesh1D):
        self.mesh = mesh
        self.conductivity = conductivity
        self.c = _element_values(conductivity, mesh)
        if np.any(self.c <= 0):
            raise ValueError("conductivity must be positive")
        h = mesh.h
        ab = np.zeros((2, mesh.size))
        ab[0, 1:] = -self.c[1:-1] / h
        ab[1, :] = (self.c[:-1] + self.c[1:]) / h
        self._ab = ab

    def solve(self, rhs) -> np.ndarray:
        return scipy.linalg.solveh_banded(self._ab, rhs, check_finite=False)

    def matrix(self) -> np.ndarray:
        return stiffness_from_elements(self.c, self.mesh.h)

    def columns(self, idx) -> np.ndarray:
        """``A^{-1} pi_0^T``: Green's function columns at nodes ``idx``."""
        idx = np.asarray(idx, dtype=int)
        E = np.zeros((self.mesh.size, len(idx)))
        E[idx, np.arange(len(idx))] = 1.0
        return self.solve(E)

    def gram(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=int)
        B = self.columns(idx)
        T = B[idx]
        return 0.5 * (T + T.T)

    def energy(self, v) -> float:
        """``v^T A v`` summed over label columns."""
        dv = _element_jumps(np.asarray(v, dtype=float))
        return float(np.sum(self.c[:, None] * dv ** 2) / self.mesh.h)

    def interpolant(self, idx, values) -> np.ndarray:
        """Nodal values of the ``G_b`` interpolant of ``values`` at nodes ``idx``."""
        idx = np.asarray(idx, dtype=int)
        B = self.columns(idx)
        lam = GramSystem(0.5 * (B[idx] + B[idx].T), labels=values).coeffs
        return B @ lam


def _element_jumps(V: np.ndarray) -> np.ndarray:
    """Per-element differences of nodal values with zero boundary values."""
    V = V.reshape(V.shape[0], -1)
    pad = np.zeros((V.shape[0] + 2, V.shape[1]))
    pad[1:-1] = V
    return np.diff(pad, axis=0)


def green_gram(conductivity, mesh: Mesh1D, idx) -> np.ndarray:
    return GreenOperator(conductivity, mesh).gram(idx)


def green_gram_derivative(conductivity: ConductivityField, mesh: Mesh1D, idx,
                          mode: int) -> np.ndarray:
    """``d Theta / d W_mode = -pi_0 A^{-1} (dA/dW_mode) A^{-1} pi_0^T``.

    ``dA/dW_mode`` is the stiffness with coefficient ``b * phi_mode``, since
    ``d b / d W_mode = b * phi_mode``.
    """
    op = GreenOperator(conductivity, mesh)
    D = _element_jumps(op.columns(idx))
    w = op.c * conductivity.basis(mesh.midpoints)[mode] / mesh.h
    dT = -(D.T * w) @ D
    return 0.5 * (dT + dT.T)


class GreenKernel(Kernel):
    """The discrete Green's function ``G_b`` as a kernel on mesh nodes."""

    def __init__(self, conductivity, mesh: Mesh1D):
        self.op = GreenOperator(conductivity, mesh)
        self.mesh = mesh
        self.nugget = 0.0

    def cross(self, X, Y) -> np.ndarray:
        ix = self.mesh.node_index(as_points(X)[:, 0])
        iy = self.mesh.node_index(as_points(Y)[:, 0])
        return self.op.columns(iy)[ix]


class GreenFamily(ParametricKernelFamily):
    """``Theta(W) = pi_0 A(b(W))^{-1} pi_0^T`` on fixed observation nodes."""

    def __init__(self, mesh: Mesh1D, obs_nodes, n_modes: int = DEFAULT_MODES):
        self.mesh = mesh
        self.obs_nodes = np.asarray(obs_nodes, dtype=int)
        self.n_points = len(self.obs_nodes)
        self.n_modes = n_modes
        self.n_params = 2 * n_modes
        self._phi = fourier_basis(n_modes, mesh.midpoints)

    def field(self, W) -> ConductivityField:
        return ConductivityField(W)

    def gram(self, W, idx):
        return green_gram(self.field(W), self.mesh, self.obs_nodes[idx])

    def gram_derivatives(self, W, idx):
        op = GreenOperator(self.field(W), self.mesh)
        D = _element_jumps(op.columns(self.obs_nodes[idx]))
        w = op.c[None, :] * self._phi / self.mesh.h
        dT = -np.einsum("ea,pe,eb->pab", D, w, D)
        return 0.5 * (dT + dT.transpose(0, 2, 1))

    def derivative_quadratic_forms(self, W, idx, V):
        op = GreenOperator(self.field(W), self.mesh)
        rhs = np.zeros((self.mesh.size, V.shape[1]))
        np.add.at(rhs, self.obs_nodes[idx], V)
        jumps = _element_jumps(op.solve(rhs))
        elem_energy = np.sum(jumps ** 2, axis=1) * op.c / self.mesh.h
        return -(self._phi @ elem_energy)


@dataclass
class PdeProblem:
    """Ground truth ``a``, nodal forcing ``f`` and solution ``u = A(a)^{-1} (h f)``."""

    mesh: Mesh1D
    a: ConductivityField
    f: np.ndarray
    u: np.ndarray = field(init=False)

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float)
        if self.f.shape != (self.mesh.size,):
            raise DimensionMismatch(f"forcing must have {self.mesh.size} nodal values")
        self.u = GreenOperator(self.a, self.mesh).solve(self.load)

    @property
    def load(self) -> np.ndarray:
        return self.mesh.h * self.f

    def residual(self) -> float:
        return float(np.linalg.norm(assemble_stiffness(self.a, self.mesh) @ self.u - self.load))


def default_forcing(mesh: Mesh1D, rng: np.random.Generator, n_rough: int = 32) -> np.ndarray:
    """Smooth profile plus a small random high-frequency part."""
    x = mesh.nodes
    phase = rng.uniform(0, 2 * np.pi)
    smooth = 1.0 + 0.5 * np.sin(2 * np.pi * x + phase)
    k = np.arange(1, n_rough + 1)
    amp = rng.uniform(-1.0, 1.0, n_rough) / k
    rough = 0.1 * amp @ np.cos(2 * np.pi * np.outer(k, x))
    return smooth + rough


def make_problem(seed: int = 0, level: int = DEFAULT_LEVEL,
                 n_modes: int = DEFAULT_MODES) -> PdeProblem:
    """The seeded ground truth used by the experiments.

    ``log a`` has independent uniform(-1, 1) Fourier coefficients damped by
    ``1 / i`` over ``n_modes`` modes; the forcing is :func:`default_forcing`.
    """
    rng = np.random.default_rng(seed)
    mesh = Mesh1D(level)
    a = ConductivityField.rough(rng, n_modes)
    f = default_forcing(mesh, rng)
    return PdeProblem(mesh=mesh, a=a, f=f)


def l2_norm(v, mesh: Mesh1D) -> float:
    """Nodal-quadrature L2 norm on (0, 1) with zero boundary values."""
    return float(np.sqrt(mesh.h * np.sum(np.asarray(v) ** 2)))


@dataclass
class MultiresRow:
    k: int
    rho_a: float
    rho_b: float
    e_a: float
    e_b: float


def _multires_for(op: GreenOperator, u: np.ndarray, levels) -> tuple:
    mesh = op.mesh
    total = op.energy(u)
    rhos, errs = [], []
    for k in levels:
        idx = mesh.dyadic_nodes(k)
        B = op.columns(idx)
        sys_k = GramSystem(0.5 * (B[idx] + B[idx].T), labels=u[idx])
        coarse_energy = float(np.sum(sys_k.labels * sys_k.coeffs))
        rhos.append(max(0.0, 1.0 - coarse_energy / total))
        v = (B @ sys_k.coeffs)[:, 0]
        errs.append(l2_norm(v - u, mesh))
    return np.array(rhos), np.array(errs)


def multiresolution_experiment(problem: PdeProblem, b: Optional[ConductivityField] = None,
                               levels=None) -> List[MultiresRow]:
    """rho and L2 errors of dyadic interpolants for the true kernel and ``G_b``.

    ``rho_k = ||v_k - u||_c^2 / ||u||_c^2`` in the energy norm of the kernel's own
    conductivity ``c``; since ``v_k`` is the ``G_c``-orthogonal projection of
    ``u`` this equals ``1 - ||v_k||_c^2 / ||u||_c^2``.
    """
    mesh = problem.mesh
    if b is None:
        b = ConductivityField.constant(problem.a.n_modes)
    if levels is None:
        levels = range(1, mesh.level)
    levels = list(levels)
    ra, ea = _multires_for(GreenOperator(problem.a, mesh), problem.u, levels)
    rb, eb = _multires_for(GreenOperator(b, mesh), problem.u, levels)
    return [MultiresRow(k, *vals) for k, *vals in zip(levels, ra, rb, ea, eb)]


@dataclass
class SubsetTrial:
    trial: int
    rho_a: float
    rho_b: float
    e_a: float
    e_b: float


def _subset_rho_err(op: GreenOperator, u, X, Z_pos) -> tuple:
    B = op.columns(X)
    theta = 0.5 * (B[X] + B[X].T)
    r = rho(GramSystem(theta, labels=u[X]), Z_pos)
    Z = X[Z_pos]
    lam = GramSystem(theta[np.ix_(Z_pos, Z_pos)], labels=u[Z]).coeffs
    v = (B[:, Z_pos] @ lam)[:, 0]
    return r, l2_norm(v - u, op.mesh)


def random_subset_experiment(problem: PdeProblem, b: Optional[ConductivityField] = None,
                             n_f: int = 2 ** 7, n_c: int = 2 ** 6, trials: int = 20,
                             rng: Optional[np.random.Generator] = None) -> List[SubsetTrial]:
    """rho and ``||u - v^c||_L2`` for random nested node subsets, both kernels."""
    if rng is None:
        rng = np.random.default_rng(0)
    if b is None:
        b = ConductivityField.constant(problem.a.n_modes)
    op_a = GreenOperator(problem.a, problem.mesh)
    op_b = GreenOperator(b, problem.mesh)
    out = []
    for t in range(trials):
        X = rng.choice(problem.mesh.size, n_f, replace=False)
        Z_pos = rng.choice(n_f, n_c, replace=False)
        ra, ea = _subset_rho_err(op_a, problem.u, X, Z_pos)
        rb, eb = _subset_rho_err(op_b, problem.u, X, Z_pos)
        out.append(SubsetTrial(t, ra, rb, ea, eb))
    return out


@dataclass
class RecoveryResult:
    obs_nodes: np.ndarray
    trajectory: Trajectory
    errors: np.ndarray

    @property
    def rhos(self) -> np.ndarray:
        return self.trajectory.rhos

    @property
    def W(self) -> np.ndarray:
        return self.trajectory.W


def recover_conductivity(problem: PdeProblem, config: Optional[TrainConfig] = None,
                         n_modes: Optional[int] = None,
                         rng: Optional[np.random.Generator] = None) -> RecoveryResult:
    """Learn ``b(W)`` from ``u`` at ``N_f`` random nodes, starting from ``b = 1``.

    ``errors[n]`` is ``||u - v^c_b||_L2`` for the coarse set and ``W`` used at
    step ``n`` (before that step's update).
    """
    if config is None:
        config = TrainConfig(n_f=2 ** 7, n_c=2 ** 6, iterations=350,
                             step_rule="normalized", step_size=0.01)
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if n_modes is None:
        n_modes = problem.a.n_modes
    mesh = problem.mesh
    if config.n_f > mesh.size:
        raise ConfigError(f"N_f={config.n_f} exceeds the {mesh.size} interior nodes")
    obs = np.sort(rng.choice(mesh.size, config.n_f, replace=False))
    family = GreenFamily(mesh, obs, n_modes)
    labels = problem.u[obs]
    errors = []

    def record(rec: StepRecord, terms: RhoTerms):
        op = GreenOperator(ConductivityField(rec.W), mesh)
        Z = obs[rec.batch.coarse_global]
        errors.append(l2_norm(op.interpolant(Z, problem.u[Z])[:, 0] - problem.u, mesh))

    traj = run_algorithm1(family, np.zeros(2 * n_modes), labels, config, rng, callback=record)
    return RecoveryResult(obs_nodes=obs, trajectory=traj, errors=np.array(errors))
