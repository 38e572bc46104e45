"""Non-parametric kernel flows: points are advected by kernel-interpolated
gradients of rho, one randomly sampled batch per layer.

Each layer ``n`` stores the batch centers ``x_f`` and coefficients ``c`` of the
map ``G(x) = sum_j c_j K(x_f_j, x)``; a point moves by ``eps_n * G(x)``. When
the kernel carries a nugget ``eta``, it is a white-noise term
``eta * delta(x - x')``, so ``G`` picks up ``eta * c_j`` exactly when ``x``
coincides with center ``j``. With that convention batch points move by
``Theta c = g_hat`` and the replayed map agrees with live advection.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DegenerateLabels,
    DimensionMismatch,
    FactorizationFailure,
    InsufficientPoints,
    KernelFlowError,
)
from .rkhs import (
    Batch,
    GaussianKernel,
    GramSystem,
    Kernel,
    RhoTerms,
    as_labels,
    as_points,
    cho_solve,
    cholesky,
    rho_terms,
    sample_batch,
)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# gradient direction


def g_hat_from_terms(kernel: Kernel, X, terms: RhoTerms) -> np.ndarray:
    """``g_i = (2/den) sum_t M_it grad_x K(x_i, x_t)`` with
    ``M = (1 - rho) y_hat y_hat^T - z_hat z_hat^T``; equals ``-grad_x rho``."""
    M = (1.0 - terms.rho) * (terms.y_hat @ terms.y_hat.T) - terms.z_hat @ terms.z_hat.T
    return (2.0 / terms.denom) * kernel.weighted_grad(as_points(X), M)


def g_hat(kernel: Kernel, X, y, coarse):
    """Return ``(g_hat, terms)`` for batch positions ``X`` with labels ``y``."""
    X = as_points(X)
    system = GramSystem(kernel.gram(X), labels=as_labels(y), points=X, kernel=kernel)
    terms = rho_terms(system, coarse)
    return g_hat_from_terms(kernel, X, terms), terms


def g_hat_gaussian(kernel: GaussianKernel, X, y, coarse) -> np.ndarray:
    """Closed form for the Gaussian kernel: ``g_i = (4 gamma / den) sum_j Gamma_ij x_j``.

    Kept as an independent route to ``g_hat``; it only uses Gram entries.
    """
    X = as_points(X)
    y = as_labels(y)
    theta = kernel.gram(X)
    coarse = np.asarray(coarse, dtype=int)
    yh = np.linalg.solve(theta, y)
    zh = np.zeros_like(y)
    zh[coarse] = np.linalg.solve(theta[np.ix_(coarse, coarse)], y[coarse])
    den = float(np.sum(y * yh))
    r = 1.0 - float(np.sum(y[coarse] * zh[coarse])) / den
    Gamma = (np.diag(np.sum(zh * (theta @ zh), axis=1)) - (zh @ zh.T) * theta
             - (1 - r) * np.diag(np.sum(yh * y, axis=1)) + (1 - r) * (yh @ yh.T) * theta)
    return (4.0 * kernel.gamma / den) * (Gamma @ X)


# --------------------------------------------------------------------------
# step sizes


@dataclass(frozen=True)
class EpsilonRule:
    """How the step ``eps_n`` is chosen from the batch and ``g_hat``.

    ``relative``: ``value * max_i |x_i| / |g_i|``;
    ``relative-strict``: the same with ``min``, which bounds every batch
    point's move by ``value * |x_i|``;
    ``absolute``: ``value / max_i |g_i|``, so no batch point moves more than
    ``value``. With ``decay_start = n0`` the value becomes
    ``value / sqrt(n / n0)`` for ``n >= n0``.
    """

    mode: str
    value: float
    decay_start: Optional[int] = None

    MODES = ("relative", "relative-strict", "absolute")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ConfigError(f"unknown epsilon mode {self.mode!r}")
        if not self.value > 0:
            raise ConfigError("epsilon parameter must be positive")
        if self.decay_start is not None and self.decay_start < 1:
            raise ConfigError("decay start must be >= 1")

    def parameter(self, n: int) -> float:
        if self.decay_start is not None and n >= self.decay_start:
            return self.value / math.sqrt(n / self.decay_start)
        return self.value

    def __call__(self, X, g, n: int) -> float:
        gn = np.linalg.norm(g, axis=1)
        if not np.any(gn > 0):
            return 0.0
        p = self.parameter(n)
        if self.mode == "absolute":
            return p / float(gn.max())
        nz = gn > 0
        ratio = np.linalg.norm(X, axis=1)[nz] / gn[nz]
        return p * float(ratio.max() if self.mode == "relative" else ratio.min())


# --------------------------------------------------------------------------
# layers and the pointwise map


@dataclass
class LayerRecord:
    """One layer: ``x <- x + eps * (K(x, centers) @ coeffs + eta * [x == center] coeffs)``.

    ``centers`` and ``coeffs`` are ``None`` for records kept in streaming mode.
    """

    layer: int
    epsilon: float
    rho: float
    batch: Batch
    centers: Optional[np.ndarray]
    coeffs: Optional[np.ndarray]

    @property
    def stored(self) -> bool:
        return self.centers is not None


def _coincidence_term(centers: np.ndarray, coeffs: np.ndarray, X: np.ndarray) -> Optional[np.ndarray]:
    """``sum_j [X_i == centers_j] coeffs_j``, or None when nothing coincides."""
    lookup: Dict[bytes, List[int]] = {}
    for j, c in enumerate(np.ascontiguousarray(centers)):
        lookup.setdefault(c.tobytes(), []).append(j)
    out = None
    for i, x in enumerate(np.ascontiguousarray(X)):
        hit = lookup.get(x.tobytes())
        if hit:
            if out is None:
                out = np.zeros((len(X), coeffs.shape[1]))
            out[i] = coeffs[hit].sum(axis=0)
    return out


def map_increment(kernel: Kernel, centers, coeffs, X, eta: float = 0.0,
                  cross: Optional[np.ndarray] = None) -> np.ndarray:
    """``G(X)`` for one layer; ``cross`` may pass a precomputed ``K(X, centers)``."""
    X = as_points(X)
    K = kernel.cross(X, centers) if cross is None else cross
    out = K @ coeffs
    if eta:
        extra = _coincidence_term(centers, coeffs, X)
        if extra is not None:
            out += eta * extra
    return out


@dataclass
class FlowConfig:
    n_f: int
    n_c: Optional[int] = None
    epsilon: EpsilonRule = field(default_factory=lambda: EpsilonRule("absolute", 0.2))
    interp_nugget: bool = True
    drop_threshold: Optional[float] = None
    store_records: bool = True
    retries: int = 1

    def __post_init__(self):
        if self.n_f < 2:
            raise ConfigError("N_f must be at least 2")
        if self.n_c is not None and not 1 <= self.n_c < self.n_f:
            raise ConfigError(f"need 1 <= N_c < N_f, got N_c={self.n_c}, N_f={self.n_f}")
        if self.drop_threshold is not None and self.drop_threshold < 0:
            raise ConfigError("drop threshold must be nonnegative")

    def sizes(self, n_active: int):
        n_f = min(self.n_f, n_active)
        if self.n_c is not None and self.n_c < n_f:
            n_c = self.n_c
        else:
            n_c = max(1, n_f // 2)
        if n_active < 2 * n_c:
            raise InsufficientPoints(
                f"{n_active} active points cannot support N_c={n_c}")
        return n_f, n_c


@dataclass
class FlowState:
    positions: np.ndarray
    labels: np.ndarray
    active: np.ndarray
    layer: int = 0
    records: List[LayerRecord] = field(default_factory=list)
    tracked: Optional[np.ndarray] = None

    @classmethod
    def start(cls, points, labels, tracked=None) -> "FlowState":
        X = np.array(as_points(points), dtype=float)
        y = as_labels(labels).copy()
        if len(X) != len(y):
            raise DimensionMismatch(f"{len(X)} points but {len(y)} labels")
        if not np.all(np.isfinite(X)):
            raise ValueError("positions must be finite")
        T = None if tracked is None else np.array(as_points(tracked), dtype=float)
        if T is not None and T.shape[1] != X.shape[1]:
            raise DimensionMismatch("tracked points have the wrong dimension")
        return cls(positions=X, labels=y, active=np.ones(len(X), dtype=bool), tracked=T)

    @property
    def n_points(self) -> int:
        return len(self.positions)

    @property
    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.active)


@dataclass
class StepResult:
    record: LayerRecord
    g_hat: np.ndarray
    terms: RhoTerms
    e2: float


def _interp_solver(kernel: Kernel, system: GramSystem, interp_nugget: bool):
    if interp_nugget or not kernel.nugget:
        return system.solve
    theta = system.theta.copy()
    theta[np.diag_indices_from(theta)] -= kernel.nugget
    L = cholesky(theta)
    return lambda b: cho_solve(L, b)


def _layer(state: FlowState, kernel: Kernel, batch: Batch, config: FlowConfig):
    X_f = state.positions[batch.fine]
    system = GramSystem(kernel.gram(X_f), labels=state.labels[batch.fine])
    terms = rho_terms(system, batch.coarse)
    g = g_hat_from_terms(kernel, X_f, terms)
    coeffs = _interp_solver(kernel, system, config.interp_nugget)(g)
    pred = system.theta[:, batch.coarse] @ cho_solve(terms.coarse_chol, system.labels[batch.coarse])
    e2 = 2.0 * float(np.sum((system.labels - pred) ** 2)) / batch.n_f
    return X_f, system, terms, g, coeffs, e2


def flow_step(state: FlowState, kernel: Kernel, config: FlowConfig,
              rng: np.random.Generator, batch: Optional[Batch] = None) -> StepResult:
    """Advance ``state`` by one layer in place and return what was computed.

    A failed factorization or degenerate batch is retried ``config.retries``
    times with a fresh batch before giving up.
    """
    if batch is None:
        n_f, n_c = config.sizes(int(state.active.sum()))
    attempts = 0
    while True:
        b = batch if batch is not None else sample_batch(state.active_indices, n_f, n_c, rng)
        try:
            X_f, system, terms, g, coeffs, e2 = _layer(state, kernel, b, config)
            break
        except (FactorizationFailure, DegenerateLabels) as exc:
            attempts += 1
            if batch is not None or attempts > config.retries:
                raise FactorizationFailure(
                    f"layer {state.layer}: {exc}; consider a nugget or a drop threshold"
                ) from exc
            log.warning("layer %d: %s; resampling batch", state.layer, exc)
    eps = config.epsilon(X_f, g, state.layer + 1)
    eta = kernel.nugget if config.interp_nugget else 0.0
    if eps != 0.0:
        # batch rows reuse the Gram; the rest of the points need a cross block
        K_f = system.theta.copy()
        K_f[np.diag_indices_from(K_f)] -= kernel.nugget
        others = np.setdiff1d(np.arange(state.n_points), b.fine, assume_unique=True)
        disp = np.empty_like(state.positions)
        disp[b.fine] = map_increment(kernel, X_f, coeffs, X_f, eta, cross=K_f)
        if len(others):
            disp[others] = map_increment(kernel, X_f, coeffs, state.positions[others], eta)
        if state.tracked is not None and len(state.tracked):
            state.tracked = state.tracked + eps * map_increment(kernel, X_f, coeffs, state.tracked, eta)
        state.positions = state.positions + eps * disp
    rec = LayerRecord(
        layer=state.layer, epsilon=eps, rho=terms.rho, batch=b,
        centers=X_f.copy() if config.store_records else None,
        coeffs=coeffs if config.store_records else None,
    )
    state.records.append(rec)
    state.layer += 1
    if config.drop_threshold:
        drop_close_points(state, config.drop_threshold)
    return StepResult(record=rec, g_hat=g, terms=terms, e2=e2)


def drop_close_points(state: FlowState, threshold: float) -> np.ndarray:
    """Deactivate the higher-indexed point of every same-label active pair
    closer than ``threshold``. Dropped points stay advected and are never
    re-admitted."""
    from scipy.spatial import cKDTree

    idx = state.active_indices
    if len(idx) < 2:
        return state.active
    pairs = cKDTree(state.positions[idx]).query_pairs(threshold, p=2.0, output_type="ndarray")
    if len(pairs) == 0:
        return state.active
    pairs = np.sort(pairs, axis=1)
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    dropped = set()
    for a, b in pairs:
        if a in dropped or b in dropped:
            continue
        if np.array_equal(state.labels[idx[a]], state.labels[idx[b]]):
            dropped.add(b)
    state.active[idx[sorted(dropped)]] = False
    return state.active


def evaluate_flow(records: Sequence[LayerRecord], kernel: Kernel, X,
                  interp_nugget: bool = True) -> np.ndarray:
    """``F_n(X)``: replay every stored layer on arbitrary query points."""
    X = np.array(as_points(X), dtype=float)
    eta = kernel.nugget if interp_nugget else 0.0
    for rec in records:
        if not rec.stored:
            raise KernelFlowError(f"layer {rec.layer} was not stored; cannot replay")
        if rec.epsilon:
            X = X + rec.epsilon * map_increment(kernel, rec.centers, rec.coeffs, X, eta)
    return X


# --------------------------------------------------------------------------
# classification and diagnostics


def class_index(y) -> np.ndarray:
    """Integer classes from scalar (sign) or one-hot / score labels."""
    y = as_labels(y)
    if y.shape[1] == 1:
        return (y[:, 0] > 0).astype(int)
    return np.argmax(y, axis=1)


def kernel_predict(kernel: Kernel, centers, values, queries) -> np.ndarray:
    """Kernel interpolant of ``values`` at ``centers`` evaluated at ``queries``.

    Falls back to a pseudo-inverse when the Gram is numerically singular
    (e.g. points that have merged under the flow without a nugget).
    """
    centers = as_points(centers)
    values = as_labels(values)
    theta = kernel.gram(centers)
    try:
        coeffs = cho_solve(cholesky(theta), values)
    except FactorizationFailure:
        log.warning("interpolation Gram is singular; using a pseudo-inverse")
        coeffs = np.linalg.pinv(theta, rcond=1e-12, hermitian=True) @ values
    return map_increment(kernel, centers, coeffs, queries, kernel.nugget)


def predict_classes(kernel: Kernel, centers, onehot, flowed_queries) -> np.ndarray:
    """Argmax of the interpolated one-hot labels; ties go to the lowest class."""
    return np.argmax(kernel_predict(kernel, centers, onehot, flowed_queries), axis=1)


def classify(records: Sequence[LayerRecord], kernel: Kernel, interp_points, interp_onehot,
             queries, interp_nugget: bool = True) -> np.ndarray:
    """Flow ``queries`` through ``records`` and classify against an already
    flowed interpolation set."""
    flowed = evaluate_flow(records, kernel, queries, interp_nugget)
    return predict_classes(kernel, interp_points, interp_onehot, flowed)


@dataclass(frozen=True)
class DistanceMetrics:
    all: float
    in_class: float
    inter_class: float

    @property
    def ratio(self) -> float:
        if not self.in_class > 0 or math.isnan(self.inter_class):
            return float("nan")
        return self.inter_class / self.in_class


def _pair_sum(X: np.ndarray) -> float:
    # sum_{i<j} |x_i - x_j|^2 = n sum |x|^2 - |sum x|^2
    s = X.sum(axis=0)
    return float(len(X) * np.einsum("ij,ij->", X, X) - s @ s)


def distance_metrics(positions, labels, method: str = "exact", n_pairs: int = 100_000,
                     seed: int = 0) -> DistanceMetrics:
    """Mean squared distances over all, same-class and cross-class pairs.

    ``exact`` uses the moment identity over every pair; ``sampled`` averages
    ``n_pairs`` seeded random pairs. Empty pair sets report NaN.
    """
    X = as_points(positions)
    cls = np.asarray(labels).ravel()
    n = len(X)
    if method == "exact":
        # centre first so the moment identity does not lose digits
        X = X - X.mean(axis=0)
        tot, tot_n = _pair_sum(X), n * (n - 1) // 2
        ins, ins_n = 0.0, 0
        for c in np.unique(cls):
            Xc = X[cls == c]
            ins += _pair_sum(Xc)
            ins_n += len(Xc) * (len(Xc) - 1) // 2
        inter, inter_n = tot - ins, tot_n - ins_n
    elif method == "sampled":
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, n_pairs)
        j = rng.integers(0, n - 1, n_pairs)
        j = j + (j >= i)
        d = np.sum((X[i] - X[j]) ** 2, axis=1)
        same = cls[i] == cls[j]
        tot, tot_n = float(d.sum()), n_pairs
        ins, ins_n = float(d[same].sum()), int(same.sum())
        inter, inter_n = tot - ins, tot_n - ins_n
    else:
        raise ValueError(f"unknown method {method!r}")
    mean = lambda s, k: s / k if k else float("nan")
    return DistanceMetrics(mean(tot, tot_n), mean(ins, ins_n), mean(inter, inter_n))


def velocity_fields(records: Sequence[LayerRecord], kernel: Kernel, grid, n: int,
                    window: int = 300, interp_nugget: bool = True):
    """Instantaneous ``G_{n+1}(grid)`` and average ``(F_{n+w} - F_n)(grid) * 10 / w``.

    ``grid`` is taken in the coordinates of layer ``n``; the average field
    advects it through layers ``n .. n + w - 1``.
    """
    grid = as_points(grid)
    if not 0 <= n < len(records):
        raise IndexError(f"layer {n} out of range for {len(records)} records")
    window = min(window, len(records) - n)
    eta = kernel.nugget if interp_nugget else 0.0
    rec = records[n]
    inst = map_increment(kernel, rec.centers, rec.coeffs, grid, eta)
    moved = evaluate_flow(records[n:n + window], kernel, grid, interp_nugget)
    avg = (moved - grid) * (10.0 / window)
    return inst, avg


def velocity_rows(grid, field_values) -> List[tuple]:
    return [tuple(p) + tuple(v) for p, v in zip(np.asarray(grid), np.asarray(field_values))]


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainRecord:
    n: int
    rho: float
    e2: float
    dist_all: float = float("nan")
    dist_in: float = float("nan")
    dist_inter: float = float("nan")
    test_err: Dict[int, float] = field(default_factory=dict)

    def row(self, n_is: Sequence[int]) -> list:
        return [self.n, self.rho, self.e2, self.dist_all, self.dist_in, self.dist_inter] + [
            self.test_err.get(k, float("nan")) for k in n_is]

    @staticmethod
    def header(n_is: Sequence[int]) -> list:
        return ["n", "rho", "e2", "dist_all", "dist_in", "dist_inter"] + [
            f"test_err_{k}" for k in n_is]


@dataclass
class Evaluator:
    """Test-error evaluation on tracked points against fixed interpolation subsets.

    ``subsets[N_I]`` holds training indices; their flowed positions at the
    current layer are the interpolation points.
    """

    kernel: Kernel
    test_classes: np.ndarray
    subsets: Dict[int, np.ndarray]
    n_classes: int

    def errors(self, state: FlowState) -> Dict[int, float]:
        if state.tracked is None:
            raise KernelFlowError("evaluation needs tracked test points")
        onehot_all = np.eye(self.n_classes)[class_index_for(state.labels, self.n_classes)]
        out = {}
        for k, idx in self.subsets.items():
            pred = predict_classes(self.kernel, state.positions[idx], onehot_all[idx], state.tracked)
            out[k] = float(np.mean(pred != self.test_classes))
        return out


def class_index_for(y, n_classes: int) -> np.ndarray:
    y = as_labels(y)
    if y.shape[1] == 1 and n_classes == 2:
        return (y[:, 0] > 0).astype(int)
    return np.argmax(y, axis=1)


def train_flow(state: FlowState, kernel: Kernel, config: FlowConfig, layers: int,
               rng: np.random.Generator, cadence: int = 100, final_window: int = 0,
               distances: bool = True, evaluator: Optional[Evaluator] = None,
               on_record: Optional[Callable[[TrainRecord], None]] = None) -> List[TrainRecord]:
    """Run ``layers`` flow steps, emitting a :class:`TrainRecord` per layer.

    Distances and test errors are measured (before the step) at layers that
    are multiples of ``cadence``, inside the last ``final_window`` layers, and
    once more after the final step.
    """
    if layers < 0:
        raise ConfigError("layer count must be nonnegative")
    classes = class_index(state.labels)
    out: List[TrainRecord] = []

    def measured(n: int) -> bool:
        return n % cadence == 0 or n >= layers - final_window + 1 or n == layers

    def measure(rec: TrainRecord):
        if distances:
            d = distance_metrics(state.positions, classes)
            rec.dist_all, rec.dist_in, rec.dist_inter = d.all, d.in_class, d.inter_class
        if evaluator is not None:
            rec.test_err = evaluator.errors(state)

    for n in range(layers + 1):
        start = state.layer
        if n < layers:
            rec = TrainRecord(n=start, rho=float("nan"), e2=float("nan"))
            if measured(n):
                measure(rec)
            res = flow_step(state, kernel, config, rng)
            rec.rho, rec.e2 = res.terms.rho, res.e2
        else:
            # final layer: rho and e2 on a fresh batch, no update
            n_f, n_c = config.sizes(int(state.active.sum()))
            b = sample_batch(state.active_indices, n_f, n_c, rng)
            try:
                _, _, terms, _, _, e2 = _layer(state, kernel, b, config)
                rec = TrainRecord(n=start, rho=terms.rho, e2=e2)
            except (FactorizationFailure, DegenerateLabels):
                rec = TrainRecord(n=start, rho=float("nan"), e2=float("nan"))
            measure(rec)
        out.append(rec)
        if on_record is not None:
            on_record(rec)
    return out


# --------------------------------------------------------------------------
# checkpoints

_MAGIC = b"KFLW"
_VERSION = 1


def save_checkpoint(path, records: Sequence[LayerRecord], kernel: GaussianKernel,
                    interp_nugget: bool = True) -> None:
    """Little-endian binary layout.

    Header: magic ``KFLW``, u32 version, u32 layer count, u32 d_X, f64 gamma,
    f64 eta, u8 interpolation-nugget flag. Each layer: u32 layer index,
    u32 N_f, u32 N_c, f64 eps, f64 rho, N_f u32 batch indices, N_c u32 coarse
    positions, then centers and coefficients as N_f x d_X f64 row-major.
    """
    if not isinstance(kernel, GaussianKernel):
        raise ConfigError("checkpoints support the Gaussian kernel only")
    if any(not r.stored for r in records):
        raise KernelFlowError("cannot checkpoint streaming-mode records")
    d = records[0].centers.shape[1] if records else 0
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIddB", _VERSION, len(records), d, kernel.gamma,
                             kernel.nugget, int(interp_nugget)))
        for r in records:
            fh.write(struct.pack("<IIIdd", r.layer, r.batch.n_f, r.batch.n_c, r.epsilon, r.rho))
            fh.write(np.asarray(r.batch.fine, dtype="<u4").tobytes())
            fh.write(np.asarray(r.batch.coarse, dtype="<u4").tobytes())
            fh.write(np.asarray(r.centers, dtype="<f8").tobytes())
            fh.write(np.asarray(r.coeffs, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(records, kernel, interp_nugget)``."""
    from .errors import BadMagic, TruncatedFile

    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _MAGIC:
        raise BadMagic(f"{path}: not a flow checkpoint")
    head = struct.calcsize("<IIIddB")
    if len(buf) < 4 + head:
        raise TruncatedFile(f"{path}: truncated header")
    version, n_layers, d, gamma, eta, flag = struct.unpack_from("<IIIddB", buf, 4)
    if version != _VERSION:
        raise BadMagic(f"{path}: unsupported version {version}")
    off = 4 + head
    lay = struct.calcsize("<IIIdd")
    records = []

    def take(count, dtype):
        nonlocal off
        nbytes = count * np.dtype(dtype).itemsize
        if off + nbytes > len(buf):
            raise TruncatedFile(f"{path}: truncated layer data")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += nbytes
        return arr

    for _ in range(n_layers):
        if off + lay > len(buf):
            raise TruncatedFile(f"{path}: truncated layer header")
        layer, n_f, n_c, eps, r = struct.unpack_from("<IIIdd", buf, off)
        off += lay
        fine = take(n_f, "<u4").astype(np.int64)
        coarse = take(n_c, "<u4").astype(np.int64)
        centers = take(n_f * d, "<f8").reshape(n_f, d).copy()
        coeffs = take(n_f * d, "<f8").reshape(n_f, d).copy()
        records.append(LayerRecord(layer, eps, r, Batch(fine=fine, coarse=coarse), centers, coeffs))
    if off != len(buf):
        raise TruncatedFile(f"{path}: {len(buf) - off} trailing bytes")
    return records, GaussianKernel(gamma=gamma, nugget=eta), bool(flag)
