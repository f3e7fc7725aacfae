"""Spectral initialization and alternating projected gradient descent."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from .exceptions import DataError, DivergenceError, InvalidParameterError, RankDeficiencyError
from .kernels import KernelSpec, TruncatedKernelBasis, basis_for
from .projections import orthonormalize, project_sparse_columns, project_temporal_rows

log = logging.getLogger(__name__)


class SampleSet:
    """Observation tensor of shape (N subjects, J time points, P variables)."""

    def __init__(self, x):
        x = np.array(x, dtype=float, copy=True)
        if x.ndim != 3 or min(x.shape) < 1:
            raise DataError(f"samples must be a nonempty N x J x P array, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError("samples contain non-finite values")
        x.setflags(write=False)
        self.x = x

    @property
    def N(self) -> int:
        return self.x.shape[0]

    @property
    def J(self) -> int:
        return self.x.shape[1]

    @property
    def P(self) -> int:
        return self.x.shape[2]

    @cached_property
    def S(self) -> np.ndarray:
        S = sample_covariances(self)
        S.setflags(write=False)
        return S

    def subset(self, subjects) -> "SampleSet":
        return SampleSet(self.x[np.asarray(subjects)])


def sample_covariances(samples) -> np.ndarray:
    """Per-time second-moment matrices ``S_j = N^-1 sum_n x_j^(n) x_j^(n)T``, shape (J, P, P)."""
    x = samples.x if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float)
    N = x.shape[0]
    xt = np.transpose(x, (1, 2, 0))  # J x P x N
    S = xt @ np.transpose(xt, (0, 2, 1)) / N
    return 0.5 * (S + np.transpose(S, (0, 2, 1)))


@dataclass
class FactorEstimate:
    """Spatial factors ``V`` (P x K) and temporal weights ``A`` (K x J)."""

    V: np.ndarray
    A: np.ndarray

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=float)
        self.A = np.asarray(self.A, dtype=float)
        if self.V.ndim != 2 or self.A.ndim != 2 or self.V.shape[1] != self.A.shape[0]:
            raise DataError(f"incompatible factor shapes V{self.V.shape}, A{self.A.shape}")

    @property
    def P(self) -> int:
        return self.V.shape[0]

    @property
    def K(self) -> int:
        return self.V.shape[1]

    @property
    def J(self) -> int:
        return self.A.shape[1]

    def Z(self, j: int) -> np.ndarray:
        """Stacked (P + K) x K block ``(V ; diag(a_j))``."""
        return np.vstack([self.V, np.diag(self.A[:, j])])

    def covariances(self) -> np.ndarray:
        return covariances_from(self)

    def copy(self) -> "FactorEstimate":
        return FactorEstimate(self.V.copy(), self.A.copy())


def covariances_from(Z: FactorEstimate) -> np.ndarray:
    """``Sigma_j = V diag(a_j) V^T`` for every j, shape (J, P, P)."""
    VA = Z.V[None, :, :] * Z.A.T[:, None, :]
    return VA @ Z.V.T[None, :, :]


@dataclass
class ConstraintConfig:
    """Feasible-set parameters. ``c=None`` picks 1.1 max_j ||S_j||_2 at fit time."""

    K: int
    s: int
    gamma: float
    c: Optional[float] = None
    delta: float = 1e-5
    kernel: KernelSpec = field(default_factory=KernelSpec)

    def __post_init__(self):
        if isinstance(self.kernel, dict):
            self.kernel = KernelSpec.from_dict(self.kernel)
        if self.K < 1 or self.s < 1:
            raise InvalidParameterError(f"K and s must be positive, got K={self.K}, s={self.s}")
        if not self.gamma > 0:
            raise InvalidParameterError(f"gamma must be positive, got {self.gamma}")
        if self.c is not None and not self.c > 0:
            raise InvalidParameterError(f"c must be positive, got {self.c}")
        if not self.delta > 0:
            raise InvalidParameterError(f"delta must be positive, got {self.delta}")

    def resolve_c(self, S: np.ndarray) -> float:
        if self.c is not None:
            return float(self.c)
        return 1.1 * float(np.max(np.linalg.norm(S, ord=2, axis=(1, 2))))

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "s": self.s,
            "gamma": self.gamma,
            "c": self.c,
            "delta": self.delta,
            "kernel": self.kernel.to_dict(),
        }


@dataclass
class FitOptions:
    step_multiplier: float = 1.0
    epsilon_stop: float = 1e-7
    max_iter: int = 1000
    use_qr: bool = False
    max_alt_iter: int = 100
    proj_tol: float = 1e-8
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.step_multiplier <= 1:
            raise InvalidParameterError(f"step_multiplier must lie in (0, 1], got {self.step_multiplier}")
        if not self.epsilon_stop > 0:
            raise InvalidParameterError("epsilon_stop must be positive")
        if self.max_iter < 1:
            raise InvalidParameterError("max_iter must be >= 1")


@dataclass
class FitReport:
    objective_trace: list
    dist_trace: Optional[list]
    iterations: int
    step_size: float
    wall_time: float
    converged: bool
    use_qr: bool
    c: float
    kernel_rank: int
    zero_column_events: int = 0
    infeasible_row_events: int = 0

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "step_size": self.step_size,
            "wall_time": self.wall_time,
            "converged": self.converged,
            "use_qr": self.use_qr,
            "c": self.c,
            "kernel_rank": self.kernel_rank,
            "zero_column_events": self.zero_column_events,
            "infeasible_row_events": self.infeasible_row_events,
            "initial_objective": self.objective_trace[0],
            "final_objective": self.objective_trace[-1],
            "final_dist_squared": None if self.dist_trace is None else self.dist_trace[-1],
        }


def _as_cov(S):
    return S.S if isinstance(S, SampleSet) else np.asarray(S, dtype=float)


def spectral_init(samples, K: int) -> FactorEstimate:
    """Top-K eigenvectors of the time-pooled covariance, weights by quadratic forms."""
    S = _as_cov(samples)
    J, P, _ = S.shape
    if not 1 <= K <= min(P, J):
        raise InvalidParameterError(f"K must lie in [1, min(P, J)] = [1, {min(P, J)}], got {K}")
    M = S.mean(axis=0)
    w, U = np.linalg.eigh(0.5 * (M + M.T))
    order = np.argsort(-w, kind="stable")[:K]
    w, V = w[order], U[:, order]
    if w[-1] <= 1e-12 * max(w[0], 1e-300):
        raise RankDeficiencyError(f"pooled covariance has fewer than {K} positive eigenvalues")
    idx = np.argmax(np.abs(V), axis=0)
    V = V * np.sign(V[idx, np.arange(K)])
    A = np.einsum("pk,jpq,qk->kj", V, S, V)
    return FactorEstimate(V, A)


def objective(Z: FactorEstimate, S) -> float:
    """``(1/J) sum_j 0.5 ||S_j - V diag(a_j) V^T||_F^2``."""
    S = _as_cov(S)
    R = S - covariances_from(Z)
    return float(0.5 * np.sum(R**2) / S.shape[0])


def _residual_times_v(V, A, S, SV=None):
    # (Sigma_j - S_j) V for every j, via Sigma_j V = (V diag a_j)(V^T V)
    if SV is None:
        SV = S @ V
    G = V.T @ V
    VA = V[None, :, :] * A.T[:, None, :]
    return VA @ G - SV, SV, G


def grad_v(Z: FactorEstimate, S) -> np.ndarray:
    S = _as_cov(S)
    RV, _, _ = _residual_times_v(Z.V, Z.A, S)
    return (2.0 / S.shape[0]) * np.sum(RV * Z.A.T[:, None, :], axis=0)


def grad_a(Z: FactorEstimate, S) -> np.ndarray:
    S = _as_cov(S)
    RV, _, _ = _residual_times_v(Z.V, Z.A, S)
    W = np.einsum("pk,jpk->kj", Z.V, RV)
    return W / S.shape[0]


def default_step_size(Z0: FactorEstimate, step_multiplier: float = 1.0) -> float:
    """Largest step allowed by the initialization: ``min_j sqrt(J) / (64 ||Z0_j||_2^2)``."""
    G = Z0.V.T @ Z0.V
    # ||Z_j||_2^2 = lambda_max(V^T V + diag(a_j)^2)
    M = G[None, :, :] + np.einsum("kj,kl->jkl", Z0.A**2, np.eye(Z0.K))
    norms2 = np.linalg.eigvalsh(M)[:, -1]
    return float(step_multiplier * np.min(np.sqrt(Z0.J) / (64.0 * norms2)))


class _Workspace:
    """Fixed per-fit quantities reused by every iteration."""

    def __init__(self, S):
        self.S = S
        self.J, self.P, _ = S.shape
        self.S_flat = np.ascontiguousarray(S).reshape(self.J * self.P, self.P)
        self.S_sq = float(np.sum(S**2))

    def evaluate(self, V, A):
        """Objective plus both gradients at (V, A) with one pass over S."""
        J, P = self.J, self.P
        K = V.shape[1]
        SV = (self.S_flat @ V).reshape(J, P, K)
        qS = np.einsum("pk,jpk->kj", V, SV)  # v_k^T S_j v_k
        G = V.T @ V
        G2 = G**2
        f = 0.5 * (self.S_sq - 2.0 * np.sum(A * qS) + np.sum((G2 @ A) * A)) / J
        gA = (G2 @ A - qS) / J
        # sum_j Sigma_j V diag(a_j) = V (G o A A^T)
        SVA = np.einsum("jpk,kj->pk", SV, A)
        gV = (2.0 / J) * (V @ (G * (A @ A.T)) - SVA)
        return f, gV, gA


def fit(
    samples,
    cfg: ConstraintConfig,
    opts: Optional[FitOptions] = None,
    truth: Optional[FactorEstimate] = None,
    basis: Optional[TruncatedKernelBasis] = None,
    init: Optional[FactorEstimate] = None,
    callback: Optional[Callable[[int, FactorEstimate], None]] = None,
):
    """Estimate (V, A) by alternating projected gradient descent.

    Both gradients are evaluated at the previous iterate; the A block is
    updated first, then V with its step scaled down by J. ``init`` overrides
    the spectral initialization (used to test fixed points). ``callback`` is
    called as ``callback(i, Z_i)`` after every iteration.
    """
    opts = opts or FitOptions()
    t0 = time.perf_counter()
    S = _as_cov(samples)
    J, P, _ = S.shape
    if cfg.K > min(P, J) or cfg.s > P:
        raise InvalidParameterError(f"K={cfg.K}, s={cfg.s} incompatible with P={P}, J={J}")
    if basis is None:
        basis = basis_for(cfg.kernel, J, cfg.delta)
    c = cfg.resolve_c(S)

    Z = init.copy() if init is not None else spectral_init(S, cfg.K)
    V, A = Z.V, Z.A
    eta = default_step_size(Z, opts.step_multiplier)
    ws = _Workspace(S)

    f, gV, gA = ws.evaluate(V, A)
    if not np.isfinite(f):
        raise DivergenceError(0, f)
    obj_trace = [f]
    dist_trace = None
    if truth is not None:
        from .metrics import dist_squared

        dist_trace = [dist_squared(Z, truth)]
    threshold = opts.epsilon_stop * (1.0 + abs(obj_trace[0]))

    zero_events = 0
    infeasible_events = 0
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        A_new, feasible = project_temporal_rows(A - eta * gA, c, cfg.gamma, basis, opts.max_alt_iter, opts.proj_tol)
        infeasible_events += int(np.count_nonzero(~feasible))

        V_hat = V - (eta / J) * gV
        V_new, vanished = project_sparse_columns(V_hat, cfg.s)
        if vanished.any():
            zero_events += int(np.count_nonzero(vanished))
            for k in np.flatnonzero(vanished):
                log.warning("column %d vanished at iteration %d; keeping previous column", k, it)
            V_new[:, vanished] = V[:, vanished]
        if opts.use_qr:
            V_new, _ = orthonormalize(V_new)
        V, A = V_new, A_new

        f, gV, gA = ws.evaluate(V, A)
        if not np.isfinite(f):
            raise DivergenceError(it, f)
        obj_trace.append(f)
        if callback is not None:
            callback(it, FactorEstimate(V.copy(), A.copy()))
        if dist_trace is not None:
            dist_trace.append(dist_squared(FactorEstimate(V, A), truth))
        if abs(obj_trace[-1] - obj_trace[-2]) <= threshold:
            converged = True
            break

    report = FitReport(
        objective_trace=obj_trace,
        dist_trace=dist_trace,
        iterations=it,
        step_size=eta,
        wall_time=time.perf_counter() - t0,
        converged=converged,
        use_qr=opts.use_qr,
        c=c,
        kernel_rank=basis.rank,
        zero_column_events=zero_events,
        infeasible_row_events=infeasible_events,
    )
    return FactorEstimate(V, A), report
