"""Two-stage hyperparameter selection: BIC over (s, K), then cross-validated likelihood over (gamma, l)."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .estimation import ConstraintConfig, FactorEstimate, FitOptions, SampleSet, fit, spectral_init
from .exceptions import InvalidParameterError, NumericalError
from .kernels import KernelSpec, basis_for

log = logging.getLogger(__name__)


@dataclass
class TuningGrid:
    """Grid of candidate hyperparameters.

    ``ridge`` is relative: the likelihood adds ``ridge * tr(S_bar) / P`` times
    the identity to every rank-K covariance. With ``sweep_stage1=False`` the
    first stage holds gamma and l at the grid midpoints.
    """

    s_values: Sequence[int]
    K_values: Sequence[int]
    gamma_values: Sequence[float]
    l_values: Sequence[float]
    folds: int = 5
    ridge: float = 1e-3
    sweep_stage1: bool = False

    def __post_init__(self):
        for name in ("s_values", "K_values", "gamma_values", "l_values"):
            vals = list(getattr(self, name))
            if not vals:
                raise InvalidParameterError(f"{name} must be nonempty")
            setattr(self, name, vals)
        if min(self.s_values) < 1 or min(self.K_values) < 1:
            raise InvalidParameterError("s and K candidates must be positive")
        if min(self.gamma_values) <= 0 or min(self.l_values) <= 0:
            raise InvalidParameterError("gamma and l candidates must be positive")
        if self.folds < 2:
            raise InvalidParameterError(f"folds must be >= 2, got {self.folds}")
        if not self.ridge > 0:
            raise InvalidParameterError("ridge must be positive")

    def midpoint(self, name: str):
        vals = sorted(getattr(self, name))
        return vals[(len(vals) - 1) // 2]

    def to_dict(self) -> dict:
        return {
            "s_values": list(self.s_values),
            "K_values": list(self.K_values),
            "gamma_values": list(self.gamma_values),
            "l_values": list(self.l_values),
            "folds": self.folds,
            "ridge": self.ridge,
            "sweep_stage1": self.sweep_stage1,
        }


def ridge_level(samples: SampleSet, relative: float) -> float:
    """Absolute ridge ``relative * tr(S_bar) / P`` with ``S_bar`` the time-pooled covariance."""
    S = samples.S
    return relative * float(np.trace(S.mean(axis=0))) / samples.P


def gaussian_loglik(Z: FactorEstimate, samples: SampleSet, ridge: float) -> float:
    """Zero-mean Gaussian log-likelihood of ``samples`` under ``Sigma_j + ridge I``.

    Uses the Woodbury identity on the rank-K part, so the cost is linear in P.
    Returns ``-inf`` if some covariance fails to be positive definite.
    """
    if not ridge > 0:
        raise InvalidParameterError("ridge must be positive")
    x = samples.x
    N, J, P = x.shape
    if Z.J != J or Z.P != P:
        raise InvalidParameterError(f"estimate of shape P={Z.P}, J={Z.J} does not match samples P={P}, J={J}")
    V, A = Z.V, Z.A
    K = Z.K
    G = V.T @ V
    D = A.T  # J x K
    # M_j = r I + diag(a_j) G
    M = ridge * np.eye(K)[None] + D[:, :, None] * G[None]
    sign, logdet_small = np.linalg.slogdet(M / ridge)  # det(I + diag(a_j) G / r)
    if np.any(sign <= 0):
        return -np.inf
    logdet = P * np.log(ridge) + logdet_small  # per j
    Y = x @ V  # N x J x K
    DY = Y * D[None]
    sol = np.linalg.solve(np.broadcast_to(M[None], (N, J, K, K)), DY[..., None])[..., 0]
    quad = (np.einsum("njp,njp->nj", x, x) - np.einsum("njk,njk->nj", Y, sol)) / ridge
    if np.any(quad < -1e-8 * np.abs(quad).max(initial=1.0)):
        return -np.inf
    total = -0.5 * (N * np.sum(logdet) + np.sum(quad) + N * J * P * np.log(2.0 * np.pi))
    return float(total)


def support_size(Z: FactorEstimate) -> int:
    return int(np.count_nonzero(Z.V))


def bic(Z: FactorEstimate, samples: SampleSet, ridge: float) -> float:
    """``log(N) * sum_k ||v_k||_0 - 2 * loglik``."""
    return float(np.log(samples.N) * support_size(Z) - 2.0 * gaussian_loglik(Z, samples, ridge))


def reference_gamma(samples, K: int, kernel: KernelSpec = None, delta: float = 1e-5, smoothing: float = 1.0) -> float:
    """Data-driven scale for gamma grids.

    Largest energy among the spectral-initialization weight rows after
    kernel ridge smoothing ``G (G + smoothing * variance * I)^-1``.
    """
    kernel = kernel or KernelSpec()
    Z0 = spectral_init(samples, K)
    basis = basis_for(kernel, Z0.J, delta)
    g = basis.eigenvalues
    shrink = g / (g + smoothing * kernel.variance)
    U = (Z0.A @ basis.Q) * shrink
    return float(np.max((U**2) @ basis.lam))


def cv_folds(N: int, folds: int, seed: int = 0) -> list:
    """Partition subjects 0..N-1 into ``folds`` validation sets after a seeded shuffle."""
    if folds > N:
        raise InvalidParameterError(f"folds={folds} exceeds the number of subjects N={N}")
    if folds < 2:
        raise InvalidParameterError("folds must be >= 2")
    perm = np.random.default_rng(seed).permutation(N)
    return [np.sort(chunk) for chunk in np.array_split(perm, folds)]


@dataclass
class TuningResult:
    s: int
    K: int
    gamma: float
    l: float
    stage1: list = field(default_factory=list)
    stage2: list = field(default_factory=list)

    def selected(self) -> dict:
        return {"s": self.s, "K": self.K, "gamma": self.gamma, "l": self.l}

    def config(self, base: ConstraintConfig) -> ConstraintConfig:
        return replace(
            base, K=self.K, s=self.s, gamma=self.gamma, kernel=replace(base.kernel, length_scale=self.l)
        )


def _map(fn, items, n_jobs):
    if n_jobs is None or n_jobs <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))


def tune(
    samples: SampleSet,
    grid: TuningGrid,
    base: Optional[ConstraintConfig] = None,
    opts: Optional[FitOptions] = None,
    seed: int = 0,
    n_jobs: Optional[int] = None,
) -> TuningResult:
    """Select ``(s, K)`` by BIC on all subjects, then ``(gamma, l)`` by cross-validation.

    ``base`` supplies the kernel kind, variance, ``c`` and ``delta``; its own
    ``K``, ``s``, ``gamma`` and length scale are overridden by grid values.
    Cells whose fit fails numerically score ``inf`` BIC / ``-inf`` likelihood.
    Ties go to smaller s, then smaller K, then larger l, then smaller gamma.
    """
    opts = opts or FitOptions()
    if base is None:
        base = ConstraintConfig(K=grid.K_values[0], s=grid.s_values[0], gamma=grid.gamma_values[0])
    if grid.folds > samples.N:
        raise InvalidParameterError(f"folds={grid.folds} exceeds the number of subjects N={samples.N}")
    J = samples.J
    bases = {}

    def basis_of(l):
        if l not in bases:
            bases[l] = basis_for(replace(base.kernel, length_scale=l), J, base.delta)
        return bases[l]

    def make_cfg(s, K, gamma, l):
        return replace(base, K=K, s=s, gamma=gamma, kernel=replace(base.kernel, length_scale=l))

    if grid.sweep_stage1:
        gl = list(itertools.product(grid.gamma_values, grid.l_values))
    else:
        gl = [(grid.midpoint("gamma_values"), grid.midpoint("l_values"))]
    cells1 = [(s, K, g, l) for s in grid.s_values for K in grid.K_values for g, l in gl]
    for l in {c[3] for c in cells1} | set(grid.l_values):
        basis_of(l)
    ridge_all = ridge_level(samples, grid.ridge)

    def stage1_cell(cell):
        s, K, g, l = cell
        try:
            Z, rep = fit(samples, make_cfg(s, K, g, l), opts, basis=basis_of(l))
            score = bic(Z, samples, ridge_all)
            return {"s": s, "K": K, "gamma": g, "l": l, "bic": score, "iterations": rep.iterations}
        except (NumericalError, InvalidParameterError) as exc:
            log.warning("stage-1 cell %s failed: %s", cell, exc)
            return {"s": s, "K": K, "gamma": g, "l": l, "bic": np.inf, "iterations": 0}

    rows1 = _map(stage1_cell, cells1, n_jobs)
    best1 = min(rows1, key=lambda r: (_nan_last(r["bic"]), r["s"], r["K"], -r["l"], r["gamma"]))
    s_sel, K_sel = best1["s"], best1["K"]

    folds = cv_folds(samples.N, grid.folds, seed)
    everyone = np.arange(samples.N)
    splits = []
    for held in folds:
        train = np.setdiff1d(everyone, held)
        tr_set, te_set = samples.subset(train), samples.subset(held)
        splits.append((tr_set, te_set, ridge_level(tr_set, grid.ridge)))

    def stage2_cell(cell):
        g, l = cell
        scores = []
        for tr_set, te_set, ridge in splits:
            try:
                Z, _ = fit(tr_set, make_cfg(s_sel, K_sel, g, l), opts, basis=basis_of(l))
                scores.append(gaussian_loglik(Z, te_set, ridge))
            except (NumericalError, InvalidParameterError) as exc:
                log.warning("stage-2 cell %s failed: %s", cell, exc)
                scores.append(-np.inf)
        return {"gamma": g, "l": l, "mean_loglik": float(np.mean(scores)), "fold_loglik": scores}

    cells2 = list(itertools.product(grid.gamma_values, grid.l_values))
    rows2 = _map(stage2_cell, cells2, n_jobs)
    best2 = min(rows2, key=lambda r: (_nan_last(-r["mean_loglik"]), -r["l"], r["gamma"]))
    return TuningResult(
        s=s_sel, K=K_sel, gamma=float(best2["gamma"]), l=float(best2["l"]), stage1=rows1, stage2=rows2
    )


def _nan_last(x):
    return np.inf if np.isnan(x) else x
