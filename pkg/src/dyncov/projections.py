"""Projection operators for the spatial and temporal constraint sets.

Row-wise operators accept either a single vector or a 2-D array whose rows
are projected independently; the estimator relies on the batched form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateKernelError, InvalidParameterError, RankDeficiencyError, ZeroVectorError
from .kernels import TruncatedKernelBasis

# Ellipsoid outputs are pulled this far inside the boundary so that
# re-projecting them hits the short-circuit branch exactly.
_INNER_MARGIN = 1e-12


def project_sparse_unit(v, s: int) -> np.ndarray:
    """Keep the ``s`` largest-magnitude entries of ``v`` and rescale to unit norm.

    Ties are broken in favour of the lower index.
    """
    v = np.asarray(v, dtype=float)
    P = v.shape[0]
    if not 1 <= s <= P:
        raise InvalidParameterError(f"s must lie in [1, {P}], got {s}")
    order = np.argsort(-np.abs(v), kind="stable")
    out = np.zeros_like(v)
    keep = order[:s]
    out[keep] = v[keep]
    nrm = np.linalg.norm(out)
    if nrm == 0.0 or not np.isfinite(nrm):
        raise ZeroVectorError("vector is zero after hard thresholding")
    return out / nrm


def project_sparse_columns(V, s: int):
    """Column-wise :func:`project_sparse_unit`.

    Returns ``(W, vanished)``; columns that are zero after thresholding are
    flagged in ``vanished`` and left as zeros in ``W``.
    """
    V = np.asarray(V, dtype=float)
    P = V.shape[0]
    if not 1 <= s <= P:
        raise InvalidParameterError(f"s must lie in [1, {P}], got {s}")
    order = np.argsort(-np.abs(V), axis=0, kind="stable")[:s]
    cols = np.arange(V.shape[1])
    W = np.zeros_like(V)
    W[order, cols] = V[order, cols]
    nrm = np.linalg.norm(W, axis=0)
    vanished = ~(np.isfinite(nrm) & (nrm > 0))
    W[:, ~vanished] /= nrm[~vanished]
    W[:, vanished] = 0.0
    return W, vanished


def project_box(alpha, c: float) -> np.ndarray:
    return np.clip(np.asarray(alpha, dtype=float), 0.0, c)


def _secular(u2lam, lam, x):
    # sum_i lam_i u_i^2 / (1 + x lam_i)^2, rowwise; x has shape (m, 1)
    return np.sum(u2lam / (1.0 + x * lam) ** 2, axis=1)


def _solve_secular(u2lam, lam, target, max_iter=100):
    """Multiplier x >= 0 with secular(x) <= target, as close to equality as roundoff allows.

    Newton iteration on ``psi(x) = secular(x)^-1/2 - target^-1/2``, the
    trust-region form of the secular equation: psi is convex, increasing and
    close to linear, so Newton started at 0 climbs monotonically onto the
    root in a handful of steps. The last iterate is nudged onto the feasible side.
    """
    # secular(x) <= sum u_i^2 / (x^2 lam_i) bounds the root from above
    hi = np.maximum(np.sqrt(np.sum(u2lam / lam**2, axis=1) / target), 1e-300)
    x = np.zeros(u2lam.shape[0])
    active = np.ones(x.shape[0], dtype=bool)
    rt = 1.0 / np.sqrt(target)
    for _ in range(max_iter):
        xa = x[active]
        ul = u2lam[active]
        den = 1.0 + xa[:, None] * lam
        h = np.sum(ul / den**2, axis=1)
        dh = -2.0 * np.sum(ul * lam / den**3, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            new = xa + (h**-0.5 - rt) * 2.0 * h**1.5 / dh
        new = np.where(np.isfinite(new), np.clip(new, xa, hi[active]), xa)
        stalled = (h <= target) | (new - xa <= 1e-15 * new)
        x[active] = new
        idx = np.flatnonzero(active)
        active[idx[stalled]] = False
        if not active.any():
            break
    nudge = 1e-15
    for _ in range(60):
        bad = _secular(u2lam, lam, x[:, None]) > target
        if not bad.any():
            break
        x = np.where(bad, np.minimum(x * (1.0 + nudge) + 1e-300, hi), x)
        nudge *= 2.0
    return x


def _quadratic_root(u2lam, lam, gamma):
    """Smallest nonnegative root of the second-order expansion of the secular equation.

    Returns NaN where no nonnegative real root exists.
    """
    a = 3.0 * np.sum(u2lam * lam**2, axis=1)
    b = -2.0 * np.sum(u2lam * lam, axis=1)
    c0 = np.sum(u2lam, axis=1) - gamma
    disc = b * b - 4.0 * a * c0
    ok = (disc >= 0) & (a > 0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    # c0 > 0 and b < 0 here, so both roots are positive when real; the smaller
    # one is where the expansion is accurate. Stable form: 2 c0 / (-b + sqrt(disc)).
    with np.errstate(divide="ignore", invalid="ignore"):
        small = 2.0 * c0 / (-b + sq)
    return np.where(ok & (small >= 0), small, np.nan)


@dataclass
class EllipsoidInfo:
    method: np.ndarray  # per row: 0 inside, 1 quadratic root, 2 exact secular solve
    multiplier: np.ndarray


def project_ellipsoid(alpha, basis: TruncatedKernelBasis, gamma: float, return_info: bool = False):
    """Project onto ``{y in range(Q): y^T G~^+ y <= gamma}``.

    Rows already inside are only mapped onto ``range(Q)``. Otherwise the
    Lagrange multiplier comes from the quadratic expansion of the secular
    equation, with an exact bracketed solve whenever the quadratic has no
    usable root or its point leaves the ellipsoid.
    """
    if basis.rank == 0:
        raise DegenerateKernelError("kernel basis has rank 0")
    if not gamma > 0:
        raise InvalidParameterError(f"gamma must be positive, got {gamma}")
    alpha = np.asarray(alpha, dtype=float)
    single = alpha.ndim == 1
    X = np.atleast_2d(alpha)
    lam = basis.lam[None, :]
    U = X @ basis.Q
    u2lam = U**2 * lam
    energy = u2lam.sum(axis=1)
    target = gamma * (1.0 - _INNER_MARGIN)

    method = np.zeros(X.shape[0], dtype=int)
    mult = np.zeros(X.shape[0])
    out = np.empty_like(U)
    inside = energy <= gamma
    out[inside] = U[inside]
    idx = np.flatnonzero(~inside)
    if idx.size:
        ul, uu = u2lam[idx], U[idx]
        x = _quadratic_root(ul, lam, gamma)
        good = np.isfinite(x)
        if good.any():
            z = uu[good] / (1.0 + x[good, None] * lam)
            good_idx = np.flatnonzero(good)
            feasible = (z**2 * lam).sum(axis=1) <= target
            good[good_idx[~feasible]] = False
        need = ~good
        if need.any():
            x[need] = _solve_secular(ul[need], lam, target)
        out[idx] = uu / (1.0 + x[:, None] * lam)
        method[idx] = np.where(good, 1, 2)
        mult[idx] = x
    Y = out @ basis.Q.T
    Y = Y[0] if single else Y
    if return_info:
        return Y, EllipsoidInfo(method=method, multiplier=mult)
    return Y


def _row_feasible(X, c, gamma, basis, tol):
    box_ok = (X.min(axis=1) >= -tol * c) & (X.max(axis=1) <= c * (1.0 + tol))
    U = X @ basis.Q
    ell_ok = (U**2) @ basis.lam <= gamma * (1.0 + tol)
    resid = np.linalg.norm(X - U @ basis.Q.T, axis=1)
    range_ok = resid <= tol * np.maximum(np.linalg.norm(X, axis=1), 1e-300)
    return box_ok & ell_ok & range_ok


def project_temporal_rows(
    A, c: float, gamma: float, basis: TruncatedKernelBasis, max_alt_iter: int = 100, tol: float = 1e-8
):
    """Alternate box and ellipsoid projections until each row is feasible.

    Returns ``(rows, feasible)``; ``feasible`` flags rows that met the
    tolerance within ``max_alt_iter`` alternations. The result is a point of
    the intersection, not in general its metric projection.
    """
    X = np.array(A, dtype=float, copy=True)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    feasible = _row_feasible(X, c, gamma, basis, tol)
    for _ in range(max_alt_iter):
        todo = np.flatnonzero(~feasible)
        if todo.size == 0:
            break
        Y = project_box(X[todo], c)
        Y = project_ellipsoid(Y, basis, gamma)
        X[todo] = Y
        feasible[todo] = _row_feasible(Y, c, gamma, basis, tol)
    if single:
        return X[0], bool(feasible[0])
    return X, feasible


def project_temporal_row(alpha, c, gamma, basis, max_alt_iter=100, tol=1e-8):
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 1:
        raise InvalidParameterError("project_temporal_row expects a vector; use project_temporal_rows")
    return project_temporal_rows(alpha, c, gamma, basis, max_alt_iter, tol)


def orthonormalize(V):
    """QR factorization ``V = B L`` with a positive diagonal on ``L``."""
    V = np.asarray(V, dtype=float)
    sv = np.linalg.svd(V, compute_uv=False)
    if sv.size == 0 or sv.min() <= 1e-10:
        raise RankDeficiencyError(f"V is rank deficient (smallest singular value {sv.min() if sv.size else 0.0:.3g})")
    B, L = np.linalg.qr(V)
    signs = np.sign(np.diag(L))
    signs[signs == 0] = 1.0
    return B * signs, L * signs[:, None]
