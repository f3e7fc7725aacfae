"""Synthetic ground truth, Gaussian sampling and block task scoring."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator

from .estimation import FactorEstimate, SampleSet, covariances_from
from .exceptions import DataError, InvalidParameterError
from .kernels import TruncatedKernelBasis

WAVEFORM_KINDS = ("spline", "sine_mix", "mixed", "square", "constant")
INTERPOLANTS = ("pchip", "natural")
SQUARE_LEVELS = (0.2, 0.9)


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def gen_sparse_orthonormal(P: int, K: int, block_size: int, rng=None, distinct_blocks: bool = False) -> np.ndarray:
    """Sparse column-orthonormal P x K matrix built from orthogonal diagonal blocks.

    Each block is the Q factor of a standard Gaussian square matrix; the last
    block is smaller when ``block_size`` does not divide ``P``. Rows are then
    permuted and K columns drawn without replacement. With
    ``distinct_blocks`` every column comes from a different block, so the
    supports are disjoint.
    """
    rng = _rng(rng)
    if K > P:
        raise InvalidParameterError(f"K={K} exceeds P={P}")
    if block_size < 1:
        raise InvalidParameterError("block_size must be positive")
    block_size = min(block_size, P)
    full = np.zeros((P, P))
    starts = list(range(0, P, block_size))
    owner = np.empty(P, dtype=int)
    for b, start in enumerate(starts):
        stop = min(start + block_size, P)
        m = stop - start
        q, _ = np.linalg.qr(rng.standard_normal((m, m)))
        full[start:stop, start:stop] = q
        owner[start:stop] = b
    full = full[rng.permutation(P)]
    if distinct_blocks:
        if K > len(starts):
            raise InvalidParameterError(f"cannot draw {K} columns from {len(starts)} distinct blocks")
        blocks = rng.choice(len(starts), size=K, replace=False)
        cols = np.array([rng.choice(np.flatnonzero(owner == b)) for b in blocks])
    else:
        cols = rng.choice(P, size=K, replace=False)
    return full[:, cols]


def _spline_row(J, n_knots, rng, interpolant="natural"):
    x = np.sort(rng.uniform(1.0, J, size=n_knots))
    y = rng.uniform(0.0, 1.0, size=n_knots)
    # jitter coincident abscissae apart, interpolants need strictly increasing x
    for i in range(1, n_knots):
        if x[i] <= x[i - 1]:
            x[i] = x[i - 1] + 1e-6
    t = np.arange(1, J + 1, dtype=float)
    if interpolant == "natural":
        cs = CubicSpline(x, y, bc_type="natural")
        # the natural spline continues linearly past its end knots (zero
        # curvature there); CubicSpline would extend the end cubics instead
        out = cs(t)
        slope = cs(x[[0, -1]], 1)
        lo, hi = t < x[0], t > x[-1]
        out[lo] = y[0] + slope[0] * (t[lo] - x[0])
        out[hi] = y[-1] + slope[1] * (t[hi] - x[-1])
        return out
    # PCHIP extrapolates its end cubics too, so hold the end-knot values instead
    return PchipInterpolator(x, y)(np.clip(t, x[0], x[-1]))


def _mixed_row(k, J):
    # sine (slow), ramp, constant, sine (fast); means are kept apart so the
    # time-pooled covariance has a clear eigengap
    t = np.arange(1, J + 1, dtype=float)
    cycle, rep = k % 4, k // 4
    shift = 0.05 * rep
    if cycle == 0:
        return 0.6 - shift + 0.3 * np.sin(2 * np.pi * (rep + 1) * t / J)
    if cycle == 1:
        return 0.05 + shift + 0.7 * (t - 1) / max(J - 1, 1)
    if cycle == 2:
        return np.full(J, 0.85 - shift)
    return 0.2 + shift + 0.15 * np.sin(4 * np.pi * (rep + 1) * t / J + np.pi / 3)


def _sine_row(k, J):
    t = np.arange(1, J + 1, dtype=float)
    mean = 0.75 - 0.5 * (k % 4) / 4
    amp = min(mean - 0.05, 0.95 - mean, 0.25)
    return mean + amp * np.sin(2 * np.pi * (k // 2 + 1) * t / J + k * np.pi / 3)


def _square_row(k, J):
    t = np.arange(J)
    period = max(J // (2 + k % 3), 2)
    phase = (k * period) // 3
    on = ((t + phase) // max(period // 2, 1)) % 2 == 0
    return np.where(on, SQUARE_LEVELS[1], SQUARE_LEVELS[0])


def gen_smooth_weights(
    K: int,
    J: int,
    kind: str = "spline",
    n_knots: int = 6,
    rng=None,
    interpolant: str = "natural",
    floor: float = 0.0,
) -> np.ndarray:
    """K x J nonnegative temporal weights.

    ``spline``: cubic interpolation through ``n_knots`` random knots
    (x ~ U[1, J], y ~ U[0, 1]). ``interpolant="natural"`` is a natural cubic
    spline evaluated on 1..J, which can overshoot far beyond the knot values
    when knots cluster or sit away from the ends; ``"pchip"`` is shape
    preserving, holds the end-knot values outside the knot range and stays
    inside [0, 1]. ``mixed``: slow sine, ramp, constant and fast sine rows in
    rotation. ``sine_mix``: sines of increasing frequency. ``square``:
    two-level switching between ``SQUARE_LEVELS``. ``constant``: rows of 0.5.
    Every kind is clipped at zero and then shifted up by ``floor``.
    """
    rng = _rng(rng)
    if kind not in WAVEFORM_KINDS:
        raise InvalidParameterError(f"unknown waveform kind {kind!r}; expected one of {WAVEFORM_KINDS}")
    if interpolant not in INTERPOLANTS:
        raise InvalidParameterError(f"unknown interpolant {interpolant!r}; expected one of {INTERPOLANTS}")
    if floor < 0:
        raise InvalidParameterError("floor must be nonnegative")
    if kind == "spline":
        if n_knots < 2:
            raise InvalidParameterError("spline weights need at least 2 knots")
        A = np.vstack([_spline_row(J, n_knots, rng, interpolant) for _ in range(K)])
    elif kind == "mixed":
        A = np.vstack([_mixed_row(k, J) for k in range(K)])
    elif kind == "sine_mix":
        A = np.vstack([_sine_row(k, J) for k in range(K)])
    elif kind == "square":
        A = np.vstack([_square_row(k, J) for k in range(K)]).astype(float)
    else:
        A = np.full((K, J), 0.5)
    return np.clip(A, 0.0, None) + floor


@dataclass
class GroundTruth:
    Vstar: np.ndarray
    Astar: np.ndarray
    sigma: float = 0.0
    metadata: dict = field(default_factory=dict)

    @property
    def Z(self) -> FactorEstimate:
        return FactorEstimate(self.Vstar, self.Astar)

    @property
    def P(self) -> int:
        return self.Vstar.shape[0]

    @property
    def K(self) -> int:
        return self.Vstar.shape[1]

    @property
    def J(self) -> int:
        return self.Astar.shape[1]

    def covariances(self) -> np.ndarray:
        return covariances_from(self.Z)

    def c_star(self) -> float:
        return float(np.max(np.linalg.norm(self.covariances(), ord=2, axis=(1, 2))))

    def gamma_star(self, basis: TruncatedKernelBasis) -> float:
        """Largest row energy of ``A*`` under the truncated kernel pseudoinverse."""
        return float(np.max(basis.energy(self.Astar)))

    def sparsity(self) -> int:
        return int(np.max(np.count_nonzero(np.abs(self.Vstar) > 1e-12, axis=0)))


def make_ground_truth(
    P: int,
    K: int,
    J: int,
    *,
    block_size: int,
    waveform: str = "spline",
    n_knots: int = 6,
    sigma: float = 0.0,
    distinct_blocks: bool = False,
    interpolant: str = "natural",
    weight_floor: float = 0.0,
    rng=None,
    seed=None,
) -> GroundTruth:
    rng = _rng(rng if rng is not None else seed)
    V = gen_sparse_orthonormal(P, K, block_size, rng, distinct_blocks=distinct_blocks)
    A = gen_smooth_weights(K, J, waveform, n_knots, rng, interpolant=interpolant, floor=weight_floor)
    meta = {
        "waveform": waveform,
        "n_knots": n_knots,
        "interpolant": interpolant,
        "weight_floor": weight_floor,
        "block_size": block_size,
        "distinct_blocks": distinct_blocks,
        "seed": seed,
    }
    return GroundTruth(V, A, float(sigma), meta)


def sample_gaussian(truth: GroundTruth, N: int, rng=None) -> SampleSet:
    """Draw ``x_j^(n) ~ N(0, Sigma*_j + sigma I)`` via the factor representation."""
    rng = _rng(rng)
    if truth.sigma < 0:
        raise InvalidParameterError("sigma must be nonnegative")
    P, K, J = truth.P, truth.K, truth.J
    gK = rng.standard_normal((N, J, K))
    gP = rng.standard_normal((N, J, P))
    scale = np.sqrt(np.clip(truth.Astar.T, 0.0, None))  # J x K
    x = (gK * scale[None, :, :]) @ truth.Vstar.T + np.sqrt(truth.sigma) * gP
    return SampleSet(x)


def block_task_score(block, grouped_covariances: Sequence, task_names: Sequence[str] | None = None):
    """Score a block of observations against per-task covariance sequences.

    ``block`` is L x P; each entry of ``grouped_covariances`` is L x P x P.
    Returns ``(scores, label)``, the label being the task with the smallest
    ``sum_i ||x_i x_i^T - Sigma_task,i||_F^2`` (first task on ties).
    """
    block = np.asarray(block, dtype=float)
    L = block.shape[0]
    outer = block[:, :, None] * block[:, None, :]
    scores = []
    for cov in grouped_covariances:
        cov = np.asarray(cov, dtype=float)
        if cov.shape[0] != L or cov.shape[1:] != outer.shape[1:]:
            raise DataError(f"block of shape {block.shape} does not match covariances of shape {cov.shape}")
        scores.append(float(np.sum((outer - cov) ** 2)))
    scores = np.array(scores)
    best = int(np.argmin(scores))
    label = task_names[best] if task_names is not None else best
    return scores, label


def group_by_task(Sigmas, task_windows: dict) -> dict:
    """Average covariance estimates across the activation windows of each task.

    ``task_windows`` maps a task name to a list of ``(start, stop)`` index
    pairs of equal length.
    """
    grouped = {}
    for name, windows in task_windows.items():
        lengths = {stop - start for start, stop in windows}
        if len(lengths) != 1:
            raise DataError(f"windows of task {name!r} differ in length")
        grouped[name] = np.mean([Sigmas[start:stop] for start, stop in windows], axis=0)
    return grouped


def classify_blocks(samples: SampleSet, Sigmas, task_windows: dict):
    """Predict the task of every (subject, window) block of ``samples``.

    Returns a list of dicts with subject, window, true task, prediction and scores.
    """
    grouped = group_by_task(Sigmas, task_windows)
    names = list(grouped)
    covs = [grouped[name] for name in names]
    rows = []
    for n in range(samples.N):
        for task, windows in task_windows.items():
            for w, (start, stop) in enumerate(windows):
                scores, label = block_task_score(samples.x[n, start:stop], covs, names)
                rows.append(
                    {"subject": n, "task": task, "window": w, "start": start, "predicted": label, "scores": scores}
                )
    return rows


def two_task_design(P=20, K=4, L=25, baseline=0.1, active=1.0, sigma=0.1, rng=None):
    """Ground truth for a two-task session with disjoint spatial supports.

    Tasks alternate A, B, A, B in windows of length ``L``; the first half of
    the components ramps up smoothly during task A windows, the second half
    during task B windows.
    """
    rng = _rng(rng)
    J = 4 * L
    block = max(P // K, 1)
    V = gen_sparse_orthonormal(P, K, block, rng, distinct_blocks=True)
    t = np.arange(J)
    windows = {"A": [(0, L), (2 * L, 3 * L)], "B": [(L, 2 * L), (3 * L, 4 * L)]}
    A = np.full((K, J), baseline)
    ramp = np.minimum(1.0, np.minimum(t[:L] + 1, L - t[:L]) / max(L / 5, 1))
    bump = 0.5 - 0.5 * np.cos(np.pi * ramp)
    for k in range(K):
        task = "A" if k < K // 2 else "B"
        for start, stop in windows[task]:
            A[k, start:stop] = baseline + (active - baseline) * bump
    truth = GroundTruth(V, A, sigma, {"design": "two_task", "L": L})
    return truth, windows
