"""Temporal smoothing kernels and their truncated eigenbases."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .exceptions import DegenerateKernelError, InvalidParameterError


class KernelKind(str, Enum):
    GAUSSIAN = "gaussian"
    MATERN_FIVE_HALF = "matern_five_half"
    RATIONAL_QUADRATIC = "rational_quadratic"


@dataclass(frozen=True)
class KernelSpec:
    """Stationary kernel on the integer time grid 1..J.

    ``alpha`` is the rational-quadratic shape and is ignored by the other kinds.
    """

    kind: KernelKind = KernelKind.MATERN_FIVE_HALF
    length_scale: float = 10.0
    variance: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if not self.length_scale > 0:
            raise InvalidParameterError(f"length_scale must be positive, got {self.length_scale}")
        if not self.variance > 0:
            raise InvalidParameterError(f"variance must be positive, got {self.variance}")
        if not self.alpha > 0:
            raise InvalidParameterError(f"alpha must be positive, got {self.alpha}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "length_scale": self.length_scale,
            "variance": self.variance,
            "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(**d)


def kernel_function(spec: KernelSpec, d):
    """Evaluate the kernel at (absolute) distances ``d``."""
    d = np.abs(np.asarray(d, dtype=float))
    l, s2 = spec.length_scale, spec.variance
    if spec.kind is KernelKind.GAUSSIAN:
        return s2 * np.exp(-(d**2) / (2.0 * l**2))
    if spec.kind is KernelKind.MATERN_FIVE_HALF:
        r = np.sqrt(5.0) * d / l
        return s2 * (1.0 + r + 5.0 * d**2 / (3.0 * l**2)) * np.exp(-r)
    a = spec.alpha
    return s2 * (1.0 + d**2 / (2.0 * a * l**2)) ** (-a)


def build_kernel(spec: KernelSpec, J: int) -> np.ndarray:
    """Kernel Gram matrix ``G[x, y] = kappa(x, y)`` over time indices 1..J."""
    if J < 1:
        raise InvalidParameterError(f"J must be >= 1, got {J}")
    t = np.arange(1, J + 1, dtype=float)
    G = kernel_function(spec, t[:, None] - t[None, :])
    return 0.5 * (G + G.T)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive (first index on ties)."""
    if vectors.size == 0:
        return vectors
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


@dataclass(frozen=True)
class TruncatedKernelBasis:
    """Eigenbasis of a kernel matrix with eigenvalues below ``delta`` removed.

    ``Q`` is J x r with orthonormal columns, ``lam`` holds the reciprocals of
    the retained eigenvalues (i.e. the eigenvalues of the truncated
    pseudoinverse), ordered by decreasing eigenvalue of ``G``.
    """

    G: np.ndarray
    Q: np.ndarray
    lam: np.ndarray
    delta: float
    discarded_eigenvalues: np.ndarray = field(repr=False)
    discarded_vectors: np.ndarray = field(repr=False)

    @property
    def rank(self) -> int:
        return self.Q.shape[1]

    @property
    def J(self) -> int:
        return self.Q.shape[0]

    @property
    def eigenvalues(self) -> np.ndarray:
        """Retained eigenvalues of ``G``."""
        return 1.0 / self.lam

    def pinv(self) -> np.ndarray:
        """Dense truncated pseudoinverse ``Q diag(lam) Q^T``."""
        return (self.Q * self.lam) @ self.Q.T

    def energy(self, alpha: np.ndarray) -> np.ndarray:
        """Quadratic form ``alpha^T G~^+ alpha``; rows of a 2-D input are treated separately."""
        u = np.asarray(alpha) @ self.Q
        return (u**2) @ self.lam


def truncated_basis(G: np.ndarray, delta: float = 1e-5) -> TruncatedKernelBasis:
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise InvalidParameterError(f"G must be square, got shape {G.shape}")
    if not delta > 0:
        raise InvalidParameterError(f"delta must be positive, got {delta}")
    w, U = np.linalg.eigh(0.5 * (G + G.T))
    order = np.argsort(-w, kind="stable")
    w, U = w[order], _fix_signs(U[:, order])
    keep = w >= delta
    if not keep.any():
        raise DegenerateKernelError(
            f"all eigenvalues of G are below delta={delta} (max {w.max() if w.size else 'n/a'})"
        )
    return TruncatedKernelBasis(
        G=G,
        Q=U[:, keep],
        lam=1.0 / w[keep],
        delta=float(delta),
        discarded_eigenvalues=w[~keep],
        discarded_vectors=U[:, ~keep],
    )


def basis_for(spec: KernelSpec, J: int, delta: float = 1e-5) -> TruncatedKernelBasis:
    return truncated_basis(build_kernel(spec, J), delta)
