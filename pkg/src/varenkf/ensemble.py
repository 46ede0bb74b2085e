"""Ensemble containers, empirical Gaussian statistics and affine maps.

Every filter in this package represents a filtering distribution by an
ensemble of M state vectors and, where a Gaussian approximation is needed,
by the empirical mean and (unbiased) sample covariance of that ensemble.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Relative jitter added to a covariance before it is inverted; keeps the
# M < d (rank-deficient) case usable.
JITTER_REL = 1e-8


@dataclass(frozen=True)
class StateEnsemble:
    """A set of M equally weighted state vectors, stored as an (M, d) array."""

    members: np.ndarray

    def __post_init__(self):
        members = np.asarray(self.members, dtype=float)
        if members.ndim != 2:
            raise ValueError(f"members must be (M, d), got shape {members.shape}")
        if members.shape[0] < 2:
            raise ValueError("need at least 2 members for sample statistics")
        members.setflags(write=False)
        object.__setattr__(self, "members", members)

    @property
    def size(self) -> int:
        return self.members.shape[0]

    @property
    def dim(self) -> int:
        return self.members.shape[1]


@dataclass(frozen=True)
class GaussianMoments:
    """Mean vector and symmetric PSD covariance of a Gaussian approximation.

    The covariance is symmetrized on construction so downstream symmetric
    solves never see floating-point asymmetry.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if mean.ndim != 1:
            raise ValueError("mean must be a vector")
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ValueError(f"cov must be ({d}, {d}), got {cov.shape}")
        cov = 0.5 * (cov + cov.T)
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class AffineMap:
    """The map x -> A x + b with A a d x d matrix and b a d-vector."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        if b.shape != (A.shape[0],):
            raise ValueError("b must be a d-vector matching A")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    @classmethod
    def identity(cls, d: int) -> "AffineMap":
        return cls(np.eye(d), np.zeros(d))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.A.T + self.b


def empirical_moments(ens: StateEnsemble) -> GaussianMoments:
    """Sample mean and unbiased (1/(M-1)) sample covariance of the ensemble."""
    X = ens.members
    mean = X.mean(axis=0)
    dev = X - mean
    cov = dev.T @ dev / (ens.size - 1)
    return GaussianMoments(mean, cov)


def regularize_cov(cov: np.ndarray) -> np.ndarray:
    """Add relative jitter to the diagonal so the covariance can be inverted."""
    d = cov.shape[0]
    lam = JITTER_REL * np.trace(cov) / d
    if lam <= 0.0:
        lam = JITTER_REL
    return cov + lam * np.eye(d)


def sample_gaussian(
    moments: GaussianMoments, n: int, rng: np.random.Generator
) -> StateEnsemble:
    """Draw n i.i.d. samples from N(mean, cov) via a symmetric factor.

    Negative eigenvalues (floating-point noise in a PSD matrix) are clipped
    at zero, so degenerate covariances are allowed.
    """
    w, V = np.linalg.eigh(moments.cov)
    factor = V * np.sqrt(np.clip(w, 0.0, None))
    z = rng.standard_normal((n, moments.dim))
    return StateEnsemble(moments.mean + z @ factor.T)


def apply_affine(amap: AffineMap, ens: StateEnsemble) -> StateEnsemble:
    """Push every ensemble member through x -> A x + b."""
    if amap.dim != ens.dim:
        raise ValueError(f"map dimension {amap.dim} != ensemble dimension {ens.dim}")
    return StateEnsemble(amap(ens.members))


def gaussian_kld(p: GaussianMoments, q: GaussianMoments) -> float:
    """Closed-form KL divergence KL(N_p || N_q) between nondegenerate Gaussians."""
    d = p.dim
    if q.dim != d:
        raise ValueError("dimension mismatch")
    sign_q, logdet_q = np.linalg.slogdet(q.cov)
    sign_p, logdet_p = np.linalg.slogdet(p.cov)
    if sign_q <= 0 or sign_p <= 0:
        raise np.linalg.LinAlgError("covariances must be positive-definite")
    q_inv = np.linalg.inv(q.cov)
    diff = q.mean - p.mean
    return 0.5 * (
        np.trace(q_inv @ p.cov) + diff @ q_inv @ diff - d + logdet_q - logdet_p
    )
