"""KL-optimal affine-map ensemble update (the LMEKF filter).

The posterior update is posed as a variational problem: among affine maps
x = A xt + b, find the one whose pushforward of the (Gaussian-approximated)
prior has minimal KL divergence to the approximate posterior
``prior * likelihood``.  Expectations of the log-likelihood and its gradient
are Monte-Carlo averages over the prior ensemble; the Gaussian cross-entropy
part is available in closed form.  The problem is solved with fixed-step
gradient descent and a running-best stopping rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ensemble import (
    AffineMap,
    GaussianMoments,
    StateEnsemble,
    apply_affine,
    empirical_moments,
    regularize_cov,
)
from .obsmodel import ObservationModel

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GdConfig:
    """Gradient-descent settings: fixed step, running-best stopping window.

    With ``stabilize`` enabled (the default) ``step_size`` acts as an upper
    bound: before descending, the local curvature along the initial gradient
    direction is estimated with one extra gradient evaluation and the step is
    capped at half its inverse.  The cap keeps the fixed-step iteration inside
    its stability region when the objective is stiff (large ensemble spread,
    state-dependent observation noise) and has no effect when ``step_size``
    is already safe.  Set ``stabilize=False`` to use ``step_size`` verbatim.
    """

    step_size: float = 1e-3
    window: int = 20
    threshold: float = 0.1
    max_iters: int = 1000
    stabilize: bool = True

    def __post_init__(self):
        if self.step_size <= 0 or self.window <= 0 or self.max_iters <= 0:
            raise ValueError("step_size, window and max_iters must be positive")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if self.window >= self.max_iters:
            raise ValueError("window must be smaller than max_iters")


@dataclass(frozen=True)
class GdTrace:
    """Running-best objective values, one entry per iteration (index 0 = init)."""

    iterations_used: int
    best_values: np.ndarray
    final_objective: float

    def csv_rows(self):
        """(iteration, best_value) rows for convergence plots."""
        return [(k, float(v)) for k, v in enumerate(self.best_values)]


class _Problem:
    """Precomputed pieces of the objective for one prior ensemble."""

    def __init__(
        self,
        moments: GaussianMoments,
        ens: StateEnsemble,
        obs: ObservationModel,
        y: np.ndarray,
    ):
        self.mu = moments.mean
        self.X = ens.members
        self.M = ens.size
        self.d = ens.dim
        self.obs = obs
        self.y = np.asarray(y, dtype=float)
        cov = regularize_cov(moments.cov)
        self.P = np.linalg.inv(cov)
        self.P = 0.5 * (self.P + self.P.T)
        _, self.logdet_cov = np.linalg.slogdet(cov)
        # second moment Sigma + mu mu^T under the Gaussian prior approximation
        self.S2 = cov + np.outer(self.mu, self.mu)
        self.entropy_const = 0.5 * (self.d * _LOG_2PI + self.logdet_cov)

    def objective(self, A: np.ndarray, b: np.ndarray) -> float:
        sign, logdet_a = np.linalg.slogdet(A)
        if sign == 0 or not np.isfinite(logdet_a):
            return math.inf
        PA = self.P @ A
        t_quad = 0.5 * np.sum(A * (PA @ self.S2))
        db = b - self.mu
        t_lin = db @ self.P @ (A @ self.mu + 0.5 * db)
        mapped = self.X @ A.T + b
        t_lik = float(np.mean(self.obs.nll(mapped, self.y)))
        return t_quad + t_lin - logdet_a + t_lik + self.entropy_const

    def gradient(self, A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        db = b - self.mu
        Pdb = self.P @ db
        mapped = self.X @ A.T + b
        G = self.obs.nll_gradient(mapped, self.y)
        dA = (
            self.P @ A @ self.S2
            + np.outer(Pdb, self.mu)
            - np.linalg.inv(A).T
            + G.T @ self.X / self.M
        )
        d_b = self.P @ (A @ self.mu) + Pdb + G.mean(axis=0)
        return dA, d_b


def objective(
    A: np.ndarray,
    b: np.ndarray,
    prior_moments: GaussianMoments,
    prior_ens: StateEnsemble,
    obs: ObservationModel,
    y: np.ndarray,
) -> float:
    """Variational objective: Gaussian cross-entropy + log-volume + mean nll.

    The Monte-Carlo average of the negative log-likelihood runs over the
    prior ensemble; the Gaussian terms use the (jittered) prior moments.
    """
    return _Problem(prior_moments, prior_ens, obs, y).objective(
        np.asarray(A, dtype=float), np.asarray(b, dtype=float)
    )


def objective_gradient(
    A: np.ndarray,
    b: np.ndarray,
    prior_moments: GaussianMoments,
    prior_ens: StateEnsemble,
    obs: ObservationModel,
    y: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradient of :func:`objective` in (A, b), same MC ensemble."""
    return _Problem(prior_moments, prior_ens, obs, y).gradient(
        np.asarray(A, dtype=float), np.asarray(b, dtype=float)
    )


_PROBE_LENGTH = 1e-4


def _stable_step(prob: _Problem, A: np.ndarray, b: np.ndarray) -> float:
    """Half the inverse curvature along the gradient direction at (A, b).

    A secant estimate from one extra gradient evaluation a short distance
    down the gradient; returns +inf when the gradient (or the estimate)
    is degenerate so the caller's configured step survives the ``min``.
    """
    gA, gb = prob.gradient(A, b)
    gnorm = math.sqrt(float(np.sum(gA * gA) + np.sum(gb * gb)))
    if not np.isfinite(gnorm) or gnorm < 1e-12:
        return math.inf
    delta = _PROBE_LENGTH / gnorm
    hA, hb = prob.gradient(A - delta * gA, b - delta * gb)
    diff = math.sqrt(float(np.sum((hA - gA) ** 2) + np.sum((hb - gb) ** 2)))
    curvature = diff / (delta * gnorm)
    if not np.isfinite(curvature) or curvature <= 0.0:
        return math.inf
    return 0.5 / curvature


def minimize_kld(
    prior_ens: StateEnsemble,
    obs: ObservationModel,
    y: np.ndarray,
    cfg: GdConfig = GdConfig(),
    init: AffineMap | None = None,
    prior_moments: GaussianMoments | None = None,
) -> tuple[AffineMap, GdTrace]:
    """Fixed-step gradient descent on the variational objective.

    The step is ``cfg.step_size``, optionally capped by a one-time local
    curvature estimate (see :class:`GdConfig`), and then held fixed.
    Tracks the running best objective; stops once the best value has not
    improved by at least ``cfg.threshold`` over the trailing ``cfg.window``
    iterations, or at ``cfg.max_iters``.  Returns the best-seen map, not the
    final iterate.  A step producing a non-invertible (or non-finite) map is
    retried with a halved step, up to 30 halvings.
    """
    if prior_moments is None:
        prior_moments = empirical_moments(prior_ens)
    prob = _Problem(prior_moments, prior_ens, obs, y)
    d = prior_ens.dim
    if init is None:
        init = AffineMap.identity(d)
    A = np.array(init.A, dtype=float)
    b = np.array(init.b, dtype=float)

    f = prob.objective(A, b)
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the initial map")

    step_size = cfg.step_size
    if cfg.stabilize:
        step_size = min(step_size, _stable_step(prob, A, b))

    best = f
    best_A, best_b = A.copy(), b.copy()
    best_values = [best]
    iterations = 0

    for k in range(1, cfg.max_iters + 1):
        dA, db = prob.gradient(A, b)
        step = step_size
        for _ in range(31):
            A_new = A - step * dA
            b_new = b - step * db
            f_new = prob.objective(A_new, b_new)
            if np.isfinite(f_new):
                break
            step *= 0.5
        else:
            raise RuntimeError(
                f"gradient step produced a non-invertible map at iteration {k} "
                "even after 30 step halvings"
            )
        A, b, f = A_new, b_new, f_new
        if f < best:
            best = f
            best_A, best_b = A.copy(), b.copy()
        best_values.append(best)
        iterations = k
        if k >= cfg.window and best_values[k - cfg.window] - best < cfg.threshold:
            break

    trace = GdTrace(iterations, np.asarray(best_values), best)
    return AffineMap(best_A, best_b), trace


def lmekf_update(
    prior_ens: StateEnsemble,
    obs: ObservationModel,
    y: np.ndarray,
    cfg: GdConfig = GdConfig(),
) -> tuple[StateEnsemble, GdTrace]:
    """One analysis step: fit the KL-optimal affine map, push the ensemble."""
    amap, trace = minimize_kld(prior_ens, obs, y, cfg)
    return apply_affine(amap, prior_ens), trace
