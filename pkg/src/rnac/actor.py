"""Policy improvement: robust Q-NPG, robust NPG with compatible advantage
features, the exact compatible fits and the robust policy supergradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import planning
from .critic import BURN_IN, StepSchedule, _start_state, _target_fn
from .rmdp import (
    FeatureMaps,
    LogLinearPolicy,
    NominalModel,
    stationary_distribution,
    visitation_distribution,
)
from .uncertainty import TrajectorySampler, UncertaintyConfig, _cdf, check_bias

RIDGE = 1e-10


class KinkError(ValueError):
    """Robust value has tied successor values; the supergradient is not unique."""


@dataclass
class ActorResult:
    theta_new: np.ndarray
    u: np.ndarray
    samples_used: int


@dataclass
class QFit:
    u: np.ndarray
    regularized: bool


def q_target(model: NominalModel, w, cfg: UncertaintyConfig, features: FeatureMaps) -> np.ndarray:
    """Q_w(s,a) = r(s,a) + gamma * inf_{p in P_sa} p^T (psi w), as [S][A]."""
    V = features.psi @ np.asarray(w, dtype=float)
    return planning.robust_q_backup(model, V, cfg, features)


def _rollout(model, policy, cfg, features, w, N, rng, burn_in, regress):
    """Shared single-trajectory loop; ``regress(s, a, target, n)`` does the update."""
    if cfg.kind == "ipm":
        check_bias(features.psi)
    pi = policy.probs()
    stationary_distribution(model, pi)
    target = _target_fn(cfg, model.gamma)
    reward = model.reward.tolist()
    V = features.psi @ np.asarray(w, dtype=float)
    pi_cdf = [_cdf(row) for row in pi]
    sampler = TrajectorySampler(model, cfg, rng)
    s = _start_state(sampler, model.rho)
    for _ in range(burn_in):
        _, s = sampler.transition(s, sampler.action(pi_cdf[s]))
    for n in range(N):
        a = sampler.action(pi_cdf[s])
        y, s_next = sampler.transition(s, a)
        regress(s, a, reward[s][a] + target(V, y, w), n)
        s = s_next
    return V


def rqnpg(model: NominalModel, theta, eta: float, w, cfg: UncertaintyConfig,
          features: FeatureMaps, N: int, step: StepSchedule | None = None,
          rng: np.random.Generator | None = None, burn_in: int = BURN_IN) -> ActorResult:
    """Compatible-Q regression on sampled robust targets, then ``theta + eta u``."""
    theta = np.asarray(theta, dtype=float)
    u = np.zeros(features.d_p)
    if N > 0:
        step = StepSchedule() if step is None else step
        rng = np.random.default_rng(0) if rng is None else rng
        policy = LogLinearPolicy(theta, features, model.n_actions)
        phi = features.phi
        nA = model.n_actions
        c0, k0 = step.c0, step.k0

        def regress(s, a, tgt, n):
            f = phi[s * nA + a]
            u[:] += (c0 / (n + k0)) * (tgt - f @ u) * f

        _rollout(model, policy, cfg, features, w, N, rng, burn_in, regress)
        if not np.all(np.isfinite(u)):
            raise FloatingPointError("RQNPG iterates diverged")
    return ActorResult(theta + eta * u, u, max(N, 0))


def rnpg(model: NominalModel, theta, eta: float, w, cfg: UncertaintyConfig,
         features: FeatureMaps, N: int, lam: float = 0.0, step: StepSchedule | None = None,
         rng: np.random.Generator | None = None, burn_in: int = BURN_IN) -> ActorResult:
    """Compatible-advantage regression with features grad log pi and
    ``u <- (1 - lam) u + zeta_n g [T V_w - V_w(s) - g^T u]``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    theta = np.asarray(theta, dtype=float)
    u = np.zeros(features.d_p)
    if N > 0:
        step = StepSchedule() if step is None else step
        rng = np.random.default_rng(0) if rng is None else rng
        policy = LogLinearPolicy(theta, features, model.n_actions)
        grad = policy.score_features()
        V = features.psi @ np.asarray(w, dtype=float)
        c0, k0 = step.c0, step.k0

        def regress(s, a, tgt, n):
            g = grad[s, a]
            u[:] = (1.0 - lam) * u + (c0 / (n + k0)) * (tgt - V[s] - g @ u) * g

        _rollout(model, policy, cfg, features, w, N, rng, burn_in, regress)
        if not np.all(np.isfinite(u)):
            raise FloatingPointError("RNPG iterates diverged")
    return ActorResult(theta + eta * u, u, max(N, 0))


def _weighted_lstsq(X, y, weights, lam=0.0) -> QFit:
    gram = X.T @ (weights[:, None] * X) + lam * np.eye(X.shape[1])
    rhs = X.T @ (weights * y)
    regularized = False
    if np.linalg.cond(gram) > 1e12:
        gram = gram + RIDGE * np.eye(X.shape[1])
        regularized = True
    try:
        return QFit(np.linalg.solve(gram, rhs), regularized)
    except np.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError("singular normal equations after regularization") from e


def direct_compatible_qfit(model: NominalModel, policy: LogLinearPolicy, w,
                           cfg: UncertaintyConfig, features: FeatureMaps) -> QFit:
    """Weighted least squares of Q_w onto phi under nu(s) pi(a|s)."""
    pi = policy.probs()
    nu = stationary_distribution(model, pi)
    Q = q_target(model, w, cfg, features)
    return _weighted_lstsq(features.phi, Q.ravel(), (nu[:, None] * pi).ravel())


def direct_compatible_afit(model: NominalModel, policy: LogLinearPolicy, w,
                           cfg: UncertaintyConfig, features: FeatureMaps,
                           lam: float = 0.0) -> QFit:
    """Minimizer of 1/2 |A_w - Phi^theta u|^2_{nu o pi} + lam/2 |u|^2."""
    pi = policy.probs()
    nu = stationary_distribution(model, pi)
    Q = q_target(model, w, cfg, features)
    A = Q - (features.psi @ np.asarray(w, dtype=float))[:, None]
    X = policy.score_features().reshape(-1, features.d_p)
    return _weighted_lstsq(X, A.ravel(), (nu[:, None] * pi).ravel(), lam)


def npg_update_apply(theta, eta: float, u, features: FeatureMaps, n_actions: int) -> LogLinearPolicy:
    return LogLinearPolicy(np.asarray(theta) + eta * np.asarray(u), features, n_actions)


def multiplicative_weights(pi: np.ndarray, eta: float, u, features: FeatureMaps) -> np.ndarray:
    """pi'(a|s) proportional to pi(a|s) exp(eta phi(s,a)^T u)."""
    z = eta * (features.phi @ np.asarray(u)).reshape(pi.shape)
    z -= z.max(axis=1, keepdims=True)
    new = pi * np.exp(z)
    return new / new.sum(axis=1, keepdims=True)


def has_ties(model: NominalModel, V, atol: float = 1e-9) -> bool:
    """True if some pair of co-supported successor states has tied values."""
    V = np.asarray(V)
    close = np.abs(V[:, None] - V[None, :]) <= atol
    np.fill_diagonal(close, False)
    supp = (model.transition > 0).astype(float)
    co = np.einsum("sai,saj->ij", supp, supp) > 0
    return bool(np.any(close & co))


def policy_supergradient(model: NominalModel, theta, cfg: UncertaintyConfig,
                         features: FeatureMaps, tol: float = 1e-12,
                         strict: bool = True) -> np.ndarray:
    """Gradient of the DS (m=2) robust value at rho via the worst-case kernel.

    ``E_{s ~ d_rho^{pi,kappa}} E_{a ~ pi}[A(s,a) grad log pi(a|s)] / (1 - gamma)``.
    With ``strict``, tied successor values (a kink) raise ``KinkError``.
    """
    if cfg.kind != "ds" or cfg.m != 2:
        raise ValueError("supergradient needs a DS config with m=2")
    policy = LogLinearPolicy(theta, features, model.n_actions)
    pi = policy.probs()
    V = planning.robust_policy_value(model, pi, cfg, tol=tol)
    if strict and cfg.delta > 0 and has_ties(model, V):
        raise KinkError("tied successor values: supergradient is not unique here")
    kappa = planning.worst_case_kernel_ds(model, V, cfg)
    d = visitation_distribution(kappa, pi, model.rho, model.gamma)
    _, A = planning.robust_q_advantage(model, pi, V, cfg)
    grad = policy.score_features()
    return np.einsum("s,sa,sa,sad->d", d, pi, A, grad) / (1.0 - model.gamma)
