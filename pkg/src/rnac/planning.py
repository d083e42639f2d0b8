"""Exact robust dynamic programming on tabular models.

These routines are the oracles the learning code is checked against:
robust policy evaluation, robust value iteration, robust Q/advantage,
the DS (m=2) worst-case kernel and contraction probes.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .rmdp import FeatureMaps, NominalModel, _probs
from .uncertainty import (
    UncertaintyConfig,
    check_bias,
    ds_expected_min,
    ipm_penalty,
)

MAX_ITERS = 10**6
DEFAULT_TOL = 1e-10


class IterationBudgetError(RuntimeError):
    pass


class OptimalSolution(NamedTuple):
    values: np.ndarray
    policy: np.ndarray
    iterations: int


def span_coefficients(psi: np.ndarray, V: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    """Coefficients ``w`` with ``psi @ w == V``; rejects V outside span(psi)."""
    w, *_ = np.linalg.lstsq(psi, V, rcond=None)
    if np.max(np.abs(psi @ w - V)) > atol * max(1.0, np.max(np.abs(V))):
        raise ValueError("value function is outside span(psi)")
    return w


def robust_q_backup(model: NominalModel, V, cfg: UncertaintyConfig,
                    features: FeatureMaps | None = None) -> np.ndarray:
    """r(s,a) + gamma * inf_{p in P_sa} p^T V for every pair, as [S][A]."""
    V = np.asarray(V, dtype=float)
    P = model.transition
    if cfg.kind == "none":
        inner = P @ V
    elif cfg.kind == "ds":
        inner = ds_expected_min(P, V, cfg)
    elif cfg.kind == "rcontam":
        inner = (1.0 - cfg.delta) * (P @ V) + cfg.delta * V.min()
    elif cfg.kind == "ipm":
        if features is None:
            raise ValueError("IPM backup needs value features")
        check_bias(features.psi)
        w = span_coefficients(features.psi, V)
        inner = P @ V - ipm_penalty(w, cfg.delta)
    else:  # pragma: no cover - guarded by UncertaintyConfig
        raise ValueError(cfg.kind)
    return model.reward + model.gamma * inner


def robust_bellman_apply(model: NominalModel, policy, V, cfg: UncertaintyConfig,
                         features: FeatureMaps | None = None) -> np.ndarray:
    pi = _probs(policy)
    return np.einsum("sa,sa->s", pi, robust_q_backup(model, V, cfg, features))


def _refuse_ipm(cfg: UncertaintyConfig):
    if cfg.kind == "ipm":
        raise ValueError(
            "IPM robust values are only defined on the linear class; "
            "use critic.direct_projected_fixed_point"
        )


def _fixed_point(step: Callable[[np.ndarray], np.ndarray], S: int, gamma: float, tol: float):
    if tol <= 0:
        raise ValueError("tol must be positive")
    stop = tol * (1.0 - gamma) / gamma
    V = np.zeros(S)
    for it in range(1, MAX_ITERS + 1):
        nxt = step(V)
        diff = np.max(np.abs(nxt - V))
        V = nxt
        if diff <= stop:
            return V, it
    raise IterationBudgetError(f"no convergence within {MAX_ITERS} iterations")


def robust_policy_value(model: NominalModel, policy, cfg: UncertaintyConfig,
                        features: FeatureMaps | None = None, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Fixed point of the robust Bellman operator, accurate to ``tol`` in sup-norm."""
    _refuse_ipm(cfg)
    pi = _probs(policy)
    V, _ = _fixed_point(lambda V: robust_bellman_apply(model, pi, V, cfg), model.n_states,
                        model.gamma, tol)
    return V


def robust_value_iteration_optimal(model: NominalModel, cfg: UncertaintyConfig,
                                   features: FeatureMaps | None = None,
                                   tol: float = DEFAULT_TOL) -> OptimalSolution:
    _refuse_ipm(cfg)
    V, iters = _fixed_point(lambda V: robust_q_backup(model, V, cfg).max(axis=1),
                            model.n_states, model.gamma, tol)
    greedy = robust_q_backup(model, V, cfg).argmax(axis=1)
    return OptimalSolution(V, greedy, iters)


def robust_q_advantage(model: NominalModel, policy, V_pi, cfg: UncertaintyConfig,
                       features: FeatureMaps | None = None) -> tuple[np.ndarray, np.ndarray]:
    Q = robust_q_backup(model, V_pi, cfg, features)
    return Q, Q - np.asarray(V_pi)[:, None]


def worst_case_kernel_ds(model: NominalModel, V, cfg: UncertaintyConfig) -> np.ndarray:
    """Stationary kernel attaining the DS (m=2) robust backup at ``V``.

    For a drawn pair the lower-valued state gets weight 1/2 + delta and the
    other 1/2 - delta (1/2 each on exact ties). Marginalizing over the pair
    gives ``kappa(s') = p(s') * (1 + 2 delta * sum_j p(j) sign(V(j) - V(s')))``.
    """
    if cfg.kind != "ds" or cfg.m != 2:
        raise ValueError("worst-case kernel is only implemented for DS with m=2")
    V = np.asarray(V, dtype=float)
    sign = np.sign(V[None, :] - V[:, None])  # sign[i, j] = sign(V(j) - V(i))
    P = model.transition
    tilt = 1.0 + 2.0 * cfg.delta * np.einsum("saj,ij->sai", P, sign)
    return P * tilt


def policy_value(model: NominalModel, policy, kernel: np.ndarray | None = None) -> np.ndarray:
    """Classical evaluation (I - g P^pi)^{-1} r^pi under ``kernel`` (default nominal)."""
    pi = _probs(policy)
    kernel = model.transition if kernel is None else kernel
    P = np.einsum("sa,sat->st", pi, kernel)
    r = np.einsum("sa,sa->s", pi, model.reward)
    return np.linalg.solve(np.eye(model.n_states) - model.gamma * P, r)


def weighted_norm(V, nu) -> float:
    return float(np.sqrt(np.asarray(nu) @ (np.asarray(V) ** 2)))


def contraction_estimate(operator: Callable[[np.ndarray], np.ndarray], psi: np.ndarray,
                         weight: np.ndarray, trials: int = 100,
                         rng: np.random.Generator | None = None) -> float:
    """Largest observed ratio ``|op V - op V'|_nu / |V - V'|_nu`` over random
    pairs ``V = psi @ w`` with standard-normal coefficients."""
    rng = np.random.default_rng(0) if rng is None else rng
    best, used = 0.0, 0
    for _ in range(trials):
        w1, w2 = rng.standard_normal((2, psi.shape[1]))
        V1, V2 = psi @ w1, psi @ w2
        den = weighted_norm(V1 - V2, weight)
        if den <= 1e-14:
            continue
        used += 1
        best = max(best, weighted_norm(operator(V1) - operator(V2), weight) / den)
    if used == 0:
        raise ValueError("every trial pair was degenerate")
    return best


def sup_norm_lipschitz(model: NominalModel, policy, cfg: UncertaintyConfig, trials: int = 100,
                       rng: np.random.Generator | None = None) -> float:
    """Largest observed sup-norm ratio of the unprojected robust operator."""
    rng = np.random.default_rng(0) if rng is None else rng
    pi = _probs(policy)
    best = 0.0
    for _ in range(trials):
        V1, V2 = rng.standard_normal((2, model.n_states))
        num = np.max(np.abs(robust_bellman_apply(model, pi, V1, cfg)
                            - robust_bellman_apply(model, pi, V2, cfg)))
        best = max(best, num / np.max(np.abs(V1 - V2)))
    return best


def ds_coverage_ratio(model: NominalModel, cfg: UncertaintyConfig, V) -> float:
    """max over entries of kappa / p for the DS worst-case kernel at ``V``.

    gamma times this ratio is the coverage constant beta of the
    ``gamma p <= beta p_nominal`` condition.
    """
    kappa = worst_case_kernel_ds(model, V, cfg)
    mask = model.transition > 0
    if np.any(kappa[~mask] > 0):
        return float("inf")
    return float(np.max(kappa[mask] / model.transition[mask]))
