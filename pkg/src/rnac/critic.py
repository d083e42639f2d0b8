"""Robust value estimation: robust linear TD, the exact projected fixed point,
the projected robust Bellman error and fitted robust value evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import planning
from .rmdp import FeatureMaps, LogLinearPolicy, NominalModel, _probs, stationary_distribution
from .uncertainty import (
    TrajectorySampler,
    UncertaintyConfig,
    _cdf,
    _draw,
    check_bias,
    ds_weights,
)

BURN_IN = 1000


class ContractionError(RuntimeError):
    """The projected robust Bellman operator failed to contract."""


@dataclass(frozen=True)
class StepSchedule:
    """Step sizes ``c0 / (k + k0)``."""

    c0: float = 1.0
    k0: float = 100.0

    def __post_init__(self):
        if self.c0 < 0 or self.k0 <= 0:
            raise ValueError("step schedule must produce non-negative finite steps")

    def __call__(self, k: int) -> float:
        return self.c0 / (k + self.k0)


@dataclass
class CriticResult:
    w: np.ndarray
    iterates_logged: list[tuple[int, float]] | None = field(default=None)
    samples_used: int = 0


def projection_matrix(psi: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """nu-weighted projection onto span(psi)."""
    G = psi.T @ (nu[:, None] * psi)
    return psi @ np.linalg.solve(G, psi.T * nu)


def projected_operator(model: NominalModel, policy, cfg: UncertaintyConfig,
                       features: FeatureMaps, nu: np.ndarray | None = None):
    """Closure ``V -> Pi T V`` for ``V`` in span(psi)."""
    pi = _probs(policy)
    nu = stationary_distribution(model, pi) if nu is None else nu
    Pi = projection_matrix(features.psi, nu)

    def op(V):
        return Pi @ planning.robust_bellman_apply(model, pi, V, cfg, features)

    return op


def direct_projected_fixed_point(model: NominalModel, policy, cfg: UncertaintyConfig,
                                 features: FeatureMaps, tol: float = 1e-10,
                                 w0: np.ndarray | None = None, guard: bool = True,
                                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Solve ``psi w = Pi T psi w`` by iterating the projected operator."""
    if cfg.kind == "ipm":
        check_bias(features.psi)
    pi = _probs(policy)
    nu = stationary_distribution(model, pi)
    psi = features.psi
    op = projected_operator(model, pi, cfg, features, nu)
    if guard:
        beta = planning.contraction_estimate(op, psi, nu, trials=50,
                                             rng=rng or np.random.default_rng(0))
        if beta >= 1.0:
            raise ContractionError(f"projected operator is not a contraction (ratio {beta:.4f})")
    G = psi.T @ (nu[:, None] * psi)
    lhs = np.linalg.solve(G, psi.T * nu)
    w = np.zeros(features.d_v) if w0 is None else np.array(w0, dtype=float)
    for _ in range(planning.MAX_ITERS):
        nxt = lhs @ planning.robust_bellman_apply(model, pi, psi @ w, cfg, features)
        if not np.all(np.isfinite(nxt)) or np.max(np.abs(nxt)) > 1e12:
            raise ContractionError("projected fixed-point iteration diverged")
        diff = np.max(np.abs(nxt - w))
        w = nxt
        if diff <= tol:
            return w
    raise ContractionError("projected fixed-point iteration did not converge")


def msprbe(model: NominalModel, policy, cfg: UncertaintyConfig, features: FeatureMaps,
           w, nu: np.ndarray | None = None) -> float:
    """Mean square projected robust Bellman error ``|Pi T V_w - V_w|^2_nu``."""
    pi = _probs(policy)
    nu = stationary_distribution(model, pi) if nu is None else nu
    V = features.psi @ np.asarray(w, dtype=float)
    resid = projected_operator(model, pi, cfg, features, nu)(V) - V
    return float(nu @ resid**2)


def _start_state(sampler: TrajectorySampler, rho) -> int:
    return _draw(_cdf(rho), sampler.uniform())


def _target_fn(cfg: UncertaintyConfig, gamma: float):
    """Returns ``f(V, payload, w) -> gamma * inner`` for the empirical operator."""
    delta = cfg.delta
    if cfg.kind == "ds" and cfg.m == 2:
        def f(V, y, w):
            v1, v2 = V[y[0]], V[y[1]]
            return gamma * (0.5 * (v1 + v2) - delta * abs(v1 - v2))
    elif cfg.kind == "ds":
        wts = ds_weights(cfg.m, delta).tolist()

        def f(V, y, w):
            vals = sorted(V[i] for i in y)
            return gamma * sum(a * b for a, b in zip(wts, vals))
    elif cfg.kind == "ipm":
        def f(V, y, w):
            return gamma * (V[y[0]] - delta * float(np.linalg.norm(w[1:])))
    elif cfg.kind == "none":
        def f(V, y, w):
            return gamma * V[y[0]]
    else:
        raise ValueError("R-contamination has no sample-based operator")
    return f


def rltd(model: NominalModel, policy: LogLinearPolicy, cfg: UncertaintyConfig,
         features: FeatureMaps, K: int, step: StepSchedule | None = None,
         rng: np.random.Generator | None = None, burn_in: int = BURN_IN,
         w_ref: np.ndarray | None = None, log_every: int = 100,
         check_mixing: bool = True) -> CriticResult:
    """Robust linear TD along one trajectory of ``policy`` in the nominal model.

    Starts from ``w = 0`` after ``burn_in`` discarded steps. When ``w_ref`` is
    given, ``(k, |w_k - w_ref|^2)`` is logged every ``log_every`` updates.
    """
    if K < 0:
        raise ValueError("K must be >= 0")
    if cfg.kind == "ipm":
        check_bias(features.psi)
    step = StepSchedule() if step is None else step
    rng = np.random.default_rng(0) if rng is None else rng
    pi = _probs(policy)
    if check_mixing:
        stationary_distribution(model, pi)
    psi = features.psi
    w = np.zeros(features.d_v)
    log = [] if w_ref is not None else None
    if K == 0:
        if log is not None:
            log.append((0, float(np.sum((w - w_ref) ** 2))))
        return CriticResult(w, log, 0)

    target = _target_fn(cfg, model.gamma)
    reward = model.reward.tolist()
    pi_cdf = [_cdf(row) for row in pi]
    sampler = TrajectorySampler(model, cfg, rng)
    s = _start_state(sampler, model.rho)
    for _ in range(burn_in):
        _, s = sampler.transition(s, sampler.action(pi_cdf[s]))

    c0, k0 = step.c0, step.k0
    for k in range(K):
        a = sampler.action(pi_cdf[s])
        y, s_next = sampler.transition(s, a)
        V = psi @ w
        td = reward[s][a] + target(V, y, w) - V[s]
        w += (c0 / (k + k0)) * td * psi[s]
        if log is not None and (k + 1) % log_every == 0:
            log.append((k + 1, float(np.sum((w - w_ref) ** 2))))
        s = s_next
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("RLTD iterates diverged")
    return CriticResult(w, log, K)


def frve(model: NominalModel, policy, cfg: UncertaintyConfig, candidates, K: int,
         rng: np.random.Generator | None = None, g0: np.ndarray | None = None) -> np.ndarray:
    """Fitted robust value evaluation over a finite candidate class (DS only).

    Collects ``K`` transitions, keeps the second half as the dataset and runs
    ``K`` exact argmin fits against the empirical robust targets of the
    previous fit. Starts from ``g0`` (zero by default).
    """
    if cfg.kind != "ds":
        raise ValueError("FRVE is defined for DS uncertainty sets only")
    G = np.atleast_2d(np.asarray(candidates, dtype=float))
    if G.size == 0:
        raise ValueError("candidate list is empty")
    if G.shape[1] != model.n_states:
        raise ValueError("candidates must be value vectors over the states")
    if K < 2:
        raise ValueError("FRVE needs K >= 2")
    rng = np.random.default_rng(0) if rng is None else rng
    pi = _probs(policy)
    stationary_distribution(model, pi)

    sampler = TrajectorySampler(model, cfg, rng)
    pi_cdf = [_cdf(row) for row in pi]
    s = _start_state(sampler, model.rho)
    states, actions, payloads = [], [], []
    for k in range(K):
        a = sampler.action(pi_cdf[s])
        y, s_next = sampler.transition(s, a)
        if k >= K // 2:
            states.append(s)
            actions.append(a)
            payloads.append(y)
        s = s_next
    states = np.array(states)
    Y = np.array(payloads)
    rewards = model.reward[states, np.array(actions)]
    counts = np.bincount(states, minlength=model.n_states).astype(float)
    wts = ds_weights(cfg.m, cfg.delta)

    def fit(g):
        tgt = rewards + model.gamma * (np.sort(g[Y], axis=1) @ wts)
        sums = np.bincount(states, weights=tgt, minlength=model.n_states)
        # sum_i (t_i - g'(s_i))^2 = sum_s n_s g'(s)^2 - 2 g'(s) sum_s t + const
        loss = (G**2) @ counts - 2.0 * (G @ sums)
        return int(np.argmin(loss))

    g = np.zeros(model.n_states) if g0 is None else np.asarray(g0, dtype=float)
    seen: dict[int, int] = {}
    k, idx = 0, None
    while k < K:
        idx = fit(g)
        k += 1
        if idx in seen:
            cycle = k - seen[idx]
            remaining = (K - k) % cycle
            order = sorted(seen, key=seen.get)
            start = order.index(idx)
            idx = order[start + remaining] if remaining else idx
            break
        seen[idx] = k
        g = G[idx]
    return G[idx].copy()
