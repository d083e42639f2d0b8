"""Named property checks run by ``rnac verify``.

Each check takes a model and a generator and returns ``(passed, detail)``.
Checks are grouped so a subset can be selected on the command line.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import linprog, minimize

from . import actor, critic, planning
from .rmdp import (
    LogLinearPolicy,
    NominalModel,
    policy_matrix,
    random_features,
    stationary_distribution,
    tabular_features,
    visitation_distribution,
)
from .uncertainty import (
    UncertaintyConfig,
    ds_expected_min,
    ds_inner_min_tuple,
    ipm_inner_min,
    sample_transition,
)


@dataclass
class CheckResult:
    group: str
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.group}/{self.name}: {self.detail}"


CHECKS: list[tuple[str, str, Callable]] = []


def check(group: str):
    def deco(fn):
        CHECKS.append((group, fn.__name__, fn))
        return fn

    return deco


def _policy(model, seed=0, scale=1.0):
    f = tabular_features(model.n_states, model.n_actions)
    rng = np.random.default_rng(seed)
    return LogLinearPolicy(scale * rng.standard_normal(f.d_p), f, model.n_actions)


def ds_contraction_radius(gamma: float, m: int = 2) -> float:
    """Largest delta for which the DS set meets the coverage condition."""
    return (1.0 - gamma) / (gamma * m)


def ipm_contraction_radius(psi, nu, gamma: float) -> float:
    lam = np.linalg.eigvalsh(psi.T @ (nu[:, None] * psi)).min()
    return lam * (1.0 - gamma) / gamma


def lp_inner_min(values, delta: float) -> float:
    """Independent LP solve of min alpha.v over the sup-norm ball in the simplex."""
    v = np.asarray(values, dtype=float)
    m = v.size
    lo, hi = max(0.0, 1 / m - delta), min(1.0, 1 / m + delta)
    res = linprog(v, A_eq=np.ones((1, m)), b_eq=[1.0], bounds=[(lo, hi)] * m, method="highs")
    return float(res.fun)


def ipm_numeric_min(p, psi, w, delta: float) -> float:
    """min q.V over {sum q = 1, |psi^T (q - p)|_2 <= delta} by SLSQP."""
    V = psi @ w
    cons = [
        {"type": "eq", "fun": lambda q: q.sum() - 1.0},
        {"type": "ineq", "fun": lambda q: delta**2 - np.sum((psi.T @ (q - p)) ** 2)},
    ]
    res = minimize(lambda q: q @ V, p.copy(), constraints=cons, method="SLSQP",
                   options={"ftol": 1e-14, "maxiter": 500})
    return float(res.fun)


@check("invariants")
def model_invariants(model: NominalModel, rng):
    NominalModel.from_json(model.to_json())
    return True, f"S={model.n_states} A={model.n_actions} gamma={model.gamma}"


@check("invariants")
def stationary_fixed_point(model, rng):
    pi = _policy(model).probs()
    nu = stationary_distribution(model, pi)
    P, _ = policy_matrix(model, pi)
    err = np.abs(nu @ P - nu).sum()
    return err <= 1e-10, f"|nu P - nu|_1 = {err:.2e}"


@check("invariants")
def visitation_series(model, rng):
    pi = _policy(model).probs()
    d = visitation_distribution(model.transition, pi, model.rho, model.gamma)
    P, _ = policy_matrix(model, pi)
    acc, term = np.zeros(model.n_states), model.rho.copy()
    for _ in range(400):
        acc += term
        term = model.gamma * (term @ P)
    err = np.max(np.abs(d - (1 - model.gamma) * acc))
    return err <= 1e-8, f"max deviation from series = {err:.2e}"


@check("invariants")
def softmax_shift_invariance(model, rng):
    pol = _policy(model)
    f = pol.features
    shift = np.repeat(rng.standard_normal(model.n_states), model.n_actions)
    moved = LogLinearPolicy(pol.theta + shift, f, model.n_actions)  # one-hot phi: per-state offset
    err = np.max(np.abs(moved.probs() - pol.probs()))
    return err <= 1e-12, f"max prob change = {err:.1e}"


@check("uncertainty")
def ds_tuple_properties(model, rng):
    worst = 0.0
    for _ in range(200):
        m = int(rng.integers(2, 5))
        v = rng.standard_normal(m)
        d1, d2 = np.sort(rng.uniform(0, 1 - 1 / m, 2))
        a, b = ds_inner_min_tuple(v, d1), ds_inner_min_tuple(v, d2)
        c = rng.standard_normal()
        ok = (v.min() - 1e-12 <= a <= v.mean() + 1e-12 and b <= a + 1e-12
              and abs(ds_inner_min_tuple(v + c, d1) - (a + c)) <= 1e-12)
        if not ok:
            return False, f"property violated at v={v}, delta={d1}"
        worst = max(worst, abs(a - lp_inner_min(v, d1)))
    return worst <= 1e-9, f"max |greedy - LP| = {worst:.1e}"


@check("uncertainty")
def ipm_closed_form(model, rng):
    worst = 0.0
    for _ in range(20):
        S, d = int(rng.integers(3, 7)), int(rng.integers(2, 5))
        d = min(d, S)
        psi = np.column_stack([np.ones(S), rng.standard_normal((S, d - 1))])
        p = rng.dirichlet(np.ones(S))
        w = rng.standard_normal(d)
        delta = rng.uniform(0, 0.2)
        worst = max(worst, abs(ipm_inner_min(p, psi, w, delta) - ipm_numeric_min(p, psi, w, delta)))
    return worst <= 1e-6, f"max |closed form - SLSQP| = {worst:.1e}"


@check("uncertainty")
def ds_unbiased(model, rng):
    cfg = UncertaintyConfig("ds", 0.05, 2)
    V = rng.standard_normal(model.n_states)
    s, a = 0, 0
    n = 20000
    draws = []
    for _ in range(n):
        y = sample_transition(model, s, a, cfg, rng).payload
        draws.append(ds_inner_min_tuple(V[list(y)], cfg.delta))
    draws = np.array(draws)
    exact = ds_expected_min(model.transition[s, a][None], V, cfg)[0]
    z = abs(draws.mean() - exact) / (draws.std(ddof=1) / np.sqrt(n) + 1e-300)
    return z <= 4.0, f"z-score {z:.2f} over {n} draws"


@check("contraction")
def ds_sup_norm_contraction(model, rng):
    cfg = UncertaintyConfig("ds", 0.05, 2)
    ratio = planning.sup_norm_lipschitz(model, _policy(model).probs(), cfg, 100, rng)
    return ratio <= model.gamma + 1e-9, f"sup-norm ratio {ratio:.6f} (gamma {model.gamma})"


@check("contraction")
def ds_projected_contraction(model, rng):
    delta = min(0.9 * ds_contraction_radius(model.gamma), 0.5)
    cfg = UncertaintyConfig("ds", delta, 2)
    f = random_features(int(rng.integers(1 << 30)), model.n_states, model.n_actions,
                        min(3, model.n_states), 2)
    pi = _policy(model).probs()
    nu = stationary_distribution(model, pi)
    op = critic.projected_operator(model, pi, cfg, f, nu)
    beta = planning.contraction_estimate(op, f.psi, nu, 100, rng)
    return beta < 1.0, f"delta={delta:.4f} ratio {beta:.4f}"


@check("contraction")
def ipm_projected_contraction(model, rng):
    f = random_features(int(rng.integers(1 << 30)), model.n_states, model.n_actions,
                        min(3, model.n_states), 2)
    pi = _policy(model).probs()
    nu = stationary_distribution(model, pi)
    delta = 0.9 * ipm_contraction_radius(f.psi, nu, model.gamma)
    cfg = UncertaintyConfig("ipm", delta)
    op = critic.projected_operator(model, pi, cfg, f, nu)
    beta = planning.contraction_estimate(op, f.psi, nu, 100, rng)
    return beta < 1.0, f"delta={delta:.4f} ratio {beta:.4f}"


@check("contraction")
def ds_coverage(model, rng):
    delta = 0.9 * ds_contraction_radius(model.gamma)
    cfg = UncertaintyConfig("ds", min(delta, 0.5), 2)
    beta = model.gamma * (1 + 2 * cfg.delta)
    worst = max(planning.ds_coverage_ratio(model, cfg, rng.standard_normal(model.n_states))
                for _ in range(20))
    return model.gamma * worst <= beta + 1e-12 and beta < 1, (
        f"gamma*max kappa/p = {model.gamma * worst:.4f} <= beta = {beta:.4f}")


@check("planning")
def robust_value_monotone(model, rng):
    pi = _policy(model).probs()
    vals = [planning.robust_policy_value(model, pi, UncertaintyConfig("ds", d, 2))
            for d in (0.0, 0.05, 0.1)]
    ok = all(np.all(b <= a + 1e-9) for a, b in itertools.pairwise(vals))
    nominal = planning.policy_value(model, pi)
    err = np.max(np.abs(vals[0] - nominal))
    return ok and err <= 1e-9, f"monotone={ok}, |V(delta=0) - nominal| = {err:.1e}"


@check("planning")
def worst_case_kernel_consistency(model, rng):
    cfg = UncertaintyConfig("ds", 0.05, 2)
    pi = _policy(model).probs()
    tol = 1e-10
    V = planning.robust_policy_value(model, pi, cfg, tol=tol)
    kappa = planning.worst_case_kernel_ds(model, V, cfg)
    err = np.max(np.abs(planning.policy_value(model, pi, kappa) - V))
    rows = np.max(np.abs(kappa.sum(axis=2) - 1))
    return err <= 10 * tol and rows <= 1e-12, f"|V_kappa - V| = {err:.1e}, row error {rows:.1e}"


@check("planning")
def optimal_dominates(model, rng):
    cfg = UncertaintyConfig("ds", 0.05, 2)
    tol = 1e-10
    v_star = planning.robust_value_iteration_optimal(model, cfg, tol=tol).values
    worst = min(np.min(v_star - planning.robust_policy_value(model, _policy(model, s).probs(), cfg,
                                                             tol=tol))
                for s in range(20))
    return worst >= -2 * tol, f"min(V* - V^pi) = {worst:.2e}"


@check("critic")
def projected_fixed_point_root(model, rng):
    cfg = UncertaintyConfig("ds", 0.05, 2)
    f = tabular_features(model.n_states, model.n_actions)
    pol = _policy(model)
    w = critic.direct_projected_fixed_point(model, pol, cfg, f, tol=1e-12)
    err = critic.msprbe(model, pol, cfg, f, w)
    V = planning.robust_policy_value(model, pol.probs(), cfg, tol=1e-11)
    gap = np.max(np.abs(f.psi @ w - V))
    return err <= 1e-16 and gap <= 1e-9, f"MSPRBE(w_pi) = {err:.1e}, |V_w - V^pi| = {gap:.1e}"


@check("actor")
def centered_scores(model, rng):
    pol = _policy(model)
    g = pol.score_features()
    err = np.max(np.abs(np.einsum("sa,sad->sd", pol.probs(), g)))
    return err <= 1e-12, f"max |E_pi grad log pi| = {err:.1e}"


@check("actor")
def supergradient_fd(model, rng, trials: int = 5, h: float = 1e-5):
    f = tabular_features(model.n_states, model.n_actions)
    worst, done = 0.0, 0
    for delta in (0.0, 0.05):
        cfg = UncertaintyConfig("ds", delta, 2)
        attempts = 0
        while done < trials * (1 + (delta > 0)) and attempts < 50:
            attempts += 1
            theta = rng.standard_normal(f.d_p)
            try:
                g = actor.policy_supergradient(model, theta, cfg, f)
                fd = finite_difference_gradient(model, theta, cfg, f, h)
            except actor.KinkError:
                continue
            if fd is None:
                continue
            worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
            done += 1
    return worst <= 1e-3, f"max relative error {worst:.1e} over {done} points"


def finite_difference_gradient(model, theta, cfg, features, h=1e-5, tol=1e-13):
    """Central differences of V^pi(rho); None if the value ordering moves within +-h."""
    theta = np.asarray(theta, dtype=float)

    def value(th):
        pi = LogLinearPolicy(th, features, model.n_actions).probs()
        return planning.robust_policy_value(model, pi, cfg, tol=tol)

    base = np.sign(_pair_gaps(value(theta)))
    grad = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        vp, vm = value(theta + e), value(theta - e)
        if cfg.delta > 0 and (np.any(np.sign(_pair_gaps(vp)) != base)
                              or np.any(np.sign(_pair_gaps(vm)) != base)):
            return None
        grad[i] = (model.rho @ vp - model.rho @ vm) / (2 * h)
    return grad


def _pair_gaps(V):
    return (V[:, None] - V[None, :])[np.triu_indices(V.size, 1)]


def run_checks(model: NominalModel, only: str | None = None, seed: int = 0) -> list[CheckResult]:
    results = []
    for group, name, fn in CHECKS:
        if only and only not in (group, name):
            continue
        rng = np.random.default_rng([seed, len(results)])
        try:
            passed, detail = fn(model, rng)
        except Exception as e:  # a crashing check is a failing check
            passed, detail = False, f"{type(e).__name__}: {e}"
        results.append(CheckResult(group, name, bool(passed), detail))
    return results
