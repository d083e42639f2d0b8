import itertools

import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog
from scipy.stats import binom

from rnac.rmdp import make_rng
from rnac.uncertainty import (
    TrajectorySampler,
    TransitionSample,
    UncertaintyConfig,
    ds_expected_min,
    ds_inner_min_exact,
    ds_inner_min_tuple,
    ds_weights,
    empirical_bellman,
    empirical_bellman_ds,
    empirical_bellman_ipm,
    ipm_inner_min,
    r_contamination_inner_min,
    sample_transition,
)


def lp_oracle(v, delta):
    """min alpha.v over the simplex intersected with the sup-norm ball at uniform."""
    m = len(v)
    res = linprog(v, A_eq=np.ones((1, m)), b_eq=[1.0],
                  bounds=[(max(0, 1 / m - delta), min(1, 1 / m + delta))] * m, method="highs",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    assert res.success, res.message
    return res.fun


def cvx_ipm(p, psi, w, delta):
    q = cp.Variable(len(p))
    prob = cp.Problem(cp.Minimize(q @ (psi @ w)),
                      [cp.sum(q) == 1, cp.norm(psi.T @ (q - p), 2) <= delta])
    prob.solve(solver=cp.CLARABEL)
    return prob.value


# --- closed-form examples -------------------------------------------------

def test_ds_pair_example():
    assert ds_inner_min_tuple([1.0, 3.0], 1 / 6) == pytest.approx(5 / 3, abs=1e-12)


def test_ds_constant_tuple():
    assert ds_inner_min_tuple([2.0, 2.0, 2.0], 0.3) == pytest.approx(2.0, abs=1e-12)


def test_ds_triple_example():
    assert ds_inner_min_tuple([0.0, 1.0, 2.0], 0.2) == pytest.approx(0.6, abs=1e-12)


def test_ds_delta_zero_is_mean():
    v = [0.3, -1.0, 4.0, 2.5]
    assert ds_inner_min_tuple(v, 0.0) == pytest.approx(np.mean(v), abs=1e-12)


def test_ds_max_radius_is_min():
    v = [0.3, -1.0, 4.0]
    assert ds_inner_min_tuple(v, 2 / 3) == pytest.approx(-1.0, abs=1e-12)


def test_ds_rejects_bad_inputs():
    with pytest.raises(ValueError):
        ds_inner_min_tuple([], 0.1)
    with pytest.raises(ValueError):
        ds_inner_min_tuple([1.0, 2.0], 0.6)
    with pytest.raises(ValueError):
        ds_weights(3, -0.1)


def test_ds_weights_are_feasible():
    for m in range(2, 7):
        for delta in np.linspace(0, 1 - 1 / m, 7):
            w = ds_weights(m, delta)
            assert w.sum() == pytest.approx(1.0)
            assert np.all(np.abs(w - 1 / m) <= delta + 1e-12)
            assert np.all(np.diff(w) <= 1e-15)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 6).flatmap(
    # boxes narrower than the solver tolerance (0 < delta < 1e-6) make HiGHS fail
    lambda m: st.tuples(st.lists(st.floats(-10, 10), min_size=m, max_size=m),
                        st.just(0.0) | st.floats(1e-6, 1 - 1 / m))))
def test_ds_matches_lp(case):
    v, delta = case
    # the LP objective inherits the solver's feasibility slack times |v|;
    # the vertex test below checks to 1e-12
    scale = len(v) * (1.0 + max(abs(x) for x in v))
    assert ds_inner_min_tuple(v, delta) == pytest.approx(lp_oracle(v, delta), abs=1e-9 * scale)


def test_ds_matches_vertex_enumeration():
    rng = np.random.default_rng(4)
    for _ in range(50):
        m = int(rng.integers(2, 5))
        v = rng.normal(size=m)
        delta = rng.uniform(0, 1 - 1 / m)
        lo, hi = max(0, 1 / m - delta), min(1, 1 / m + delta)
        best = np.inf
        # vertices: all but one coordinate at a bound, the free one fixed by the sum
        for free in range(m):
            for bounds in itertools.product([lo, hi], repeat=m - 1):
                a = np.empty(m)
                a[np.arange(m) != free] = bounds
                a[free] = 1 - sum(bounds)
                if lo - 1e-12 <= a[free] <= hi + 1e-12:
                    best = min(best, a @ v)
        assert ds_inner_min_tuple(v, delta) == pytest.approx(best, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.floats(0, 0.6),
       st.floats(0, 0.6), st.floats(-5, 5))
def test_ds_properties(v, d1, d2, c):
    lo, hi = min(d1, d2), max(d1, d2)
    val = ds_inner_min_tuple(v, lo)
    assert min(v) - 1e-9 <= val <= np.mean(v) + 1e-9
    assert ds_inner_min_tuple(v, hi) <= val + 1e-9
    assert ds_inner_min_tuple(np.add(v, c), lo) == pytest.approx(val + c, abs=1e-9)


# --- exact expectation ----------------------------------------------------

def test_ds_exact_pair_example():
    cfg = UncertaintyConfig("ds", 1 / 6, 2)
    assert ds_inner_min_exact([0.5, 0.5], [1.0, 3.0], cfg) == pytest.approx(1.8333333333333333,
                                                                             abs=1e-12)


def test_ds_exact_reductions():
    p, V = np.array([0.2, 0.5, 0.3]), np.array([1.0, -2.0, 0.5])
    assert ds_inner_min_exact(p, V, UncertaintyConfig("ds", 0.0, 3)) == pytest.approx(p @ V)
    assert ds_inner_min_exact([0, 1, 0], V, UncertaintyConfig("ds", 0.4, 2)) == pytest.approx(-2.0)


def test_ds_exact_enumeration_matches_loop():
    rng = np.random.default_rng(1)
    p, V = rng.dirichlet(np.ones(4)), rng.normal(size=4)
    for m in (2, 3):
        cfg = UncertaintyConfig("ds", 0.15, m)
        ref = sum(np.prod(p[list(t)]) * ds_inner_min_tuple(V[list(t)], 0.15)
                  for t in itertools.product(range(4), repeat=m))
        assert ds_inner_min_exact(p, V, cfg) == pytest.approx(ref, abs=1e-12)


def test_ds_exact_refuses_huge_enumeration():
    with pytest.raises(ValueError, match="Monte-Carlo"):
        ds_inner_min_exact(np.full(40, 1 / 40), np.arange(40.0), UncertaintyConfig("ds", 0.1, 4))


def test_ds_exact_wrong_kind():
    with pytest.raises(ValueError):
        ds_inner_min_exact([1.0], [1.0], UncertaintyConfig("ipm", 0.1))


def test_ds_expected_min_rows(garnet):
    V = np.array([0.3, 1.0, -0.2, 0.8, 0.1])
    cfg = UncertaintyConfig("ds", 0.05, 3)
    out = ds_expected_min(np.asarray(garnet.transition), V, cfg)
    assert out[2, 1] == pytest.approx(ds_inner_min_exact(garnet.transition[2, 1], V, cfg))


# --- IPM and R-contamination ----------------------------------------------

def test_ipm_example():
    psi = np.array([[1.0, 0.0], [1.0, 1.0]])
    assert ipm_inner_min([0.5, 0.5], psi, [2.0, 1.0], 0.15) == pytest.approx(2.35, abs=1e-12)


def test_ipm_constant_function_has_no_penalty():
    psi = np.array([[1.0, 0.2], [1.0, -1.0], [1.0, 3.0]])
    assert ipm_inner_min([0.2, 0.3, 0.5], psi, [4.0, 0.0], 0.7) == pytest.approx(4.0)


def test_ipm_requires_bias_column():
    with pytest.raises(ValueError):
        ipm_inner_min([0.5, 0.5], np.eye(2), [1.0, 1.0], 0.1)


def test_ipm_matches_convex_solver():
    rng = np.random.default_rng(9)
    for _ in range(10):
        S = int(rng.integers(3, 7))
        d = int(rng.integers(2, min(S, 4) + 1))  # psi needs full column rank
        psi = np.column_stack([np.ones(S), rng.normal(size=(S, d - 1))])
        p, w = rng.dirichlet(np.ones(S)), rng.normal(size=d)
        delta = rng.uniform(0, 0.1)
        assert ipm_inner_min(p, psi, w, delta) == pytest.approx(cvx_ipm(p, psi, w, delta),
                                                                abs=1e-6)


def test_rcontam_examples():
    assert r_contamination_inner_min([0.5, 0.5], [1.0, 3.0], 0.3) == pytest.approx(1.7)
    assert r_contamination_inner_min([0.5, 0.5], [1.0, 3.0], 0.0) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        r_contamination_inner_min([1.0], [1.0], 1.5)


# --- empirical operators ----------------------------------------------------

def test_empirical_ds_example():
    s = TransitionSample(0, 0, (0, 1), 1)
    val = empirical_bellman_ds(s, [1.0, 3.0].__getitem__, 0.5, 0.9,
                               UncertaintyConfig("ds", 1 / 6, 2))
    assert val == pytest.approx(0.5 + 0.9 * 5 / 3, abs=1e-12)


def test_empirical_ds_checks_payload_size():
    with pytest.raises(ValueError):
        empirical_bellman_ds(TransitionSample(0, 0, (0,), 0), [1.0].__getitem__, 0, 0.9,
                             UncertaintyConfig("ds", 0.1, 2))


def test_empirical_ipm_example():
    psi = np.array([[1.0, 0.0], [1.0, 1.0]])
    val = empirical_bellman_ipm(TransitionSample(0, 0, (1,), 1), psi, [2.0, 1.0], 1.0, 0.9, 0.15)
    assert val == pytest.approx(1.0 + 0.9 * (3.0 - 0.15), abs=1e-12)


def test_empirical_ipm_rejects_mismatched_payload():
    psi = np.array([[1.0, 0.0], [1.0, 1.0]])
    with pytest.raises(ValueError):
        empirical_bellman_ipm(TransitionSample(0, 0, (0,), 1), psi, [2.0, 1.0], 1.0, 0.9, 0.1)


def test_empirical_dispatch_none_is_td_target():
    psi = np.array([[1.0, 0.0], [1.0, 1.0]])
    val = empirical_bellman(TransitionSample(0, 0, (1,), 1), psi, [2.0, 1.0], 1.0, 0.9,
                            UncertaintyConfig())
    assert val == pytest.approx(1.0 + 0.9 * 3.0)


@pytest.mark.slow
def test_empirical_ds_is_unbiased(garnet):
    cfg = UncertaintyConfig("ds", 0.1, 2)
    V = np.array([0.3, 1.0, -0.2, 0.8, 0.1])
    s, a, n = 1, 2, 10**6
    sampler = TrajectorySampler(garnet, cfg, make_rng(11))
    vals = np.empty(n)
    for i in range(n):
        y, _ = sampler.transition(s, a)
        vals[i] = empirical_bellman_ds(TransitionSample(s, a, y, y[0]), V.__getitem__,
                                       garnet.reward[s, a], garnet.gamma, cfg)
    exact = garnet.reward[s, a] + garnet.gamma * ds_inner_min_exact(garnet.transition[s, a], V, cfg)
    assert abs(vals.mean() - exact) <= 3 * vals.std() / np.sqrt(n)


def test_empirical_ipm_is_unbiased(garnet, feats):
    cfg = UncertaintyConfig("ipm", 0.05)
    w = np.array([0.5, -0.3, 0.8])
    s, a, n = 3, 0, 200_000
    sampler = TrajectorySampler(garnet, cfg, make_rng(12))
    vals = np.array([empirical_bellman(TransitionSample(s, a, *sampler.transition(s, a)),
                                       feats.psi, w, garnet.reward[s, a], garnet.gamma, cfg)
                     for _ in range(n)])
    exact = garnet.reward[s, a] + garnet.gamma * ipm_inner_min(garnet.transition[s, a], feats.psi,
                                                              w, cfg.delta)
    assert abs(vals.mean() - exact) <= 3 * vals.std() / np.sqrt(n)


# --- samplers ---------------------------------------------------------------

def test_sample_transition_on_deterministic_row():
    from rnac.rmdp import build_gridworld
    m = build_gridworld(2, 2, 0.0, 0.9)
    s = sample_transition(m, 0, 1, UncertaintyConfig("ds", 0.1, 3), np.random.default_rng(0))
    assert s.payload == (1, 1, 1) and s.s_next == 1


def test_sample_transition_payload_shapes(garnet):
    rng = np.random.default_rng(0)
    for cfg, size in [(UncertaintyConfig(), 1), (UncertaintyConfig("ds", 0.1, 4), 4),
                      (UncertaintyConfig("ipm", 0.1), 1)]:
        s = sample_transition(garnet, 0, 0, cfg, rng)
        assert len(s.payload) == size and s.s_next in s.payload
        assert all(garnet.transition[0, 0, y] > 0 for y in s.payload)


@pytest.mark.parametrize("use_trajectory_sampler", [False, True])
def test_sampler_frequencies_binomial(garnet, use_trajectory_sampler):
    cfg = UncertaintyConfig("ds", 0.1, 2)
    s, a, n = 0, 1, 100_000
    p = np.asarray(garnet.transition[s, a])
    rng = make_rng(21, int(use_trajectory_sampler))
    counts = np.zeros(garnet.n_states)
    nxt_counts = np.zeros(garnet.n_states)
    if use_trajectory_sampler:
        sampler = TrajectorySampler(garnet, cfg, rng)
        draws = [sampler.transition(s, a) for _ in range(n)]
    else:
        draws = [(t.payload, t.s_next) for t in
                 (sample_transition(garnet, s, a, cfg, rng) for _ in range(n))]
    for y, nx in draws:
        counts[y[0]] += 1
        nxt_counts[nx] += 1
    for j in range(garnet.n_states):
        lo, hi = binom.ppf([0.0005, 0.9995], n, p[j])
        assert lo <= counts[j] <= hi
        assert lo <= nxt_counts[j] <= hi


# --- config -----------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        UncertaintyConfig("ds", 0.7, 2)
    with pytest.raises(ValueError):
        UncertaintyConfig("none", 0.1)
    with pytest.raises(ValueError):
        UncertaintyConfig("bogus", 0.1)
    with pytest.raises(ValueError):
        UncertaintyConfig("ds", 0.1, 1)
    cfg = UncertaintyConfig("ds", 0.2, 3)
    assert UncertaintyConfig.from_dict(cfg.to_dict()) == cfg
