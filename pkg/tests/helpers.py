"""Independent reference computations shared by the tests."""

import numpy as np

from rnac.rmdp import LogLinearPolicy, build_garnet


def random_policy(model, features, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return LogLinearPolicy(scale * rng.standard_normal(features.d_p), features, model.n_actions)


def small_garnets(count=3, seed0=100, S=5, A=3, branching=3, gamma=0.9):
    return [build_garnet(seed0 + i, S, A, branching, gamma) for i in range(count)]


def classical_value(model, pi):
    """Independent linear solve of V = r_pi + gamma P_pi V."""
    P = np.einsum("sa,sat->st", pi, np.asarray(model.transition))
    r = (pi * np.asarray(model.reward)).sum(axis=1)
    return np.linalg.solve(np.eye(model.n_states) - model.gamma * P, r)


def classical_vi(model, tol=1e-13):
    V = np.zeros(model.n_states)
    P, R = np.asarray(model.transition), np.asarray(model.reward)
    while True:
        nxt = (R + model.gamma * P @ V).max(axis=1)
        if np.max(np.abs(nxt - V)) < tol:
            return nxt
        V = nxt
