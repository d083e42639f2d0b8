"""Tabular RMDP data model, environment generators and state distributions.

State-action features are stored row-major: row ``s * n_actions + a`` of
``phi`` is the feature vector of ``(s, a)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from . import _io

ROW_TOL = 1e-12
POWER_ITERS = 100_000
POWER_TOL = 1e-10


class NonMixingError(RuntimeError):
    """The policy-induced chain is not irreducible and aperiodic."""


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Philox (counter-based, 64-bit) stream for ``seed`` and a spawn key.

    Distinct keys give statistically independent streams, so a run can
    hand each phase its own generator without threading one through.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def _frozen(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class NominalModel:
    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    rho: np.ndarray

    def __post_init__(self):
        p = _frozen(self.transition)
        r = _frozen(self.reward)
        rho = _frozen(self.rho)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "gamma", float(self.gamma))

        if p.ndim != 3 or p.shape[0] != p.shape[2] or p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError(f"transition must have shape [S][A][S], got {p.shape}")
        S, A, _ = p.shape
        if r.shape != (S, A):
            raise ValueError(f"reward must have shape ({S}, {A}), got {r.shape}")
        if rho.shape != (S,):
            raise ValueError(f"rho must have shape ({S},), got {rho.shape}")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must be in (0,1)")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("transition has negative or non-finite entries")
        if np.max(np.abs(p.sum(axis=2) - 1.0)) > ROW_TOL:
            raise ValueError("transition rows must sum to 1")
        if not np.all(np.isfinite(r)) or np.any(r < 0) or np.any(r > 1):
            raise ValueError("rewards must lie in [0,1]")
        if not np.all(np.isfinite(rho)) or np.any(rho < 0) or abs(rho.sum() - 1.0) > ROW_TOL:
            raise ValueError("rho must be a distribution")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "rho": self.rho.tolist(),
        }

    def to_json(self) -> str:
        return _io.dumps(self.to_dict()) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "NominalModel":
        try:
            model = cls(
                transition=np.asarray(d["transition"], dtype=float),
                reward=np.asarray(d["reward"], dtype=float),
                gamma=d["gamma"],
                rho=np.asarray(d["rho"], dtype=float),
            )
        except KeyError as e:
            raise ValueError(f"model document missing field {e}") from None
        if (d.get("n_states", model.n_states), d.get("n_actions", model.n_actions)) != (
            model.n_states,
            model.n_actions,
        ):
            raise ValueError("n_states/n_actions disagree with array shapes")
        return model

    @classmethod
    def from_json(cls, text: str) -> "NominalModel":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> str:
        """Write the model document and return its content hash."""
        text = self.to_json()
        Path(path).write_text(text)
        return _io.content_hash(text)

    @classmethod
    def load(cls, path) -> "NominalModel":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True, eq=False)
class FeatureMaps:
    """Value features ``psi`` [S][d_v] and policy features ``phi`` [S*A][d_p].

    ``require_bias=False`` waives the all-ones first column of ``psi``; only
    the IPM operators need it.
    """

    psi: np.ndarray
    phi: np.ndarray
    require_bias: bool = True

    def __post_init__(self):
        psi = _frozen(self.psi)
        phi = _frozen(self.phi)
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "phi", phi)
        if psi.ndim != 2 or phi.ndim != 2:
            raise ValueError("psi and phi must be matrices")
        if not (np.all(np.isfinite(psi)) and np.all(np.isfinite(phi))):
            raise ValueError("features must be finite")
        if psi.shape[1] > psi.shape[0] or np.linalg.svd(psi, compute_uv=False).min() <= 1e-10:
            raise ValueError("psi must have full column rank")
        if self.require_bias and not self.has_bias:
            raise ValueError("first column of psi must be all ones")

    @property
    def has_bias(self) -> bool:
        return bool(np.all(self.psi[:, 0] == 1.0))

    @property
    def d_v(self) -> int:
        return self.psi.shape[1]

    @property
    def d_p(self) -> int:
        return self.phi.shape[1]

    def phi_cube(self, n_actions: int) -> np.ndarray:
        """``phi`` reshaped to [S][A][d_p]."""
        return self.phi.reshape(-1, n_actions, self.d_p)


def tabular_features(n_states: int, n_actions: int) -> FeatureMaps:
    """Exact (bias-compatible) tabular features.

    ``psi = [1 | e_2 .. e_S]`` spans R^S and keeps the ones column;
    ``phi`` is one-hot per state-action pair.
    """
    psi = np.eye(n_states)
    psi[:, 0] = 1.0
    return FeatureMaps(psi=psi, phi=np.eye(n_states * n_actions))


def random_features(seed: int, n_states: int, n_actions: int, d_v: int, d_p: int) -> FeatureMaps:
    rng = make_rng(seed, 7)
    psi = np.column_stack([np.ones(n_states), rng.standard_normal((n_states, d_v - 1))])
    phi = rng.standard_normal((n_states * n_actions, d_p))
    return FeatureMaps(psi=psi, phi=phi)


class LogLinearPolicy:
    """Softmax over linear scores ``phi(s,a) . theta``."""

    def __init__(self, theta, features: FeatureMaps, n_actions: int):
        self.theta = _frozen(theta)
        self.features = features
        self.n_actions = n_actions
        if self.theta.shape != (features.d_p,):
            raise ValueError(f"theta must have length {features.d_p}")

    @classmethod
    def uniform(cls, features: FeatureMaps, n_actions: int) -> "LogLinearPolicy":
        return cls(np.zeros(features.d_p), features, n_actions)

    def scores(self) -> np.ndarray:
        return (self.features.phi @ self.theta).reshape(-1, self.n_actions)

    def probs(self) -> np.ndarray:
        z = self.scores()
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def score_features(self) -> np.ndarray:
        """grad_theta log pi(a|s) as [S][A][d_p]: phi(s,a) - E_pi phi(s,.)."""
        cube = self.features.phi_cube(self.n_actions)
        mean = np.einsum("sa,sad->sd", self.probs(), cube)
        return cube - mean[:, None, :]


def policy_matrix(model: NominalModel, pi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """State chain P^pi [S][S] and reward r^pi [S] for action probabilities ``pi``."""
    return np.einsum("sa,sat->st", pi, model.transition), np.einsum("sa,sa->s", pi, model.reward)


def _probs(policy) -> np.ndarray:
    return policy.probs() if isinstance(policy, LogLinearPolicy) else np.asarray(policy, dtype=float)


def build_garnet(seed: int, n_states: int, n_actions: int, branching: int, gamma: float) -> NominalModel:
    """Random MDP with ``branching`` Dirichlet-weighted successors per pair."""
    if not (1 <= branching <= n_states):
        raise ValueError("branching must be in [1, n_states]")
    if not (0.0 < gamma < 1.0):
        raise ValueError("gamma must be in (0,1)")
    rng = make_rng(seed)
    P = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            support = rng.choice(n_states, size=branching, replace=False)
            w = rng.dirichlet(np.ones(branching))
            P[s, a, support] = w / w.sum()
    P /= P.sum(axis=2, keepdims=True)
    reward = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return NominalModel(P, reward, gamma, np.full(n_states, 1.0 / n_states))


MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))  # up, right, down, left as (dx, dy)


def build_gridworld(width: int, height: int, slip: float, gamma: float) -> NominalModel:
    """4-action grid with slippage; goal is the bottom-right cell.

    States are numbered row-major, ``s = y * width + x``. The goal is
    absorbing and pays reward 1 for every action; ``rho`` is uniform over the
    non-goal cells.
    """
    if width * height < 2 or width < 1 or height < 1:
        raise ValueError("grid must have at least 2 cells")
    if not (0.0 <= slip < 1.0):
        raise ValueError("slip must be in [0,1)")
    if not (0.0 < gamma < 1.0):
        raise ValueError("gamma must be in (0,1)")
    S = width * height
    goal = S - 1
    P = np.zeros((S, 4, S))
    reward = np.zeros((S, 4))

    def step(s, move):
        x, y = s % width, s // width
        dx, dy = MOVES[move]
        nx, ny = x + dx, y + dy
        if not (0 <= nx < width and 0 <= ny < height):
            return s
        return ny * width + nx

    for s in range(S):
        for a in range(4):
            if s == goal:
                P[s, a, goal] = 1.0
                reward[s, a] = 1.0
                continue
            for move in range(4):
                prob = 1.0 - slip if move == a else slip / 3.0
                P[s, a, step(s, move)] += prob
    rho = np.full(S, 1.0 / (S - 1))
    rho[goal] = 0.0
    return NominalModel(P, reward, gamma, rho)


def with_restart(model: NominalModel, goal: int | None = None) -> NominalModel:
    """Replace the absorbing goal's transitions by a restart from ``rho``.

    The goal keeps its reward; every action there teleports to ``rho``, which
    makes the gridworld chain irreducible.
    """
    goal = model.n_states - 1 if goal is None else goal
    P = np.array(model.transition)
    P[goal, :, :] = model.rho
    return NominalModel(P, model.reward, model.gamma, model.rho)


def stationary_distribution(model: NominalModel, policy) -> np.ndarray:
    """Stationary distribution of the policy-induced chain by power iteration."""
    P, _ = policy_matrix(model, _probs(policy))
    S = P.shape[0]
    n_comp, _ = connected_components(P > 0, directed=True, connection="strong")
    if n_comp != 1:
        raise NonMixingError("policy-induced chain is not irreducible")
    eig = np.sort(np.abs(np.linalg.eigvals(P)))[::-1]
    if S > 1 and eig[1] >= 1.0 - 1e-8:
        raise NonMixingError(f"second eigenvalue modulus {eig[1]:.3g} too close to 1")
    nu = np.full(S, 1.0 / S)
    for _ in range(POWER_ITERS):
        nxt = nu @ P
        nxt /= nxt.sum()
        if np.abs(nxt - nu).sum() <= POWER_TOL * 1e-2:
            nu = nxt
            break
        nu = nxt
    if np.abs(nu @ P - nu).sum() > POWER_TOL:
        raise NonMixingError("power iteration did not converge")
    return nu


def visitation_distribution(kernel: np.ndarray, policy, rho: np.ndarray, gamma: float) -> np.ndarray:
    """Discounted state visitation (1-g)(I - g P^T)^{-1} rho under ``kernel``."""
    pi = _probs(policy)
    P = np.einsum("sa,sat->st", pi, kernel)
    S = P.shape[0]
    try:
        d = np.linalg.solve(np.eye(S) - gamma * P.T, (1.0 - gamma) * np.asarray(rho, dtype=float))
    except np.linalg.LinAlgError as e:  # pragma: no cover - impossible for gamma < 1
        raise RuntimeError("visitation solve failed") from e
    return d
