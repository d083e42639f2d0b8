"""Inner minimizations for each uncertainty set and the empirical robust
Bellman operators built on them.

The double-sampling (DS) set perturbs the uniform choice among ``m`` i.i.d.
next-state draws within the sup-norm ball ``|alpha - 1/m|_inf <= delta``.
The IPM set uses the linear class ``{psi(.)^T xi : |xi|_2 <= 1}``.
"""

from __future__ import annotations

import itertools
from bisect import bisect_right
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .rmdp import NominalModel

KINDS = ("ds", "ipm", "rcontam", "none")
ENUM_LIMIT = 10**6


@dataclass(frozen=True)
class UncertaintyConfig:
    kind: str = "none"
    delta: float = 0.0
    m: int = 2

    def __post_init__(self):
        kind = str(self.kind).lower()
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "delta", float(self.delta))
        object.__setattr__(self, "m", int(self.m))
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if kind == "none" and self.delta != 0:
            raise ValueError("kind 'none' requires delta = 0")
        if kind == "ds":
            if self.m < 2:
                raise ValueError("DS tuple size m must be >= 2")
            if self.delta > 1.0 - 1.0 / self.m + 1e-15:
                raise ValueError(f"DS delta must be <= 1 - 1/m = {1 - 1 / self.m:.6g}")
        if kind == "rcontam" and self.delta > 1:
            raise ValueError("R-contamination radius must be in [0,1]")

    @property
    def payload_size(self) -> int:
        return self.m if self.kind == "ds" else 1

    def to_dict(self) -> dict:
        return {"kind": self.kind, "delta": self.delta, "m": self.m}

    @classmethod
    def from_dict(cls, d: dict) -> "UncertaintyConfig":
        return cls(kind=d.get("kind", "none"), delta=d.get("delta", 0.0), m=d.get("m", 2))


NOMINAL = UncertaintyConfig()


class TransitionSample(NamedTuple):
    s: int
    a: int
    payload: tuple
    s_next: int


def ds_weights(m: int, delta: float) -> np.ndarray:
    """Minimizing weights for ascending-sorted values.

    Every coordinate starts at the floor ``max(0, 1/m - delta)``; the leftover
    mass is poured onto the smallest values first, each capped at
    ``1/m + delta``. The allocation depends only on rank, so one vector
    serves every tuple.
    """
    if m < 1:
        raise ValueError("empty value vector")
    if delta < 0 or delta > 1.0 - 1.0 / m + 1e-15:
        raise ValueError(f"delta must be in [0, 1 - 1/m] for m={m}")
    lo = max(0.0, 1.0 / m - delta)
    room = min(1.0, 1.0 / m + delta) - lo
    rest = 1.0 - m * lo
    w = np.full(m, lo)
    for i in range(m):
        take = min(room, rest)
        w[i] += take
        rest -= take
        if rest <= 0:
            break
    return w


def ds_inner_min_tuple(values, delta: float) -> float:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("empty value vector")
    if v.size == 2:
        if delta < 0 or delta > 0.5 + 1e-15:
            raise ValueError("delta must be in [0, 1/2] for m=2")
        return 0.5 * (v[0] + v[1]) - delta * abs(v[0] - v[1])
    return float(np.sort(v) @ ds_weights(v.size, delta))


def _require(cfg: UncertaintyConfig, kind: str):
    if cfg.kind != kind:
        raise ValueError(f"expected a {kind!r} uncertainty config, got {cfg.kind!r}")


def ds_inner_min_exact(p_row, V, cfg: UncertaintyConfig) -> float:
    """Expectation of the tuple inner min over i.i.d. m-tuples from ``p_row``."""
    _require(cfg, "ds")
    p = np.asarray(p_row, dtype=float)
    V = np.asarray(V, dtype=float)
    if cfg.m == 2:
        gap = np.abs(V[:, None] - V[None, :])
        return float(p @ V - cfg.delta * (p @ gap @ p))
    support = np.flatnonzero(p > 0)
    if support.size**cfg.m > ENUM_LIMIT:
        raise ValueError(
            f"support^m = {support.size}^{cfg.m} exceeds {ENUM_LIMIT}; use Monte-Carlo estimation"
        )
    tuples = np.array(list(itertools.product(support, repeat=cfg.m)))
    weight = np.prod(p[tuples], axis=1)
    inner = np.sort(V[tuples], axis=1) @ ds_weights(cfg.m, cfg.delta)
    return float(weight @ inner)


def ds_expected_min(P: np.ndarray, V: np.ndarray, cfg: UncertaintyConfig) -> np.ndarray:
    """``ds_inner_min_exact`` for every row of a [..][S] kernel at once."""
    _require(cfg, "ds")
    flat = P.reshape(-1, P.shape[-1])
    if cfg.m == 2:
        gap = np.abs(V[:, None] - V[None, :])
        out = flat @ V - cfg.delta * np.einsum("ki,ij,kj->k", flat, gap, flat)
    else:
        out = np.array([ds_inner_min_exact(row, V, cfg) for row in flat])
    return out.reshape(P.shape[:-1])


def check_bias(psi: np.ndarray):
    if not np.all(np.asarray(psi)[:, 0] == 1.0):
        raise ValueError("IPM requires an all-ones first column in psi")


def ipm_penalty(w, delta: float) -> float:
    return delta * float(np.linalg.norm(np.asarray(w, dtype=float)[1:]))


def ipm_inner_min(p_row, psi, w, delta: float) -> float:
    check_bias(psi)
    return float(np.asarray(p_row) @ (np.asarray(psi) @ np.asarray(w))) - ipm_penalty(w, delta)


def r_contamination_inner_min(p_row, V, R: float) -> float:
    if not (0.0 <= R <= 1.0):
        raise ValueError("R must be in [0,1]")
    V = np.asarray(V, dtype=float)
    return (1.0 - R) * float(np.asarray(p_row) @ V) + R * float(V.min())


def empirical_bellman_ds(
    sample: TransitionSample,
    V_fn: Callable[[int], float],
    reward: float,
    gamma: float,
    cfg: UncertaintyConfig,
) -> float:
    _require(cfg, "ds")
    if len(sample.payload) != cfg.m:
        raise ValueError(f"DS payload must have {cfg.m} states, got {len(sample.payload)}")
    vals = [V_fn(s) for s in sample.payload]
    return reward + gamma * ds_inner_min_tuple(vals, cfg.delta)


def empirical_bellman_ipm(
    sample: TransitionSample, psi, w, reward: float, gamma: float, delta: float
) -> float:
    if len(sample.payload) != 1 or sample.payload[0] != sample.s_next:
        raise ValueError("IPM sample must carry a single next state")
    check_bias(psi)
    w = np.asarray(w, dtype=float)
    return reward + gamma * float(np.asarray(psi)[sample.s_next] @ w) - gamma * ipm_penalty(w, delta)


def empirical_bellman(
    sample: TransitionSample, psi, w, reward: float, gamma: float, cfg: UncertaintyConfig
) -> float:
    """Empirical robust Bellman target for a linear value ``psi @ w``."""
    if cfg.kind == "ds":
        V = np.asarray(psi) @ np.asarray(w)
        return empirical_bellman_ds(sample, V.__getitem__, reward, gamma, cfg)
    if cfg.kind == "ipm":
        return empirical_bellman_ipm(sample, psi, w, reward, gamma, cfg.delta)
    if cfg.kind == "none":
        return reward + gamma * float(np.asarray(psi)[sample.s_next] @ np.asarray(w))
    raise ValueError("R-contamination has no sample-based operator")


def sample_transition(
    model: NominalModel, s: int, a: int, cfg: UncertaintyConfig, rng: np.random.Generator
) -> TransitionSample:
    """Draw the payload for one step; ``s_next`` is uniform over a DS tuple,
    so the visited chain is exactly the nominal one."""
    row = model.transition[s, a]
    draws = rng.choice(model.n_states, size=cfg.payload_size, p=row)
    payload = tuple(int(x) for x in draws)
    s_next = payload[int(rng.integers(len(payload)))] if len(payload) > 1 else payload[0]
    return TransitionSample(int(s), int(a), payload, s_next)


class TrajectorySampler:
    """Single-trajectory sampler used by the critic and actor loops.

    Uniforms are pre-drawn in blocks from the caller's generator and mapped
    through per-row CDFs; the semantics match ``sample_transition``.
    """

    def __init__(self, model: NominalModel, cfg: UncertaintyConfig, rng: np.random.Generator,
                 block: int = 1 << 16):
        self.cfg = cfg
        self.m = cfg.payload_size
        self.rng = rng
        self.block = block
        self._cdf = [[_cdf(model.transition[s, a]) for a in range(model.n_actions)]
                     for s in range(model.n_states)]
        self._buf: list[float] = []
        self._i = 0

    def uniform(self) -> float:
        if self._i >= len(self._buf):
            self._buf = self.rng.random(self.block).tolist()
            self._i = 0
        u = self._buf[self._i]
        self._i += 1
        return u

    def action(self, pi_cdf: list[float]) -> int:
        return _draw(pi_cdf, self.uniform())

    def transition(self, s: int, a: int) -> tuple[tuple, int]:
        cdf = self._cdf[s][a]
        if self.m == 1:
            nxt = _draw(cdf, self.uniform())
            return (nxt,), nxt
        payload = tuple(_draw(cdf, self.uniform()) for _ in range(self.m))
        return payload, payload[min(int(self.uniform() * self.m), self.m - 1)]


def _cdf(p) -> list[float]:
    c = np.cumsum(p)
    c[-1] = 1.0
    return c.tolist()


def _draw(cdf: list[float], u: float) -> int:
    # u < 1 = cdf[-1]; bisect_right steps over zero-probability entries
    return bisect_right(cdf, u)
