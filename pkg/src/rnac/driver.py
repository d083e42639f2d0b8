"""The alternating robust critic / robust natural actor loop, its step-size
schedules and optimality-gap bookkeeping."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _io, planning
from .actor import rqnpg
from .critic import StepSchedule, direct_projected_fixed_point, msprbe, rltd
from .rmdp import FeatureMaps, LogLinearPolicy, NominalModel, make_rng
from .uncertainty import UncertaintyConfig

log = logging.getLogger(__name__)

ETA_CAP = 1e6
CRITIC, ACTOR = 0, 1
CSV_HEADER = ("t", "eta", "robust_value", "gap", "msprbe", "wallclock_ms")


def step_schedule_geometric(t: int, eta0: float, M: float, gamma: float) -> float:
    """eta0 * r**t with r = (M / (1 - gamma)) / (1 - (1 - gamma) / M)."""
    if M < 1:
        raise ValueError("mismatch coefficient M must be >= 1")
    if not (0.0 < gamma < 1.0):
        raise ValueError("gamma must be in (0,1)")
    ratio = geometric_ratio(M, gamma)
    if ratio <= 1:
        raise ValueError("geometric ratio must exceed 1")
    return eta0 * ratio**t


def geometric_ratio(M: float, gamma: float) -> float:
    return (M / (1.0 - gamma)) / (1.0 - (1.0 - gamma) / M)


def step_schedule_constant(A_size: int, gamma: float) -> float:
    """(1 - gamma) * ln |A|."""
    if A_size < 2:
        raise ValueError("need at least two actions")
    return (1.0 - gamma) * math.log(A_size)


@dataclass
class RnacConfig:
    T: int = 100
    K: int = 2000
    N: int = 2000
    schedule_kind: str = "constant"
    eta0: float | None = None
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    seed: int = 0
    log_every: int = 1
    critic_step: StepSchedule = field(default_factory=StepSchedule)
    actor_step: StepSchedule = field(default_factory=StepSchedule)
    M: float | None = None
    burn_in: int = 1000

    def __post_init__(self):
        if isinstance(self.uncertainty, dict):
            self.uncertainty = UncertaintyConfig.from_dict(self.uncertainty)
        for name in ("critic_step", "actor_step"):
            if isinstance(getattr(self, name), dict):
                setattr(self, name, StepSchedule(**getattr(self, name)))
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.K < 0 or self.N < 0:
            raise ValueError("K and N must be >= 0")
        if self.schedule_kind not in ("geometric", "constant"):
            raise ValueError("schedule_kind must be 'geometric' or 'constant'")
        if self.eta0 is not None and not self.eta0 > 0:
            raise ValueError("eta0 must be > 0")
        if self.schedule_kind == "geometric" and self.eta0 is None:
            raise ValueError("geometric schedule needs eta0")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        if self.uncertainty.kind == "rcontam":
            raise ValueError("R-contamination has no sample-based critic")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["uncertainty"] = self.uncertainty.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RnacConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class RunRecord:
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_csv(self, include_timing: bool = True) -> str:
        lines = [",".join(CSV_HEADER)]
        for row in self.rows:
            vals = [str(row["t"])]
            for key in CSV_HEADER[1:]:
                v = row[key] if (include_timing or key != "wallclock_ms") else 0.0
                vals.append(_io.fmt_float(float("nan") if v is None else v))
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    def column(self, key: str) -> np.ndarray:
        return np.array([np.nan if r[key] is None else r[key] for r in self.rows], dtype=float)


def optimality_gap(model: NominalModel, policy, cfg: UncertaintyConfig,
                   features: FeatureMaps | None = None, tol: float = 1e-10,
                   v_star: np.ndarray | None = None) -> float | None:
    """V*(rho) - V^pi(rho) from the planning oracle; None when no oracle exists (IPM)."""
    if cfg.kind == "ipm":
        return None
    if v_star is None:
        v_star = planning.robust_value_iteration_optimal(model, cfg, tol=tol).values
    v_pi = planning.robust_policy_value(model, policy, cfg, tol=tol)
    return float(model.rho @ (v_star - v_pi))


def _robust_value(model, policy, cfg, features, tol):
    if cfg.kind == "ipm":
        w = direct_projected_fixed_point(model, policy, cfg, features, tol=tol, guard=False)
        return float(model.rho @ (features.psi @ w))
    return float(model.rho @ planning.robust_policy_value(model, policy, cfg, tol=tol))


def eta_schedule(config: RnacConfig, model: NominalModel):
    if config.schedule_kind == "constant":
        eta = config.eta0 if config.eta0 is not None else step_schedule_constant(
            model.n_actions, model.gamma)
        return lambda t: eta
    M = config.M
    if M is None:
        if model.rho.min() <= 0:
            raise ValueError("rho has zero entries; pass an explicit M for the geometric schedule")
        M = 1.0 / model.rho.min()

    def eta_at(t):
        # eta0 * r**t overflows quickly; compare in log space before exponentiating
        if math.log(config.eta0) + t * math.log(geometric_ratio(M, model.gamma)) >= math.log(ETA_CAP):
            log.warning("eta capped at %g at t=%d", ETA_CAP, t)
            return ETA_CAP
        return step_schedule_geometric(t, config.eta0, M, model.gamma)

    return eta_at


def rnac_train(model: NominalModel, features: FeatureMaps, config: RnacConfig,
               oracle: bool = True, tol: float = 1e-10) -> tuple[LogLinearPolicy, RunRecord]:
    """Alternate RLTD critic and RQNPG actor updates for ``config.T`` rounds.

    Row ``t`` records policy ``pi_t`` (rows ``0..T``; row ``T`` is the
    returned policy and carries no step size or critic error). Oracle
    quantities are filled in only when ``oracle`` is set.
    """
    cfg = config.uncertainty
    eta_at = eta_schedule(config, model)
    v_star = None
    if oracle and cfg.kind != "ipm":
        v_star = planning.robust_value_iteration_optimal(model, cfg, tol=tol).values
    theta = np.zeros(features.d_p)
    record = RunRecord()
    start = time.perf_counter()

    def oracle_row(t, policy, eta, err):
        row = {"t": t, "eta": eta, "robust_value": None, "gap": None, "msprbe": err}
        if oracle and (t % config.log_every == 0 or t == config.T):
            row["robust_value"] = _robust_value(model, policy, cfg, features, tol)
            if v_star is not None:
                row["gap"] = float(model.rho @ v_star) - row["robust_value"]
        row["wallclock_ms"] = (time.perf_counter() - start) * 1e3
        return row

    for t in range(config.T):
        policy = LogLinearPolicy(theta, features, model.n_actions)
        eta = eta_at(t)
        critic = rltd(model, policy, cfg, features, config.K, config.critic_step,
                      make_rng(config.seed, t, CRITIC), burn_in=config.burn_in)
        err = None
        if oracle and t % config.log_every == 0:
            err = msprbe(model, policy, cfg, features, critic.w)
        record.rows.append(oracle_row(t, policy, eta, err))
        step = rqnpg(model, theta, eta, critic.w, cfg, features, config.N, config.actor_step,
                     make_rng(config.seed, t, ACTOR), burn_in=config.burn_in)
        if not np.all(np.isfinite(step.theta_new)):
            raise FloatingPointError(f"non-finite policy parameters at t={t} (eta={eta:g})")
        theta = step.theta_new

    policy = LogLinearPolicy(theta, features, model.n_actions)
    record.rows.append(oracle_row(config.T, policy, None, None))
    final_gap = record.rows[-1]["gap"]
    record.summary = {
        "final_gap": final_gap,
        "final_robust_value": record.rows[-1]["robust_value"],
        "config": config.to_dict(),
        "input_hash": _io.content_hash(
            model.to_json() + _io.dumps({"psi": features.psi, "phi": features.phi})
            + _io.dumps(config.to_dict())
        ),
    }
    return policy, record
