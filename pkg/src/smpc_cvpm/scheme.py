"""Replanning logic: SMPC certified by a robust feasibility check, with CVPM fallback, and the SMPC+FTP baseline."""
from __future__ import annotations

import logging
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from .planners import (PlannerConfig, PlanResult, WorldState, robust_case_exists, solve_cvpm_prob,
                       solve_cvpm_robust, solve_smpc)
from .vehicle_models import EgoInput, step_ego_nonlinear, step_obstacle

logger = logging.getLogger(__name__)

SMPC_SAFE = "smpc_safe"
CVPM_ROBUST = "cvpm_robust"
CVPM_PROB = "cvpm_prob"
FTP_BACKUP = "ftp_backup"
BRANCHES = (SMPC_SAFE, CVPM_ROBUST, CVPM_PROB, FTP_BACKUP)


class BootstrapError(RuntimeError):
    """The baseline has no robust plan to start from."""


@dataclass
class DecisionTrace:
    step: int
    branch: str
    smpc_status: str
    safety_check: Optional[bool]
    robust_case: Optional[bool]
    applied_input: EgoInput
    plan: Optional[np.ndarray] = None
    degraded: bool = False
    branch_timings: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.branch not in BRANCHES:
            raise ValueError(f"unknown branch {self.branch!r}")
        if self.branch == SMPC_SAFE and not (self.smpc_status == "optimal" and self.safety_check):
            raise ValueError("smpc_safe requires an optimal SMPC and a passed safety check")
        if self.branch == CVPM_PROB and self.robust_case:
            raise ValueError("cvpm_prob requires an empty robust case")

    def comparable(self) -> dict:
        """Everything except wall-clock timings."""
        return {"step": self.step, "branch": self.branch, "smpc_status": self.smpc_status,
                "safety_check": self.safety_check, "robust_case": self.robust_case,
                "applied_input": (self.applied_input.a, self.applied_input.delta),
                "plan": None if self.plan is None else self.plan.tolist(), "degraded": self.degraded}


@dataclass
class FtpBackup:
    """Input sequence valid from step ``valid_from``; element ``t - valid_from`` applies at step ``t``."""
    inputs: np.ndarray
    valid_from: int

    def element(self, step: int) -> Tuple[Optional[np.ndarray], int]:
        i = step - self.valid_from
        if 0 <= i < len(self.inputs):
            return self.inputs[i], i
        return None, i

    def remaining(self, step: int) -> np.ndarray:
        i = max(step - self.valid_from, 0)
        return self.inputs[i:]


def step_index(x: WorldState, cfg: PlannerConfig) -> int:
    return int(round(x.timestamp / cfg.T))


def _ms(t0: float) -> float:
    return (time.perf_counter() - t0) * 1e3


def predict_next_world(x: WorldState, u: EgoInput, cfg: PlannerConfig) -> WorldState:
    """Ego by the nonlinear model, obstacles by their nominal (disturbance-free) step."""
    ego = step_ego_nonlinear(x.ego, u, cfg.T, cfg.curvature, cfg.wheelbase, cfg.box)
    obs = tuple(replace(o, state=step_obstacle(o.state, o.model)) for o in x.obstacles)
    return WorldState(ego, obs, x.timestamp + cfg.T, x.obstacle_lag)


def successor_anchor(x: WorldState, u: EgoInput, cfg: PlannerConfig) -> WorldState:
    """Ego advanced one step; obstacles kept at their measured state one step behind.

    Keeping the measured obstacle state (instead of its nominal successor)
    lets the reach tubes cover the disturbance of the step in between.
    """
    ego = step_ego_nonlinear(x.ego, u, cfg.T, cfg.curvature, cfg.wheelbase, cfg.box)
    return WorldState(ego, x.obstacles, x.timestamp + cfg.T, x.obstacle_lag + 1)


def _shift_hints(U: np.ndarray, cfg: PlannerConfig):
    tail = U[1:]
    hold = np.vstack([tail, tail[-1:]]) if len(tail) else U
    brake = np.vstack([tail, [[cfg.box.a_min, 0.0]]])
    return [hold.ravel(), brake.ravel()]


def _safety_check(x: WorldState, plan: PlanResult, cfg: PlannerConfig) -> bool:
    xp = successor_anchor(x, plan.first_input, cfg)
    return robust_case_exists(xp, cfg, include_initial=True, hints=_shift_hints(plan.U, cfg))


def _cvpm(x: WorldState, cfg: PlannerConfig):
    t0 = time.perf_counter()
    robust = robust_case_exists(x, cfg, include_initial=False)
    plan = solve_cvpm_robust(x, cfg) if robust else None
    if plan is not None and not plan.optimal:
        # the feasible set is nonempty but the solver stalled; fall through to the total branch
        logger.warning("robust case exists but the robust solve returned %s", plan.status)
        robust = False
    if not robust:
        plan = solve_cvpm_prob(x, cfg)
    return robust, plan, _ms(t0)


def smpc_cvpm_step(x: WorldState, cfg: PlannerConfig, mode: str = "lazy",
                   executor: Optional[Executor] = None) -> Tuple[EgoInput, DecisionTrace]:
    """One replan of the SMPC+CVPM scheme.

    ``mode="eager"`` starts the CVPM pair on ``executor`` alongside SMPC and
    discards it when SMPC is certified; ``"lazy"`` computes it only when
    needed. Both return the same input.
    """
    if mode not in ("eager", "lazy"):
        raise ValueError("mode must be 'eager' or 'lazy'")
    k = step_index(x, cfg)
    timings = {}
    future = None
    own_pool = None
    if mode == "eager":
        if executor is None:
            own_pool = executor = ThreadPoolExecutor(max_workers=1)
        future = executor.submit(_cvpm, x, cfg)
    try:
        t0 = time.perf_counter()
        smpc = solve_smpc(x, cfg)
        timings["smpc_ms"] = _ms(t0)
        safe = None
        if smpc.optimal:
            t0 = time.perf_counter()
            safe = _safety_check(x, smpc, cfg)
            timings["safety_check_ms"] = _ms(t0)
        if smpc.optimal and safe:
            if future is not None:
                future.cancel()
            u = smpc.first_input
            return u, DecisionTrace(k, SMPC_SAFE, smpc.status, True, None, u, smpc.U.copy(),
                                    branch_timings=timings)
        robust, plan, cvpm_ms = future.result() if future is not None else _cvpm(x, cfg)
        timings["cvpm_ms"] = cvpm_ms
        u = EgoInput.from_array(cfg.box.clip(plan.U[0]))
        branch = CVPM_ROBUST if robust else CVPM_PROB
        return u, DecisionTrace(k, branch, smpc.status, safe, robust, u, plan.U.copy(),
                                branch_timings=timings)
    finally:
        if own_pool is not None:
            own_pool.shutdown(wait=True)


def initial_backup(x: WorldState, cfg: PlannerConfig) -> FtpBackup:
    """Robust plan at the first step; the baseline cannot start without it."""
    plan = solve_cvpm_robust(x, cfg)
    if not plan.optimal:
        raise BootstrapError(f"no robust plan at t={x.timestamp:g}s (status {plan.status})")
    return FtpBackup(plan.U.copy(), step_index(x, cfg))


def smpc_ftp_step(x: WorldState, backup: FtpBackup, cfg: PlannerConfig
                  ) -> Tuple[EgoInput, FtpBackup, DecisionTrace]:
    """One replan of the SMPC+FTP baseline.

    The SMPC input is applied only if the fail-safe problem anchored at the
    successor state is solvable; the new backup is then the SMPC input
    followed by the fail-safe plan. Otherwise the stored backup is replayed.
    """
    k = step_index(x, cfg)
    timings = {}
    t0 = time.perf_counter()
    smpc = solve_smpc(x, cfg)
    timings["smpc_ms"] = _ms(t0)
    ftp_ok = None
    if smpc.optimal:
        t0 = time.perf_counter()
        ftp = solve_cvpm_robust(successor_anchor(x, smpc.first_input, cfg), cfg, include_initial=True)
        timings["ftp_ms"] = _ms(t0)
        ftp_ok = ftp.optimal
        if ftp_ok:
            u = smpc.first_input
            new = FtpBackup(np.vstack([smpc.U[:1], ftp.U]), k)
            return u, new, DecisionTrace(k, SMPC_SAFE, smpc.status, True, None, u, smpc.U.copy(),
                                         branch_timings=timings)
    elem, i = backup.element(k)
    degraded = elem is None
    if degraded:
        last = backup.inputs[-1]
        elem = np.array([cfg.box.a_min, last[1]])
        logger.warning("FTP backup exhausted at step %d; holding maximal braking", k)
    u = EgoInput.from_array(cfg.box.clip(elem))
    return u, backup, DecisionTrace(k, FTP_BACKUP, smpc.status, ftp_ok, None, u,
                                    backup.remaining(k).copy(), degraded, timings)
