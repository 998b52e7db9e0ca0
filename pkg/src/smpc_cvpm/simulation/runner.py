"""Closed-loop simulation, metrics and trace persistence."""
from __future__ import annotations

import csv
import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from ..planners import TrackedObstacle, WorldState, reset_witness_order, stage_cost
from ..safe_sets import clear_state_caches
from ..scheme import (BRANCHES, DecisionTrace, initial_backup, smpc_cvpm_step, smpc_ftp_step)
from ..uncertainty import sample
from ..vehicle_models import EgoState, ObstacleState, step_ego_nonlinear, step_obstacle
from .scenario import Scenario

logger = logging.getLogger(__name__)

SCHEMES = ("smpc_cvpm", "smpc_ftp")
CSV_COLUMNS = ("t", "s", "d", "phi", "v", "a", "delta", "branch", "smpc_ms", "cvpm_ms",
               "safety_check", "stage_cost", "collision")


@dataclass
class StepRecord:
    t: float
    world: WorldState
    decision: DecisionTrace
    stage_cost: float
    collision: bool


@dataclass
class SimulationTrace:
    scenario: str
    scheme: str
    seed: int
    records: List[StepRecord]
    final_world: WorldState
    weights: tuple = field(default=None, repr=False)   # (Q, R, xi_ref) used for the stage cost

    @property
    def N_sim(self) -> int:
        return len(self.records)

    @property
    def J_sim(self) -> float:
        return float(np.mean([r.stage_cost for r in self.records]))

    @property
    def collisions(self) -> int:
        return int(sum(r.collision for r in self.records))

    @property
    def branches(self) -> List[str]:
        return [r.decision.branch for r in self.records]

    @property
    def branch_counts(self) -> dict:
        return {b: self.branches.count(b) for b in BRANCHES}

    def ego_states(self) -> np.ndarray:
        return np.array([r.world.ego.as_array() for r in self.records] + [self.final_world.ego.as_array()])

    def inputs(self) -> np.ndarray:
        return np.array([r.decision.applied_input.as_array() for r in self.records])

    def timing(self) -> dict:
        def mean(key):
            vals = [r.decision.branch_timings[key] for r in self.records if key in r.decision.branch_timings]
            return float(np.mean(vals)) if vals else None
        return {"smpc_mean_ms": mean("smpc_ms"), "safety_check_mean_ms": mean("safety_check_ms"),
                "cvpm_mean_ms": mean("cvpm_ms"), "ftp_mean_ms": mean("ftp_ms")}

    def replan_ms(self) -> np.ndarray:
        """Per-step SMPC time plus the certification stage (safety check or FTP solve).

        Only steps where the second stage ran are included.
        """
        out = []
        for r in self.records:
            tm = r.decision.branch_timings
            second = tm.get("safety_check_ms", tm.get("ftp_ms"))
            if second is not None:
                out.append(tm["smpc_ms"] + second)
        return np.array(out)

    def comparable(self) -> list:
        """Trace content without wall-clock fields, for determinism checks."""
        out = []
        for r in self.records:
            out.append((r.t, tuple(r.world.ego.as_array()),
                        tuple(tuple(o.state.as_array()) for o in r.world.obstacles),
                        r.decision.comparable(), r.stage_cost, r.collision))
        return out

    def summary(self) -> dict:
        return {"scenario": self.scenario, "scheme": self.scheme, "seed": self.seed, "N_sim": self.N_sim,
                "J_sim": self.J_sim, "collisions": self.collisions, "branch_counts": self.branch_counts,
                "timing": self.timing(), "replan_mean_ms": _mean_or_none(self.replan_ms())}


def _mean_or_none(a):
    return float(np.mean(a)) if len(a) else None


def collision_check(ego: EgoState, obstacles, geometry) -> bool:
    """Closed axis-aligned rectangle overlap in (s, d); touching counts as a collision."""
    for ob in obstacles:
        st = ob.state if hasattr(ob, "state") else ob[0]
        model = ob.model if hasattr(ob, "model") else ob[1]
        half_l = 0.5 * (geometry.ego_length + model.length)
        half_w = 0.5 * (geometry.ego_width + model.width)
        if abs(ego.s - st.s_do) <= half_l and abs(ego.d - st.d_do) <= half_w:
            return True
    return False


class _Playback:
    """Advances one obstacle according to its behaviour spec."""

    def __init__(self, spec, run_seed: int):
        self.spec = spec
        self.rng = np.random.default_rng([run_seed, spec.seed])

    def state(self, t: int, current: ObstacleState) -> ObstacleState:
        sp = self.spec
        if sp.behavior == "recorded":
            return ObstacleState.from_array(sp.states[t])
        if sp.behavior == "scripted":
            u = sp.inputs[t - 1]
            return ObstacleState.from_array(sp.model.A_do @ current.as_array() + sp.model.B_do @ u)
        w = sample(sp.model.w, self.rng) if sp.model.w is not None else None
        return step_obstacle(current, sp.model, w)


def run_closed_loop(sc: Scenario, scheme_id: str = "smpc_cvpm", seed: int = 0,
                    mode: str = "lazy") -> SimulationTrace:
    """Simulate ``sc`` under a scheme.

    Each step: snapshot the world, plan, apply the input with the
    nonlinear ego model, advance obstacles, flag collisions. The planner
    sees exact obstacle states. Raises ``BootstrapError`` when the baseline
    has no robust plan at the start.
    """
    if scheme_id not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme_id!r}; expected one of {SCHEMES}")
    clear_state_caches()
    reset_witness_order()
    players = [_Playback(o, seed) for o in sc.obstacles]
    obstacles = tuple(TrackedObstacle(o.id, ObstacleState.from_array(o.states[0]) if o.behavior == "recorded"
                                      else o.init, o.model) for o in sc.obstacles)
    ego = sc.ego_init
    records: List[StepRecord] = []
    backup = None
    pool = ThreadPoolExecutor(max_workers=2) if mode == "eager" else None
    try:
        for t in range(sc.N_sim):
            cfg = sc.config_at(ego.s)
            world = WorldState(ego, obstacles, t * sc.T, 0)
            if scheme_id == "smpc_cvpm":
                u, dec = smpc_cvpm_step(world, cfg, mode, pool)
            else:
                if backup is None:
                    backup = initial_backup(world, cfg)
                u, backup, dec = smpc_ftp_step(world, backup, cfg)
            cost = stage_cost(ego, u, cfg)
            ego = step_ego_nonlinear(ego, u, sc.T, cfg.curvature, cfg.wheelbase, cfg.box)
            obstacles = tuple(TrackedObstacle(o.id, p.state(t + 1, o.state), o.model)
                              for o, p in zip(obstacles, players))
            hit = collision_check(ego, obstacles, cfg.geometry)
            if hit:
                logger.warning("%s/%s seed %d: collision at t=%.2fs", sc.id, scheme_id, seed, (t + 1) * sc.T)
            records.append(StepRecord(t * sc.T, world, dec, cost, hit))
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    final = WorldState(ego, obstacles, sc.N_sim * sc.T, 0)
    return SimulationTrace(sc.id, scheme_id, seed, records, final,
                           (sc.planner.Q, sc.planner.R, sc.planner.xi_ref))


def average_stage_cost(trace: SimulationTrace) -> float:
    """Mean of ``|xi(t) - xi_ref|_Q^2 + |u(t)|_R^2`` over the recorded steps, from raw states."""
    if not trace.records:
        raise ValueError("empty trace")
    Q, R, ref = trace.weights
    X = trace.ego_states()[:-1] - ref.as_array()
    U = trace.inputs()
    costs = np.einsum("ij,jk,ik->i", X, Q, X) + np.einsum("ij,jk,ik->i", U, R, U)
    return float(np.mean(costs))


def _csv_rows(trace: SimulationTrace):
    for r in trace.records:
        e, u, d = r.world.ego, r.decision.applied_input, r.decision
        tm = d.branch_timings
        cv = tm.get("cvpm_ms", tm.get("ftp_ms"))
        yield [repr(r.t), repr(e.s), repr(e.d), repr(e.phi), repr(e.v), repr(u.a), repr(u.delta), d.branch,
               f"{tm.get('smpc_ms', 0.0):.4f}", "" if cv is None else f"{cv:.4f}",
               "" if d.safety_check is None else int(d.safety_check), repr(r.stage_cost), int(r.collision)]


def _atomic_write(path: Path, write):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_trace(trace: SimulationTrace, out_dir, stem: Optional[str] = None, extra: Optional[dict] = None):
    """Write ``<stem>.csv`` (one row per step) and ``<stem>.json`` (summary).

    Files are written to temporaries and moved into place; if the second
    write fails the first file is removed again. Returns both paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or f"{trace.scenario}_{trace.scheme}_seed{trace.seed}"
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"

    def write_csv(fh):
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        w.writerows(_csv_rows(trace))

    summary = trace.summary()
    if extra:
        summary.update(extra)
    _atomic_write(csv_path, write_csv)
    try:
        _atomic_write(json_path, lambda fh: json.dump(summary, fh, indent=2))
    except BaseException:
        csv_path.unlink(missing_ok=True)
        raise
    return csv_path, json_path


def load_summary(path) -> dict:
    return json.loads(Path(path).read_text())
