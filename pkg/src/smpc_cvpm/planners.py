"""Optimal control problems over the ego input sequence.

All problems are condensed: the ego states are eliminated through the
linearized dynamics, so the decision vector is ``U = [a_0, delta_0, ..,
a_{N-1}, delta_{N-1}]`` (plus auxiliary variables for the probabilistic
case). Three planners share the same cost and box constraints:

* ``solve_smpc``: chance-tightened collision rows (non-conservative),
* ``solve_cvpm_robust``: worst-case rows over the obstacle reach tubes,
* ``solve_cvpm_prob``: minimum Mahalanobis distance of the random row
  means to the safe orthant, a surrogate for the violation probability.
"""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .qp import (INFEASIBLE, OPTIMAL, QuadraticProgram, SolveResult, SolverSettings, check_feasible,
                 solve_qp)
from .safe_sets import (Geometry, SafeSetSequence, build_safe_sequence, chance_tightened, robust_tightened,
                        switch_side)
from .uncertainty import _psd_factor, predict_obstacle_sequence
from .vehicle_models import (ActuatorBox, EgoInput, EgoState, LinearEgoModel, ObstacleModel,
                             ObstacleState, linearize_discretize, riccati)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlannerConfig:
    """Horizon, weights and limits shared by every planner.

    ``road_min``/``road_max`` are the road edges; the ego centre keeps half
    its width inside them. ``P=None`` selects the Riccati terminal weight.
    """
    N: int = 15
    T: float = 0.1
    Q: np.ndarray = field(default_factory=lambda: np.diag([0.0, 0.1, 1.0, 0.05]))
    R: np.ndarray = field(default_factory=lambda: np.diag([0.05, 1.0]))
    P: Optional[np.ndarray] = None
    beta: float = 0.9
    xi_ref: EgoState = EgoState(0.0, 0.0, 0.0, 20.0)
    box: ActuatorBox = ActuatorBox()
    road_min: float = -1.75
    road_max: float = 8.75
    v_max: float = 40.0
    geometry: Geometry = Geometry()
    curvature: float = 0.0
    wheelbase: float = 2.9
    prob_regularization: float = 1e-6
    # when every row mean can be made safe, the fallback maximizes the smallest margin in row
    # standard deviations up to this cap (4 sigma ~ 3e-5 per row)
    prob_margin_cap: float = 4.0
    # fractions of N at which the fallback may hand the worst obstacle over to a lateral side
    prob_switch_steps: tuple = (0.25, 0.45, 0.65)
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.T <= 0:
            raise ValueError("T must be positive")
        if not 0.5 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0.5, 1)")
        Q, R = np.asarray(self.Q, float), np.asarray(self.R, float)
        if Q.shape != (4, 4) or R.shape != (2, 2):
            raise ValueError("Q must be 4x4 and R 2x2")
        if np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(0.5 * (R + R.T)).min() <= 0:
            raise ValueError("R must be positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        if self.P is not None:
            P = np.asarray(self.P, float)
            if P.shape != (4, 4) or np.linalg.eigvalsh(0.5 * (P + P.T)).min() < -1e-12:
                raise ValueError("P must be 4x4 positive semidefinite")
            object.__setattr__(self, "P", P)

    @property
    def d_bounds(self):
        half = 0.5 * self.geometry.ego_width
        return self.road_min + half, self.road_max - half


@dataclass(frozen=True)
class TrackedObstacle:
    id: object
    state: ObstacleState
    model: ObstacleModel


@dataclass(frozen=True)
class WorldState:
    """Snapshot of ego and obstacles.

    ``obstacle_lag`` counts how many sampling steps the obstacle snapshot
    lags the ego state; ego prediction step ``k`` meets obstacle step
    ``k + obstacle_lag``.
    """
    ego: EgoState
    obstacles: tuple = ()
    timestamp: float = 0.0
    obstacle_lag: int = 0


@dataclass
class PlanResult:
    status: str
    U: np.ndarray
    states: np.ndarray
    objective: float
    solve: Optional[SolveResult] = None
    safe_set: Optional[SafeSetSequence] = None
    surrogate: float = float("nan")

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    @property
    def first_input(self) -> EgoInput:
        return EgoInput.from_array(self.U[0])


def stage_cost(xi, u, cfg: PlannerConfig) -> float:
    """``|xi - xi_ref|_Q^2 + |u|_R^2``."""
    x = xi.as_array() if isinstance(xi, EgoState) else np.asarray(xi, float)
    uu = u.as_array() if isinstance(u, EgoInput) else np.asarray(u, float)
    dx = x - cfg.xi_ref.as_array()
    return float(dx @ cfg.Q @ dx + uu @ cfg.R @ uu)


def horizon_cost(states: np.ndarray, U: np.ndarray, cfg: PlannerConfig, P: np.ndarray) -> float:
    """Finite-horizon cost of a state sequence ``xi_0..xi_N`` and inputs ``u_0..u_{N-1}``."""
    cost = sum(stage_cost(states[k], U[k], cfg) for k in range(len(U)))
    dx = states[-1] - cfg.xi_ref.as_array()
    return float(cost + dx @ P @ dx)


# ------------------------------------------------------------------ prediction

@dataclass
class Prediction:
    """Affine map ``[xi_1; ..; xi_N] = Su U + w`` of the linearized ego model."""
    model: LinearEgoModel
    Su: np.ndarray
    w: np.ndarray
    xi0: np.ndarray

    @property
    def N(self) -> int:
        return self.w.size // 4

    def states(self, U) -> np.ndarray:
        """Stacked ``xi_0..xi_N`` as an (N+1, 4) array."""
        X = self.w + self.Su @ np.ravel(U)
        return np.vstack([self.xi0, X.reshape(-1, 4)])


def predict_ego(ego: EgoState, cfg: PlannerConfig) -> Prediction:
    model = linearize_discretize(ego, cfg.T, cfg.curvature, cfg.wheelbase)
    A, B = model.A_d, model.B_d
    x0 = ego.as_array()
    drift = model.c_d - x0
    N = cfg.N
    powers = np.empty((N, 4, 4))
    powers[0] = np.eye(4)
    for k in range(1, N):
        powers[k] = A @ powers[k - 1]
    # block (k, j) of Su is A^(k-j) B for j <= k
    lag = np.subtract.outer(np.arange(N), np.arange(N))
    blocks = (powers @ B)[np.clip(lag, 0, None)] * (lag >= 0)[:, :, None, None]
    Su = blocks.transpose(0, 2, 1, 3).reshape(4 * N, 2 * N)
    w = (x0 + np.cumsum(powers @ drift, axis=0)).ravel()
    return Prediction(model, Su, w, x0)


@functools.lru_cache(maxsize=512)
def _terminal_weight_cached(key, cfg_key):
    d, phi, v, kappa, T, L = key
    Q = np.array(cfg_key[0]).reshape(4, 4)
    R = np.array(cfg_key[1]).reshape(2, 2)
    m = linearize_discretize(EgoState(0.0, d, phi, v), T, kappa, L)
    try:
        return riccati(m.A_d, m.B_d, Q, R)
    except RuntimeError:
        return Q.copy()


def terminal_weight(ego: EgoState, cfg: PlannerConfig) -> np.ndarray:
    """Riccati terminal weight at a rounded copy of the linearization point (cached)."""
    if cfg.P is not None:
        return cfg.P
    key = (round(ego.d, 1), round(ego.phi, 2), round(max(ego.v, 0.0) * 2.0) / 2.0,
           cfg.curvature, cfg.T, cfg.wheelbase)
    return _terminal_weight_cached(key, (tuple(cfg.Q.ravel()), tuple(cfg.R.ravel())))


@dataclass
class _Condensed:
    pred: Prediction
    H: np.ndarray
    g: np.ndarray
    const: float
    A_state: np.ndarray
    b_state: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    P: np.ndarray


def _condense(ego: EgoState, cfg: PlannerConfig, cost: bool = True) -> _Condensed:
    """Cost and state rows on ``U``; ``cost=False`` skips the cost terms (feasibility only)."""
    pred = predict_ego(ego, cfg)
    N = cfg.N
    d_lo, d_hi = cfg.d_bounds
    sel_d = pred.Su[1::4]
    sel_v = pred.Su[3::4]
    A_state = np.vstack([sel_d, -sel_d, sel_v, -sel_v])
    b_state = np.concatenate([d_hi - pred.w[1::4], pred.w[1::4] - d_lo,
                              cfg.v_max - pred.w[3::4], pred.w[3::4]])
    lb = np.tile(cfg.box.lower, N)
    ub = np.tile(cfg.box.upper, N)
    if not cost:
        return _Condensed(pred, None, None, float("nan"), A_state, b_state, lb, ub, None)
    P = terminal_weight(ego, cfg)
    Qbar = np.zeros((4 * N, 4 * N))
    for k in range(N - 1):
        Qbar[4 * k:4 * k + 4, 4 * k:4 * k + 4] = cfg.Q
    Qbar[4 * N - 4:, 4 * N - 4:] = P
    Rbar = np.kron(np.eye(N), cfg.R)
    ref = np.tile(cfg.xi_ref.as_array(), N)
    Su = pred.Su
    dw = pred.w - ref
    H = 2.0 * (Su.T @ Qbar @ Su + Rbar)
    H = 0.5 * (H + H.T)
    g = 2.0 * Su.T @ Qbar @ dw
    dx0 = pred.xi0 - cfg.xi_ref.as_array()
    const = float(dx0 @ cfg.Q @ dx0 + dw @ Qbar @ dw)
    return _Condensed(pred, H, g, const, A_state, b_state, lb, ub, P)


def _safe_set(x: WorldState, cfg: PlannerConfig, include_initial: bool = False) -> SafeSetSequence:
    return build_safe_sequence(x.ego, x.obstacles, cfg.N, cfg.geometry, T=cfg.T,
                               lag=x.obstacle_lag, include_initial=include_initial)


def _collision_rows(cond: _Condensed, sss: SafeSetSequence, offsets: np.ndarray):
    """``G (Su U + w) <= offsets`` as rows on ``U``."""
    if sss.n_q == 0:
        return np.zeros((0, cond.pred.Su.shape[1])), np.zeros(0)
    return sss.Q_N @ cond.pred.Su, offsets - sss.Q_N @ cond.pred.w


def _result(status, U, cond, cfg, solve=None, sss=None, surrogate=float("nan")) -> PlanResult:
    U = np.asarray(U, float).reshape(cfg.N, 2)
    states = cond.pred.states(U)
    obj = horizon_cost(states, U, cfg, cond.P) if np.all(np.isfinite(U)) else float("inf")
    return PlanResult(status, U, states, obj, solve, sss, surrogate)


def _solve_with_rows(cond: _Condensed, cfg: PlannerConfig, A_col, b_col, sss) -> PlanResult:
    A_in = np.vstack([cond.A_state, A_col])
    b_in = np.concatenate([cond.b_state, b_col])
    res = solve_qp(QuadraticProgram(cond.H, cond.g, A_in=A_in, b_in=b_in, lb=cond.lb, ub=cond.ub),
                   cfg.solver)
    return _result(res.status, res.z_star, cond, cfg, res, sss)


def solve_smpc(x: WorldState, cfg: PlannerConfig) -> PlanResult:
    """Chance-constrained plan: each collision row is tightened at level ``beta``."""
    cond = _condense(x.ego, cfg)
    sss = _safe_set(x, cfg)
    A_col, b_col = _collision_rows(cond, sss, chance_tightened(sss, cfg.beta))
    return _solve_with_rows(cond, cfg, A_col, b_col, sss)


def _robust_system(x: WorldState, cfg: PlannerConfig, include_initial: bool, cost: bool = True):
    cond = _condense(x.ego, cfg, cost)
    sss = _safe_set(x, cfg, include_initial)
    off, init = robust_tightened(sss)
    initial_ok = True
    if sss.initial:
        initial_ok = bool(np.all(sss.initial["normals"] @ cond.pred.xi0 <= init + 1e-9))
    A_col, b_col = _collision_rows(cond, sss, off)
    return cond, sss, A_col, b_col, initial_ok


def solve_cvpm_robust(x: WorldState, cfg: PlannerConfig, include_initial: bool = False) -> PlanResult:
    """Plan that avoids every obstacle position in the reach tubes."""
    cond, sss, A_col, b_col, initial_ok = _robust_system(x, cfg, include_initial)
    if not initial_ok:
        return _result(INFEASIBLE, np.full(2 * cfg.N, np.nan), cond, cfg, None, sss)
    return _solve_with_rows(cond, cfg, A_col, b_col, sss)


def braking_hints(ego: EgoState, cfg: PlannerConfig, levels=(0.0, -2.0, -4.0, -6.0)) -> List[np.ndarray]:
    """Straight-ahead constant-acceleration profiles; braking stops at ``v = 0`` instead of reversing.

    Full throttle is included for obstacles closing in from behind.
    """
    return [_constant_accel(ego, cfg, a) for a in _levels(cfg, levels)]


def _levels(cfg, levels=(0.0, -2.0, -4.0, -6.0)):
    return [float(np.clip(a, cfg.box.a_min, cfg.box.a_max)) for a in tuple(levels) + (cfg.box.a_min, cfg.box.a_max)]


def _constant_accel(ego: EgoState, cfg: PlannerConfig, a: float) -> np.ndarray:
    v, U = ego.v, np.zeros((cfg.N, 2))
    for k in range(cfg.N):
        U[k, 0] = max(a, -v / cfg.T) if a < 0 else a
        v = max(v + U[k, 0] * cfg.T, 0.0)
    return U.ravel()


def robust_case_exists(x: WorldState, cfg: PlannerConfig, include_initial: bool = False,
                       hints: Optional[Iterable[np.ndarray]] = None) -> bool:
    """Whether the robust input set is nonempty (no cost is optimized).

    ``hints`` are candidate input sequences tried as witnesses before the
    iterative test; a wrong hint only costs time. Witnesses are checked by
    a direct rollout, so the condensed matrices are only built when every
    candidate fails.
    """
    try:
        model = linearize_discretize(x.ego, cfg.T, cfg.curvature, cfg.wheelbase)
        sss = _safe_set(x, cfg, include_initial)
        off, init = robust_tightened(sss)
        if sss.initial and not np.all(sss.initial["normals"] @ x.ego.as_array() <= init + 1e-9):
            return False
        for h, level in _candidates(x, cfg, hints):
            if _witness_ok(h, model, x.ego, sss, off, cfg):
                if level is not None:
                    _last_level[0] = level
                return True
        cond = _condense(x.ego, cfg, cost=False)
        A_col, b_col = _collision_rows(cond, sss, off)
        return check_feasible(A_in=np.vstack([cond.A_state, A_col]),
                              b_in=np.concatenate([cond.b_state, b_col]),
                              lb=cond.lb, ub=cond.ub, settings=cfg.solver)
    except (np.linalg.LinAlgError, ValueError) as exc:
        logger.warning("robust feasibility check failed: %s", exc)
        return False


# acceleration level of the last successful braking witness; only affects the try order
_last_level = [None]


def reset_witness_order() -> None:
    _last_level[0] = None


def _candidates(x, cfg, hints):
    # braking profiles are only built if the caller's hints fail
    yield from ((np.ravel(h), None) for h in (hints or ()))
    levels = _levels(cfg)
    if _last_level[0] in levels:
        levels.remove(_last_level[0])
        levels.insert(0, _last_level[0])
    for a in levels:
        yield _constant_accel(x.ego, cfg, a), a


def _witness_ok(U, model: LinearEgoModel, ego: EgoState, sss: SafeSetSequence, offsets, cfg,
                tol: float = 1e-7) -> bool:
    """Same test as ``max_violation <= tol`` on the condensed rows, by rolling the model forward."""
    U = np.asarray(U, float).reshape(cfg.N, 2)
    if np.any(U < cfg.box.lower - tol) or np.any(U > cfg.box.upper + tol):
        return False
    A, B = model.A_d, model.B_d
    x0 = ego.as_array()
    drift = model.c_d - x0
    X = np.empty((cfg.N, 4))
    e = np.zeros(4)                 # deviation from the linearization state
    for k in range(cfg.N):
        e = A @ e + B @ U[k] + drift
        X[k] = x0 + e
    d_lo, d_hi = cfg.d_bounds
    if (np.any(X[:, 1] > d_hi + tol) or np.any(X[:, 1] < d_lo - tol)
            or np.any(X[:, 3] > cfg.v_max + tol) or np.any(X[:, 3] < -tol)):
        return False
    if sss.n_q == 0:
        return True
    lhs = np.einsum("ij,ij->i", sss.normals, X[sss.steps - 1])
    return bool(np.all(lhs <= offsets + tol))


def solve_cvpm_prob(x: WorldState, cfg: PlannerConfig) -> PlanResult:
    """Plan minimizing the Mahalanobis distance of the row means to the safe orthant.

    With ``mu = Q_N Xi + q_bar`` the surrogate is
    ``min_{S <= 0} (S - mu)' Sigma_q^{-1} (S - mu)``. Writing
    ``S = mu + L t`` with ``Sigma_q = L L'`` turns it into ``min |t|^2``
    subject to ``mu + L t <= 0``, which keeps the Hessian well conditioned.
    A small multiple of the tracking cost picks one plan among ties.

    The frozen sides can leave braking as the only remedy against an
    obstacle ahead. When the plan still violates rows, the obstacle with
    the largest mean violation is offered a lateral side from a few
    switch steps on, and the assignment with the smallest surrogate wins.
    """
    cond = _condense(x.ego, cfg)
    sss = _safe_set(x, cfg)
    best = _prob_plan(cond, sss, cfg)
    if not best.surrogate > 1e-9 or not cfg.prob_switch_steps:
        return best
    mu = sss.Q_N @ (cond.pred.Su @ best.U.ravel() + cond.pred.w) + sss.q_bar
    worst = int(np.argmax(mu))
    oid = sss.obstacle_ids[worst]
    j = int(sss.obstacle_index[worst])
    d_obs = sss.tracked[j][0].d_do
    _, ws = cfg.geometry.inflation(sss.tracked[j][1].length, sss.tracked[j][1].width)
    lo, hi = cfg.d_bounds
    steps = sorted({min(max(int(round(f * cfg.N)), 1), cfg.N) for f in cfg.prob_switch_steps})
    for side in ("left", "right"):
        # side names where the obstacle sits, so "left" puts the ego to its right
        if (side == "left" and d_obs - ws < lo) or (side == "right" and d_obs + ws > hi):
            continue
        for k in steps:
            cand = _prob_plan(cond, switch_side(sss, oid, side, k, cfg.geometry), cfg)
            if cand.surrogate < best.surrogate - 1e-9 * max(1.0, best.surrogate):
                best = cand
            if not best.surrogate > 1e-9:
                return best
    return best


def _prob_plan(cond: _Condensed, sss: SafeSetSequence, cfg: PlannerConfig) -> PlanResult:
    """Surrogate minimization over a growing working set of obstacles.

    The offset covariance is block diagonal across obstacles, so an
    obstacle whose rows all hold at the plan contributes ``t_j = 0`` and
    nothing to the cost. Solving with a subset is a relaxation; once no
    left-out obstacle is violated the subset plan is optimal for all rows.
    """
    if sss.n_q == 0:
        res = solve_qp(QuadraticProgram(cond.H, cond.g, A_in=cond.A_state, b_in=cond.b_state,
                                        lb=cond.lb, ub=cond.ub), cfg.solver)
        return _result(res.status, res.z_star, cond, cfg, res, sss, 0.0)
    G = sss.Q_N @ cond.pred.Su
    mu0 = sss.Q_N @ cond.pred.w + sss.q_bar
    owner = sss.obstacle_index
    active = np.isin(owner, owner[mu0 > 0])
    for _ in range(len(sss.tracked) + 1):
        res, U = _prob_subproblem(cond, cfg, G[active], mu0[active], sss.sigma_q[np.ix_(active, active)])
        mu = G @ U + mu0
        late = (mu > 1e-7) & ~active
        if not late.any():
            break
        active |= np.isin(owner, owner[late])
    sur = surrogate_value(U, cond, sss)
    if sur <= 1e-9 and cfg.prob_margin_cap > 0:
        # only the obstacles that forced the fallback get a margin; the others keep safe means
        sd = np.where(active, np.sqrt(np.clip(np.diag(sss.sigma_q), 0.0, None)), 0.0)
        res2, U2 = _margin_subproblem(cond, cfg, G, mu0, sd)
        if res2.optimal:
            res, U = res2, U2
            sur = surrogate_value(U, cond, sss)
    return _result(res.status, U, cond, cfg, res, sss, sur)


def _margin_subproblem(cond: _Condensed, cfg: PlannerConfig, G, mu0, sd):
    """Zero surrogate is a whole set of plans; pick the one with the largest margin ``t`` in
    row standard deviations, ``G U + mu0 + sd t <= 0``, capped at ``cfg.prob_margin_cap``."""
    nU = 2 * cfg.N
    eps = cfg.prob_regularization
    H = np.zeros((nU + 1, nU + 1))
    H[:nU, :nU] = eps * cond.H
    g = np.concatenate([eps * cond.g, [-1.0]])
    A_in = np.vstack([np.hstack([cond.A_state, np.zeros((cond.A_state.shape[0], 1))]),
                      np.hstack([G, sd[:, None]])])
    b_in = np.concatenate([cond.b_state, -mu0])
    lb = np.concatenate([cond.lb, [-1.0]])
    ub = np.concatenate([cond.ub, [cfg.prob_margin_cap]])
    res = solve_qp(QuadraticProgram(H, g, A_in=A_in, b_in=b_in, lb=lb, ub=ub), cfg.solver)
    return res, np.clip(res.z_star[:nU], cond.lb, cond.ub)


def _prob_subproblem(cond: _Condensed, cfg: PlannerConfig, G, mu0, S):
    nU, nq = 2 * cfg.N, mu0.size
    eps = cfg.prob_regularization
    if nq == 0:
        res = solve_qp(QuadraticProgram(cond.H, cond.g, A_in=cond.A_state, b_in=cond.b_state,
                                        lb=cond.lb, ub=cond.ub), cfg.solver)
        return res, np.clip(res.z_star, cond.lb, cond.ub)
    L = np.linalg.cholesky(S) if _is_pd(S) else _psd_factor(S)
    H = np.zeros((nU + nq, nU + nq))
    H[:nU, :nU] = eps * cond.H
    H[nU:, nU:] = 2.0 * np.eye(nq)
    g = np.concatenate([eps * cond.g, np.zeros(nq)])
    A_in = np.vstack([np.hstack([cond.A_state, np.zeros((cond.A_state.shape[0], nq))]),
                      np.hstack([G, L])])
    b_in = np.concatenate([cond.b_state, -mu0])
    lb = np.concatenate([cond.lb, np.full(nq, -np.inf)])
    ub = np.concatenate([cond.ub, np.full(nq, np.inf)])
    res = solve_qp(QuadraticProgram(H, g, A_in=A_in, b_in=b_in, lb=lb, ub=ub), cfg.solver)
    return res, np.clip(res.z_star[:nU], cond.lb, cond.ub)


def _is_pd(S) -> bool:
    try:
        np.linalg.cholesky(S)
        return True
    except np.linalg.LinAlgError:
        return False


def _orthant_distance(mu: np.ndarray, S: np.ndarray) -> float:
    """``min_{s <= 0} (s - mu)' S^{-1} (s - mu)`` by a small dual QP."""
    if np.all(mu <= 0):
        return 0.0
    # dual: max_{lam >= 0} lam' mu - lam' S lam / 4  ->  QP in lam
    n = mu.size
    res = solve_qp(QuadraticProgram(0.5 * S, -mu, lb=np.zeros(n)))
    lam = res.z_star
    return float(max(lam @ mu - 0.25 * lam @ S @ lam, 0.0))


def surrogate_value(U, cond: _Condensed, sss: SafeSetSequence) -> float:
    mu = sss.Q_N @ (cond.pred.Su @ np.ravel(U) + cond.pred.w) + sss.q_bar
    # separable across obstacles; satisfied obstacles add zero
    total = 0.0
    for j in np.unique(sss.obstacle_index[mu > 0]):
        rows = sss.obstacle_index == j
        total += _orthant_distance(mu[rows], sss.sigma_q[np.ix_(rows, rows)])
    return total


def surrogate_objective(U, x: WorldState, cfg: PlannerConfig) -> float:
    """Mahalanobis distance of the row means induced by ``U`` to the safe orthant."""
    return surrogate_value(U, _condense(x.ego, cfg), _safe_set(x, cfg))


def row_violation_probability(lhs: np.ndarray, h_mean: np.ndarray, h_cov: np.ndarray, samples: int,
                              rng: np.random.Generator, chunk: int = 20000) -> float:
    """Fraction of Gaussian offset draws ``h`` with ``lhs > h`` in at least one row."""
    lhs = np.atleast_1d(np.asarray(lhs, float))
    h_mean = np.atleast_1d(np.asarray(h_mean, float))
    if lhs.size == 0:
        return 0.0
    F = _psd_factor(np.atleast_2d(h_cov))
    hits, done = 0, 0
    while done < samples:
        m = min(chunk, samples - done)
        h = h_mean + rng.standard_normal((m, lhs.size)) @ F.T
        hits += int(np.count_nonzero(np.any(lhs > h, axis=1)))
        done += m
    return hits / samples


def violation_probability_mc(U, x: WorldState, cfg: PlannerConfig, samples: int,
                             rng: np.random.Generator, safe_set: Optional[SafeSetSequence] = None) -> float:
    """Monte-Carlo estimate of the probability that any collision row is violated.

    The ego sequence comes from the linearized prediction under ``U`` and
    the row offsets are drawn from their untruncated Gaussian.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    pred = predict_ego(x.ego, cfg)
    sss = safe_set if safe_set is not None else _safe_set(x, cfg)
    if sss.n_q == 0:
        return 0.0
    lhs = sss.Q_N @ (pred.Su @ np.ravel(U) + pred.w)
    return row_violation_probability(lhs, -sss.q_bar, sss.sigma_q, samples, rng)


def footprint_violation_probability_mc(U, x: WorldState, cfg: PlannerConfig, samples: int,
                                       rng: np.random.Generator, chunk: int = 20000) -> float:
    """Monte-Carlo probability that the ego enters an inflated obstacle footprint.

    Unlike ``violation_probability_mc`` this does not depend on the chosen
    sides: the safe set at each step is the complement of every obstacle
    rectangle grown by both half-sizes and the margin. Obstacle positions
    are drawn from the same untruncated Gaussian sequences.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    pred = predict_ego(x.ego, cfg)
    ego = (pred.Su @ np.ravel(U) + pred.w).reshape(cfg.N, 4)[:, :2]
    lag = x.obstacle_lag
    blocks = []
    for ob in x.obstacles:
        seq = predict_obstacle_sequence(ob.state, ob.model, cfg.N + lag, include_initial=True)
        idx = (4 * np.arange(lag + 1, lag + cfg.N + 1)[:, None] + np.array([0, 2])).ravel()
        mean = seq.mean_sequence[idx]
        F = _psd_factor(seq.covariance[np.ix_(idx, idx)])
        blocks.append((mean, F, cfg.geometry.inflation(ob.model.length, ob.model.width)))
    if not blocks:
        return 0.0
    hits, done = 0, 0
    while done < samples:
        m = min(chunk, samples - done)
        hit = np.zeros(m, dtype=bool)
        for mean, F, (ls, ws) in blocks:
            pos = (mean + rng.standard_normal((m, mean.size)) @ F.T).reshape(m, cfg.N, 2)
            rel = np.abs(pos - ego)
            hit |= np.any((rel[:, :, 0] < ls) & (rel[:, :, 1] < ws), axis=1)
        hits += int(np.count_nonzero(hit))
        done += m
    return hits / samples
