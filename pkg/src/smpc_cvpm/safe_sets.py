"""Half-space safe sets for the ego position, their chance and robust tightening, and obstacle reach tubes.

Every (obstacle, step) pair contributes one row

    normal . xi_k  <=  const + obstacle_coef . p_k

where ``xi_k`` is the ego state at prediction step ``k`` and ``p_k`` is the
obstacle position ``[s, d]`` at the matching obstacle step. The side
(front, rear, left or right) is chosen once per replan and kept for the
whole horizon, so all planner problems stay linear.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from statistics import NormalDist
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .uncertainty import (SequenceDistribution, offset_covariance, predict_obstacle_sequence,
                          stack_sequences)

SIDES = ("front", "rear", "left", "right")

# ego-state normal and obstacle-position coefficient for each side
_SIDE_ROWS = {
    "front": (np.array([1.0, 0.0, 0.0, 0.0]), np.array([1.0, 0.0])),
    "rear": (np.array([-1.0, 0.0, 0.0, 0.0]), np.array([-1.0, 0.0])),
    "left": (np.array([0.0, 1.0, 0.0, 0.0]), np.array([0.0, 1.0])),
    "right": (np.array([0.0, -1.0, 0.0, 0.0]), np.array([0.0, -1.0])),
}


@dataclass(frozen=True)
class Geometry:
    """Ego body size and the clearance kept beyond body inflation (metres)."""
    ego_length: float = 4.5
    ego_width: float = 1.8
    margin: float = 0.5
    consider_range: float = 80.0

    def inflation(self, obs_length: float, obs_width: float) -> Tuple[float, float]:
        return (0.5 * (self.ego_length + obs_length) + self.margin,
                0.5 * (self.ego_width + obs_width) + self.margin)


@dataclass(frozen=True)
class Halfspace:
    normal: np.ndarray
    offset: float
    step_index: int
    obstacle_coef: np.ndarray = field(default_factory=lambda: np.zeros(2))
    const: float = 0.0
    obstacle_id: object = None
    side: str = ""

    def __post_init__(self):
        if not np.linalg.norm(self.normal) > 0:
            raise ValueError("half-space normal must be nonzero")

    def margin(self, xi) -> float:
        """Signed slack ``offset - normal . xi`` (>= 0 inside)."""
        return float(self.offset - self.normal @ np.asarray(xi, dtype=float))


@dataclass
class ReachTube:
    """Axis-aligned boxes on the obstacle state, one per step ``0..N``."""
    lower: np.ndarray
    upper: np.ndarray

    @property
    def steps(self) -> int:
        return self.lower.shape[0] - 1

    def position_box(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.lower[k, [0, 2]], self.upper[k, [0, 2]]

    def contains(self, k: int, x, tol: float = 1e-9) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower[k] - tol) and np.all(x <= self.upper[k] + tol))


@dataclass
class SafeSetSequence:
    """Stacked rows ``Q_N Xi + q <= 0`` with random offset ``q ~ N(q_bar, sigma_q)``.

    ``Q_N`` acts on the ego sequence ``xi_1..xi_N``. ``Q_do`` maps the
    stacked obstacle sequence (``obstacle_seq``, built from ``seqs``) to the row right-hand
    sides, so ``q = -(h_const + Q_do Xi_do)``. Row data is kept as arrays;
    ``rows`` and ``initial_rows`` expose it as ``Halfspace`` objects. Rows
    on the current ego state (step 0) are kept apart.
    """
    N: int
    Q_N: np.ndarray
    q_bar: np.ndarray
    sigma_q_: Optional[np.ndarray]
    Q_do: np.ndarray
    h_const: np.ndarray
    seqs: list
    steps: np.ndarray
    normals: np.ndarray
    coefs: np.ndarray
    obstacle_index: np.ndarray
    obstacle_ids: list
    sides: list
    initial: dict = field(default_factory=dict)
    lag: int = 0
    tracked: list = field(default_factory=list)   # (ObstacleState, ObstacleModel) per kept obstacle
    _stacked: Optional[SequenceDistribution] = field(default=None, repr=False)

    @property
    def obstacle_seq(self) -> Optional[SequenceDistribution]:
        if self._stacked is None and self.seqs:
            self._stacked = stack_sequences(self.seqs)
        return self._stacked

    @property
    def n_q(self) -> int:
        return self.q_bar.size

    @property
    def sigma_q(self) -> np.ndarray:
        """Offset covariance, formed on first use (robust planners never need it)."""
        if self.sigma_q_ is None:
            self.sigma_q_ = (offset_covariance(self.Q_do, self.obstacle_seq) if self.n_q
                             else np.zeros((0, 0)))
        return self.sigma_q_

    @property
    def offsets(self) -> np.ndarray:
        return -self.q_bar

    @property
    def rows(self) -> List[Halfspace]:
        return [Halfspace(self.normals[i], float(-self.q_bar[i]), int(self.steps[i]), self.coefs[i],
                          float(self.h_const[i]), self.obstacle_ids[i], self.sides[i]) for i in range(self.n_q)]

    @property
    def initial_rows(self) -> List[Halfspace]:
        ini = self.initial
        if not ini:
            return []
        return [Halfspace(ini["normals"][i], float(ini["offsets"][i]), 0, ini["coefs"][i],
                          float(ini["consts"][i]), ini["ids"][i], ini["sides"][i])
                for i in range(len(ini["ids"]))]

    @property
    def per_step_index(self):
        return {i: (self.obstacle_ids[i], int(self.steps[i]), self.sides[i]) for i in range(self.n_q)}

    def with_offsets(self, offsets) -> "SafeSetSequence":
        return replace(self, q_bar=-np.asarray(offsets, dtype=float))


def select_side(relative_position, geometry, obs_length: float = 4.5,
                obs_width: float = 1.8) -> str:
    """Pick the separating side with the largest worst-case nominal margin.

    ``relative_position`` is obstacle minus ego ``(ds, dd)``, or an (M, 2)
    array of such pairs along the horizon whose first row is the current
    one; the smallest margin over the rows counts. A frozen row binds from
    the first prediction step on, so a lateral side is only eligible when
    it already holds at the current position, and front/rear must match
    the current sign of ``ds``. Ties resolve front > rear > left > right.
    """
    rel = np.atleast_2d(np.asarray(relative_position, dtype=float))
    ls, ws = geometry.inflation(obs_length, obs_width) if isinstance(geometry, Geometry) else geometry
    lo, hi = rel.min(axis=0), rel.max(axis=0)
    ds0, dd0 = float(rel[0, 0]), float(rel[0, 1])
    margins = [lo[0] - ls if ds0 >= 0 else -math.inf,
               -hi[0] - ls if ds0 <= 0 else -math.inf,
               lo[1] - ws if dd0 - ws >= 0 else -math.inf,
               -hi[1] - ws if -dd0 - ws >= 0 else -math.inf]
    # max() keeps the first maximum, which gives the tie order
    return SIDES[max(range(4), key=margins.__getitem__)]


def _w_support(model):
    if model.w is None:
        return np.zeros(2), np.zeros(2)
    return model.w.lower, model.w.upper


@functools.lru_cache(maxsize=256)
def _linear_tube_maps(model, N):
    """State-independent parts of the linear hull: ``A_cl^k``, centre drift and radii."""
    A_cl, B, K = model.A_cl, model.B_do, model.K_do
    wl, wu = _w_support(model)
    wc, wr = 0.5 * (wl + wu), 0.5 * (wu - wl)
    if model.v is not None:
        r0 = 0.5 * (model.v.upper - model.v.lower)
    else:
        r0 = np.zeros(4)
    step = -B @ K @ model.xi_ref.as_array() + B @ wc
    Phis, drift, radii = [np.eye(4)], [np.zeros(4)], [r0]
    gain, acc = B.copy(), np.zeros(4)
    with np.errstate(invalid="ignore"):
        for _ in range(N):
            acc = acc + np.abs(gain) @ wr
            gain = A_cl @ gain
            Phis.append(A_cl @ Phis[-1])
            drift.append(A_cl @ drift[-1] + step)
            radii.append(np.abs(Phis[-1]) @ r0 + acc)
    out = (np.array(Phis), np.array(drift), np.array(radii), r0)
    for a in out:
        a.setflags(write=False)
    return out


def reach_tube(state, model, N: int) -> ReachTube:
    """Interval outer bound of every state reachable under the clipped feedback.

    Step 0 is the measurement inflated by the noise support. While the
    input interval over the current box cannot reach the input limits,
    the closed loop is linear on every reachable state and the box is the
    exact hull ``|A_cl^k| r_0 + sum_i |A_cl^i B| r_w``, which avoids the
    wrapping growth of step-wise interval arithmetic. Once clipping is
    possible the remaining steps use the clipped input interval.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    Phis, drift, radii, r0 = _linear_tube_maps(model, N)
    A, B, K = model.A_do, model.B_do, model.K_do
    ref = model.xi_ref.as_array()
    wl, wu = _w_support(model)
    wc, wr = 0.5 * (wl + wu), 0.5 * (wu - wl)
    x0 = state.as_array()
    if model.v is not None:
        x0 = x0 + 0.5 * (model.v.lower + model.v.upper)
    centres = Phis @ x0 + drift
    # first step whose input interval can touch a limit; the linear hull is exact up to it
    with np.errstate(invalid="ignore"):
        uc = (centres[:N] - ref) @ K.T + wc
        ur = radii[:N] @ np.abs(K).T + wr
        ok = np.all(np.isfinite(ur), axis=1) & np.all(uc - ur >= model.u_min, axis=1) \
            & np.all(uc + ur <= model.u_max, axis=1)
    bad = np.flatnonzero(~ok)
    k0 = N if bad.size == 0 else int(bad[0])
    lows = list(centres[:k0 + 1] - radii[:k0 + 1])
    highs = list(centres[:k0 + 1] + radii[:k0 + 1])
    c, r = centres[k0], radii[k0]
    absA, absB, absK = np.abs(A), np.abs(B), np.abs(K)
    for _ in range(k0, N):
        with np.errstate(invalid="ignore"):
            uc = K @ (c - ref) + wc
            ur = absK @ r + wr
        ul = np.clip(uc - ur, model.u_min, model.u_max)
        uh = np.clip(uc + ur, model.u_min, model.u_max)
        c = A @ c + B @ (0.5 * (ul + uh))
        r = absA @ r + absB @ (0.5 * (uh - ul))
        lows.append(c - r)
        highs.append(c + r)
    return ReachTube(np.array(lows), np.array(highs))


def tighten_chance(h: Halfspace, sigma_row: float, beta: float) -> Halfspace:
    """Move the offset inward by the ``beta`` quantile of the row's Gaussian offset."""
    if not 0.5 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0.5, 1), got {beta}")
    if sigma_row < 0:
        raise ValueError("row variance must be nonnegative")
    shift = NormalDist().inv_cdf(beta) * np.sqrt(sigma_row) if sigma_row > 0 else 0.0
    return replace(h, offset=h.offset - shift)


def robust_offset(h: Halfspace, tube: ReachTube, tube_step: Optional[int] = None) -> float:
    k = h.step_index if tube_step is None else tube_step
    lo, hi = tube.position_box(k)
    c, r = 0.5 * (lo + hi), 0.5 * (hi - lo)
    a = h.obstacle_coef
    return float(h.const + a @ c - np.abs(a) @ r)


def tighten_robust(h: Halfspace, tube: ReachTube, tube_step: Optional[int] = None) -> Halfspace:
    """Worst-case offset over the obstacle positions in the tube at the row's step."""
    k = h.step_index if tube_step is None else tube_step
    if k > tube.steps:
        raise ValueError(f"tube covers {tube.steps} steps, row needs step {k}")
    return replace(h, offset=robust_offset(h, tube, k))


def _nominal_ego_positions(ego0, T: float, steps: int) -> np.ndarray:
    k = np.arange(steps + 1)
    v = ego0.v
    return np.column_stack([ego0.s + v * np.cos(ego0.phi) * k * T,
                            ego0.d + v * np.sin(ego0.phi) * k * T])


@functools.lru_cache(maxsize=4096)
def _sequence_cached(state, model, M: int, oid):
    return predict_obstacle_sequence(state, model, M, include_initial=True, obstacle_id=oid)


@functools.lru_cache(maxsize=4096)
def cached_reach_tube(state, model, N: int) -> ReachTube:
    """``reach_tube`` memoized on (state, model identity, N); tubes are shared read-only."""
    return reach_tube(state, model, N)


def clear_state_caches():
    """Forget memoized rollouts and tubes keyed on obstacle states.

    Called at the start of a closed-loop run so that repeated runs redo the
    same work and their timings stay comparable.
    """
    _sequence_cached.cache_clear()
    cached_reach_tube.cache_clear()


def _unpack(ob):
    return (ob.id, ob.state, ob.model) if hasattr(ob, "model") else tuple(ob)


def build_safe_sequence(ego0, obstacles: Sequence, N: int, geometry: Geometry = Geometry(),
                        T: Optional[float] = None, lag: int = 0, include_initial: bool = False,
                        sides: Optional[dict] = None) -> SafeSetSequence:
    """Nominal half-space sequence for the ego against every obstacle.

    ``obstacles`` holds ``(id, ObstacleState, ObstacleModel)`` triples or
    objects with ``id``, ``state`` and ``model`` attributes. Ego step ``k``
    is paired with obstacle step ``k + lag`` (``lag > 0`` when the obstacle
    snapshot is older than the ego anchor). Obstacles whose nominal
    longitudinal distance stays beyond ``geometry.consider_range`` are
    skipped. ``sides`` may pin the side per obstacle id. Rows are ordered
    step-major: all obstacles at step 1, then step 2, and so on.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    # one spare step when lag == 0 so the successor check reuses the same cached rollout
    M = N + max(lag, 1)
    kept, seqs = [], []
    ego_pos = {}
    for ob in obstacles:
        oid, st, model = _unpack(ob)
        Tm = model.T if T is None else T
        seq = _sequence_cached(st, model, M, oid)
        obs_pos = seq.mean_sequence.reshape(-1, 4)[lag:lag + N + 1, [0, 2]]
        if Tm not in ego_pos:
            ego_pos[Tm] = _nominal_ego_positions(ego0, Tm, N)
        rel = obs_pos - ego_pos[Tm]
        if np.abs(rel[:, 0]).min() > geometry.consider_range:
            continue
        ls, ws = geometry.inflation(model.length, model.width)
        side = (sides or {}).get(oid) or select_side(rel, (ls, ws))
        kept.append((oid, st, model, side, ls if side in ("front", "rear") else ws))
        seqs.append(seq)
    n_ob = len(kept)
    mean_seq = np.concatenate([s.mean_sequence for s in seqs]) if seqs else np.zeros(0)
    dim = mean_seq.size
    n_q = n_ob * N
    # step-major row layout: row = (k - 1) * n_ob + j
    ks = np.repeat(np.arange(1, N + 1), n_ob)
    js = np.tile(np.arange(n_ob), N)
    normals = np.array([_SIDE_ROWS[kept[j][3]][0] for j in range(n_ob)]).reshape(n_ob, 4)
    coefs = np.array([_SIDE_ROWS[kept[j][3]][1] for j in range(n_ob)]).reshape(n_ob, 2)
    infl = np.array([kept[j][4] for j in range(n_ob)])
    G = np.zeros((n_q, 4 * N))
    Q_do = np.zeros((n_q, dim))
    rows_idx = np.arange(n_q)
    for c in range(4):
        G[rows_idx, 4 * (ks - 1) + c] = normals[js, c]
    # offset of obstacle j's step-m block in the stacked sequence (steps 0..M per obstacle)
    blk = 4 * (js * (M + 1) + ks + lag)
    Q_do[rows_idx, blk] = coefs[js, 0]
    Q_do[rows_idx, blk + 2] = coefs[js, 1]
    h_const = -infl[js]
    offsets = h_const + (Q_do @ mean_seq if n_q else np.zeros(0))
    ids = [kept[j][0] for j in js]
    side_list = [kept[j][3] for j in js]
    initial = {}
    if include_initial and n_ob:
        pos0 = mean_seq.reshape(n_ob, M + 1, 4)[:, lag][:, [0, 2]]
        initial = {"normals": normals, "coefs": coefs, "consts": -infl,
                   "offsets": -infl + np.sum(coefs * pos0, axis=1),
                   "ids": [k[0] for k in kept], "sides": [k[3] for k in kept]}
    return SafeSetSequence(N, G, -offsets, None, Q_do, h_const, seqs, ks, normals[js], coefs[js], js,
                           ids, side_list, initial, lag, [(k[1], k[2]) for k in kept])


def switch_side(sss: SafeSetSequence, obstacle_id, side: str, from_step: int,
                geometry: Geometry = Geometry()) -> SafeSetSequence:
    """Copy of ``sss`` whose rows for ``obstacle_id`` at steps ``>= from_step`` use ``side``.

    Still one row per (obstacle, step); only the frozen-side rule is
    relaxed. The offset covariance is recomputed on demand.
    """
    if side not in _SIDE_ROWS:
        raise ValueError(f"unknown side {side!r}")
    if obstacle_id not in sss.obstacle_ids:
        raise KeyError(obstacle_id)
    j = int(sss.obstacle_index[sss.obstacle_ids.index(obstacle_id)])
    mask = (sss.obstacle_index == j) & (sss.steps >= from_step)
    if not mask.any():
        return sss
    model = sss.tracked[j][1]
    ls, ws = geometry.inflation(model.length, model.width)
    normal, coef = _SIDE_ROWS[side]
    rows = np.flatnonzero(mask)
    G, Q_do = sss.Q_N.copy(), sss.Q_do.copy()
    normals, coefs, h_const = sss.normals.copy(), sss.coefs.copy(), sss.h_const.copy()
    M = sss.obstacle_seq.steps - 1
    for i in rows:
        k = int(sss.steps[i])
        G[i] = 0.0
        G[i, 4 * (k - 1):4 * k] = normal
        blk = 4 * (j * (M + 1) + k + sss.lag)
        Q_do[i] = 0.0
        Q_do[i, blk], Q_do[i, blk + 2] = coef
        normals[i], coefs[i] = normal, coef
        h_const[i] = -(ls if side in ("front", "rear") else ws)
    offsets = h_const + Q_do @ sss.obstacle_seq.mean_sequence
    sides = [side if mask[i] else s for i, s in enumerate(sss.sides)]
    return replace(sss, Q_N=G, q_bar=-offsets, sigma_q_=None, Q_do=Q_do, h_const=h_const,
                   normals=normals, coefs=coefs, sides=sides)


def chance_tightened(sss: SafeSetSequence, beta: float) -> np.ndarray:
    """Offsets of every row after per-row Gaussian quantile tightening."""
    if not 0.5 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0.5, 1), got {beta}")
    if sss.n_q == 0:
        return np.zeros(0)
    z = NormalDist().inv_cdf(beta)
    return sss.offsets - z * np.sqrt(np.clip(np.diag(sss.sigma_q), 0.0, None))


def robust_tightened(sss: SafeSetSequence, tubes: Optional[list] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Worst-case offsets of the horizon rows and of the step-0 rows.

    ``tubes`` lists one tube per kept obstacle (in row-index order) covering
    ``N + lag`` steps; by default they are computed from the tracked states.
    """
    if tubes is None:
        tubes = [cached_reach_tube(st, m, sss.N + sss.lag) for st, m in sss.tracked]
    if not tubes:
        return np.zeros(0), np.zeros(0)
    lo = np.stack([t.lower[:, [0, 2]] for t in tubes])
    hi = np.stack([t.upper[:, [0, 2]] for t in tubes])
    c, r = 0.5 * (lo + hi), 0.5 * (hi - lo)
    js, ks = sss.obstacle_index, sss.steps + sss.lag
    off = sss.h_const + np.sum(sss.coefs * c[js, ks], axis=1) - np.sum(np.abs(sss.coefs) * r[js, ks], axis=1)
    init = np.zeros(0)
    if sss.initial:
        a = sss.initial["coefs"]
        init = sss.initial["consts"] + np.sum(a * c[:, sss.lag], axis=1) - np.sum(np.abs(a) * r[:, sss.lag], axis=1)
    return off, init
