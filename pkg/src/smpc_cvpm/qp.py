"""Dense convex QP solver based on operator splitting (ADMM).

Problems have the form

    minimize    1/2 z' H z + g' z
    subject to  A_eq z  = b_eq
                A_in z <= b_in
                lb <= z <= ub

Internally everything is stacked into ``l <= A z <= u`` and solved with an
OSQP-style iteration: Ruiz equilibration, relaxed ADMM with a per-row step
size, a step-size update on a fixed iteration schedule, and an active-set
polish once the iterate is accurate enough to guess the active constraints.

Infeasibility is reported only with a certificate. Because every planner QP
has boxed decision variables, the Farkas test uses the box directly:
for a multiplier direction ``y`` on the general rows, the problem is
infeasible when ``min_{lb<=z<=ub} (G'y)'z`` exceeds the support value
``sup_{l<=Gz<=u} y'Gz``. This needs no accuracy in ``G'y ~ 0`` and fires
as soon as the dual iterates point in a separating direction.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.linalg as sla

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max_iter"

_INF = np.inf
_EQ_RHO_FACTOR = 1e3
_RHO_MIN, _RHO_MAX = 1e-6, 1e6


@dataclass
class QuadraticProgram:
    H: np.ndarray
    g: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[np.ndarray] = None
    b_in: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.g = np.asarray(self.g, dtype=float).ravel()
        n = self.g.size
        if self.H.shape != (n, n):
            raise ValueError(f"H has shape {self.H.shape}, expected {(n, n)}")
        if not np.allclose(self.H, self.H.T, atol=1e-9 * max(1.0, np.abs(self.H).max())):
            raise ValueError("H must be symmetric")
        self.H = 0.5 * (self.H + self.H.T)
        self.A_eq, self.b_eq = _rows(self.A_eq, self.b_eq, n, "eq")
        self.A_in, self.b_in = _rows(self.A_in, self.b_in, n, "in")
        self.lb = np.full(n, -_INF) if self.lb is None else np.broadcast_to(
            np.asarray(self.lb, dtype=float), (n,)).copy()
        self.ub = np.full(n, _INF) if self.ub is None else np.broadcast_to(
            np.asarray(self.ub, dtype=float), (n,)).copy()

    @property
    def n(self) -> int:
        return self.g.size

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.H @ z + self.g @ z)


def _rows(A, b, n, name):
    if A is None or np.size(A) == 0:
        return np.zeros((0, n)), np.zeros(0)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    if A.shape[1] != n or A.shape[0] != b.size:
        raise ValueError(f"A_{name} {A.shape} / b_{name} {b.shape} inconsistent with n={n}")
    return A, b


@dataclass
class SolverSettings:
    max_iter: int = 20000
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    eps_cert: float = 1e-7
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    scaling_iter: int = 10
    check_interval: int = 5
    rho_interval: int = 25
    polish: bool = True
    polish_eps: float = 1e-3
    polish_delta: float = 1e-7
    polish_refine: int = 4


@dataclass
class SolveResult:
    status: str
    z_star: np.ndarray
    objective: float
    iterations: int
    residuals: dict = field(default_factory=dict)
    y: Optional[np.ndarray] = None
    polished: bool = False

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


class _Stacked:
    """``l <= A z <= u`` form, general rows first, then one row per bounded variable."""

    def __init__(self, qp: QuadraticProgram):
        n = qp.n
        bounded = np.flatnonzero(np.isfinite(qp.lb) | np.isfinite(qp.ub))
        self.n_general = qp.A_eq.shape[0] + qp.A_in.shape[0]
        self.bounded = bounded
        eye = np.eye(n)[bounded]
        self.A = np.vstack([qp.A_eq, qp.A_in, eye])
        self.l = np.concatenate([qp.b_eq, np.full(qp.A_in.shape[0], -_INF), qp.lb[bounded]])
        self.u = np.concatenate([qp.b_eq, qp.b_in, qp.ub[bounded]])
        self.lb, self.ub = qp.lb, qp.ub
        self.P, self.q = qp.H, qp.g


def _ruiz(P, q, A, iters):
    n, m = P.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    Ps, As, qs = P.copy(), A.copy(), q.copy()
    for _ in range(iters):
        col = np.max(np.abs(np.vstack([Ps, As])), axis=0) if m else np.max(np.abs(Ps), axis=0)
        dt = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
        dt[col < 1e-12] = 1.0
        et = np.ones(m)
        if m:
            row = np.max(np.abs(As), axis=1)
            et = 1.0 / np.sqrt(np.clip(row, 1e-4, 1e4))
            et[row < 1e-12] = 1.0
        Ps = Ps * dt[:, None] * dt[None, :]
        As = As * et[:, None] * dt[None, :]
        qs = qs * dt
        D *= dt
        E *= et
    col_p = np.max(np.abs(Ps), axis=0) if n else np.zeros(0)
    gamma = max(float(np.mean(col_p)) if n else 0.0, float(np.max(np.abs(qs), initial=0.0)))
    c = 1.0 / np.clip(gamma, 1e-4, 1e4) if gamma > 1e-12 else 1.0
    return Ps * c, qs * c, As, D, E, c


def _box_farkas(G, l, u, lb, ub, y, eps):
    """True if ``y`` proves {l <= G z <= u, lb <= z <= ub} empty."""
    ypos, yneg = y > 0, y < 0
    if np.any(ypos & ~np.isfinite(u)) or np.any(yneg & ~np.isfinite(l)):
        return False
    support = float(np.sum(y[ypos] * u[ypos]) + np.sum(y[yneg] * l[yneg]))
    c = G.T @ y
    scale = np.max(np.abs(y), initial=0.0)
    if scale == 0.0:
        return False
    tiny = 1e-14 * scale
    cpos, cneg = c > tiny, c < -tiny
    if np.any(cpos & ~np.isfinite(lb)) or np.any(cneg & ~np.isfinite(ub)):
        return False
    lower = float(np.sum(c[cpos] * lb[cpos]) + np.sum(c[cneg] * ub[cneg]))
    mag = max(1.0, np.max(np.abs(np.concatenate([l[np.isfinite(l)], u[np.isfinite(u)],
                                                 lb[np.isfinite(lb)], ub[np.isfinite(ub)]])),
                          initial=0.0))
    return lower - support > eps * scale * mag


def _osqp_pinf(A, l, u, dy, eps):
    norm = np.max(np.abs(dy), initial=0.0)
    if norm == 0.0:
        return False
    if np.max(np.abs(A.T @ dy), initial=0.0) > eps * norm:
        return False
    ypos, yneg = dy > 0, dy < 0
    if np.any(ypos & ~np.isfinite(u)) or np.any(yneg & ~np.isfinite(l)):
        return False
    return float(np.sum(u[ypos] * dy[ypos]) + np.sum(l[yneg] * dy[yneg])) < -eps * norm


def _osqp_dinf(P, q, A, l, u, dx, eps):
    norm = np.max(np.abs(dx), initial=0.0)
    if norm == 0.0 or q @ dx >= -eps * norm:
        return False
    if np.max(np.abs(P @ dx), initial=0.0) > eps * norm:
        return False
    Adx = A @ dx
    ok_hi = np.where(np.isfinite(u), Adx <= eps * norm, True)
    ok_lo = np.where(np.isfinite(l), Adx >= -eps * norm, True)
    return bool(np.all(ok_hi & ok_lo))


def _residuals(P, q, A, x, z, y):
    Ax, Px, Aty = A @ x, P @ x, A.T @ y
    rp = np.max(np.abs(Ax - z), initial=0.0)
    rd = np.max(np.abs(Px + q + Aty), initial=0.0)
    np_ = max(np.max(np.abs(Ax), initial=0.0), np.max(np.abs(z), initial=0.0))
    nd = max(np.max(np.abs(Px), initial=0.0), np.max(np.abs(Aty), initial=0.0),
             np.max(np.abs(q), initial=0.0))
    return rp, rd, np_, nd


def _kkt_inverse(P, sigma, A, rho):
    K = P + sigma * np.eye(P.shape[0]) + (A.T * rho) @ A
    cf = sla.cho_factor(K, lower=True, check_finite=False)
    return sla.cho_solve(cf, np.eye(P.shape[0]), check_finite=False)


class _Admm:
    def __init__(self, stacked: _Stacked, settings: SolverSettings):
        self.st = stacked
        self.s = settings
        P, q, A, D, E, c = _ruiz(stacked.P, stacked.q, stacked.A, settings.scaling_iter)
        self.P, self.q, self.A, self.D, self.E, self.c = P, q, A, D, E, c
        with np.errstate(invalid="ignore"):
            self.l = stacked.l * E
            self.u = stacked.u * E
        self.eq = np.isfinite(self.l) & (np.abs(self.u - self.l) < 1e-12 * np.maximum(1.0, np.abs(self.l)))
        self.free = ~np.isfinite(self.l) & ~np.isfinite(self.u)
        self.rho_bar = settings.rho
        self._set_rho(settings.rho)

    def _set_rho(self, rho):
        self.rho_bar = float(np.clip(rho, _RHO_MIN, _RHO_MAX))
        r = np.full(self.A.shape[0], self.rho_bar)
        r[self.eq] *= _EQ_RHO_FACTOR
        r[self.free] = _RHO_MIN
        self.rho = r
        self.Kinv = _kkt_inverse(self.P, self.s.sigma, self.A, r)

    # conversions between scaled and original variables
    def unscale(self, x, z, y):
        return self.D * x, z / self.E, self.E * y / self.c

    def residuals(self, x, z, y):
        xo, zo, yo = self.unscale(x, z, y)
        st = self.st
        return _residuals(st.P, st.q, st.A, xo, zo, yo)

    def converged(self, res):
        rp, rd, np_, nd = res
        return (rp <= self.s.eps_abs + self.s.eps_rel * np_
                and rd <= self.s.eps_abs + self.s.eps_rel * nd)

    def polish(self, x, z, y):
        """Solve the equality-constrained KKT system on the guessed active set."""
        lo_act = (z - self.l < -y) | self.eq
        hi_act = (self.u - z < y) & ~self.eq
        act = lo_act | hi_act
        Aact = self.A[act]
        target = np.where(lo_act, self.l, self.u)[act]
        n, k = self.P.shape[0], Aact.shape[0]
        delta = self.s.polish_delta
        K = np.block([[self.P, Aact.T], [Aact, np.zeros((k, k))]])
        Kreg = K + np.diag(np.concatenate([np.full(n, delta), np.full(k, -delta)]))
        rhs = np.concatenate([-self.q, target])
        try:
            lu = sla.lu_factor(Kreg, check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            return None
        sol = sla.lu_solve(lu, rhs, check_finite=False)
        for _ in range(self.s.polish_refine):
            sol = sol + sla.lu_solve(lu, rhs - K @ sol, check_finite=False)
        if not np.all(np.isfinite(sol)):
            return None
        xp = sol[:n]
        yp = np.zeros_like(y)
        yp[act] = sol[n:]
        zp = self.A @ xp
        # multipliers of one-sided active rows must have the matching sign
        tol = 1e-7 * max(1.0, np.max(np.abs(yp), initial=0.0))
        if np.any(yp[lo_act & ~self.eq] > tol) or np.any(yp[hi_act] < -tol):
            return None
        zp = np.clip(zp, self.l, self.u)
        return xp, zp, yp

    def feasible_point(self, x):
        """Original-space iterate clipped to the variable box, or None if it violates rows."""
        xo = np.clip(self.D * x, self.st.lb, self.st.ub)
        return xo

    def certificate(self, dy):
        st = self.st
        dyo = self.E * dy / self.c
        g = st.n_general
        if g and _box_farkas(st.A[:g], st.l[:g], st.u[:g], st.lb, st.ub, dyo[:g], self.s.eps_cert):
            return True
        return _osqp_pinf(st.A, st.l, st.u, dyo, self.s.eps_cert)


def solve_qp(qp: QuadraticProgram, settings: Optional[SolverSettings] = None) -> SolveResult:
    """Solve a convex QP. Deterministic: identical inputs give identical iterates."""
    s = settings or SolverSettings()
    if np.any(qp.lb > qp.ub):
        return SolveResult(INFEASIBLE, np.full(qp.n, np.nan), np.inf, 0, {"reason": "empty box"})
    st = _Stacked(qp)
    if st.A.shape[0] == 0:
        return _unconstrained(qp)
    eng = _Admm(st, s)
    n, m = eng.P.shape[0], eng.A.shape[0]
    x, z, y = np.zeros(n), np.zeros(m), np.zeros(m)
    z = np.clip(z, eng.l, eng.u)
    y_check, x_check = y.copy(), x.copy()
    P, q, A, alpha, sigma = eng.P, eng.q, eng.A, s.alpha, s.sigma
    polish_tries = 0
    last_res = None
    it = 0
    for it in range(1, s.max_iter + 1):
        rho = eng.rho
        rhs = sigma * x - q + A.T @ (rho * z - y)
        xt = eng.Kinv @ rhs
        zt = A @ xt
        x_new = alpha * xt + (1.0 - alpha) * x
        zr = alpha * zt + (1.0 - alpha) * z
        z_new = np.clip(zr + y / rho, eng.l, eng.u)
        y = y + rho * (zr - z_new)
        x, z = x_new, z_new

        if it % s.check_interval == 0:
            res = eng.residuals(x, z, y)
            last_res = res
            if eng.converged(res):
                out = _finish(eng, qp, x, z, y, it, res)
                if s.polish:
                    pol = _try_polish(eng, qp, x, z, y, it)
                    if pol is not None and pol.objective <= out.objective + 1e-9 * max(1.0, abs(out.objective)):
                        return pol
                return out
            if s.polish and polish_tries < 8 and _near(eng, res, s.polish_eps):
                polish_tries += 1
                pol = _try_polish(eng, qp, x, z, y, it)
                if pol is not None:
                    return pol
            dy = y - y_check
            if eng.certificate(dy):
                return SolveResult(INFEASIBLE, eng.D * x, np.inf, it, _resdict(res), polished=False)
            dx = x - x_check
            if _osqp_dinf(eng.st.P, eng.st.q, eng.st.A, eng.st.l, eng.st.u, eng.D * dx, s.eps_cert):
                return SolveResult(UNBOUNDED, eng.D * x, -np.inf, it, _resdict(res))
            y_check, x_check = y.copy(), x.copy()

        if it % s.rho_interval == 0:
            rp, rd, np_, nd = _scaled_res(eng, x, z, y)
            ratio = np.sqrt((rp / (np_ + 1e-10)) / (rd / (nd + 1e-10) + 1e-30)) if rd > 0 else 1.0
            new_rho = eng.rho_bar * ratio
            if new_rho > 5.0 * eng.rho_bar or new_rho < 0.2 * eng.rho_bar:
                eng._set_rho(new_rho)
                y_check = y.copy()

    res = last_res if last_res is not None else eng.residuals(x, z, y)
    logger.info("QP reached iteration cap (%d), residuals %s", s.max_iter, res[:2])
    xo, _, yo = eng.unscale(x, z, y)
    return SolveResult(MAX_ITER, xo, qp.objective(xo), it, _resdict(res), y=yo)


def _scaled_res(eng, x, z, y):
    Ax, Px, Aty = eng.A @ x, eng.P @ x, eng.A.T @ y
    rp = np.max(np.abs(Ax - z), initial=0.0)
    rd = np.max(np.abs(Px + eng.q + Aty), initial=0.0)
    np_ = max(np.max(np.abs(Ax), initial=0.0), np.max(np.abs(z), initial=0.0))
    nd = max(np.max(np.abs(Px), initial=0.0), np.max(np.abs(Aty), initial=0.0),
             np.max(np.abs(eng.q), initial=0.0))
    return rp, rd, np_, nd


def _near(eng, res, eps):
    rp, rd, np_, nd = res
    return rp <= eps * (1.0 + np_) and rd <= eps * (1.0 + nd)


def _resdict(res):
    return {"primal": float(res[0]), "dual": float(res[1])}


def _finish(eng, qp, x, z, y, it, res, polished=False):
    xo, _, yo = eng.unscale(x, z, y)
    return SolveResult(OPTIMAL, xo, qp.objective(xo), it, _resdict(res), y=yo, polished=polished)


def _try_polish(eng, qp, x, z, y, it):
    out = eng.polish(x, z, y)
    if out is None:
        return None
    xp, zp, yp = out
    res = eng.residuals(xp, zp, yp)
    if not eng.converged(res):
        return None
    return _finish(eng, qp, xp, zp, yp, it, res, polished=True)


def _unconstrained(qp):
    try:
        z = np.linalg.solve(qp.H, -qp.g)
    except np.linalg.LinAlgError:
        z, *_ = np.linalg.lstsq(qp.H, -qp.g, rcond=None)
        if np.max(np.abs(qp.H @ z + qp.g), initial=0.0) > 1e-8 * max(1.0, np.abs(qp.g).max()):
            return SolveResult(UNBOUNDED, z, -np.inf, 0, {})
    rd = float(np.max(np.abs(qp.H @ z + qp.g), initial=0.0))
    return SolveResult(OPTIMAL, z, qp.objective(z), 0, {"primal": 0.0, "dual": rd})


def max_violation(z, A_in=None, b_in=None, A_eq=None, b_eq=None, lb=None, ub=None) -> float:
    """Largest constraint violation of ``z`` (0 when feasible)."""
    z = np.asarray(z, dtype=float)
    v = 0.0
    if A_in is not None and np.size(A_in):
        v = max(v, float(np.max(np.atleast_2d(A_in) @ z - np.ravel(b_in), initial=0.0)))
    if A_eq is not None and np.size(A_eq):
        v = max(v, float(np.max(np.abs(np.atleast_2d(A_eq) @ z - np.ravel(b_eq)), initial=0.0)))
    if lb is not None:
        v = max(v, float(np.max(np.asarray(lb, dtype=float) - z, initial=0.0)))
    if ub is not None:
        v = max(v, float(np.max(z - np.asarray(ub, dtype=float), initial=0.0)))
    return v


def _row_bound_infeasible(A_in, b_in, lb, ub, tol) -> bool:
    """Some inequality row cannot hold anywhere in the box (its minimum over the box exceeds ``b``)."""
    if A_in is None or np.size(A_in) == 0:
        return False
    A = np.atleast_2d(A_in)
    with np.errstate(invalid="ignore"):
        low = np.where(A > 0, A * lb, np.where(A < 0, A * ub, 0.0)).sum(axis=1)
    return bool(np.any(low > np.ravel(b_in) + tol))


def check_feasible(A_in=None, b_in=None, A_eq=None, b_eq=None, lb=None, ub=None,
                   hints: Optional[Iterable[np.ndarray]] = None, tol: float = 1e-7,
                   settings: Optional[SolverSettings] = None, n: Optional[int] = None) -> bool:
    """Phase-1 feasibility test for a polyhedron.

    Returns True iff a point with maximal constraint violation <= ``tol``
    is found. Candidate points in ``hints`` are tried first; otherwise the
    least-norm point (relative to the box centre) is sought with ADMM and
    the answer is decided by a witness point or an infeasibility
    certificate. An undecided run (iteration cap) returns False.
    """
    for A in (A_in, A_eq):
        if A is not None and np.size(A):
            n = np.atleast_2d(A).shape[1]
    if n is None:
        for b in (lb, ub):
            if b is not None:
                n = np.size(b)
    if n is None:
        raise ValueError("cannot infer problem dimension")
    lb_ = np.full(n, -_INF) if lb is None else np.broadcast_to(np.asarray(lb, float), (n,)).copy()
    ub_ = np.full(n, _INF) if ub is None else np.broadcast_to(np.asarray(ub, float), (n,)).copy()
    if np.any(lb_ > ub_ + tol):
        return False
    if hints is not None:
        for h in hints:
            if max_violation(h, A_in, b_in, A_eq, b_eq, lb_, ub_) <= tol:
                return True
    if _row_bound_infeasible(A_in, b_in, lb_, ub_, tol):
        return False
    with np.errstate(invalid="ignore"):
        centre = np.where(np.isfinite(lb_) & np.isfinite(ub_), 0.5 * (lb_ + ub_),
                          np.where(np.isfinite(lb_), lb_, np.where(np.isfinite(ub_), ub_, 0.0)))
        width = np.where(np.isfinite(ub_ - lb_), np.maximum(ub_ - lb_, 1e-6), 1.0)
    w = 1e-2 / width ** 2
    qp = QuadraticProgram(np.diag(w), -w * centre, A_eq, b_eq, A_in, b_in, lb_, ub_)
    s = settings or SolverSettings()
    st = _Stacked(qp)
    if st.A.shape[0] == 0:
        return True
    eng = _Admm(st, s)
    nn, m = eng.P.shape[0], eng.A.shape[0]
    x, z, y = np.zeros(nn), np.clip(np.zeros(m), eng.l, eng.u), np.zeros(m)
    y_check = y.copy()
    P, q, A, alpha, sigma = eng.P, eng.q, eng.A, s.alpha, s.sigma
    for it in range(1, s.max_iter + 1):
        rho = eng.rho
        xt = eng.Kinv @ (sigma * x - q + A.T @ (rho * z - y))
        zt = A @ xt
        x = alpha * xt + (1.0 - alpha) * x
        zr = alpha * zt + (1.0 - alpha) * z
        z_new = np.clip(zr + y / rho, eng.l, eng.u)
        y = y + rho * (zr - z_new)
        z = z_new
        if it % s.check_interval == 0:
            cand = eng.feasible_point(x)
            if max_violation(cand, A_in, b_in, A_eq, b_eq, lb_, ub_) <= tol:
                return True
            res = eng.residuals(x, z, y)
            if _near(eng, res, s.polish_eps):
                pol = eng.polish(x, z, y)
                if pol is not None:
                    cand = np.clip(eng.D * pol[0], lb_, ub_)
                    if max_violation(cand, A_in, b_in, A_eq, b_eq, lb_, ub_) <= tol:
                        return True
            if eng.certificate(y - y_check):
                return False
            y_check = y.copy()
        if it % s.rho_interval == 0:
            rp, rd, np_, nd = _scaled_res(eng, x, z, y)
            ratio = np.sqrt((rp / (np_ + 1e-10)) / (rd / (nd + 1e-10) + 1e-30)) if rd > 0 else 1.0
            new_rho = eng.rho_bar * ratio
            if new_rho > 5.0 * eng.rho_bar or new_rho < 0.2 * eng.rho_bar:
                eng._set_rho(new_rho)
                y_check = y.copy()
    logger.warning("feasibility check undecided after %d iterations; reporting infeasible", s.max_iter)
    return False
