"""Ego and obstacle vehicle models.

Ego: curvature-aware kinematic bicycle in Frenet coordinates,
state ``[s, d, phi, v]`` and input ``[a, delta]``.

Obstacles: decoupled double integrators with state ``[s, v_s, d, v_d]``
driven by an LQR feedback towards a reference plus a bounded disturbance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np
from scipy.linalg import solve_discrete_are

if TYPE_CHECKING:
    from .uncertainty import TruncatedGaussian

DEFAULT_WHEELBASE = 2.9
DEFAULT_A_BOUNDS = (-8.0, 3.0)
DEFAULT_DELTA_BOUNDS = (-0.4, 0.4)
MIN_LINEARIZATION_SPEED = 0.1


def wrap_angle(phi: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.remainder(phi, 2.0 * math.pi)
    return math.pi if w == -math.pi else w


@dataclass(frozen=True)
class EgoState:
    s: float = 0.0
    d: float = 0.0
    phi: float = 0.0
    v: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.d, self.phi, self.v], dtype=float)

    @classmethod
    def from_array(cls, x) -> "EgoState":
        x = np.asarray(x, dtype=float)
        return cls(float(x[0]), float(x[1]), float(x[2]), float(x[3]))


@dataclass(frozen=True)
class EgoInput:
    a: float = 0.0
    delta: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.delta], dtype=float)

    @classmethod
    def from_array(cls, u) -> "EgoInput":
        u = np.asarray(u, dtype=float)
        return cls(float(u[0]), float(u[1]))


@dataclass(frozen=True)
class ActuatorBox:
    a_min: float = DEFAULT_A_BOUNDS[0]
    a_max: float = DEFAULT_A_BOUNDS[1]
    delta_min: float = DEFAULT_DELTA_BOUNDS[0]
    delta_max: float = DEFAULT_DELTA_BOUNDS[1]

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.a_min, self.delta_min])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.a_max, self.delta_max])

    def clip(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), self.lower, self.upper)


def _rhs(d, phi, v, a, delta, k, L):
    s_dot = v * math.cos(phi) / (1.0 - d * k)
    acc = 0.0 if (v <= 0.0 and a < 0.0) else a
    return s_dot, v * math.sin(phi), v * math.tan(delta) / L - k * s_dot, acc


def frenet_rhs(x: np.ndarray, u: np.ndarray, curvature: float = 0.0,
               wheelbase: float = DEFAULT_WHEELBASE) -> np.ndarray:
    """Continuous-time kinematic bicycle dynamics in road coordinates."""
    _, d, phi, v = x
    return np.array(_rhs(d, phi, v, u[0], u[1], curvature, wheelbase))


def step_ego_nonlinear(state: EgoState, u: EgoInput, T: float, curvature: float = 0.0,
                       wheelbase: float = DEFAULT_WHEELBASE, box: ActuatorBox = ActuatorBox(),
                       substeps: int = 10) -> EgoState:
    """Integrate the nonlinear model over ``T`` with fixed-step RK4 (``substeps`` >= 10)."""
    if T <= 0:
        raise ValueError("sampling time must be positive")
    a, delta = box.clip(u.as_array() if isinstance(u, EgoInput) else u)
    a, delta = float(a), float(delta)
    k, L = curvature, wheelbase
    s, d, phi, v = state.s, state.d, state.phi, state.v
    n = max(substeps, 10)
    h = T / n
    # scalar arithmetic: this runs on every replan and numpy is slow on 4-vectors
    for _ in range(n):
        k1 = _rhs(d, phi, v, a, delta, k, L)
        k2 = _rhs(d + 0.5 * h * k1[1], phi + 0.5 * h * k1[2], v + 0.5 * h * k1[3], a, delta, k, L)
        k3 = _rhs(d + 0.5 * h * k2[1], phi + 0.5 * h * k2[2], v + 0.5 * h * k2[3], a, delta, k, L)
        k4 = _rhs(d + h * k3[1], phi + h * k3[2], v + h * k3[3], a, delta, k, L)
        s += h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        d += h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        phi += h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        v = max(v + h / 6.0 * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3]), 0.0)
    return EgoState(s, d, wrap_angle(phi), v)


def continuous_jacobians(x0: np.ndarray, curvature: float = 0.0,
                         wheelbase: float = DEFAULT_WHEELBASE):
    """Analytic Jacobians of ``frenet_rhs`` at ``(x0, u=0)``."""
    _, d, phi, v = x0
    k = curvature
    den = 1.0 - d * k
    c, s = math.cos(phi), math.sin(phi)
    ds = np.array([0.0, v * c * k / den ** 2, -v * s / den, c / den])
    A = np.zeros((4, 4))
    A[0] = ds
    A[1] = [0.0, 0.0, v * c, s]
    A[2] = -k * ds
    B = np.zeros((4, 2))
    B[3, 0] = 1.0
    B[2, 1] = v / wheelbase
    return A, B


def expm_series(M: np.ndarray, order: int = 12) -> np.ndarray:
    """Matrix exponential by truncated Taylor series with scaling and squaring."""
    norm = np.max(np.sum(np.abs(M), axis=1), initial=0.0)
    squarings = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    X = M / (2.0 ** squarings)
    E = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for j in range(1, order + 1):
        term = term @ X / j
        E = E + term
    for _ in range(squarings):
        E = E @ E
    return E


@dataclass(frozen=True)
class LinearEgoModel:
    """``xi_{k+1} = A_d (xi_k - xi_0) + B_d u_k + c_d`` around ``linearization_state``."""
    A_d: np.ndarray
    B_d: np.ndarray
    c_d: np.ndarray
    T: float
    linearization_state: EgoState
    A_c: np.ndarray
    B_c: np.ndarray
    degenerate: bool = False

    def step(self, x, u) -> np.ndarray:
        x0 = self.linearization_state.as_array()
        return self.A_d @ (np.asarray(x, float) - x0) + self.B_d @ np.asarray(u, float) + self.c_d


def linearize_discretize(state0: EgoState, T: float, curvature: float = 0.0,
                         wheelbase: float = DEFAULT_WHEELBASE) -> LinearEgoModel:
    """Linearize at ``(state0, u=0)`` and discretize with zero-order hold.

    Below ``MIN_LINEARIZATION_SPEED`` the Jacobian is evaluated at that
    speed so the steering input keeps authority; ``degenerate`` flags it.
    """
    if T <= 0:
        raise ValueError("sampling time must be positive")
    x0 = state0.as_array()
    degenerate = x0[3] < MIN_LINEARIZATION_SPEED
    xl = x0.copy()
    xl[3] = max(xl[3], MIN_LINEARIZATION_SPEED)
    A_c, B_c = continuous_jacobians(xl, curvature, wheelbase)
    f0 = frenet_rhs(x0, np.zeros(2), curvature, wheelbase)
    M = np.zeros((7, 7))
    M[:4, :4] = A_c
    M[:4, 4:6] = B_c
    M[:4, 6] = f0
    E = expm_series(M * T)
    A_d = E[:4, :4]
    B_d = E[:4, 4:6]
    c_d = x0 + E[:4, 6]
    return LinearEgoModel(A_d, B_d, c_d, T, state0, A_c, B_c, degenerate)


# ---------------------------------------------------------------- obstacles

@dataclass(frozen=True)
class ObstacleState:
    s_do: float = 0.0
    vs_do: float = 0.0
    d_do: float = 0.0
    vd_do: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.s_do, self.vs_do, self.d_do, self.vd_do], dtype=float)

    @classmethod
    def from_array(cls, x) -> "ObstacleState":
        x = np.asarray(x, dtype=float)
        return cls(float(x[0]), float(x[1]), float(x[2]), float(x[3]))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.s_do, self.d_do])


def double_integrator(T: float):
    """Zero-order-hold point mass for ``[s, v_s, d, v_d]`` with input ``[a_s, a_d]``."""
    a = np.array([[1.0, T], [0.0, 1.0]])
    b = np.array([[0.5 * T * T], [T]])
    A = np.zeros((4, 4))
    A[:2, :2] = a
    A[2:, 2:] = a
    B = np.zeros((4, 2))
    B[:2, :1] = b
    B[2:, 1:] = b
    return A, B


def riccati(A, B, Q, R, tol: float = 1e-12, max_iter: int = 100000):
    """Stabilizing solution of the discrete algebraic Riccati equation.

    Uses scipy's Schur solver; when that fails (it can on badly scaled
    weights such as 1e-99) falls back to the fixed-point recursion started
    from ``Q``. Raises ``RuntimeError`` when neither yields a solution.
    """
    A, B = np.atleast_2d(A).astype(float), np.atleast_2d(B).astype(float)
    Q, R = np.atleast_2d(Q).astype(float), np.atleast_2d(R).astype(float)
    try:
        with np.errstate(invalid="ignore"):
            P = solve_discrete_are(A, B, Q, R)
        if np.all(np.isfinite(P)):
            return 0.5 * (P + P.T)
    except (np.linalg.LinAlgError, ValueError):
        pass
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        G = np.linalg.solve(R + BtP @ B, BtP @ A)
        with np.errstate(over="ignore", invalid="ignore"):
            P_next = Q + A.T @ P @ A - A.T @ P @ B @ G
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            break
        if np.max(np.abs(P_next - P)) <= tol * max(1.0, np.max(np.abs(P_next))):
            return P_next
        P = P_next
    raise RuntimeError("no stabilizing Riccati solution")


def lqr_gain(A, B, Q, R, tol: float = 1e-12, max_iter: int = 100000):
    """Discrete LQR gain ``K`` for the law ``u = -K x``; also returns the Riccati matrix."""
    P = riccati(A, B, Q, R, tol, max_iter)
    A, B, R = np.atleast_2d(A), np.atleast_2d(B), np.atleast_2d(R)
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return K, P


@dataclass(frozen=True, eq=False)
class ObstacleModel:
    """Closed-loop obstacle prediction model ``u = K_do (xi - xi_ref) + w``, clipped to the input box.

    Compared and hashed by identity so derived quantities can be memoized.
    """
    A_do: np.ndarray
    B_do: np.ndarray
    K_do: np.ndarray
    xi_ref: ObstacleState
    u_min: np.ndarray
    u_max: np.ndarray
    length: float = 4.5
    width: float = 1.8
    w: Optional["TruncatedGaussian"] = None
    v: Optional["TruncatedGaussian"] = None
    T: float = 0.1

    @classmethod
    def build(cls, T: float, xi_ref: ObstacleState, q=(0.0, 0.5, 0.5, 0.5), r=(1.0, 1.0),
              u_min=(-3.0, -1.5), u_max=(2.0, 1.5), length: float = 4.5, width: float = 1.8,
              w=None, v=None) -> "ObstacleModel":
        """Zero-order-hold double integrator with an LQR gain from diagonal weights."""
        A, B = double_integrator(T)
        K, _ = lqr_gain(A, B, np.diag(q), np.diag(r))
        return cls(A, B, -K, xi_ref, np.asarray(u_min, float), np.asarray(u_max, float),
                   length, width, w, v, T)

    @property
    def A_cl(self) -> np.ndarray:
        return self.A_do + self.B_do @ self.K_do

    def feedback(self, x: np.ndarray) -> np.ndarray:
        return self.K_do @ (x - self.xi_ref.as_array())


def step_obstacle(state: ObstacleState, model: ObstacleModel, w=None) -> ObstacleState:
    """One step of the obstacle model; the feedback plus disturbance is clipped to the input box."""
    x = state.as_array()
    w = np.zeros(2) if w is None else np.asarray(w, dtype=float)
    u = np.clip(model.feedback(x) + w, model.u_min, model.u_max)
    return ObstacleState.from_array(model.A_do @ x + model.B_do @ u)


def applied_obstacle_input(state: ObstacleState, model: ObstacleModel, w=None) -> np.ndarray:
    w = np.zeros(2) if w is None else np.asarray(w, dtype=float)
    return np.clip(model.feedback(state.as_array()) + w, model.u_min, model.u_max)

