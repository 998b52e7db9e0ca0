"""Truncated Gaussians and covariance propagation over the prediction horizon."""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla

_MAX_REJECTIONS = 100_000


def _psd_factor(S: np.ndarray) -> np.ndarray:
    """``L`` with ``L @ L.T == S`` for symmetric PSD ``S`` (eigen-decomposition, tolerant of rank loss)."""
    if S.size == 0:
        return np.zeros_like(S)
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass(frozen=True)
class TruncatedGaussian:
    """Gaussian ``N(mean, covariance)`` conditioned on the box ``[lower, upper]``.

    Infinite bounds are allowed. Coordinates with ``lower == upper`` are
    pinned and the remaining ones are drawn from the conditional Gaussian.
    """
    mean: np.ndarray
    covariance: np.ndarray
    lower: np.ndarray = None
    upper: np.ndarray = None
    _free: np.ndarray = field(init=False, repr=False, compare=False)
    _factor: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).copy()
        n = mean.size
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float)).copy()
        if cov.shape != (n, n):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of size {n}")
        if not np.allclose(cov, cov.T, atol=1e-12 * max(1.0, np.abs(cov).max(initial=0.0))):
            raise ValueError("covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        if n and np.linalg.eigvalsh(cov).min() < -1e-10 * max(1.0, np.abs(cov).max()):
            raise ValueError("covariance must be positive semidefinite")
        lo = np.full(n, -np.inf) if self.lower is None else np.broadcast_to(
            np.asarray(self.lower, dtype=float), (n,)).copy()
        hi = np.full(n, np.inf) if self.upper is None else np.broadcast_to(
            np.asarray(self.upper, dtype=float), (n,)).copy()
        if np.any(lo > hi):
            raise ValueError("support box is empty")
        if np.any(mean < lo) or np.any(mean > hi):
            raise ValueError("mean must lie inside the support")
        free = np.flatnonzero(hi > lo)
        S = cov[np.ix_(free, free)]
        fixed = np.flatnonzero(hi <= lo)
        if fixed.size and free.size:
            Sff = cov[np.ix_(fixed, fixed)]
            Srf = cov[np.ix_(free, fixed)]
            S = S - Srf @ np.linalg.pinv(Sff) @ Srf.T
        for name, val in (("mean", mean), ("covariance", cov), ("lower", lo), ("upper", hi),
                          ("_free", free), ("_factor", _psd_factor(S))):
            object.__setattr__(self, name, val)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    @classmethod
    def isotropic(cls, n: int, sigma: float, bound: float = np.inf) -> "TruncatedGaussian":
        return cls(np.zeros(n), sigma ** 2 * np.eye(n), -bound * np.ones(n), bound * np.ones(n))

    @classmethod
    def zero(cls, n: int) -> "TruncatedGaussian":
        return cls(np.zeros(n), np.zeros((n, n)), np.zeros(n), np.zeros(n))

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def untruncated(self) -> "TruncatedGaussian":
        return TruncatedGaussian(self.mean, self.covariance)


def sample(tg: TruncatedGaussian, rng: np.random.Generator,
           max_tries: int = _MAX_REJECTIONS) -> np.ndarray:
    """One rejection-sampled draw from ``tg``."""
    out = tg.mean.copy()
    free = tg._free
    if free.size == 0:
        return out
    lo, hi, mu = tg.lower[free], tg.upper[free], tg.mean[free]
    k = free.size
    for _ in range(max_tries):
        x = mu + tg._factor @ rng.standard_normal(k)
        if np.all(x >= lo) and np.all(x <= hi):
            out[free] = x
            return out
    raise RuntimeError(f"rejection sampling exceeded {max_tries} tries; support too far in the tail")


def sample_many(tg: TruncatedGaussian, rng: np.random.Generator, size: int,
                max_rounds: int = 1000) -> np.ndarray:
    """``size`` draws as rows of an array (vectorized rejection)."""
    out = np.tile(tg.mean, (size, 1))
    free = tg._free
    if free.size == 0 or size == 0:
        return out
    lo, hi, mu = tg.lower[free], tg.upper[free], tg.mean[free]
    got, filled = [], 0
    for _ in range(max_rounds):
        batch = max(64, int(1.2 * (size - filled)) + 16)
        x = mu + rng.standard_normal((batch, free.size)) @ tg._factor.T
        ok = np.all((x >= lo) & (x <= hi), axis=1)
        x = x[ok][: size - filled]
        got.append(x)
        filled += x.shape[0]
        if filled == size:
            out[:, free] = np.vstack(got)
            return out
    raise RuntimeError("rejection sampling exceeded its round cap; support too far in the tail")


@dataclass(frozen=True)
class SequenceDistribution:
    """Gaussian over a stacked obstacle state sequence.

    ``mean_sequence`` stacks ``[s, v_s, d, v_d]`` blocks for steps
    ``first_step, .., first_step + steps - 1`` of every obstacle in
    ``obstacle_ids`` (obstacle-major order).
    """
    mean_sequence: np.ndarray
    covariance: np.ndarray
    steps: int
    first_step: int = 1
    obstacle_ids: tuple = (0,)

    @property
    def n_obstacles(self) -> int:
        return len(self.obstacle_ids)

    def index(self, obstacle: int, k: int) -> int:
        """Offset of the 4-block for obstacle position ``obstacle`` (0-based) at step ``k``."""
        j = k - self.first_step
        if not 0 <= j < self.steps:
            raise IndexError(f"step {k} outside [{self.first_step}, {self.first_step + self.steps - 1}]")
        return 4 * (obstacle * self.steps + j)

    def mean_block(self, obstacle: int, k: int) -> np.ndarray:
        i = self.index(obstacle, k)
        return self.mean_sequence[i:i + 4]

    def covariance_block(self, obstacle: int, k: int) -> np.ndarray:
        i = self.index(obstacle, k)
        return self.covariance[i:i + 4, i:i + 4]


def closed_loop_maps(model, N: int, include_initial: bool = False):
    """Stacked maps ``Xi = Phi x0 + Bst W + c`` of the unclipped closed loop.

    Returns ``(Phi, Bst, c)`` where ``Phi`` is (4M x 4), ``Bst`` is (4M x 2N)
    and ``c`` is the contribution of the reference, ``M = N (+1)``.
    """
    return _closed_loop_maps(model, N, include_initial)


@functools.lru_cache(maxsize=1024)
def _closed_loop_maps(model, N, include_initial):
    A_cl = model.A_cl
    B = model.B_do
    r = -B @ model.K_do @ model.xi_ref.as_array()
    off = 0 if include_initial else 1
    rows = N + 1 - off
    powers = [np.eye(4)]
    for _ in range(N):
        powers.append(A_cl @ powers[-1])
    # impulse responses A_cl^i B and accumulated reference drift sum_{i<k} A_cl^i r
    imp = [P @ B for P in powers]
    drift = np.cumsum([np.zeros(4)] + [P @ r for P in powers[:-1]], axis=0)
    Phi = np.vstack(powers[off:])
    Bst = np.zeros((4 * rows, 2 * N))
    for i in range(rows):
        k = i + off
        for j in range(k):
            Bst[4 * i:4 * i + 4, 2 * j:2 * j + 2] = imp[k - 1 - j]
    c = drift[off:].ravel()
    for a in (Phi, Bst, c):
        a.setflags(write=False)
    return Phi, Bst, c


def predict_obstacle_sequence(state, model, N: int, include_initial: bool = False,
                              obstacle_id=0) -> SequenceDistribution:
    """Nominal closed-loop rollout and its Gaussian spread.

    The input box is ignored and the disturbance is taken untruncated.
    Measurement noise (``model.v``) enters once, as the covariance of the
    starting state. With ``include_initial`` the step-0 block is kept.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    Phi, Bst, c = closed_loop_maps(model, N, include_initial)
    x0 = state.as_array()
    w_mean = np.zeros(2) if model.w is None else model.w.mean
    mean = Phi @ x0 + c + Bst @ np.tile(w_mean, N)
    return SequenceDistribution(mean, _sequence_covariance(model, N, include_initial),
                                N + 1 if include_initial else N, 0 if include_initial else 1,
                                (obstacle_id,))


@functools.lru_cache(maxsize=1024)
def _sequence_covariance(model, N, include_initial):
    # independent of the state, so shared by every rollout of the same model
    Phi, Bst, _ = closed_loop_maps(model, N, include_initial)
    cov = np.zeros((Phi.shape[0], Phi.shape[0]))
    if model.w is not None:
        cov += Bst @ np.kron(np.eye(N), model.w.covariance) @ Bst.T
    if model.v is not None:
        cov += Phi @ model.v.covariance @ Phi.T
    cov = 0.5 * (cov + cov.T)
    cov.setflags(write=False)
    return cov


def stack_sequences(seqs: Sequence[SequenceDistribution]) -> SequenceDistribution:
    """Block-diagonal stacking of independent obstacles."""
    if not seqs:
        return SequenceDistribution(np.zeros(0), np.zeros((0, 0)), 0, 1, ())
    steps, first = seqs[0].steps, seqs[0].first_step
    if any(s.steps != steps or s.first_step != first for s in seqs):
        raise ValueError("sequences must share the step window")
    return SequenceDistribution(np.concatenate([s.mean_sequence for s in seqs]),
                                sla.block_diag(*[s.covariance for s in seqs]),
                                steps, first, tuple(i for s in seqs for i in s.obstacle_ids))


def offset_covariance(Q_N: np.ndarray, seq: SequenceDistribution, eps: float = 1e-9) -> np.ndarray:
    """Covariance ``Q_N Sigma Q_N'`` of the random row offsets, regularized by ``eps*max(diag) I``."""
    Q_N = np.atleast_2d(np.asarray(Q_N, dtype=float))
    if Q_N.shape[0] == 0:
        return np.zeros((0, 0))
    S = Q_N @ seq.covariance @ Q_N.T
    S = 0.5 * (S + S.T)
    scale = np.max(np.diag(S), initial=0.0)
    return S + eps * (scale if scale > 0 else 1.0) * np.eye(S.shape[0])
