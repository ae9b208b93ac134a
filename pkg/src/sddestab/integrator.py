"""Backward Euler scheme for stochastic delay equations.

    X_{n+1} = X_n + h f(t_{n+1}, X_{n+1}, X^h(t_{n+1} - tau(t_{n+1})))
                  + g(t_n, X_n, X^h(t_n - tau(t_n))) dW_n

with X^h the piecewise-linear interpolant of the computed nodes, and the
initial function to the left of ``a``. All routines work on a batch of
``P`` paths at once; states are stored as ``(N + 1, P, d)`` arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .core import (
    SNAP,
    DomainError,
    InitialSegment,
    ParameterError,
    ProblemSpec,
    StepError,
    StepsizeError,
    delayed_time,
    eval_initial,
)

__all__ = [
    "Grid",
    "WienerPath",
    "Trajectory",
    "wiener_increments",
    "wiener_batch",
    "interpolate",
    "solve_implicit",
    "implicit_solve",
    "simulate",
    "simulate_pair",
    "check_solvable",
]

RTOL = 1e-12
MAX_ITER = 200
SWITCH_RATIO = 0.5
FD_SCALE = 1e-7
POLISH = 4 * np.finfo(float).eps


@dataclass(frozen=True)
class Grid:
    a: float
    b: float
    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ParameterError(f"N must be a positive integer, got {self.N}")
        if not self.b > self.a:
            raise ParameterError(f"grid needs b > a, got [{self.a}, {self.b}]")
        object.__setattr__(self, "N", int(self.N))

    @classmethod
    def from_step(cls, a, h, N):
        return cls(a, a + N * h, N)

    @property
    def h(self):
        return (self.b - self.a) / self.N

    def t(self, i):
        return self.a + np.asarray(i) * self.h

    @property
    def nodes(self):
        return self.a + np.arange(self.N + 1) * self.h


# ---------------------------------------------------------------------------
# Noise


@dataclass(frozen=True)
class WienerPath:
    increments: np.ndarray  # (N, m)
    seed: int
    path_index: int


def _uniforms(master_seed, path_index, n):
    # Philox keyed by (seed, path) gives an independent stream per path.
    bg = np.random.Philox(key=np.array([master_seed, path_index], dtype=np.uint64))
    raw = bg.random_raw(n)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def wiener_increments(master_seed: int, path_index: int, grid: Grid, m: int = 1) -> WienerPath:
    """N x m independent N(0, h) increments for one path, via inverse-CDF sampling."""
    if m < 1:
        raise ParameterError("m must be >= 1")
    u = _uniforms(int(master_seed), int(path_index), grid.N * m)
    dw = ndtri(u) * math.sqrt(grid.h)
    return WienerPath(dw.reshape(grid.N, m), int(master_seed), int(path_index))


def wiener_batch(master_seed: int, path_indices, grid: Grid, m: int = 1) -> np.ndarray:
    """Stack :func:`wiener_increments` for several paths into a ``(P, N, m)`` array."""
    idx = list(path_indices)
    n = grid.N * m
    u = np.empty((len(idx), n))
    for k, j in enumerate(idx):
        u[k] = _uniforms(int(master_seed), int(j), n)
    return (ndtri(u) * math.sqrt(grid.h)).reshape(len(idx), grid.N, m)


def _as_batch(path, grid: Grid, m: int):
    dw = path.increments if isinstance(path, WienerPath) else np.asarray(path, dtype=float)
    if dw.ndim == 1:
        dw = dw.reshape(grid.N, m)
    if dw.ndim == 2:
        dw = dw[None]
    if dw.shape[1:] != (grid.N, m):
        raise ParameterError(f"increments of shape {dw.shape} do not match N = {grid.N}, m = {m}")
    return dw


# ---------------------------------------------------------------------------
# Trajectories and dense history


@dataclass
class Trajectory:
    """Node values of a batch of paths plus the initial function for t < a.

    ``states[i, p]`` is X_i of path p. ``n_done`` is the latest computed node.
    """

    grid: Grid
    states: np.ndarray
    initial: InitialSegment
    n_done: int

    @property
    def P(self):
        return self.states.shape[1]

    @property
    def final(self):
        return self.states[self.n_done]

    def path(self, p=0):
        """Node values of one path, shape ``(N + 1, d)``."""
        return self.states[: self.n_done + 1, p]


def _node_position(grid: Grid, s: float):
    """Position of time ``s`` in step units, snapped to a node when within rounding."""
    u = (s - grid.a) / grid.h
    r = round(u)
    if abs(u - r) <= SNAP * max(1.0, abs(u)):
        return float(r), True
    return u, False


def _history(traj: Trajectory, s: float):
    """X^h(s) for s <= t_{n_done}; shape ``(P, d)``."""
    grid = traj.grid
    u, on_node = _node_position(grid, s)
    if u <= 0:
        if on_node:
            return traj.states[0]
        val = eval_initial(traj.initial, s)
        return np.broadcast_to(val, traj.states.shape[1:])
    if u > traj.n_done:
        raise DomainError(
            f"time {s} is beyond the latest computed node t_{traj.n_done} = {grid.t(traj.n_done)}"
        )
    if on_node:
        return traj.states[int(u)]
    i = int(math.floor(u))
    w = u - i
    return (1 - w) * traj.states[i] + w * traj.states[i + 1]


def interpolate(traj: Trajectory, t: float):
    """Piecewise-linear dense output; the initial function for ``t <= a``."""
    t = float(t)
    if t < traj.grid.a:
        lo = traj.initial.domain[0]
        if traj.initial.tau_max > 0 and t < lo - SNAP * max(1.0, abs(lo)):
            raise DomainError(f"time {t} is before the initial interval start {lo}")
    return _history(traj, t)


# ---------------------------------------------------------------------------
# Implicit equation


def _to_real(z, cplx):
    return np.concatenate([z.real, z.imag], axis=-1) if cplx else z


def _from_real(v, cplx):
    if not cplx:
        return v
    d = v.shape[-1] // 2
    return v[..., :d] + 1j * v[..., d:]


def implicit_solve(phi, rhs, z0, *, cplx=False, contraction=0.0, rtol=RTOL,
                   max_iter=MAX_ITER):
    """Solve z = phi(z) + rhs for a batch of states.

    Fixed-point iteration first; when the a priori ``contraction`` estimate or
    the observed residual ratio exceeds one half, switch to Newton with a
    forward-difference Jacobian. Once every residual is within
    ``rtol * (1 + |z|)`` the iteration keeps going while it still gains,
    down to rounding level. Returns ``(z, residual_norms, method)``.
    Raises :class:`StepError` when the budget runs out.
    """
    z = np.array(z0, dtype=rhs.dtype, copy=True)

    def residual(zz):
        return zz - phi(zz) - rhs

    def rnorm(r):
        return np.sqrt(np.sum(np.abs(r) ** 2, axis=-1))

    def tol(zz):
        return rtol * (1 + rnorm(zz))

    floor = POLISH * rnorm(rhs)

    if contraction <= SWITCH_RATIO:
        zk = z
        prev = None
        for _ in range(max_iter):
            nxt = phi(zk) + rhs
            res = rnorm(zk - nxt)
            worst = float(np.max(res))
            stalled = prev is not None and worst > SWITCH_RATIO * prev
            converged = np.all(res <= tol(zk))
            if converged and (np.all(res <= floor) or (stalled and worst <= prev)):
                return zk, res, "fixed-point"
            if not np.isfinite(worst) or stalled:
                break
            prev = worst
            z = zk
            zk = nxt

    r = residual(z)
    res = rnorm(r)
    P = z.shape[0]
    prev = None
    for _ in range(max_iter):
        worst = float(np.max(res))
        stalled = prev is not None and worst > SWITCH_RATIO * prev
        if np.all(res <= tol(z)) and (stalled or np.all(res <= floor)):
            return z, res, "newton"
        prev = worst
        zr = _to_real(z, cplx)
        rr = _to_real(r, cplx)
        D = zr.shape[-1]
        eps = FD_SCALE * (1 + rnorm(z))
        J = np.empty((P, D, D))
        for k in range(D):
            zp = zr.copy()
            zp[:, k] += eps
            J[:, :, k] = (_to_real(residual(_from_real(zp, cplx)), cplx) - rr) / eps[:, None]
        try:
            step = np.linalg.solve(J, rr[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise StepError("singular Jacobian in Newton iteration", residual=worst) from exc
        lam = np.ones(P)
        for _ in range(40):
            trial = _from_real(zr - lam[:, None] * step, cplx)
            rt = residual(trial)
            nt = rnorm(rt)
            worse = ~(nt < res) & (res > tol(z))
            if not np.any(worse):
                break
            lam = np.where(worse, lam / 2, lam)
        # never trade a converged path for a worse one
        keep = (nt >= res)[:, None]
        z, r, res = np.where(keep, z, trial), np.where(keep, r, rt), np.minimum(nt, res)
    raise StepError(
        f"implicit equation not solved within {max_iter} iterations", residual=float(np.max(res))
    )


def check_solvable(problem: ProblemSpec, h: float):
    """Raise :class:`StepsizeError` unless (alpha + sum beta_j) h < 1."""
    s = problem.coeffs.alpha + problem.coeffs.beta_sum
    if not s * h < 1:
        raise StepsizeError(
            f"(alpha+beta)h = {s * h:.6g} violates the unique-solvability condition (alpha+beta)h<1"
        )


def _drift_args(problem: ProblemSpec, traj: Trajectory, n: int):
    """Delayed drift arguments at t_{n+1} as (weight, offset) pairs: y_j = l_j z + b_j."""
    grid = traj.grid
    t1 = grid.a + (n + 1) * grid.h
    args = []
    for delay in problem.delays:
        s = float(delayed_time(delay, t1))
        u, _ = _node_position(grid, s)
        if u <= n:
            args.append((0.0, _history(traj, s)))
        else:
            lw = min(u - n, 1.0)
            args.append((lw, (1 - lw) * traj.states[n]))
    return t1, args


def _diffusion_args(problem: ProblemSpec, traj: Trajectory, n: int):
    t0 = traj.grid.a + n * traj.grid.h
    return t0, tuple(_history(traj, float(delayed_time(d, t0))) for d in problem.delays)


def _step(problem: ProblemSpec, traj: Trajectory, n: int, dw, z0=None):
    h = traj.grid.h
    xn = traj.states[n]
    t0, ydiff = _diffusion_args(problem, traj, n)
    G = problem.diffusion(t0, xn, ydiff)
    rhs = xn + np.einsum("pdm,pm->pd", G, dw)
    t1, dargs = _drift_args(problem, traj, n)

    def phi(z):
        ys = tuple(lw * z + b if lw else b for lw, b in dargs)
        return h * problem.drift(t1, z, ys)

    c = problem.coeffs
    est = (max(c.alpha, 0.0) + c.beta_sum) * h
    guess = xn if z0 is None else np.broadcast_to(np.asarray(z0, dtype=rhs.dtype), xn.shape)
    try:
        z, res, _ = implicit_solve(phi, rhs.astype(problem.dtype), guess,
                                   cplx=problem.complex_state, contraction=est)
    except StepError as exc:
        exc.node = n + 1
        raise
    return z, res


def solve_implicit(problem: ProblemSpec, traj: Trajectory, n: int, h: float, dw, z0=None):
    """X_{n+1} from the implicit relation at step ``n`` for every path of ``traj``.

    ``dw`` has shape ``(P, m)`` (or ``(m,)`` for a single path). Returns
    ``(z, residual_norms)``.
    """
    if not math.isclose(h, traj.grid.h, rel_tol=1e-12):
        raise ParameterError(f"h = {h} does not match the trajectory grid step {traj.grid.h}")
    check_solvable(problem, h)
    dw = np.atleast_2d(np.asarray(dw, dtype=float))
    if n > traj.n_done:
        raise DomainError(f"node {n} has not been computed yet")
    return _step(problem, traj, n, dw, z0)


def _new_trajectory(problem: ProblemSpec, grid: Grid, P: int, initial: InitialSegment):
    states = np.empty((grid.N + 1, P, problem.dimension), dtype=problem.dtype)
    x0 = np.asarray(eval_initial(initial, grid.a), dtype=problem.dtype)
    states[0] = x0
    return Trajectory(grid, states, initial, 0)


def simulate(problem: ProblemSpec, grid: Grid, path, initial: InitialSegment | None = None
             ) -> Trajectory:
    """Run the scheme over the whole grid for every path in ``path``.

    ``path`` is a :class:`WienerPath`, an ``(N, m)`` array or a ``(P, N, m)``
    batch. The initial function defaults to ``problem.initial``.
    """
    if not math.isclose(grid.a, problem.a, rel_tol=0, abs_tol=1e-12):
        raise ParameterError(f"grid starts at {grid.a} but the problem window starts at {problem.a}")
    check_solvable(problem, grid.h)
    dw = _as_batch(path, grid, problem.wiener_dimension)
    seg = problem.initial if initial is None else initial
    traj = _new_trajectory(problem, grid, dw.shape[0], seg)
    for n in range(grid.N):
        z, _ = _step(problem, traj, n, dw[:, n, :])
        if not np.all(np.isfinite(z)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(z), axis=-1))[0])
            raise StepError("non-finite state", node=n + 1, path=bad)
        traj.states[n + 1] = z
        traj.n_done = n + 1
    return traj


def simulate_pair(problem: ProblemSpec, xi: InitialSegment, eta: InitialSegment, grid: Grid,
                  path):
    """Two trajectories from initial functions ``xi`` and ``eta`` driven by the same noise."""
    return simulate(problem, grid, path, xi), simulate(problem, grid, path, eta)
