"""Problem model for nonlinear stochastic delay differential equations.

An instance is the Ito equation

    dx(t) = f(t, x(t), x(t - tau_1(t)), ..., x(t - tau_r(t))) dt
          + g(t, x(t), x(t - tau_1(t)), ..., x(t - tau_r(t))) dw(t),   t in [a, b]
    x(t)  = xi(t),                                                      t in [a - tau, a]

with drift/diffusion bounds (alpha, beta_j, gamma1, gamma2_j) declared in a
:class:`CoefficientSet`.

Drift and diffusion callables are vectorised over a leading batch axis:
``drift(t, x, ys)`` receives ``x`` of shape ``(P, d)`` and a tuple of ``r``
delayed states of the same shape and returns ``(P, d)``; ``diffusion``
returns ``(P, d, m)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "SDDEError",
    "DomainError",
    "ParameterError",
    "StepsizeError",
    "StepError",
    "CertificationError",
    "DelaySpec",
    "InitialSegment",
    "CoefficientSet",
    "ProblemSpec",
    "Violation",
    "ValidationReport",
    "delayed_time",
    "eval_initial",
    "perturb_history",
    "validate_problem",
    "inner_re",
    "norm",
]

# Node-snapping tolerance, in units of the step size.
SNAP = 1e-9


class SDDEError(Exception):
    pass


class DomainError(SDDEError, ValueError):
    """A time lies outside the interval on which a function is defined."""


class ParameterError(SDDEError, ValueError):
    pass


class StepsizeError(SDDEError, ValueError):
    """The step size violates a solvability or certification requirement."""


class StepError(SDDEError, RuntimeError):
    """The implicit equation of one step could not be solved."""

    def __init__(self, message, residual=None, node=None, path=None):
        super().__init__(message)
        self.residual = residual
        self.node = node
        self.path = path


class CertificationError(SDDEError, ValueError):
    pass


def inner_re(x, y):
    """Re<x, y> = sum Re(conj(x_i) y_i) over the last axis."""
    x = np.asarray(x)
    y = np.asarray(y)
    return np.real(np.sum(np.conj(x) * y, axis=-1))


def norm(x, axis=-1):
    """Euclidean norm for vectors, Frobenius (trace) norm when ``axis`` is a pair."""
    return np.sqrt(np.sum(np.abs(np.asarray(x)) ** 2, axis=axis))


# ---------------------------------------------------------------------------
# Delays


@dataclass(frozen=True)
class DelaySpec:
    """One delay argument ``t - tau(t)``.

    ``kind`` is ``"constant"`` (``value`` = tau_c), ``"pantograph"``
    (``value`` = q in (0, 1)), ``"piecewise"`` (``value`` = nonnegative
    integer i, delayed time floor(t - i)) or ``"tabulated"`` (``times`` and
    ``values`` sample tau(t); linear interpolation, constant beyond the ends).
    ``tau_max`` bounds the initial segment: every delayed time on the window
    must be at least ``a - tau_max``.
    """

    kind: str
    value: float = 0.0
    tau_max: float | None = None
    times: tuple = ()
    values: tuple = ()

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind == "constant":
            if not self.value >= 0:
                raise ParameterError(f"constant delay must be >= 0, got {self.value}")
        elif kind == "pantograph":
            if not 0 < self.value < 1:
                raise ParameterError(f"pantograph q must lie in (0, 1), got {self.value}")
        elif kind == "piecewise":
            if self.value < 0 or int(self.value) != self.value:
                raise ParameterError(
                    f"piecewise-constant shift must be a nonnegative integer, got {self.value}"
                )
        elif kind == "tabulated":
            t = np.asarray(self.times, dtype=float)
            v = np.asarray(self.values, dtype=float)
            if t.ndim != 1 or t.shape != v.shape or t.size < 1:
                raise ParameterError("tabulated delay needs equal-length, non-empty times and values")
            if np.any(np.diff(t) <= 0):
                raise ParameterError("tabulated delay times must be strictly increasing")
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise ParameterError("tabulated delay values must be finite and >= 0")
            object.__setattr__(self, "times", tuple(float(s) for s in t))
            object.__setattr__(self, "values", tuple(float(s) for s in v))
        else:
            raise ParameterError(f"unknown delay kind {self.kind!r}")
        if self.tau_max is not None and not self.tau_max >= 0:
            raise ParameterError(f"tau_max must be >= 0, got {self.tau_max}")

    @classmethod
    def constant(cls, tau, tau_max=None):
        return cls("constant", float(tau), tau_max)

    @classmethod
    def pantograph(cls, q, tau_max=None):
        return cls("pantograph", float(q), tau_max)

    @classmethod
    def piecewise(cls, i, tau_max=None):
        return cls("piecewise", float(i), tau_max)

    @classmethod
    def tabulated(cls, times, values, tau_max=None):
        return cls("tabulated", 0.0, tau_max, tuple(times), tuple(values))

    def required_tau(self, a, b):
        """Smallest initial-segment length that covers all delayed times on [a, b]."""
        if self.kind == "constant":
            return self.value
        if self.kind == "pantograph":
            return max(0.0, a - self.value * a)
        if self.kind == "piecewise":
            return max(0.0, a - math.floor(a - self.value))
        ts = np.concatenate([[a, b], [s for s in self.times if a <= s <= b]])
        return max(0.0, float(a - np.min(ts - np.interp(ts, self.times, self.values))))

    def effective_tau_max(self, a, b):
        return self.tau_max if self.tau_max is not None else self.required_tau(a, b)

    def is_divergent(self):
        """Whether t - tau(t) -> +inf (tabulated delays are held constant past the table)."""
        return True


def delayed_time(delay: DelaySpec, t):
    """Return ``t - tau(t)``; vectorised over ``t``."""
    kind = delay.kind
    if kind == "constant":
        return t - delay.value
    if kind == "pantograph":
        return delay.value * t
    if kind == "piecewise":
        return np.floor(np.asarray(t) - delay.value) if np.ndim(t) else float(math.floor(t - delay.value))
    tau = np.interp(t, delay.times, delay.values)
    return t - tau if np.ndim(t) else float(t - tau)


# ---------------------------------------------------------------------------
# Initial segments


@dataclass(frozen=True)
class InitialSegment:
    """Deterministic initial function on ``[a - tau_max, a]``.

    Families: ``constant`` (params = the vector), ``polynomial`` (params =
    coefficients c0, c1, ... of sum c_k t^k, same in every component),
    ``sinusoid`` (params = amplitude, frequency, phase, offset giving
    offset + amplitude * sin(frequency * t + phase) in every component).
    """

    family: str
    params: tuple
    dim: int
    a: float
    tau_max: float

    def __post_init__(self):
        fam = self.family.lower()
        object.__setattr__(self, "family", fam)
        params = tuple(complex(p) if isinstance(p, complex) else float(p) for p in self.params)
        object.__setattr__(self, "params", params)
        if fam == "constant":
            if len(params) not in (1, self.dim):
                raise ParameterError(
                    f"constant segment needs 1 or {self.dim} values, got {len(params)}"
                )
        elif fam == "polynomial":
            if not params:
                raise ParameterError("polynomial segment needs at least one coefficient")
        elif fam == "sinusoid":
            if len(params) not in (3, 4):
                raise ParameterError("sinusoid segment needs amplitude, frequency, phase[, offset]")
        else:
            raise ParameterError(f"unknown initial-segment family {self.family!r}")
        if self.tau_max < 0:
            raise ParameterError("tau_max must be >= 0")
        if not np.all(np.isfinite(np.asarray(params, dtype=complex))):
            raise ParameterError("initial-segment parameters must be finite")

    @classmethod
    def constant(cls, value, dim=None, a=0.0, tau_max=0.0):
        value = np.atleast_1d(value).tolist()
        return cls("constant", tuple(value), dim or len(value), a, tau_max)

    @property
    def domain(self):
        return (self.a - self.tau_max, self.a)

    def _eval(self, t):
        t = np.asarray(t, dtype=float)
        p = self.params
        if self.family == "constant":
            v = np.asarray(p)
            if v.size == 1:
                v = np.repeat(v, self.dim)
            return np.broadcast_to(v, t.shape + (self.dim,)).copy()
        if self.family == "polynomial":
            s = np.zeros(t.shape, dtype=np.result_type(*p, float))
            for c in reversed(p):
                s = s * t + c
        else:
            amp, freq, phase = p[:3]
            offset = p[3] if len(p) == 4 else 0.0
            s = offset + amp * np.sin(freq * t + phase)
        return np.repeat(s[..., None], self.dim, axis=-1)

    def __call__(self, t):
        return eval_initial(self, t)


def eval_initial(seg: InitialSegment, t):
    """Evaluate the initial function; raises :class:`DomainError` off ``[a - tau_max, a]``.

    A zero-length segment is extended constantly to the left, so any
    ``t <= a`` is accepted when ``tau_max == 0``.
    """
    lo, hi = seg.domain
    tt = np.asarray(t, dtype=float)
    tol = SNAP * max(1.0, abs(hi))
    if np.any(tt > hi + tol) or (seg.tau_max > 0 and np.any(tt < lo - tol)):
        raise DomainError(f"time {t} outside initial interval [{lo}, {hi}]")
    if seg.tau_max == 0:
        tt = np.full_like(tt, hi)
    return seg._eval(np.minimum(tt, hi))


def perturb_history(history: Callable, n: int, t: float, tau_max: float) -> Callable:
    """The 1/n-perturbation of a history at time ``t``.

    The returned function equals ``history(u)`` for ``u <= t - 1/n`` and is
    frozen at ``history(t - 1/n)`` afterwards. Requires ``n > 1/tau_max``.
    """
    if n <= 0 or int(n) != n:
        raise ParameterError(f"n must be a positive integer, got {n}")
    if tau_max <= 0 or n <= 1.0 / tau_max:
        raise ParameterError(f"n must exceed 1/tau_max = {1.0 / tau_max if tau_max > 0 else math.inf}")
    cut = t - 1.0 / n
    frozen = np.asarray(history(cut))

    def perturbed(u):
        u_arr = np.asarray(u, dtype=float)
        if u_arr.ndim == 0:
            return np.asarray(history(float(u_arr))) if u_arr <= cut else frozen.copy()
        return np.stack([np.asarray(history(s)) if s <= cut else frozen for s in u_arr])

    return perturbed


# ---------------------------------------------------------------------------
# Coefficients and problems


@dataclass(frozen=True)
class CoefficientSet:
    """Constant bounds placing a problem in SD(alpha, beta, gamma1, gamma2).

    ``beta`` and ``gamma2`` carry one entry per delay.
    """

    alpha: float
    beta: tuple
    gamma1: float
    gamma2: tuple

    def __post_init__(self):
        beta = tuple(float(b) for b in np.atleast_1d(self.beta))
        gamma2 = tuple(float(g) for g in np.atleast_1d(self.gamma2))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "gamma1", float(self.gamma1))
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "gamma2", gamma2)
        if len(beta) < 1 or len(beta) != len(gamma2):
            raise ParameterError("beta and gamma2 need one entry per delay (r >= 1)")
        vals = (self.alpha, self.gamma1) + beta + gamma2
        if not all(math.isfinite(v) for v in vals):
            raise ParameterError("coefficients must be finite")
        if self.gamma1 < 0 or min(beta) < 0 or min(gamma2) < 0:
            raise ParameterError("beta, gamma1 and gamma2 must be nonnegative")

    @property
    def r(self):
        return len(self.beta)

    @property
    def beta_sum(self):
        return math.fsum(self.beta)

    @property
    def gamma2_sum(self):
        return math.fsum(self.gamma2)


@dataclass(frozen=True)
class ProblemSpec:
    dimension: int
    wiener_dimension: int
    drift: Callable
    diffusion: Callable
    delays: tuple
    initial: InitialSegment
    coeffs: CoefficientSet
    window: tuple
    complex_state: bool = False
    name: str = ""
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "delays", tuple(self.delays))
        a, b = self.window
        if not a < b:
            raise ParameterError(f"window needs a < b, got {self.window}")
        if self.dimension < 1 or self.wiener_dimension < 1:
            raise ParameterError("dimension and wiener_dimension must be >= 1")
        if len(self.delays) != self.coeffs.r:
            raise ParameterError(
                f"{len(self.delays)} delays but coefficients declare r = {self.coeffs.r}"
            )
        if self.initial.dim != self.dimension:
            raise ParameterError("initial segment dimension does not match the problem")

    @property
    def a(self):
        return self.window[0]

    @property
    def b(self):
        return self.window[1]

    @property
    def dtype(self):
        return np.complex128 if self.complex_state else np.float64

    @property
    def tau_max(self):
        return max(d.effective_tau_max(self.a, self.b) for d in self.delays)

    def with_initial(self, seg: InitialSegment) -> "ProblemSpec":
        from dataclasses import replace

        return replace(self, initial=seg)


@dataclass
class Violation:
    condition: str
    witness: dict
    lhs: float
    rhs: float

    def __str__(self):
        return f"{self.condition}: {self.lhs:.6g} > {self.rhs:.6g} at {self.witness}"


@dataclass
class ValidationReport:
    passed: bool
    probes: int
    violations: list

    @property
    def first(self):
        return self.violations[0] if self.violations else None

    def __bool__(self):
        return self.passed


def _sample_state(rng, shape, radius, complex_state):
    x = rng.uniform(-radius, radius, size=shape)
    if complex_state:
        x = x + 1j * rng.uniform(-radius, radius, size=shape)
    return x


def validate_problem(spec: ProblemSpec, probes: int = 1000, radius: float = 3.0,
                     seed: int = 0, rtol: float = 1e-9) -> ValidationReport:
    """Spot-check the declared coefficient bounds and the delay window by random probing.

    Violations are reported, never raised. Each condition keeps at most its
    first violating witness.
    """
    if probes < 1:
        raise ParameterError("probes must be >= 1")
    rng = np.random.default_rng(seed)
    d, r = spec.dimension, spec.coeffs.r
    a, b = spec.window
    cs = spec.coeffs
    P = int(probes)
    shape = (P, d)
    t = rng.uniform(a, b, size=P)
    x1 = _sample_state(rng, shape, radius, spec.complex_state)
    x2 = _sample_state(rng, shape, radius, spec.complex_state)
    y1 = tuple(_sample_state(rng, shape, radius, spec.complex_state) for _ in range(r))
    y2 = tuple(_sample_state(rng, shape, radius, spec.complex_state) for _ in range(r))
    # a fraction of probes with near-coincident arguments
    k = P // 4
    if k:
        x2[:k] = x1[:k] + 1e-3 * _sample_state(rng, (k, d), 1.0, spec.complex_state)

    violations = []

    def record(name, mask, lhs, rhs, idx_fields):
        bad = np.flatnonzero(mask)
        if bad.size:
            i = int(bad[0])
            wit = {key: np.asarray(val)[i].tolist() for key, val in idx_fields.items()}
            violations.append(Violation(name, wit, float(lhs[i]), float(rhs[i])))

    def fvec(tt, x, ys):
        out = np.empty((P, d), dtype=np.complex128)
        for i in range(P):
            out[i] = spec.drift(tt[i], x[i:i + 1], tuple(y[i:i + 1] for y in ys))[0]
        return out

    def gmat(tt, x, ys):
        out = np.empty((P, d, spec.wiener_dimension), dtype=np.complex128)
        for i in range(P):
            out[i] = spec.diffusion(tt[i], x[i:i + 1], tuple(y[i:i + 1] for y in ys))[0]
        return out

    f1 = fvec(t, x1, y1)
    f2 = fvec(t, x2, y1)
    dx = x1 - x2
    lhs = inner_re(dx, f1 - f2)
    rhs = cs.alpha * norm(dx) ** 2
    scale = rtol * (1 + norm(dx) * (norm(f1) + norm(f2)))
    record("one-sided Lipschitz (drift, present state)", lhs > rhs + scale, lhs, rhs,
           {"t": t, "x1": x1, "x2": x2})

    f3 = fvec(t, x1, y2)
    lhs = norm(f1 - f3)
    rhs = sum(bj * norm(u - v) for bj, u, v in zip(cs.beta, y1, y2))
    scale = rtol * (1 + norm(f1) + norm(f3))
    record("Lipschitz (drift, delayed states)", lhs > rhs + scale, lhs, rhs,
           {"t": t, "x": x1, **{f"y1_{j}": y for j, y in enumerate(y1)},
            **{f"y2_{j}": y for j, y in enumerate(y2)}})

    g1 = gmat(t, x1, y1)
    g2 = gmat(t, x2, y2)
    lhs = norm(g1 - g2, axis=(-2, -1))
    rhs = cs.gamma1 * norm(dx) + sum(gj * norm(u - v) for gj, u, v in zip(cs.gamma2, y1, y2))
    scale = rtol * (1 + norm(g1, axis=(-2, -1)) + norm(g2, axis=(-2, -1)))
    record("Lipschitz (diffusion)", lhs > rhs + scale, lhs, rhs,
           {"t": t, "x1": x1, "x2": x2})

    for name, vals in (("drift", f1), ("diffusion", g1)):
        finite = np.all(np.isfinite(vals.reshape(P, -1)), axis=1)
        record(f"{name} finite", ~finite, np.zeros(P), np.zeros(P), {"t": t, "x": x1})

    ts = np.concatenate([np.linspace(a, b, 1001), t])
    lo = a - spec.tau_max
    for j, delay in enumerate(spec.delays):
        s = np.asarray(delayed_time(delay, ts), dtype=float)
        tol = SNAP * (1 + np.abs(ts))
        record(f"delay {j}: t - tau(t) <= t", s > ts + tol, s, ts, {"t": ts})
        record(f"delay {j}: t - tau(t) >= a - tau_max", s < lo - tol, -s, -np.full_like(s, lo),
               {"t": ts})

    return ValidationReport(not violations, P, violations)
