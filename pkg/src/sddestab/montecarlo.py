"""Monte Carlo estimation of mean-square deviations between coupled trajectories.

Paths are processed in fixed-size chunks; each chunk's per-node statistics
are merged in chunk order, so results do not depend on the worker count.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .analysis import ASYMPTOTIC, NodeSequence, StabilityCertificate, certify, node_sequence
from .core import (
    CertificationError,
    InitialSegment,
    ParameterError,
    ProblemSpec,
    StepError,
    eval_initial,
)
from .integrator import Grid, simulate, wiener_batch
from .problems import make_problem

__all__ = [
    "CHUNK",
    "MsDeviationSeries",
    "BoundReport",
    "AsymptoticEnvelope",
    "StrongOrderResult",
    "initial_gap",
    "estimate_ms_deviation",
    "estimate_second_moment",
    "exact_second_moment_scalar_linear",
    "check_bound",
    "asymptotic_envelope",
    "strong_error_slope",
]

CHUNK = 1024


@dataclass
class _Moments:
    """Per-node count, mean and sum of squared deviations (Chan's merge)."""

    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def of(cls, samples):
        # samples: (nodes, P)
        mean = samples.mean(axis=1)
        return cls(samples.shape[1], mean, ((samples - mean[:, None]) ** 2).sum(axis=1))

    def merge(self, other):
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta ** 2 * (self.count * other.count / n)
        return _Moments(n, mean, m2)

    def stderr(self):
        if self.count < 2:
            return np.zeros_like(self.mean)
        return np.sqrt(self.m2 / (self.count - 1) / self.count)


def _chunks(M, size=CHUNK):
    return [(s, min(s + size, M)) for s in range(0, M, size)]


def _map_reduce(fn, M, threads=1):
    chunks = _chunks(M)
    if threads and threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(fn, chunks))
    else:
        parts = [fn(c) for c in chunks]
    total = parts[0]
    for p in parts[1:]:
        total = total.merge(p)
    return total


def initial_gap(xi: InitialSegment, eta: InitialSegment, samples: int = 2001) -> float:
    """sup over the initial interval of |xi(t) - eta(t)|^2, by dense sampling."""
    lo = min(xi.domain[0], eta.domain[0])
    hi = xi.a
    ts = np.linspace(lo, hi, samples) if hi > lo else np.array([hi])
    diff = eval_initial(xi, ts) - eval_initial(eta, ts)
    return float(np.max(np.sum(np.abs(diff) ** 2, axis=-1)))


@dataclass
class MsDeviationSeries:
    """Per-node estimate of E|X_n - Y_n|^2 with its standard error and bound."""

    t: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    envelope: np.ndarray
    M: int
    seed: int
    h: float
    D0: float
    slack: float = 3.0
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return np.arange(self.t.size)

    @property
    def violated(self):
        return self.estimate - self.slack * self.stderr > self.envelope

    def with_envelope(self, envelope):
        return replace(self, envelope=np.asarray(envelope, dtype=float))

    def rows(self):
        for i in range(self.t.size):
            yield (i, self.t[i], self.estimate[i], self.stderr[i], self.envelope[i],
                   bool(self.violated[i]))


def _finite_envelope(cert: StabilityCertificate, D0, t, h):
    if cert.c <= 0:
        return np.full(t.shape, float(D0))
    rate = cert.step(h).c_tilde
    with np.errstate(over="ignore"):
        env = D0 * np.exp(rate * (t - cert.a))
    return np.where(D0 == 0, 0.0, env)


def estimate_ms_deviation(problem: ProblemSpec, xi: InitialSegment, eta: InitialSegment,
                          grid: Grid, M: int, master_seed: int, *, envelope: str = "finite",
                          c0: float = 0.5, mu: float = 1.0, slack: float = 3.0,
                          threads: int = 1) -> MsDeviationSeries:
    """Estimate E|X_n - Y_n|^2 over ``M`` coupled path pairs.

    Pair ``j`` uses the noise keyed by ``(master_seed, j)`` for both
    trajectories. ``envelope`` selects the finite-window bound (``"finite"``)
    or the blockwise geometric bound (``"asymptotic"``).
    """
    if M < 1:
        raise ParameterError("M must be >= 1")
    m = problem.wiener_dimension

    def run(chunk):
        lo, hi = chunk
        dw = wiener_batch(master_seed, range(lo, hi), grid, m)
        try:
            X = simulate(problem, grid, dw, xi)
            Y = simulate(problem, grid, dw, eta)
        except StepError as exc:
            if exc.path is not None:
                exc.path += lo
            raise
        sq = np.sum(np.abs(X.states - Y.states) ** 2, axis=-1)
        return _Moments.of(sq)

    mom = _map_reduce(run, M, threads)
    t = grid.nodes
    D0 = initial_gap(xi, eta)
    cert = certify(problem.coeffs, h=grid.h, c0=c0, mu=mu, a=grid.a)
    series = MsDeviationSeries(t, mom.mean, mom.stderr(), np.zeros_like(t), M, master_seed,
                               grid.h, D0, slack, {"certificate": cert})
    if envelope == "finite":
        env = _finite_envelope(cert, D0, t, grid.h)
    elif envelope == "asymptotic":
        if len(problem.delays) != 1:
            raise CertificationError("asymptotic envelope is implemented for a single delay")
        seq = node_sequence(problem.delays[0], grid)
        env = asymptotic_envelope(series, seq, cert.step(grid.h).c2, D0, cert).nodes
        series.meta["node_sequence"] = seq
    else:
        raise ParameterError(f"unknown envelope {envelope!r}")
    series.envelope = env
    return series


def estimate_second_moment(problem: ProblemSpec, grid: Grid, M: int, master_seed: int,
                           threads: int = 1):
    """Per-node mean and standard error of |X_n|^2 over ``M`` paths."""

    def run(chunk):
        dw = wiener_batch(master_seed, range(*chunk), grid, problem.wiener_dimension)
        X = simulate(problem, grid, dw)
        return _Moments.of(np.sum(np.abs(X.states) ** 2, axis=-1))

    mom = _map_reduce(run, M, threads)
    return mom.mean, mom.stderr()


def exact_second_moment_scalar_linear(A1, B1, h, N, x0):
    """E|X_n|^2 of backward Euler for dx = A1 x dt + B1 x dw.

    m_{n+1} = m_n (1 + B1^2 h) / (1 - A1 h)^2.
    """
    if 1 - A1 * h == 0:
        raise ParameterError("1 - A1 h must be nonzero")
    ratio = (1 + B1 * B1 * h) / (1 - A1 * h) ** 2
    return float(x0) ** 2 * ratio ** np.arange(N + 1)


@dataclass
class BoundReport:
    violations: int
    indices: np.ndarray
    worst_margin: float
    worst_index: int
    slack: float

    @property
    def ok(self):
        return self.violations == 0


def check_bound(series: MsDeviationSeries, slack_sigmas: float = 3.0) -> BoundReport:
    """Flag nodes whose estimate exceeds the envelope by more than ``slack_sigmas`` errors.

    The margin at a node is ``estimate - slack * stderr - envelope``; it is
    positive exactly at violations.
    """
    margin = series.estimate - slack_sigmas * series.stderr - series.envelope
    bad = np.flatnonzero(margin > 0)
    i = int(np.argmax(margin))
    return BoundReport(int(bad.size), bad, float(margin[i]), i, slack_sigmas)


@dataclass
class AsymptoticEnvelope:
    nodes: np.ndarray
    blocks: list  # (k, first node, last node, bound)


def asymptotic_envelope(series, node_seq: NodeSequence, c2: float, D0: float,
                        cert: StabilityCertificate | None = None) -> AsymptoticEnvelope:
    """Blockwise bound c2^(k+1) D0 on the nodes n_k < i <= n_{k+1}.

    Node 0 carries D0. Nodes after the last index in the window belong to
    the block that starts there.
    """
    if cert is not None and ASYMPTOTIC not in cert.classification:
        raise CertificationError(
            f"problem is not certified asymptotically contractive: {cert.classification}"
        )
    if not c2 < 1:
        raise CertificationError(f"c2 = {c2} is not below 1")
    n_nodes = len(series.t) if hasattr(series, "t") else int(series)
    env = np.empty(n_nodes)
    env[0] = D0
    idx = list(node_seq.indices)
    blocks = []
    for k in range(len(idx)):
        first = idx[k] + 1
        last = idx[k + 1] if k + 1 < len(idx) else n_nodes - 1
        if first > n_nodes - 1:
            break
        last = min(last, n_nodes - 1)
        bound = D0 * c2 ** (k + 1)
        env[first:last + 1] = bound
        blocks.append((k, first, last, bound))
    return AsymptoticEnvelope(env, blocks)


@dataclass
class StrongOrderResult:
    slope: float
    h: np.ndarray
    rms: np.ndarray


def strong_error_slope(h_list, M: int, master_seed: int, *, A1: float = -1.0, B1: float = 0.5,
                       x0: float = 1.0, T: float = 1.0, threads: int = 1) -> StrongOrderResult:
    """Least-squares slope of log RMS endpoint error against log h.

    Test problem dx = A1 x dt + B1 x dw with exact solution
    x0 exp((A1 - B1^2 / 2) T + B1 w(T)); coarse increments are sums of the
    finest ones so every step size sees the same Brownian path.
    """
    hs = np.sort(np.asarray(list(h_list), dtype=float))[::-1]
    if hs.size < 2:
        raise ParameterError("need at least two step sizes to fit a slope")
    h_min = hs[-1]
    n_fine = int(round(T / h_min))
    if not math.isclose(n_fine * h_min, T, rel_tol=1e-9):
        raise ParameterError(f"T = {T} is not a multiple of the finest step {h_min}")
    factors = []
    for h in hs:
        f = int(round(h / h_min))
        if not math.isclose(f * h_min, h, rel_tol=1e-9) or n_fine % f:
            raise ParameterError(f"step {h} is not a multiple of the finest step dividing T")
        factors.append(f)
    problem = make_problem("pure_sde", {"A1": A1, "B1": B1}, window=(0.0, T),
                           initial=("constant", (x0,)))
    fine = Grid(0.0, T, n_fine)

    def run(chunk):
        dw = wiener_batch(master_seed, range(*chunk), fine, 1)
        wT = dw.sum(axis=(1, 2))
        exact = x0 * np.exp((A1 - 0.5 * B1 * B1) * T + B1 * wT)
        errs = np.empty((len(factors), dw.shape[0]))
        for i, f in enumerate(factors):
            g = Grid(0.0, T, n_fine // f)
            coarse = dw.reshape(dw.shape[0], g.N, f, 1).sum(axis=2)
            X = simulate(problem, g, coarse)
            errs[i] = np.abs(X.final[:, 0] - exact) ** 2
        return _Moments.of(errs)

    mom = _map_reduce(run, M, threads)
    rms = np.sqrt(mom.mean)
    slope = float(np.polyfit(np.log(hs), np.log(rms), 1)[0])
    return StrongOrderResult(slope, hs, rms)
