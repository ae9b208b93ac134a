"""Mean-square stability constants, bound envelopes and node sequences.

All formulas take constant coefficients. With several delays the per-delay
bounds are aggregated by summation (``beta = sum beta_j``,
``gamma2 = sum gamma2_j``), which reduces to the single-delay formulas at
r = 1 and is monotone in every coefficient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    SNAP,
    CertificationError,
    CoefficientSet,
    DelaySpec,
    ParameterError,
    StepsizeError,
    delayed_time,
)

__all__ = [
    "STABLE",
    "CONTRACTIVE",
    "ASYMPTOTIC",
    "UNCERTIFIED",
    "StepConstants",
    "AsymptoticCertificate",
    "StabilityCertificate",
    "NodeSequence",
    "contraction_constant",
    "sigma_rho",
    "asymptotic_certificate",
    "c_mu",
    "discrete_constants",
    "max_stepsize",
    "envelope_finite",
    "node_sequence",
    "linear_coeffs",
    "scalar_linear_criterion",
    "certify",
]

STABLE = "StableInMeanSquare"
CONTRACTIVE = "Contractive"
ASYMPTOTIC = "AsymptoticallyContractive"
UNCERTIFIED = "Uncertified"

SOLVABILITY_MARGIN = 1e-6


def _aggregate(coeffs: CoefficientSet):
    return coeffs.alpha, coeffs.beta_sum, coeffs.gamma1, coeffs.gamma2_sum


def contraction_constant(coeffs: CoefficientSet) -> float:
    """c = 2 alpha + 2 beta + gamma1^2 + 2 gamma1 gamma2 + gamma2^2."""
    al, be, g1, g2 = _aggregate(coeffs)
    return 2 * al + 2 * be + g1 * g1 + 2 * g1 * g2 + g2 * g2


def sigma_rho(coeffs: CoefficientSet):
    """Return (sigma, rho) with sigma = 2 alpha + beta + gamma1 gamma2 + gamma1^2
    and rho = beta + gamma1 gamma2 + gamma2^2."""
    al, be, g1, g2 = _aggregate(coeffs)
    return 2 * al + be + g1 * g2 + g1 * g1, be + g1 * g2 + g2 * g2


@dataclass(frozen=True)
class AsymptoticCertificate:
    alpha0: float
    nu: float | None
    ok: bool

    @property
    def nu_defined(self):
        return self.nu is not None


def asymptotic_certificate(coeffs: CoefficientSet) -> AsymptoticCertificate:
    """alpha0 = sigma and nu = rho / |sigma|; ``ok`` iff alpha0 < 0 and nu < 1.

    ``nu`` is left undefined (None) when sigma >= 0.
    """
    sigma, rho = sigma_rho(coeffs)
    if sigma >= 0:
        return AsymptoticCertificate(sigma, None, False)
    nu = rho / abs(sigma)
    return AsymptoticCertificate(sigma, nu, nu < 1)


def c_mu(alpha0: float, nu: float, mu: float) -> float:
    """Per-period decay factor nu + (1 - nu) exp(alpha0 mu) for the continuous problem."""
    if mu <= 0:
        raise ParameterError(f"mu must be positive, got {mu}")
    return nu + (1 - nu) * math.exp(alpha0 * mu)


@dataclass(frozen=True)
class StepConstants:
    h: float
    c1: float
    c_tilde: float
    c2: float
    solvable: bool
    certified: bool = True
    ratios: tuple = ()  # the two quotients whose maximum is c1


def discrete_constants(coeffs: CoefficientSet, h: float) -> StepConstants:
    """Backward Euler constants at step size ``h``.

    c1 = c2 = max{(1 + h g1^2 + 2 h g1 g2 + h g2^2) / (1 - 2 h alpha - 2 h beta),
                  (1 + h beta + h g1^2 + 2 h g1 g2 + h g2^2) / (1 - 2 h alpha - h beta)}
    and c_tilde = c1 / h. ``solvable`` records (alpha + beta) h < 1. When that
    fails together with a denominator the constants are NaN; a nonpositive
    denominator at a solvable step size raises :class:`StepsizeError`.
    """
    if not h > 0:
        raise ParameterError(f"step size must be positive, got {h}")
    al, be, g1, g2 = _aggregate(coeffs)
    solvable = (al + be) * h < 1
    den1 = 1 - 2 * h * al - 2 * h * be
    den2 = 1 - 2 * h * al - h * be
    if not solvable and min(den1, den2) <= 0:
        return StepConstants(h, math.nan, math.nan, math.nan, False, False)
    if den1 <= 0:
        raise StepsizeError(f"1 - 2h*alpha - 2h*beta = {den1:.6g} is not positive at h = {h}")
    if den2 <= 0:
        raise StepsizeError(f"1 - 2h*alpha - h*beta = {den2:.6g} is not positive at h = {h}")
    noise = h * (g1 * g1 + 2 * g1 * g2 + g2 * g2)
    r1 = (1 + noise) / den1
    r2 = (1 + h * be + noise) / den2
    c1 = max(r1, r2)
    return StepConstants(h, c1, c1 / h, c1, solvable, certified=solvable, ratios=(r1, r2))


def max_stepsize(coeffs: CoefficientSet, c0: float = 0.5) -> float:
    """Largest step size covered by the finite-window bound and the solvability condition."""
    if not 0 < c0 < 1:
        raise ParameterError(f"c0 must lie in (0, 1), got {c0}")
    s = coeffs.alpha + coeffs.beta_sum
    cap = (1 - SOLVABILITY_MARGIN) / s if s > 0 else math.inf
    c = contraction_constant(coeffs)
    if c <= 0:
        return cap
    return min(c0 / c, cap)


@dataclass
class StabilityCertificate:
    coeffs: CoefficientSet
    a: float
    c: float
    sigma: float
    rho: float
    alpha0: float
    nu: float | None
    classification: tuple
    c0: float
    h_max: float
    mu: float | None = None
    C_mu: float | None = None
    steps: dict = field(default_factory=dict)

    @property
    def contractive(self):
        return CONTRACTIVE in self.classification

    @property
    def asymptotic(self):
        return ASYMPTOTIC in self.classification

    def step(self, h):
        if h not in self.steps:
            self.steps[h] = discrete_constants(self.coeffs, h)
        return self.steps[h]

    def record(self):
        """Flat key/value view of the certificate."""
        out = {
            "c": self.c,
            "sigma": self.sigma,
            "rho": self.rho,
            "alpha0": self.alpha0,
            "nu": self.nu if self.nu is not None else "undefined",
            "mu": self.mu,
            "C_mu": self.C_mu if self.C_mu is not None else "undefined",
            "c0": self.c0,
            "h_max": self.h_max,
            "classification": ",".join(self.classification),
        }
        for h, s in sorted(self.steps.items()):
            key = f"h={h!r}"
            out[f"{key}.c1"] = s.c1
            out[f"{key}.c_tilde"] = s.c_tilde
            out[f"{key}.c2"] = s.c2
            out[f"{key}.solvable"] = s.solvable
            out[f"{key}.certified"] = s.certified
        return out


def certify(coeffs: CoefficientSet, h=None, c0: float = 0.5, mu: float = 1.0,
            a: float = 0.0) -> StabilityCertificate:
    """Assemble every constant for ``coeffs`` and classify the problem.

    With a step size, the scheme is ``Uncertified`` when ``h`` exceeds the
    admissible step size or the implicit equation is not uniquely solvable.
    """
    c = contraction_constant(coeffs)
    sigma, rho = sigma_rho(coeffs)
    asym = asymptotic_certificate(coeffs)
    classes = [CONTRACTIVE if c <= 0 else STABLE]
    if asym.ok:
        classes.append(ASYMPTOTIC)
    h_max = max_stepsize(coeffs, c0)
    cert = StabilityCertificate(coeffs, a, c, sigma, rho, asym.alpha0, asym.nu, (), c0, h_max,
                                mu=mu)
    if asym.ok and mu is not None:
        cert.C_mu = c_mu(asym.alpha0, asym.nu, mu)
    hs = [] if h is None else list(np.atleast_1d(h))
    for hh in hs:
        hh = float(hh)
        try:
            sc = discrete_constants(coeffs, hh)
        except StepsizeError:
            sc = StepConstants(hh, math.nan, math.nan, math.nan,
                               (coeffs.alpha + coeffs.beta_sum) * hh < 1, False)
        sc = replace(sc, certified=sc.certified and hh <= h_max)
        cert.steps[hh] = sc
        if not sc.certified:
            classes.append(UNCERTIFIED)
    cert.classification = tuple(dict.fromkeys(classes))
    return cert


def envelope_finite(cert: StabilityCertificate, D0: float, t, h: float | None = None):
    """Finite-window bound on E|x(t) - y(t)|^2 (or E|X_n - Y_n|^2 when ``h`` is given).

    D0 exp(c (t - a)) for c > 0 and D0 otherwise; the discrete version uses
    c_tilde = c1 / h in place of c.
    """
    if D0 < 0:
        raise ParameterError("D0 must be nonnegative")
    t = np.asarray(t, dtype=float)
    if cert.c <= 0:
        out = np.full(t.shape, float(D0))
    else:
        rate = cert.c if h is None else cert.step(h).c_tilde
        with np.errstate(over="ignore"):
            out = D0 * np.exp(rate * (t - cert.a))
        if D0 == 0:
            out = np.zeros(t.shape)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class NodeSequence:
    """Grid indices n_0 = 0 < n_1 < ... with t - tau(t) >= t_{n_k + 1} for all grid t >= t_{n_{k+1}}."""

    indices: tuple
    a: float
    h: float
    N: int

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, k):
        return self.indices[k]

    def block_of(self, n: int) -> int:
        """Block k with n_k < n <= n_{k+1}; nodes past the last index belong to the last block."""
        if n <= 0:
            return -1
        k = int(np.searchsorted(self.indices, n, side="left")) - 1
        return k


def node_sequence(delay: DelaySpec, grid, K: int | None = None) -> NodeSequence:
    """Build the node sequence used for blockwise geometric decay.

    ``grid`` is an ``(a, h, N)`` triple or any object with those attributes.
    n_{k+1} is the smallest grid index from which every later delayed time
    reaches ``t_{n_k + 1}``; a delayed time landing exactly on that node
    counts, since the interpolant there only involves the node value.
    """
    if hasattr(grid, "h"):
        a, h, N = grid.a, grid.h, grid.N
    else:
        a, h, N = grid
    if not h > 0 or N < 1:
        raise ParameterError("grid needs h > 0 and N >= 1")
    if not delay.is_divergent():
        raise CertificationError("t - tau(t) does not diverge; no node sequence exists")
    n_ext = N
    if delay.kind == "tabulated":
        n_ext = max(N, int(math.ceil((delay.times[-1] - a) / h)) + 1)
    j = np.arange(n_ext + 1)
    u = (np.asarray(delayed_time(delay, a + j * h), dtype=float) - a) / h
    suffix_min = np.minimum.accumulate(u[::-1])[::-1]
    indices = [0]
    while K is None or len(indices) < K + 1:
        target = indices[-1] + 1
        ok = np.flatnonzero(suffix_min >= target - SNAP)
        if ok.size == 0 or ok[0] > N:
            break
        nxt = int(ok[0])
        if nxt <= indices[-1]:
            nxt = indices[-1] + 1
        indices.append(nxt)
    if len(indices) < 2 and N >= 1:
        raise CertificationError(
            "no block fits in the window: delayed times never reach t_1 before t_N"
        )
    return NodeSequence(tuple(indices), a, h, N)


def _as_matrix(A, d=None):
    M = np.atleast_2d(np.asarray(A, dtype=complex))
    if M.shape[0] != M.shape[1]:
        raise ParameterError(f"expected a square matrix, got shape {M.shape}")
    if d is not None and M.shape[0] != d:
        raise ParameterError(f"dimension mismatch: expected {d}x{d}, got {M.shape}")
    return M


def _as_list(As):
    if isinstance(As, (list, tuple)) and any(np.ndim(M) == 2 for M in As):
        return list(As)
    return [As]


def linear_coeffs(A1, A2, B1, B2) -> CoefficientSet:
    """Bounds for dx = (A1 x + sum A2_j y_j + F) dt + (B1 x + sum B2_j y_j + G) dw.

    alpha is the largest eigenvalue of the Hermitian part of A1; the other
    bounds are Frobenius norms. ``A2`` and ``B2`` may be a single matrix or a
    list with one matrix per delay.
    """
    A1 = _as_matrix(A1)
    d = A1.shape[0]
    A2s = [_as_matrix(M, d) for M in _as_list(A2)]
    B1 = _as_matrix(B1, d)
    B2s = [_as_matrix(M, d) for M in _as_list(B2)]
    if len(A2s) != len(B2s):
        raise ParameterError("A2 and B2 need one matrix per delay")
    herm = (A1.conj().T + A1) / 2
    alpha = float(np.linalg.eigvalsh(herm)[-1])
    fro = lambda M: float(np.linalg.norm(M, "fro"))
    return CoefficientSet(alpha, tuple(fro(M) for M in A2s), fro(B1), tuple(fro(M) for M in B2s))


def scalar_linear_criterion(A1, A2, B1, B2) -> bool:
    """Re A1 + |A2| + (|B1| + |B2|)^2 / 2 < 0."""
    return bool(np.real(A1) + abs(A2) + 0.5 * (abs(B1) + abs(B2)) ** 2 < 0)
