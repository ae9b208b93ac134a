"""Builtin parametric problem families.

``linear``         dx = (A1 x + sum_j A2_j y_j + F) dt + (B1 x + sum_j B2_j y_j + G) dw
``scalar_linear``  the d = 1 case of ``linear`` with complex scalar coefficients
``nonlinear``      dx = (A1 x + A2 x^3 + sum_j A3_j sqrt(y_j^2 + 1) + F) dt
                        + (B1 sin x + sum_j B2_j arctan y_j + G) dw,   A2 < 0
``pure_sde``       dx = A1 x dt + B1 x dw (no delay influence)

All use a scalar Wiener process.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .analysis import linear_coeffs
from .core import (
    CoefficientSet,
    DelaySpec,
    InitialSegment,
    ParameterError,
    ProblemSpec,
    validate_problem,
)

__all__ = ["RegistryEntry", "REGISTRY", "make_problem", "register"]


def _cplx_list(v, r):
    vals = [complex(x) for x in np.atleast_1d(v)]
    if len(vals) == 1 and r > 1:
        vals = vals * r
    if len(vals) != r:
        raise ParameterError(f"expected 1 or {r} values, got {len(vals)}")
    return vals


def _is_complex(*vals):
    return any(np.iscomplexobj(np.asarray(v)) and np.any(np.imag(v) != 0) for v in vals)


def _segment(initial, d, a, tau_max):
    if initial is None:
        return InitialSegment("constant", (1.0,), d, a, tau_max)
    if isinstance(initial, InitialSegment):
        return InitialSegment(initial.family, initial.params, d, a, tau_max)
    family, params = initial
    return InitialSegment(family, tuple(params), d, a, tau_max)


def _linear(params, delays, window, initial):
    r = len(delays)
    A1 = np.atleast_2d(np.asarray(params.get("A1", 0.0), dtype=complex))
    d = A1.shape[0]

    def mat(v):
        # a scalar stands for that multiple of the identity
        if np.ndim(v) == 0:
            return complex(v) * np.eye(d, dtype=complex)
        return np.atleast_2d(np.asarray(v, dtype=complex))

    def mats(key):
        v = params.get(key, 0.0)
        if np.ndim(v) == 3:
            if len(v) != r:
                raise ParameterError(f"{key} needs one matrix per delay ({r})")
            return [mat(M) for M in v]
        return [mat(v)] * r

    A2, B2 = mats("A2"), mats("B2")
    B1 = mat(params.get("B1", 0.0))
    F = np.broadcast_to(np.asarray(params.get("F", 0.0), dtype=complex), (d,)).copy()
    G = np.broadcast_to(np.asarray(params.get("G", 0.0), dtype=complex), (d,)).copy()
    for M in [B1, *A2, *B2]:
        if M.shape != (d, d):
            raise ParameterError(f"matrix of shape {M.shape} does not match dimension {d}")
    cplx = _is_complex(A1, B1, F, G, *A2, *B2)
    if not cplx:
        A1, B1, F, G = A1.real, B1.real, F.real, G.real
        A2 = [M.real for M in A2]
        B2 = [M.real for M in B2]
    A1T, B1T = A1.T.copy(), B1.T.copy()
    A2T = [M.T.copy() for M in A2]
    B2T = [M.T.copy() for M in B2]

    def drift(t, x, ys):
        out = x @ A1T + F
        for MT, y in zip(A2T, ys):
            out = out + y @ MT
        return out

    def diffusion(t, x, ys):
        out = x @ B1T + G
        for MT, y in zip(B2T, ys):
            out = out + y @ MT
        return out[..., None]

    coeffs = linear_coeffs(A1, A2, B1, B2)
    a, b = window
    tau = max(dl.effective_tau_max(a, b) for dl in delays)
    return ProblemSpec(d, 1, drift, diffusion, delays, _segment(initial, d, a, tau), coeffs,
                       (a, b), complex_state=cplx, params=dict(params))


def _scalar_linear(params, delays, window, initial):
    r = len(delays)
    p = {
        "A1": complex(params.get("A1", 0.0)),
        "B1": complex(params.get("B1", 0.0)),
        "A2": [[[x]] for x in _cplx_list(params.get("A2", 0.0), r)],
        "B2": [[[x]] for x in _cplx_list(params.get("B2", 0.0), r)],
        "F": complex(params.get("F", 0.0)),
        "G": complex(params.get("G", 0.0)),
    }
    if r == 1:
        p["A2"], p["B2"] = p["A2"][0], p["B2"][0]
    spec = _linear(p, delays, window, initial)
    return _renamed(spec, params)


def _pure_sde(params, delays, window, initial):
    p = {"A1": params.get("A1", 0.0), "B1": params.get("B1", 0.0),
         "A2": 0.0, "B2": 0.0}
    if delays is None or len(delays) != 1:
        delays = (DelaySpec.constant(0.0),)
    return _renamed(_scalar_linear(p, delays, window, initial), params)


def _nonlinear(params, delays, window, initial):
    r = len(delays)
    A1 = float(params.get("A1", 0.0))
    A2 = float(params.get("A2", -1.0))
    if not A2 < 0:
        raise ParameterError(f"nonlinear family requires A2 < 0, got {A2}")
    A3 = np.array([float(np.real(x)) for x in _cplx_list(params.get("A3", 0.0), r)])
    B1 = float(params.get("B1", 0.0))
    B2 = np.array([float(np.real(x)) for x in _cplx_list(params.get("B2", 0.0), r)])
    F = float(params.get("F", 0.0))
    G = float(params.get("G", 0.0))

    def drift(t, x, ys):
        out = A1 * x + A2 * x ** 3 + F
        for c, y in zip(A3, ys):
            out = out + c * np.sqrt(y * y + 1)
        return out

    def diffusion(t, x, ys):
        out = B1 * np.sin(x) + G
        for c, y in zip(B2, ys):
            out = out + c * np.arctan(y)
        return out[..., None]

    coeffs = CoefficientSet(A1, tuple(np.abs(A3)), abs(B1), tuple(np.abs(B2)))
    a, b = window
    tau = max(dl.effective_tau_max(a, b) for dl in delays)
    return ProblemSpec(1, 1, drift, diffusion, delays, _segment(initial, 1, a, tau), coeffs,
                       (a, b), complex_state=False, params=dict(params))


def _renamed(spec, params):
    return replace(spec, params=dict(params))


@dataclass(frozen=True)
class RegistryEntry:
    name: str
    constructor: Callable
    keys: tuple
    description: str = ""


REGISTRY: dict = {}


def register(name, constructor, keys, description=""):
    REGISTRY[name] = RegistryEntry(name, constructor, tuple(keys), description)


register("linear", _linear, ("A1", "A2", "B1", "B2", "F", "G"),
         "linear system with matrix coefficients")
register("scalar_linear", _scalar_linear, ("A1", "A2", "B1", "B2", "F", "G"),
         "scalar linear test equation")
register("nonlinear", _nonlinear, ("A1", "A2", "A3", "B1", "B2", "F", "G"),
         "cubic drift, sin/arctan diffusion")
register("pure_sde", _pure_sde, ("A1", "B1"), "geometric Brownian motion, no delay")


def make_problem(name: str, params: dict | None = None, delays=None, window=(0.0, 1.0),
                 initial=None, validate: bool = False, probes: int = 1000) -> ProblemSpec:
    """Build a registered problem.

    ``delays`` defaults to one zero delay. ``initial`` is an
    :class:`InitialSegment` or a ``(family, params)`` pair and defaults to the
    constant 1. With ``validate`` the declared coefficients are spot-checked
    and a :class:`ParameterError` lists the first violation.
    """
    try:
        entry = REGISTRY[name]
    except KeyError:
        raise ParameterError(f"unknown problem {name!r}; known: {sorted(REGISTRY)}") from None
    params = dict(params or {})
    unknown = set(params) - set(entry.keys)
    if unknown:
        raise ParameterError(f"unknown parameters for {name}: {sorted(unknown)}")
    if delays is None:
        delays = (DelaySpec.constant(0.0),)
    elif isinstance(delays, DelaySpec):
        delays = (delays,)
    spec = entry.constructor(params, tuple(delays), tuple(map(float, window)), initial)
    spec = replace(spec, name=name)
    if validate:
        report = validate_problem(spec, probes)
        if not report:
            raise ParameterError(f"{name}: declared coefficients fail: {report.first}")
    return spec
