"""Command-line front end.

Configuration files hold one ``section.key = value`` assignment per line;
``#`` starts a comment. Recognised keys::

    problem.name       registry name (required); other problem.* keys are the
                       family's parameters (numbers, complex numbers such as
                       -4+1j, comma lists, or bracketed matrices)
    delay.kind         constant | pantograph | piecewise | tabulated, or a comma
                       list for several delays (default constant)
    delay.tau / q / i  parameters, consumed in order by delays of that kind
    delay.times        tabulated sample times   delay.values  tabulated tau values
    delay.tau_max      initial-interval length (default: smallest admissible)
    grid.a, grid.b, grid.N, grid.levels
    mc.paths, mc.seed
    pair.xi, pair.eta  initial families, e.g. constant(1), polynomial(0, 1),
                       sinusoid(1, 2, 0)
    analysis.c0, analysis.mu, analysis.slack, analysis.envelope (finite|asymptotic)
    output.dir
"""
from __future__ import annotations

import argparse
import ast
import math
import re
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import analysis
from .core import DelaySpec, InitialSegment, SDDEError, validate_problem
from .integrator import Grid, check_solvable, simulate, wiener_increments
from .montecarlo import check_bound, estimate_ms_deviation, initial_gap, strong_error_slope
from .problems import REGISTRY, make_problem

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config", "build_problem",
           "run_certify", "run_experiment", "run_simulate", "run_order", "main"]

SECTIONS = ("problem", "delay", "grid", "mc", "pair", "analysis", "output")
FIXED_KEYS = {
    "delay": {"kind", "tau", "q", "i", "times", "values", "tau_max"},
    "grid": {"a", "b", "N", "levels"},
    "mc": {"paths", "seed"},
    "pair": {"xi", "eta"},
    "analysis": {"c0", "mu", "slack", "envelope"},
    "output": {"dir"},
}
REQUIRED = ("problem.name", "grid.b", "grid.N", "mc.paths")
CSV_HEADER = "n,t,estimate,stderr,envelope,violated"
PROBES = 1000


class ConfigError(SDDEError, ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass
class ExperimentConfig:
    problem: str
    params: dict
    delays: tuple
    a: float
    b: float
    N: int
    paths: int
    seed: int
    xi: tuple = ("constant", (1.0,))
    eta: tuple = ("constant", (0.5,))
    c0: float = 0.5
    mu: float = 1.0
    slack: float = 3.0
    envelope: str = "finite"
    out_dir: str = "out"
    levels: int = 6
    lines: dict = field(default_factory=dict, repr=False)

    @property
    def grid(self):
        return Grid(self.a, self.b, self.N)


def _number(text):
    v = complex(text.replace(" ", ""))
    if not (math.isfinite(v.real) and math.isfinite(v.imag)):
        raise ValueError("not finite")
    return v.real if v.imag == 0 else v


def _value(text):
    text = text.strip()
    if text.startswith("["):
        arr = np.asarray(ast.literal_eval(text), dtype=complex)
        if not np.all(np.isfinite(arr)):
            raise ValueError("not finite")
        return arr.real.tolist() if np.all(arr.imag == 0) else arr.tolist()
    parts = [p for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty value")
    vals = [_number(p) for p in parts]
    return vals[0] if len(vals) == 1 else vals


_SEGMENT = re.compile(r"^\s*(constant|polynomial|sinusoid)\s*\((.*)\)\s*$", re.I)


def _segment(text):
    m = _SEGMENT.match(text)
    if not m:
        raise ValueError("expected constant(...), polynomial(...) or sinusoid(...)")
    args = [_number(p) for p in m.group(2).split(",") if p.strip()]
    if not args:
        raise ValueError("initial family needs at least one parameter")
    return m.group(1).lower(), tuple(args)


def _as_list(v):
    return v if isinstance(v, list) else [v]


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate configuration text; every problem is reported in one :class:`ConfigError`."""
    errors = []
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            errors.append(f"{source}:{lineno}: expected 'section.key = value'")
            continue
        key, value = (s.strip() for s in body.split("=", 1))
        if "." not in key:
            errors.append(f"{source}:{lineno}: key {key!r} has no section")
            continue
        if key in raw:
            errors.append(
                f"{source}:{lineno}: duplicate key {key!r} on line {lineno} "
                f"(first set on line {raw[key][1]})"
            )
            continue
        raw[key] = (value, lineno)

    def err(key, msg):
        line = raw[key][1] if key in raw else None
        errors.append(f"{source}:{line}: {msg}" if line else f"{source}: {msg}")

    name = raw.get("problem.name", (None,))[0]
    if name is not None and name not in REGISTRY:
        err("problem.name", f"unknown problem {name!r}; known: {', '.join(sorted(REGISTRY))}")
    for key in raw:
        section, sub = key.split(".", 1)
        if section not in SECTIONS:
            err(key, f"unknown section {section!r} in key {key!r}")
        elif section == "problem":
            if sub != "name" and name in REGISTRY and sub not in REGISTRY[name].keys:
                err(key, f"unknown key {key!r} for problem {name}")
        elif sub not in FIXED_KEYS[section]:
            err(key, f"unknown key {key!r}")
    for key in REQUIRED:
        if key not in raw:
            errors.append(f"{source}: missing required key {key!r}")

    def get(key, conv, default=None):
        if key not in raw:
            return default
        try:
            return conv(raw[key][0])
        except (ValueError, SyntaxError, TypeError) as exc:
            err(key, f"{key} = {raw[key][0]!r}: {exc}")
            return default

    def real(text):
        v = _number(text)
        if isinstance(v, complex):
            raise ValueError("must be real")
        return float(v)

    def pos_int(key):
        def conv(text):
            v = real(text)
            if v != int(v) or v < 1:
                raise ValueError(f"{key} must be a positive integer")
            return int(v)
        return conv

    def nonneg_int(text):
        v = real(text)
        if v != int(v) or v < 0:
            raise ValueError("must be a nonnegative integer")
        return int(v)

    params = {}
    for key in raw:
        if key.startswith("problem.") and key != "problem.name":
            params[key.split(".", 1)[1]] = get(key, _value)

    a = get("grid.a", real, 0.0)
    b = get("grid.b", real)
    N = get("grid.N", pos_int("grid.N"))
    if "grid.N" in raw and N is None and not any("grid.N must" in e for e in errors):
        err("grid.N", "grid.N must be a positive integer")
    if a is not None and b is not None and not b > a:
        err("grid.b", "grid.b must exceed grid.a")
    paths = get("mc.paths", pos_int("mc.paths"))
    seed = get("mc.seed", nonneg_int, 0)
    levels = get("grid.levels", pos_int("grid.levels"), 6)
    c0 = get("analysis.c0", real, 0.5)
    if c0 is not None and not 0 < c0 < 1:
        err("analysis.c0", "analysis.c0 must lie in (0, 1)")
    mu = get("analysis.mu", real, 1.0)
    if mu is not None and not mu > 0:
        err("analysis.mu", "analysis.mu must be positive")
    slack = get("analysis.slack", real, 3.0)
    if slack is not None and slack < 0:
        err("analysis.slack", "analysis.slack must be nonnegative")
    envelope = raw.get("analysis.envelope", ("finite",))[0].strip().lower()
    if envelope not in ("finite", "asymptotic"):
        err("analysis.envelope", "analysis.envelope must be finite or asymptotic")
    xi = get("pair.xi", _segment, ("constant", (1.0,)))
    eta = get("pair.eta", _segment, ("constant", (0.5,)))
    out_dir = raw.get("output.dir", ("out",))[0]

    delays = ()
    kinds = [k.strip().lower() for k in raw.get("delay.kind", ("constant",))[0].split(",")]
    lists = {k: _as_list(get(f"delay.{k}", _value, [])) for k in ("tau", "q", "i")}
    tau_max = get("delay.tau_max", real)
    try:
        built = []
        pkey = {"constant": "tau", "pantograph": "q", "piecewise": "i"}
        used = dict.fromkeys(pkey, 0)
        for kind in kinds:
            if kind == "tabulated":
                times = _as_list(get("delay.times", _value, []))
                values = _as_list(get("delay.values", _value, []))
                built.append(DelaySpec.tabulated(times, values, tau_max))
                continue
            if kind not in pkey:
                raise ValueError(f"unknown delay kind {kind!r}")
            vals = lists[pkey[kind]]
            j = used[kind]
            if j < len(vals):
                v = float(np.real(vals[j]))
            elif kind == "constant" and not vals:
                v = 0.0
            else:
                raise ValueError(f"delay.{pkey[kind]} needs a value for each {kind} delay")
            used[kind] += 1
            built.append(DelaySpec(kind, v, tau_max))
        for kind, k in pkey.items():
            if len(lists[k]) > used[kind]:
                raise ValueError(f"delay.{k} has more values than there are {kind} delays")
        delays = tuple(built)
    except (ValueError, SDDEError) as exc:
        errors.append(f"{source}: delay: {exc}")

    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(name, params, delays, a, b, N, paths, seed, xi, eta, c0, mu, slack,
                            envelope, out_dir, levels, {k: v[1] for k, v in raw.items()})


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"{path}: cannot read: {exc}"]) from exc
    return parse_config(text, str(path))


def build_problem(cfg: ExperimentConfig, validate: bool = True):
    """Construct the configured problem and its two initial functions."""
    try:
        problem = make_problem(cfg.problem, cfg.params, cfg.delays, (cfg.a, cfg.b), cfg.xi)
    except SDDEError as exc:
        raise ConfigError([f"problem: {exc}"]) from exc
    if validate:
        report = validate_problem(problem, PROBES)
        if not report:
            raise ConfigError([f"problem {cfg.problem}: declared coefficients fail: {report.first}"])
    tau = problem.initial.tau_max
    d = problem.dimension
    try:
        xi = InitialSegment(cfg.xi[0], cfg.xi[1], d, cfg.a, tau)
        eta = InitialSegment(cfg.eta[0], cfg.eta[1], d, cfg.a, tau)
    except SDDEError as exc:
        raise ConfigError([f"pair: {exc}"]) from exc
    return problem, xi, eta


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    if isinstance(v, complex):
        return f"{v.real:.17g}{v.imag:+.17g}j"
    return str(v)


def run_certify(cfg: ExperimentConfig):
    """Return ``(report_text, record)`` for the configured problem and step size."""
    problem, xi, eta = build_problem(cfg)
    cert = analysis.certify(problem.coeffs, h=cfg.grid.h, c0=cfg.c0, mu=cfg.mu, a=cfg.a)
    rec = {"problem": cfg.problem}
    rec.update({"alpha": problem.coeffs.alpha,
                "beta": ",".join(_fmt(b) for b in problem.coeffs.beta),
                "gamma1": problem.coeffs.gamma1,
                "gamma2": ",".join(_fmt(g) for g in problem.coeffs.gamma2)})
    rec.update(cert.record())
    rec["D0"] = initial_gap(xi, eta)
    text = "\n".join(f"{k}={_fmt(v)}" for k, v in rec.items()) + "\n"
    return text, rec, cert


def _write(out: Path, name: str, text: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text, encoding="utf-8")


def deviation_csv(series) -> str:
    lines = [CSV_HEADER]
    for n, t, est, se, env, bad in series.rows():
        lines.append(f"{n},{t:.17g},{est:.17g},{se:.17g},{env:.17g},{int(bad)}")
    return "\n".join(lines) + "\n"


def run_experiment(cfg: ExperimentConfig, threads: int = 1, out: Path | None = None) -> int:
    """Estimate the deviation series, compare with the envelope and write the output files.

    Returns 0 iff no node violates the envelope at the configured slack.
    """
    out = Path(out or cfg.out_dir)
    text, rec, cert = run_certify(cfg)
    _write(out, "certificate.txt", text)
    problem, xi, eta = build_problem(cfg, validate=False)
    check_solvable(problem, cfg.grid.h)
    start = time.perf_counter()
    series = estimate_ms_deviation(problem, xi, eta, cfg.grid, cfg.paths, cfg.seed,
                                   envelope=cfg.envelope, c0=cfg.c0, mu=cfg.mu,
                                   slack=cfg.slack, threads=threads)
    report = check_bound(series, cfg.slack)
    elapsed = time.perf_counter() - start
    _write(out, "deviation.csv", deviation_csv(series))
    summary = {
        "violations": report.violations,
        "worst_margin": report.worst_margin,
        "worst_node": report.worst_index,
        "slack_sigmas": cfg.slack,
        "envelope": cfg.envelope,
        "paths": cfg.paths,
        "seed": cfg.seed,
        "h": cfg.grid.h,
        "D0": series.D0,
        "runtime_s": elapsed,
    }
    _write(out, "summary.txt", "\n".join(f"{k}={_fmt(v)}" for k, v in summary.items()) + "\n")
    return 0 if report.ok else 1


def run_simulate(cfg: ExperimentConfig, out: Path | None = None, path_index: int = 0) -> Path:
    """Write one trajectory (path ``path_index`` of the configured seed) to ``trajectory.csv``."""
    out = Path(out or cfg.out_dir)
    problem, xi, _ = build_problem(cfg)
    grid = cfg.grid
    traj = simulate(problem, grid, wiener_increments(cfg.seed, path_index, grid,
                                                     problem.wiener_dimension))
    X = traj.path(0)
    cols = [f"x{k}" for k in range(problem.dimension)]
    if problem.complex_state:
        cols = [c for k in range(problem.dimension) for c in (f"re{k}", f"im{k}")]
    lines = ["n,t," + ",".join(cols)]
    for n, t in enumerate(grid.nodes):
        if problem.complex_state:
            vals = [v for z in X[n] for v in (z.real, z.imag)]
        else:
            vals = list(X[n])
        lines.append(f"{n},{t:.17g}," + ",".join(f"{v:.17g}" for v in vals))
    _write(out, "trajectory.csv", "\n".join(lines) + "\n")
    return out / "trajectory.csv"


def run_order(cfg: ExperimentConfig, threads: int = 1, out: Path | None = None):
    """Strong-order study of the no-delay linear equation dx = A1 x dt + B1 x dw."""
    out = Path(out or cfg.out_dir)
    extra = {k: v for k, v in cfg.params.items() if k not in ("A1", "B1") and v not in (0, 0.0)}
    if cfg.problem not in ("pure_sde", "scalar_linear") or extra:
        raise ConfigError(["order: needs pure_sde, or scalar_linear with only A1 and B1 set"])
    A1 = float(np.real(cfg.params.get("A1", 0.0)))
    B1 = float(np.real(cfg.params.get("B1", 0.0)))
    if cfg.xi[0] != "constant" or len(cfg.xi[1]) != 1:
        raise ConfigError(["order: pair.xi must be a scalar constant(...)"])
    x0 = float(np.real(cfg.xi[1][0]))
    T = cfg.b - cfg.a
    hs = [T / (cfg.N * 2 ** k) for k in range(cfg.levels)]
    res = strong_error_slope(hs, cfg.paths, cfg.seed, A1=A1, B1=B1, x0=x0, T=T, threads=threads)
    lines = ["h,rms_error"] + [f"{h:.17g},{e:.17g}" for h, e in zip(res.h, res.rms)]
    _write(out, "order.csv", "\n".join(lines) + "\n")
    _write(out, "summary.txt", f"slope={res.slope:.17g}\npaths={cfg.paths}\nseed={cfg.seed}\n")
    return res


def _parser():
    p = argparse.ArgumentParser(prog="sddestab", description=__doc__.split("\n")[0])
    p.add_argument("--seed", type=int, help="master seed (overrides mc.seed)")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not change)")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb, help_ in (("certify", "print the stability certificate"),
                        ("simulate", "write one backward Euler trajectory"),
                        ("deviation", "estimate E|X_n - Y_n|^2 and check the bound"),
                        ("order", "estimate the strong convergence order")):
        sp = sub.add_parser(verb, help=help_)
        sp.add_argument("config")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2 ** 64:
                raise ConfigError(["--seed must be an unsigned 64-bit integer"])
            cfg = replace(cfg, seed=args.seed)
        out = Path(args.out) if args.out else Path(cfg.out_dir)
        if args.verb == "certify":
            text, _, _ = run_certify(cfg)
            _write(out, "certificate.txt", text)
            sys.stdout.write(text)
            return 0
        if args.verb == "simulate":
            print(run_simulate(cfg, out))
            return 0
        if args.verb == "deviation":
            status = run_experiment(cfg, args.threads, out)
            sys.stdout.write((out / "summary.txt").read_text())
            return status
        res = run_order(cfg, args.threads, out)
        print(f"slope={res.slope:.6g}")
        return 0
    except ConfigError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return 2
    except SDDEError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
