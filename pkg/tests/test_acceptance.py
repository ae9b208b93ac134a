"""Acceptance suite: eight end-to-end checks of the certificates, the scheme and the CLI.

Each check prints one ``PASS``/``FAIL`` line; ``conftest.py`` repeats them in
the terminal summary. Run standalone with ``python tests/test_acceptance.py``.
"""
import math
import time
from fractions import Fraction as Fr

import numpy as np
import pytest

from sddestab import (
    ASYMPTOTIC,
    CONTRACTIVE,
    CoefficientSet,
    DelaySpec,
    Grid,
    InitialSegment,
    StepsizeError,
    asymptotic_certificate,
    certify,
    contraction_constant,
    discrete_constants,
    make_problem,
    node_sequence,
    sigma_rho,
    simulate,
    solve_implicit,
)
from sddestab.cli import main
from sddestab.integrator import RTOL, Trajectory
from sddestab.montecarlo import (
    check_bound,
    estimate_ms_deviation,
    estimate_second_moment,
    exact_second_moment_scalar_linear,
    strong_error_slope,
)

RESULTS = {}

EXAMPLE = {"A1": -4, "A2": 1, "B1": 0.5, "B2": 0.5}
SLACK = 3.0


def report(num, title, ok, detail):
    line = f"criterion {num} {'PASS' if ok else 'FAIL'}: {title}: {detail}"
    RESULTS[num] = line
    print(line)
    return ok


def _pair(tau):
    xi = InitialSegment.constant(1.0, 1, 0.0, tau)
    eta = InitialSegment.constant(0.5, 1, 0.0, tau)
    return xi, eta


def test_criterion_1_contractivity():
    start = time.perf_counter()
    xi, eta = _pair(1.0)
    parts, ok = [], True
    for h in (0.5, 0.1, 0.01):
        N = int(round(5 / h))
        p = make_problem("scalar_linear", EXAMPLE, DelaySpec.constant(1.0), (0, 5))
        s = estimate_ms_deviation(p, xi, eta, Grid(0.0, 5.0, N), 10_000, 1)
        r = check_bound(s, SLACK)
        ok &= r.ok and bool(np.all(s.envelope == 0.25))
        parts.append(f"h={h} violations={r.violations} worst_margin={r.worst_margin:.3g}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 60
    assert report(1, "contractivity", ok, "; ".join(parts) + f"; {elapsed:.1f}s")


def test_criterion_2_asymptotic_contractivity():
    xi, eta = _pair(1.0)
    p = make_problem("scalar_linear", EXAMPLE, DelaySpec.constant(1.0), (0, 20))
    s = estimate_ms_deviation(p, xi, eta, Grid(0.0, 20.0, 200), 10_000, 2, envelope="asymptotic")
    cert = s.meta["certificate"]
    seq = s.meta["node_sequence"]
    c2 = cert.step(0.1).c2
    idx = list(seq.indices)
    ok = ASYMPTOTIC in cert.classification
    ok &= idx[:3] == [0, 11, 22] and all(b - a == 11 for a, b in zip(idx, idx[1:]))
    ok &= abs(c2 - 12 / 17) <= 1e-12
    r = check_bound(s, SLACK)
    # per-block maxima against c2^(k+1) D0
    block_ok = True
    for k in range(len(idx)):
        lo = idx[k] + 1
        hi = idx[k + 1] if k + 1 < len(idx) else 200
        if lo > 200:
            break
        j = lo + int(np.argmax(s.estimate[lo:hi + 1]))
        block_ok &= s.estimate[j] - SLACK * s.stderr[j] <= c2 ** (k + 1) * 0.25
    terminal = float(np.max(s.estimate[idx[-1] + 1:])) if idx[-1] < 200 else float(s.estimate[-1])
    ok &= r.ok and block_ok and terminal < 0.01 * 0.25
    assert report(2, "asymptotic contractivity", ok,
                  f"nodes={idx[:4]}... c2={c2:.6f} violations={r.violations} "
                  f"terminal_block_max={terminal:.3g} (< {0.01 * 0.25})")


def test_criterion_3_exact_moment_oracle():
    start = time.perf_counter()
    A1, B1, h, N = -2.0, 1.0, 0.1, 50
    p = make_problem("pure_sde", {"A1": A1, "B1": B1}, window=(0, N * h))
    mean, err = estimate_second_moment(p, Grid.from_step(0.0, h, N), 100_000, 3)
    exact = exact_second_moment_scalar_linear(A1, B1, h, N, 1.0)
    ratio_ok = abs(exact[1] - 1.1 / 1.44) <= 1e-15
    z = (mean - exact) / np.where(err > 0, err, np.inf)
    bad = np.flatnonzero(np.abs(mean - exact) > SLACK * err)
    elapsed = time.perf_counter() - start
    ok = ratio_ok and bad.size == 0 and elapsed < 120
    detail = (f"nodes outside 3 stderr: {bad.size}/{N + 1}"
              + (f" (first n={bad[0]}, worst z={z[np.argmax(np.abs(z))]:.2f})" if bad.size else "")
              + f"; {elapsed:.1f}s")
    assert report(3, "exact-moment oracle", ok, detail)


def test_criterion_4_strong_order():
    hs = [2.0 ** -k for k in range(4, 10)]
    noisy = strong_error_slope(hs, 2000, 4, A1=-1.0, B1=0.5)
    smooth = strong_error_slope(hs, 2000, 4, A1=-1.0, B1=0.0)
    ok = 0.35 <= noisy.slope <= 0.65 and 0.9 <= smooth.slope <= 1.1
    assert report(4, "strong order", ok,
                  f"slope(B1=0.5)={noisy.slope:.3f} in [0.35, 0.65]; "
                  f"slope(B1=0)={smooth.slope:.3f} in [0.9, 1.1]")


def _dde_endpoint(h, T):
    N = int(round(T / h))
    p = make_problem("scalar_linear", {"A1": -2.0, "A2": 0.5}, DelaySpec.constant(1.0), (0, T))
    return simulate(p, Grid(0.0, T, N), np.zeros((N, 1))).final[0, 0]


def test_criterion_5_deterministic_reduction():
    T = 2.0
    ref = 2 * _dde_endpoint(0.0005, T) - _dde_endpoint(0.001, T)
    e1 = abs(_dde_endpoint(0.1, T) - ref)
    e2 = abs(_dde_endpoint(0.05, T) - ref)
    factor = e1 / e2
    assert report(5, "deterministic reduction", 1.8 <= factor <= 2.2,
                  f"error(h=0.1)={e1:.4g} error(h=0.05)={e2:.4g} factor={factor:.4f} in [1.8, 2.2]")


def test_criterion_6_certificate_arithmetic():
    ex = CoefficientSet(-4.0, (1.0,), 0.5, (0.5,))
    checks = []

    def close(got, want):
        checks.append(abs(got - want) <= 1e-12 * abs(want))

    close(contraction_constant(ex), -5.0)
    sigma, rho = sigma_rho(ex)
    close(sigma, -6.5)
    close(rho, 1.5)
    close(asymptotic_certificate(ex).nu, 1.5 / 6.5)
    s = discrete_constants(ex, 0.1)
    close(s.ratios[0], 0.6875)
    close(s.ratios[1], float(Fr(12, 17)))
    close(s.c2, float(Fr(12, 17)))
    seq1 = list(node_sequence(DelaySpec.constant(1.0), (0.0, 0.1, 100), K=2).indices)
    seq2 = list(node_sequence(DelaySpec.pantograph(0.5), (0.0, 0.1, 100), K=3).indices)
    checks += [seq1 == [0, 11, 22], seq2 == [0, 2, 6, 14]]
    checks.append(certify(ex, h=0.1).classification == (CONTRACTIVE, ASYMPTOTIC))
    assert report(6, "certificate arithmetic", all(checks),
                  f"{sum(checks)}/{len(checks)} values reproduced; c2={s.c2:.12f} "
                  f"nodes={seq1},{seq2}")


def test_criterion_7_implicit_solver(tmp_path, capsys):
    rng = np.random.default_rng(7)
    done = worst_res = worst_gap = 0.0
    ok = True
    while done < 100:
        A1 = rng.uniform(-30, 4)
        params = {"A1": A1, "A2": -rng.uniform(0.1, 5), "A3": rng.uniform(0, 3),
                  "B1": rng.uniform(0, 2), "B2": rng.uniform(0, 2)}
        h = float(rng.choice([0.01, 0.05, 0.1, 0.25, 0.5]))
        delay = DelaySpec.constant(rng.uniform(0, 2 * h))
        p = make_problem("nonlinear", params, delay, (0, 1))
        c = p.coeffs
        if (c.alpha + c.beta_sum) * h >= 1:
            continue
        grid = Grid.from_step(0.0, h, 2)
        st = np.zeros((3, 1, 1))
        st[0] = rng.normal(0, 2)
        tr = Trajectory(grid, st, p.initial, 0)
        dw = rng.normal(0, math.sqrt(h), 1)
        z1, r1 = solve_implicit(p, tr, 0, h, dw, z0=[[-50.0]])
        z2, r2 = solve_implicit(p, tr, 0, h, dw, z0=[[50.0]])
        for z, r in ((z1, r1), (z2, r2)):
            worst_res = max(worst_res, r[0] / (1 + abs(z[0, 0])))
            ok &= r[0] <= RTOL * (1 + abs(z[0, 0]))
        worst_gap = max(worst_gap, abs(z1[0, 0] - z2[0, 0]))
        ok &= abs(z1[0, 0] - z2[0, 0]) <= 1e-10
        done += 1
    # a configured unsolvable step is refused before any path is stepped
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("problem.name = scalar_linear\nproblem.A1 = 5\nproblem.A2 = 6\n"
                   "delay.tau = 1\ngrid.b = 1\ngrid.N = 10\nmc.paths = 100\n")
    status = main(["--out", str(tmp_path / "o"), "deviation", str(cfg)])
    err = capsys.readouterr().err
    rejected = status != 0 and "(alpha+beta)h<1" in err
    rejected &= not (tmp_path / "o" / "deviation.csv").exists()
    p = make_problem("scalar_linear", {"A1": 5, "A2": 6}, DelaySpec.constant(1), (0, 1))
    try:
        simulate(p, Grid(0.0, 1.0, 10), np.zeros((10, 1)))
        rejected = False
    except StepsizeError:
        pass
    ok &= rejected
    assert report(7, "implicit solver contract", ok,
                  f"100 problems, max scaled residual={worst_res:.2g}, "
                  f"max start-guess gap={worst_gap:.2g}, unsolvable config rejected={rejected}")


def test_criterion_8_determinism(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("problem.name = scalar_linear\nproblem.A1 = -4\nproblem.A2 = 1\n"
                   "problem.B1 = 0.5\nproblem.B2 = 0.5\ndelay.kind = constant\ndelay.tau = 1\n"
                   "grid.b = 5\ngrid.N = 50\nmc.paths = 10000\nmc.seed = 2024\n")
    blobs = []
    for k, threads in enumerate(("1", "1", "8")):
        out = tmp_path / f"run{k}"
        main(["--threads", threads, "--out", str(out), "deviation", str(cfg)])
        blobs.append((out / "deviation.csv").read_bytes())
    ok = blobs[0] == blobs[1] == blobs[2] and len(blobs[0]) > 0
    assert report(8, "determinism", ok,
                  f"repeat identical={blobs[0] == blobs[1]}, threads 1 vs 8 identical="
                  f"{blobs[0] == blobs[2]}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
