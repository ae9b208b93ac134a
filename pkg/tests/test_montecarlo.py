import math

import numpy as np
import pytest

from sddestab import (
    CertificationError,
    DelaySpec,
    Grid,
    InitialSegment,
    ParameterError,
    certify,
    make_problem,
    node_sequence,
)
from sddestab.montecarlo import (
    MsDeviationSeries,
    asymptotic_envelope,
    check_bound,
    estimate_ms_deviation,
    estimate_second_moment,
    exact_second_moment_scalar_linear,
    initial_gap,
    strong_error_slope,
)

XI = InitialSegment.constant(1.0, 1, 0.0, 1.0)
ETA = InitialSegment.constant(0.5, 1, 0.0, 1.0)


def _series(est, err, env):
    est = np.atleast_1d(np.asarray(est, dtype=float))
    return MsDeviationSeries(np.arange(est.size) * 0.1, est, np.full(est.size, err),
                             np.full(est.size, env), 10, 0, 0.1, env)


def _example(window=(0, 5)):
    return make_problem("scalar_linear", {"A1": -4, "A2": 1, "B1": 0.5, "B2": 0.5},
                        DelaySpec.constant(1.0), window)


def test_identical_initials_give_zero_series():
    p = _example((0, 2))
    s = estimate_ms_deviation(p, XI, XI, Grid(0.0, 2.0, 20), 300, 1)
    assert np.all(s.estimate == 0) and np.all(s.stderr == 0)
    assert s.D0 == 0 and np.all(s.envelope == 0) and not s.violated.any()


def test_single_deterministic_pair():
    p = make_problem("scalar_linear", {"A1": -2.0}, DelaySpec.constant(1.0), (0, 1))
    s = estimate_ms_deviation(p, XI, ETA, Grid(0.0, 1.0, 10), 1, 0)
    np.testing.assert_allclose(s.estimate, 0.25 * 1.2 ** (-2.0 * np.arange(11)), rtol=1e-12)
    assert np.all(s.stderr == 0)


def test_first_step_deviation_matches_expansion():
    B1, h = 0.8, 0.1
    p = make_problem("pure_sde", {"B1": B1}, window=(0, h))
    xi = InitialSegment.constant(1.0)
    eta = InitialSegment.constant(0.5)
    s = estimate_ms_deviation(p, xi, eta, Grid(0.0, h, 1), 100_000, 42)
    exact = 0.25 * (1 + B1 * B1 * h)
    assert abs(s.estimate[1] - exact) <= 3 * s.stderr[1]


def test_series_shape_and_sign():
    s = estimate_ms_deviation(_example((0, 2)), XI, ETA, Grid(0.0, 2.0, 20), 500, 3)
    assert s.estimate.shape == (21,) and s.t.shape == (21,)
    assert np.all(s.estimate >= 0) and np.all(s.stderr >= 0)
    assert s.M == 500 and s.seed == 3 and s.h == pytest.approx(0.1)
    rows = list(s.rows())
    assert rows[0][0] == 0 and rows[-1][0] == 20


def test_initial_gap():
    assert initial_gap(XI, ETA) == 0.25
    sine = InitialSegment("sinusoid", (1.0, math.pi, 0.0), 1, 0.0, 1.0)
    zero = InitialSegment.constant(0.0, 1, 0.0, 1.0)
    assert initial_gap(sine, zero) == pytest.approx(1.0, abs=1e-5)


def test_exact_second_moment_ratios():
    m = exact_second_moment_scalar_linear(-2, 1, 0.1, 3, 1.0)
    assert m[1] == pytest.approx(1.1 / 1.44, rel=1e-14)
    assert m[3] == pytest.approx((1.1 / 1.44) ** 3, rel=1e-14)
    m = exact_second_moment_scalar_linear(-1, 0, 0.1, 2, 2.0)
    assert m[1] / m[0] == pytest.approx(1 / 1.21, rel=1e-14)
    np.testing.assert_array_equal(exact_second_moment_scalar_linear(0, 0, 0.3, 5, 1.5), 2.25)
    with pytest.raises(ParameterError):
        exact_second_moment_scalar_linear(10, 0, 0.1, 5, 1.0)


def test_check_bound_examples():
    assert check_bound(_series(np.zeros(5), 0.0, 0.25)).ok
    r = check_bound(_series(0.30, 0.01, 0.25), 3)
    assert r.violations == 1 and r.worst_margin == pytest.approx(0.02)
    r = check_bound(_series(0.27, 0.01, 0.25), 3)
    assert r.ok and r.worst_margin == pytest.approx(-0.01)


def test_asymptotic_envelope_examples():
    seq = node_sequence(DelaySpec.constant(1.0), (0.0, 0.1, 60))
    env = asymptotic_envelope(61, seq, 12 / 17, 0.25)
    assert env.nodes[0] == 0.25
    assert env.nodes[1] == pytest.approx(0.176470, abs=1e-6)
    assert np.all(env.nodes[1:12] == env.nodes[1])
    assert env.nodes[12] == pytest.approx(0.25 * (12 / 17) ** 2)
    half = asymptotic_envelope(61, seq, 0.5, 2.0)
    assert half.blocks[3][3] == pytest.approx(0.0625 * 2.0)
    assert np.all(asymptotic_envelope(61, seq, 0.5, 0.0).nodes == 0)


def test_asymptotic_envelope_requires_certificate():
    seq = node_sequence(DelaySpec.constant(1.0), (0.0, 0.1, 30))
    grow = certify(make_problem("scalar_linear", {"A1": 1.0}).coeffs)
    with pytest.raises(CertificationError):
        asymptotic_envelope(31, seq, 0.5, 1.0, grow)
    with pytest.raises(CertificationError):
        asymptotic_envelope(31, seq, 1.0, 1.0)


def test_strong_slope_needs_two_steps():
    with pytest.raises(ParameterError):
        strong_error_slope([0.1], 10, 0)
    with pytest.raises(ParameterError):
        strong_error_slope([0.1, 0.03], 10, 0)


def test_doubling_paths_is_consistent():
    p = _example((0, 3))
    grid = Grid(0.0, 3.0, 30)
    small = estimate_ms_deviation(p, XI, ETA, grid, 2000, 8)
    big = estimate_ms_deviation(p, XI, ETA, grid, 4000, 8)
    assert np.all(np.abs(big.estimate - small.estimate) <= 6 * small.stderr + 1e-15)


def test_oracle_agreement_short_horizon():
    # the sample mean of |X_n|^2 is heavy tailed at long horizons; early nodes behave
    rng = np.random.default_rng(21)
    for k in range(10):
        A1 = rng.uniform(-3, 0.5)
        B1 = rng.uniform(0, 1.2)
        h = rng.choice([0.05, 0.1, 0.2])
        if 1 - A1 * h <= 0:
            continue
        N = 8
        p = make_problem("pure_sde", {"A1": A1, "B1": B1}, window=(0, N * h))
        mean, err = estimate_second_moment(p, Grid.from_step(0.0, h, N), 20_000, 100 + k)
        exact = exact_second_moment_scalar_linear(A1, B1, h, N, 1.0)
        assert np.all(np.abs(mean - exact) <= 3 * err + 1e-14), (A1, B1, h)


@pytest.mark.parametrize("name,params,delay", [
    ("scalar_linear", {"A1": -4, "A2": 1, "B1": 0.5, "B2": 0.5}, DelaySpec.constant(1)),
    ("scalar_linear", {"A1": -3 + 1j, "A2": 0.5j, "B1": 0.5}, DelaySpec.pantograph(0.5)),
    ("linear", {"A1": [[-3, 1], [0, -4]], "A2": [[0.3, 0], [0, 0.3]],
                "B1": [[0.4, 0], [0, 0.4]], "B2": [[0, 0.2], [0.2, 0]]}, DelaySpec.piecewise(1)),
    ("nonlinear", {"A1": -3, "A2": -1, "A3": 0.5, "B1": 0.5, "B2": 0.5},
     DelaySpec.constant(0.5)),
])
def test_contractive_builtins_respect_envelope(name, params, delay):
    p = make_problem(name, params, delay, (0, 3))
    assert certify(p.coeffs).c < 0
    d = p.dimension
    xi = InitialSegment.constant([1.0] * d, d, 0.0, p.tau_max)
    eta = InitialSegment.constant([0.5] * d, d, 0.0, p.tau_max)
    s = estimate_ms_deviation(p, xi, eta, Grid(0.0, 3.0, 30), 10_000, 5)
    assert check_bound(s, 3.0).ok


def test_threads_do_not_change_results():
    p = _example((0, 2))
    grid = Grid(0.0, 2.0, 20)
    a = estimate_ms_deviation(p, XI, ETA, grid, 3000, 9, threads=1)
    b = estimate_ms_deviation(p, XI, ETA, grid, 3000, 9, threads=4)
    assert np.array_equal(a.estimate, b.estimate) and np.array_equal(a.stderr, b.stderr)


def test_asymptotic_series_uses_node_sequence():
    p = _example((0, 6))
    s = estimate_ms_deviation(p, XI, ETA, Grid(0.0, 6.0, 60), 500, 2, envelope="asymptotic")
    assert list(s.meta["node_sequence"].indices[:3]) == [0, 11, 22]
    assert s.envelope[5] == pytest.approx(0.25 * 12 / 17)


def test_strong_slope_deterministic_is_first_order():
    r = strong_error_slope([2.0 ** -k for k in range(3, 7)], 4, 0, B1=0.0)
    assert 0.9 <= r.slope <= 1.1

