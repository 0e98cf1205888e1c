import math

import numpy as np
import pytest

from sepp.ldp import Path, euler_lagrange_residual, lagrangian, rate_of_path, scalar_rate
from sepp.rate_fn import RateFunction as R
from sepp.rate_fn import evaluate, find_fixed_points

GOLDEN = (1 + math.sqrt(5)) / 2
RATES = [R.sqrt_shift(), R.sine_mix(), R.constant(2.0), R.affine(0.5, 1.0), R.power(1.0, 0.5)]


def poisson_rate(x, lam):
    return (x * math.log(x / lam) if x > 0 else 0.0) - x + lam


# -- pointwise Lagrangian -------------------------------------------------


def test_lagrangian_examples():
    rf = R.sqrt_shift()
    b = evaluate(rf, 0.7 / 0.35)
    assert lagrangian(rf, 0.35, 0.7, b) == pytest.approx(0.0, abs=1e-15)
    assert lagrangian(R.constant(2.0), 0.5, 1.0, 3.0) == pytest.approx(3 * math.log(1.5) - 1, rel=1e-14)
    assert lagrangian(rf, 0.5, 1.0, 0.0) == pytest.approx(evaluate(rf, 2.0))
    assert math.isinf(lagrangian(R.power(1.0, 0.5), 0.5, 0.0, 1.0))
    assert lagrangian(R.power(1.0, 0.5), 0.5, 0.0, 0.0) == 0.0


def test_lagrangian_domain():
    with pytest.raises(ValueError):
        lagrangian(R.sqrt_shift(), 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        lagrangian(R.sqrt_shift(), 0.5, -1.0, 1.0)


def test_lagrangian_nonnegative_grid():
    rf = R.sine_mix()
    for alpha in (0.01, 0.3, 1.0):
        for f in (0.0, 0.2, 3.0):
            for a in (0.0, 0.1, 1.0, 7.0):
                assert lagrangian(rf, alpha, f, a) >= 0.0


# -- path functional ------------------------------------------------------


def test_path_validation():
    with pytest.raises(ValueError):
        Path([0.0, 0.5, 1.0], [0.0, 1.0, 0.5])
    with pytest.raises(ValueError):
        Path([0.0, 1.0], [0.1, 1.0])
    with pytest.raises(ValueError):
        Path([0.0, 0.7], [0.0, 1.0])


@pytest.mark.parametrize("rf", [R.sqrt_shift(), R.sine_mix(), R.affine(0.5, 1.0)], ids=lambda r: r.kind)
def test_fixed_point_line_costs_nothing(rf):
    for p in find_fixed_points(rf).points:
        val = rate_of_path(rf, Path.straight(p.location, 64)).value
        assert abs(val) < 1e-10


def test_poisson_line_cost():
    assert rate_of_path(R.constant(2.0), Path.straight(3.0, 16)).value == pytest.approx(0.21640, abs=1e-5)
    assert rate_of_path(R.constant(2.0), Path.straight(3.0, 16)).value == pytest.approx(3 * math.log(1.5) - 1, abs=1e-8)


def test_flat_path_costs_void_exponent():
    lam = 2.5
    assert rate_of_path(R.constant(lam), Path.straight(0.0, 8)).value == pytest.approx(lam, rel=1e-12)
    # per-unit-time void exponent for a constant rate is lam
    assert -math.log(math.exp(-lam * 40.0)) / 40.0 == pytest.approx(lam)


def test_infinite_marker():
    dead = R.piecewise_linear([(0, 0), (1, 0), (2, 2)], 1.0)  # lambda = 0 on [0, 1]
    val = rate_of_path(dead, Path.straight(0.5, 8))
    assert math.isinf(val.value) and val.infinite
    assert scalar_rate(dead, 0.5, 8).infinite
    # lambda vanishing at a single point is a null set
    val = rate_of_path(R.power(1.0, 0.5), Path([0.0, 0.5, 1.0], [0.0, 0.0, 1.0]))
    assert not val.infinite


def test_formal_label_for_unbounded_rates():
    assert rate_of_path(R.sqrt_shift(), Path.straight(1.0, 4)).formal
    assert not rate_of_path(R.constant(1.0), Path.straight(1.0, 4)).formal


@pytest.mark.parametrize("rf", RATES, ids=lambda r: r.kind)
def test_nonnegative_on_random_paths(rf):
    rng = np.random.default_rng(17)
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        grid = np.concatenate([[0.0], np.sort(rng.uniform(0, 1, n - 1)), [1.0]])
        grid = np.unique(grid)
        inc = rng.exponential(1.0, len(grid) - 1) * rng.uniform(0, 5)
        inc[rng.random(len(inc)) < 0.2] = 0.0
        values = np.concatenate([[0.0], np.cumsum(inc)])
        val = rate_of_path(rf, Path(grid, values)).value
        assert val >= -1e-9


# -- scalar rate ----------------------------------------------------------


def test_scalar_rate_zero_at_golden_ratio():
    r = scalar_rate(R.sqrt_shift(), GOLDEN, 64)
    assert r.value < 1e-6
    f = r.minimizer
    assert np.max(np.abs(f.values - GOLDEN * f.grid)) < 1e-4


@pytest.mark.parametrize("lam", [0.5, 2.0])
def test_poisson_reduction(lam):
    for x in (0.5, 1.0, lam, 2 * lam, 4 * lam):
        r = scalar_rate(R.constant(lam), x, 64)
        assert r.value == pytest.approx(poisson_rate(x, lam), abs=1e-4)
        assert r.converged


def test_scalar_rate_at_zero():
    assert scalar_rate(R.constant(2.0), 0.0, 16).value == pytest.approx(2.0, rel=1e-12)
    assert scalar_rate(R.sqrt_shift(), 0.0, 16).value == pytest.approx(1.0, rel=1e-12)


def test_scalar_rate_validation():
    with pytest.raises(ValueError):
        scalar_rate(R.sqrt_shift(), -1.0)
    with pytest.raises(ValueError):
        scalar_rate(R.sqrt_shift(), 1.0, 1)
    with pytest.raises(ValueError):
        scalar_rate(R.sqrt_shift(), 1.0, start=Path.straight(2.0, 8))


def test_uniform_grid_option():
    r = scalar_rate(R.constant(2.0), 3.0, 32, grading=1.0)
    assert np.allclose(np.diff(r.minimizer.grid), 1 / 64)
    assert r.value == pytest.approx(poisson_rate(3.0, 2.0), abs=1e-8)


# attained cases: below the golden ratio for SqrtShift, outside [x1, x3] for SineMix
CONVERGENT = [(R.sqrt_shift(), x) for x in (0.05, 0.5, 1.0, 1.5)] + [(R.sine_mix(), x) for x in (0.2, 0.5, 10.5)]


@pytest.mark.parametrize("rf,x", CONVERGENT, ids=lambda v: getattr(v, "kind", v))
def test_grid_convergence(rf, x):
    a = scalar_rate(rf, x, 64).value
    b = scalar_rate(rf, x, 128).value
    assert abs(a - b) <= 1e-4


@pytest.mark.xfail(strict=True, reason="infimum above the golden ratio is approached by paths with a jump at s=0; grid error decays like h^0.4")
def test_grid_convergence_above_golden_ratio():
    a = scalar_rate(R.sqrt_shift(), 4.0, 64).value
    b = scalar_rate(R.sqrt_shift(), 4.0, 128).value
    assert abs(a - b) <= 1e-4


@pytest.mark.parametrize("rf,x", [(R.sqrt_shift(), 0.8), (R.sqrt_shift(), 1.4), (R.sine_mix(), 0.3), (R.constant(2.0), 5.0)], ids=lambda v: getattr(v, "kind", v))
def test_random_restarts_agree(rf, x):
    base = scalar_rate(rf, x, 64)
    rng = np.random.default_rng(29)
    grid = base.minimizer.grid[::2]  # the graded 64-segment grid
    for _ in range(5):
        inc = rng.exponential(1.0, len(grid) - 1)
        values = np.concatenate([[0.0], x * np.cumsum(inc) / inc.sum()])
        values[-1] = x
        r = scalar_rate(rf, x, 64, start=Path(grid, values))
        assert r.value == pytest.approx(base.value, abs=1e-4)


def test_sine_mix_plateau_between_outer_fixed_points():
    # zero-cost paths leave the unstable point along the mean-field flow as s -> 0
    x1, x2, x3 = find_fixed_points(R.sine_mix()).locations
    for x in (0.5 * (x1 + x2), 0.5 * (x2 + x3)):
        coarse = scalar_rate(R.sine_mix(), x, 32).value
        fine = scalar_rate(R.sine_mix(), x, 128).value
        assert fine < coarse and fine < 1e-5


# -- Euler-Lagrange -------------------------------------------------------


def test_residual_zero_on_fixed_point_line():
    resid, skipped = euler_lagrange_residual(R.sqrt_shift(), Path.straight(GOLDEN, 64))
    assert resid < 1e-6 and skipped.size == 0


def test_residual_on_minimiser():
    # uniform grid: graded grids put micro-cells at s -> 0 where f' -> 0 and
    # log f' is singular, which dominates a max-over-nodes statistic
    for rf, x in ((R.sqrt_shift(), 1.0), (R.sqrt_shift(), 3.0), (R.constant(2.0), 5.0), (R.sine_mix(), 0.3)):
        resid, _ = euler_lagrange_residual(rf, scalar_rate(rf, x, 64, grading=1.0).minimizer)
        assert resid < 1e-3


def test_residual_detects_nonstationary_line():
    resid, _ = euler_lagrange_residual(R.sqrt_shift(), Path.straight(3.0, 64))
    assert resid > 1e-2


def test_residual_skips_flat_segments():
    f = Path([0.0, 0.25, 0.5, 0.75, 1.0], [0.0, 0.5, 0.5, 1.0, 1.5])
    _, skipped = euler_lagrange_residual(R.sqrt_shift(), f)
    assert list(skipped) == [1, 2]
