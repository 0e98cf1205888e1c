import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sepp.rate_fn import (
    FP_TOL,
    RateFunction,
    RateFunctionError,
    classify_growth,
    derivative,
    evaluate,
    find_fixed_points,
    finite_difference,
)

R = RateFunction
GOLDEN = (1 + math.sqrt(5)) / 2

BUILTINS = [
    R.affine(0.5, 1.0),
    R.affine(0.0, 2.0),
    R.power(1.0, 0.5),
    R.power(2.0, 1.5, 0.3),
    R.power(1.0, 2.0, 1.0),
    R.sqrt_shift(),
    R.sine_mix(),
    R.piecewise_linear([(0, 1), (2, 2), (3, 3), (4, 3.5), (4.5, 4.5), (5, 5)], 0.25),
    R.constant(3.0),
]


def sine_mix_roots_mp():
    # independent high-precision roots of 0.9x - sin(0.6x) + 0.5 = x
    g = lambda x: 0.9 * x - mpmath.sin(0.6 * x) + 0.5 - x  # noqa: E731
    mpmath.mp.dps = 30
    return [float(mpmath.findroot(g, x0)) for x0 in (0.7, 5.3, 9.7)]


# -- evaluate / derivative ------------------------------------------------


def test_evaluate_examples():
    assert evaluate(R.sqrt_shift(), 0.0) == 1.0
    assert evaluate(R.sine_mix(0.9, 0.6, 0.5), 0.0) == 0.5
    assert evaluate(R.affine(0.5, 1.0), 4.0) == 3.0


def test_evaluate_rejects_negative_argument():
    with pytest.raises(ValueError):
        evaluate(R.sqrt_shift(), -0.1)
    with pytest.raises(ValueError):
        evaluate(R.affine(1, 1), np.array([1.0, -1.0]))


def test_evaluate_vectorised_matches_scalar():
    xs = np.linspace(0, 12, 97)
    for rf in BUILTINS:
        vec = evaluate(rf, xs)
        assert vec.shape == xs.shape
        assert np.allclose(vec, [evaluate(rf, float(x)) for x in xs], rtol=1e-15, atol=0)


def test_piecewise_interpolates_and_extends():
    rf = R.piecewise_linear([(0, 1), (2, 2), (3, 4)], 0.5)
    assert evaluate(rf, 1.0) == pytest.approx(1.5)
    assert evaluate(rf, 2.5) == pytest.approx(3.0)
    assert evaluate(rf, 5.0) == pytest.approx(5.0)
    # right derivative at a knot
    assert derivative(rf, 2.0) == pytest.approx(2.0)
    assert derivative(rf, 3.0) == pytest.approx(0.5)


def test_derivative_examples():
    assert derivative(R.affine(0.5, 1.0), 7.3) == 0.5
    assert derivative(R.sqrt_shift(), GOLDEN) == pytest.approx(1 / (2 * math.sqrt(1 + GOLDEN)), rel=1e-14)
    assert derivative(R.sqrt_shift(), GOLDEN) == pytest.approx(0.30902, abs=1e-5)
    assert derivative(R.sine_mix(), 0.0) == pytest.approx(0.3, abs=1e-15)


@pytest.mark.parametrize("rf", [r for r in BUILTINS if r.kind != "piecewise_linear"], ids=lambda r: r.kind)
def test_derivative_matches_central_difference(rf):
    rng = np.random.default_rng(11)
    for x in rng.uniform(0.01, 20.0, 100):
        fd = finite_difference(rf, x)
        d = derivative(rf, x)
        assert abs(d - fd) <= 1e-5 * max(1.0, abs(d))


@pytest.mark.parametrize("rf", [r for r in BUILTINS if r.monotone], ids=lambda r: r.describe())
def test_monotone_kinds_are_nondecreasing(rf):
    xs = np.sort(np.random.default_rng(3).uniform(0, 50, 1000))
    assert np.all(np.diff(evaluate(rf, xs)) >= -1e-12)


def test_nonmonotone_sine_mix_is_flagged():
    assert R.sine_mix(0.9, 0.6, 0.5).monotone
    assert not R.sine_mix(0.5, 2.0, 3.0).monotone


def test_negative_sine_mix_rejected():
    with pytest.raises(RateFunctionError):
        R.sine_mix(0.1, 2.0, 0.0)


# -- construction and config ----------------------------------------------


def test_constructor_reports_every_problem():
    with pytest.raises(RateFunctionError) as exc:
        R.affine(-1, -2)
    assert len(exc.value.problems) == 2
    with pytest.raises(RateFunctionError) as exc:
        R.piecewise_linear([(1, 1), (0.5, -1)], -1)
    assert len(exc.value.problems) == 4


def test_from_config_errors_name_fields():
    with pytest.raises(RateFunctionError) as exc:
        R.from_config({"kind": "affine", "alpha": -1})
    msgs = " ".join(exc.value.problems)
    assert "rate.beta" in msgs and "rate.alpha" in msgs
    with pytest.raises(RateFunctionError) as exc:
        R.from_config({"kind": "hawkes"})
    assert "rate.kind" in exc.value.problems[0]
    with pytest.raises(RateFunctionError):
        R.from_config({"kind": "power", "alpha": 1, "exponent": "two"})
    with pytest.raises(RateFunctionError):
        R.from_config({"kind": "constant", "level": 1, "colour": "red"})


@pytest.mark.parametrize("rf", BUILTINS, ids=lambda r: r.describe())
def test_config_round_trip(rf):
    assert R.from_config(rf.to_config()) == rf


@given(
    alpha=st.floats(0, 5, allow_nan=False),
    beta=st.floats(0, 5, allow_nan=False),
    x=st.floats(0, 1e3, allow_nan=False),
)
def test_affine_round_trip_and_value(alpha, beta, x):
    rf = R.from_config({"kind": "affine", "alpha": alpha, "beta": beta})
    assert R.from_config(rf.to_config()) == rf
    assert evaluate(rf, x) == pytest.approx(beta + alpha * x, rel=1e-15, abs=1e-300)


# -- growth classes -------------------------------------------------------


def test_classify_growth_examples():
    g = classify_growth(R.affine(0.5, 1.0))
    assert (g.regime, g.coefficient) == ("asymptotically_linear", 0.5)
    g = classify_growth(R.power(1.0, 2.0, 1.0))
    assert g.regime == "superlinear" and g.explosive
    g = classify_growth(R.constant(3))
    assert (g.regime, g.bound) == ("bounded", 3.0)
    g = classify_growth(R.power(1.0, 0.5))
    assert (g.regime, g.exponent) == ("sublinear", 0.5)
    assert classify_growth(R.sqrt_shift()).regime == "sublinear"
    assert classify_growth(R.sine_mix()).coefficient == pytest.approx(0.9)
    # exponent 1 is linear growth, not explosive
    assert not classify_growth(R.power(1.0, 1.0)).explosive


# -- fixed points ---------------------------------------------------------


def test_sqrt_shift_golden_ratio():
    rep = find_fixed_points(R.sqrt_shift(), 10)
    assert len(rep.points) == 1
    (p,) = rep.points
    assert p.location == pytest.approx(GOLDEN, abs=1e-12)
    assert p.cls == "stable"
    assert rep.complete


def test_sine_mix_three_points_against_mpmath():
    rep = find_fixed_points(R.sine_mix(0.9, 0.6, 0.5), 20)
    assert rep.classes() == ["stable", "unstable", "stable"]
    assert np.allclose(rep.locations, sine_mix_roots_mp(), atol=1e-11, rtol=0)


def test_affine_fixed_point():
    rep = find_fixed_points(R.affine(0.5, 1.0), 10)
    (p,) = rep.points
    assert p.location == pytest.approx(2.0, abs=1e-12)
    assert p.slope == 0.5 and p.cls == "stable"


@given(alpha=st.floats(0.0, 0.95), beta=st.floats(0.01, 10))
@settings(max_examples=50)
def test_affine_fixed_point_closed_form(alpha, beta):
    rep = find_fixed_points(R.affine(alpha, beta))
    assert rep.complete
    (p,) = rep.points
    assert p.location == pytest.approx(beta / (1 - alpha), rel=1e-10)


def test_identity_rate_is_an_interval():
    (p,) = find_fixed_points(R.affine(1.0, 0.0), 10).points
    assert p.cls == "interval" and (p.lo, p.hi) == (0.0, 10.0)


def test_piecewise_identity_segments_become_intervals():
    rf = R.piecewise_linear([(0, 1), (2, 2), (3, 3), (4, 3.5), (4.5, 4.5), (5, 5)], 0.25)
    rep = find_fixed_points(rf, 20)
    assert [(p.cls, p.lo, p.hi) for p in rep.points] == [("interval", 2.0, 3.0), ("interval", 4.5, 5.0)]


def test_piecewise_saddles():
    rf = R.piecewise_linear([(0, 1), (2, 2), (3, 4), (6, 5.5), (6.5, 6.5)], 0.5)
    rep = find_fixed_points(rf, 20)
    assert rep.locations == pytest.approx([2.0, 5.0, 6.5])
    assert rep.classes() == ["saddle_left_stable", "stable", "saddle_right_stable"]


def test_superlinear_search_is_incomplete():
    rep = find_fixed_points(R.power(1.0, 2.0, 1.0), 50)
    assert not rep.complete and rep.points == ()


def test_sublinear_origin_is_unstable():
    rep = find_fixed_points(R.power(1.0, 0.5), 10)
    assert rep.locations == pytest.approx([0.0, 1.0])
    assert rep.classes() == ["unstable", "stable"]


@pytest.mark.parametrize("rf", BUILTINS, ids=lambda r: r.describe())
def test_reported_points_solve_the_equation(rf):
    rep = find_fixed_points(rf)
    for p in rep.points:
        if p.cls == "interval":
            xs = np.linspace(p.lo, p.hi, 11)
            assert np.max(np.abs(evaluate(rf, xs) - xs)) <= 1e-10
        else:
            assert abs(evaluate(rf, p.location) - p.location) <= max(FP_TOL, 1e-10)
    assert rep.locations == sorted(rep.locations)


@given(
    a=st.floats(0.3, 0.95),
    b=st.floats(0.05, 0.3),
    c=st.floats(0.05, 3.0),
)
@settings(max_examples=40, deadline=None)
def test_strict_points_alternate_starting_stable(a, b, c):
    rf = R.sine_mix(a, b, c)
    rep = find_fixed_points(rf)
    classes = rep.classes()
    if rep.complete and classes and all(k in ("stable", "unstable") for k in classes):
        assert classes[0] == "stable"
        assert all(x != y for x, y in zip(classes, classes[1:]))
