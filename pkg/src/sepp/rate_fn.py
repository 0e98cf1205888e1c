"""Rate functions lambda(.) and the fixed points of x = lambda(x).

A :class:`RateFunction` is an immutable description of one of a handful of
built-in families. Each carries a numeric code plus a packed parameter vector
so the compiled simulation kernels can evaluate it without Python callbacks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.optimize import brentq

# numeric codes shared with sepp._kernels
AFFINE, POWER, SQRT_SHIFT, SINE_MIX, PIECEWISE, CONSTANT = range(6)

KIND_CODES = {
    "affine": AFFINE,
    "power": POWER,
    "sqrt_shift": SQRT_SHIFT,
    "sine_mix": SINE_MIX,
    "piecewise_linear": PIECEWISE,
    "constant": CONSTANT,
}

FP_TOL = 1e-12
CLASS_MARGIN = 1e-6
PROBE_DELTA = 1e-4
IDENTITY_TOL = 1e-9


_FIELD_BOUNDS = {
    ("affine", "alpha"): (0.0, False),
    ("affine", "beta"): (0.0, False),
    ("power", "alpha"): (0.0, True),
    ("power", "exponent"): (0.0, True),
    ("power", "shift"): (0.0, False),
    ("sine_mix", "a"): (0.0, False),
    ("sine_mix", "c"): (0.0, False),
    ("piecewise_linear", "terminal_slope"): (0.0, False),
    ("constant", "level"): (0.0, False),
}


class RateFunctionError(ValueError):
    """Invalid rate-function parameters; ``problems`` lists every violation."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class RateFunction:
    """lambda: [0, inf) -> [0, inf) from one of the built-in families.

    Use the classmethod constructors (``affine``, ``power``, ...) or
    :meth:`from_config`; the raw constructor does no validation.
    """

    kind: str
    params: tuple
    monotone: bool = field(default=True, compare=False)

    # -- constructors -----------------------------------------------------
    @classmethod
    def affine(cls, alpha: float, beta: float) -> "RateFunction":
        """lambda(x) = beta + alpha * x."""
        problems = []
        if not alpha >= 0:
            problems.append(f"alpha: must be >= 0 (got {alpha})")
        if not beta >= 0:
            problems.append(f"beta: must be >= 0 (got {beta})")
        if problems:
            raise RateFunctionError(problems)
        return cls("affine", (float(alpha), float(beta)))

    @classmethod
    def power(cls, alpha: float, exponent: float, shift: float = 0.0) -> "RateFunction":
        """lambda(x) = alpha * (x + shift) ** exponent."""
        problems = []
        if not alpha > 0:
            problems.append(f"alpha: must be > 0 (got {alpha})")
        if not exponent > 0:
            problems.append(f"exponent: must be > 0 (got {exponent})")
        if not shift >= 0:
            problems.append(f"shift: must be >= 0 (got {shift})")
        if problems:
            raise RateFunctionError(problems)
        return cls("power", (float(alpha), float(exponent), float(shift)))

    @classmethod
    def sqrt_shift(cls) -> "RateFunction":
        """lambda(x) = sqrt(1 + x)."""
        return cls("sqrt_shift", ())

    @classmethod
    def sine_mix(cls, a: float = 0.9, b: float = 0.6, c: float = 0.5) -> "RateFunction":
        """lambda(x) = a*x - sin(b*x) + c."""
        problems = []
        if not a >= 0:
            problems.append(f"a: must be >= 0 (got {a})")
        if not c >= 0:
            problems.append(f"c: must be >= 0 (got {c})")
        if problems:
            raise RateFunctionError(problems)
        rf = cls("sine_mix", (float(a), float(b), float(c)))
        monotone = a >= abs(b)
        if not monotone:
            _check_nonnegative_on_grid(rf)
        return cls("sine_mix", rf.params, monotone)

    @classmethod
    def piecewise_linear(cls, knots, terminal_slope: float) -> "RateFunction":
        """Linear interpolation through ``knots`` = [(x0=0, y0), (x1, y1), ...],
        continued past the last knot with ``terminal_slope``."""
        problems = []
        try:
            arr = np.asarray(knots, dtype=float)
        except (TypeError, ValueError):
            raise RateFunctionError(["knots: must be a list of [x, y] pairs"])
        if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 1:
            raise RateFunctionError(["knots: must be a non-empty list of [x, y] pairs"])
        xs, ys = arr[:, 0], arr[:, 1]
        if xs[0] != 0.0:
            problems.append(f"knots: first abscissa must be 0 (got {xs[0]})")
        if np.any(np.diff(xs) <= 0):
            problems.append("knots: abscissae must be strictly increasing")
        if np.any(ys < 0):
            problems.append("knots: values must be >= 0")
        if not terminal_slope >= 0:
            problems.append(f"terminal_slope: must be >= 0 (got {terminal_slope})")
        if problems:
            raise RateFunctionError(problems)
        slopes = np.diff(ys) / np.diff(xs)
        monotone = bool(np.all(slopes >= 0))
        params = (tuple(map(float, xs)), tuple(map(float, ys)), float(terminal_slope))
        return cls("piecewise_linear", params, monotone)

    @classmethod
    def constant(cls, level: float) -> "RateFunction":
        if not level >= 0:
            raise RateFunctionError([f"level: must be >= 0 (got {level})"])
        return cls("constant", (float(level),))

    # -- config round trip ------------------------------------------------
    @classmethod
    def from_config(cls, cfg: dict[str, Any]) -> "RateFunction":
        """Build from the tagged JSON record used in config files."""
        if not isinstance(cfg, dict):
            raise RateFunctionError(["rate must be an object with a 'kind' field"])
        kind = cfg.get("kind")
        fields = {
            "affine": (("alpha", "beta"), ()),
            "power": (("alpha", "exponent"), ("shift",)),
            "sqrt_shift": ((), ()),
            "sine_mix": ((), ("a", "b", "c")),
            "piecewise_linear": (("knots", "terminal_slope"), ()),
            "constant": (("level",), ()),
        }
        if kind not in fields:
            raise RateFunctionError(
                [f"rate.kind: unknown kind {kind!r} (expected one of {sorted(fields)})"]
            )
        required, optional = fields[kind]
        problems = [f"rate.{name}: missing required field" for name in required if name not in cfg]
        unknown = set(cfg) - set(required) - set(optional) - {"kind"}
        problems += [f"rate.{name}: unknown field for kind {kind!r}" for name in sorted(unknown)]
        kwargs = {}
        for name in required + optional:
            if name not in cfg:
                continue
            value = cfg[name]
            if name != "knots" and (isinstance(value, bool) or not isinstance(value, (int, float))):
                problems.append(f"rate.{name}: must be a number (got {value!r})")
                continue
            kwargs[name] = value
        if problems:
            # still report bad values among the fields that were given
            for name, value in kwargs.items():
                lo, strict = _FIELD_BOUNDS.get((kind, name), (None, False))
                if lo is not None and (value <= lo if strict else value < lo):
                    problems.append(f"rate.{name}: must be {'>' if strict else '>='} {lo} (got {value!r})")
            raise RateFunctionError(problems)
        try:
            return getattr(cls, kind)(**kwargs)
        except RateFunctionError as err:
            raise RateFunctionError([f"rate.{p}" for p in err.problems]) from None

    def to_config(self) -> dict[str, Any]:
        p = self.params
        if self.kind == "affine":
            return {"kind": "affine", "alpha": p[0], "beta": p[1]}
        if self.kind == "power":
            return {"kind": "power", "alpha": p[0], "exponent": p[1], "shift": p[2]}
        if self.kind == "sqrt_shift":
            return {"kind": "sqrt_shift"}
        if self.kind == "sine_mix":
            return {"kind": "sine_mix", "a": p[0], "b": p[1], "c": p[2]}
        if self.kind == "piecewise_linear":
            return {
                "kind": "piecewise_linear",
                "knots": [[x, y] for x, y in zip(p[0], p[1])],
                "terminal_slope": p[2],
            }
        return {"kind": "constant", "level": p[0]}

    # -- compiled-kernel view ---------------------------------------------
    @property
    def code(self) -> int:
        return KIND_CODES[self.kind]

    @property
    def packed(self) -> np.ndarray:
        """Parameters as a flat float64 vector for the numba kernels.

        Piecewise layout: [n, x_0..x_{n-1}, y_0..y_{n-1}, terminal_slope].
        """
        if self.kind == "piecewise_linear":
            xs, ys, slope = self.params
            return np.array([len(xs), *xs, *ys, slope], dtype=np.float64)
        if self.kind == "sqrt_shift":
            return np.zeros(1)
        return np.array(self.params, dtype=np.float64)

    @property
    def is_affine(self) -> bool:
        """True when the compensator between jumps has a closed form."""
        return self.kind in ("affine", "constant")

    def affine_coefficients(self) -> tuple[float, float]:
        """(alpha, beta) for affine and constant kinds."""
        if self.kind == "affine":
            return self.params
        if self.kind == "constant":
            return 0.0, self.params[0]
        raise ValueError(f"{self.kind} rate is not affine")

    def __call__(self, x):
        return evaluate(self, x)

    def describe(self) -> str:
        cfg = self.to_config()
        body = ", ".join(f"{k}={v}" for k, v in cfg.items() if k != "kind")
        return f"{self.kind}({body})"


def _check_nonnegative_on_grid(rf: RateFunction) -> None:
    grid = np.linspace(0.0, 1000.0, 100_001)
    if np.min(_eval_array(rf, grid)) < 0:
        raise RateFunctionError([f"{rf.kind}: lambda(x) takes negative values on [0, 1000]"])


# ---------------------------------------------------------------------------
# evaluation


def _eval_array(rf: RateFunction, x: np.ndarray) -> np.ndarray:
    p = rf.params
    if rf.kind == "affine":
        return p[1] + p[0] * x
    if rf.kind == "power":
        return p[0] * (x + p[2]) ** p[1]
    if rf.kind == "sqrt_shift":
        return np.sqrt(1.0 + x)
    if rf.kind == "sine_mix":
        return p[0] * x - np.sin(p[1] * x) + p[2]
    if rf.kind == "piecewise_linear":
        xs, ys, slope = p
        out = np.interp(x, xs, ys)
        tail = x > xs[-1]
        return np.where(tail, ys[-1] + slope * (x - xs[-1]), out)
    return np.full_like(x, p[0], dtype=float)


def _deriv_array(rf: RateFunction, x: np.ndarray) -> np.ndarray:
    p = rf.params
    if rf.kind == "affine":
        return np.full_like(x, p[0], dtype=float)
    if rf.kind == "power":
        alpha, e, shift = p
        with np.errstate(divide="ignore"):
            return alpha * e * (x + shift) ** (e - 1.0)
    if rf.kind == "sqrt_shift":
        return 0.5 / np.sqrt(1.0 + x)
    if rf.kind == "sine_mix":
        return p[0] - p[1] * np.cos(p[1] * x)
    if rf.kind == "piecewise_linear":
        xs, ys, slope = p
        xs = np.asarray(xs)
        seg = np.diff(ys) / np.diff(xs) if len(xs) > 1 else np.empty(0)
        slopes = np.append(seg, slope)
        # right derivative: segment i covers [x_i, x_{i+1})
        idx = np.searchsorted(xs, x, side="right") - 1
        return slopes[np.clip(idx, 0, len(slopes) - 1)]
    return np.zeros_like(x, dtype=float)


def _domain(x):
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise ValueError("rate functions are defined on x >= 0")
    return arr


def evaluate(rf: RateFunction, x):
    """lambda(x); scalar in, float out; array in, array out."""
    arr = _domain(x)
    out = _eval_array(rf, arr)
    return float(out) if arr.ndim == 0 else out


def derivative(rf: RateFunction, x):
    """lambda'(x), the right derivative at piecewise-linear knots."""
    arr = _domain(x)
    out = _deriv_array(rf, arr)
    return float(out) if arr.ndim == 0 else out


def finite_difference(rf: RateFunction, x: float) -> float:
    """Central difference with step max(1e-6, 1e-8 x); used to cross-check derivative."""
    h = max(1e-6, 1e-8 * x)
    lo = max(x - h, 0.0)
    return (evaluate(rf, x + h) - evaluate(rf, lo)) / (x + h - lo)


# ---------------------------------------------------------------------------
# growth regimes


@dataclass(frozen=True)
class GrowthClass:
    """Large-z behaviour of lambda.

    ``regime`` is one of 'sublinear', 'asymptotically_linear', 'superlinear',
    'bounded'. ``exponent`` and ``coefficient`` describe lambda(z) ~
    coefficient * z**exponent; ``bound`` is sup lambda for bounded rates.
    """

    regime: str
    exponent: float | None = None
    coefficient: float | None = None
    bound: float | None = None
    explosive: bool = False


def classify_growth(rf: RateFunction) -> GrowthClass:
    p = rf.params
    if rf.kind == "affine":
        if p[0] == 0:
            return GrowthClass("bounded", exponent=0.0, coefficient=p[1], bound=p[1])
        return GrowthClass("asymptotically_linear", exponent=1.0, coefficient=p[0])
    if rf.kind == "power":
        alpha, e, _ = p
        if e < 1:
            return GrowthClass("sublinear", exponent=e, coefficient=alpha)
        if e == 1:
            return GrowthClass("asymptotically_linear", exponent=1.0, coefficient=alpha)
        # integral of dz / (alpha (z+shift)^e) converges for e > 1
        return GrowthClass("superlinear", exponent=e, coefficient=alpha, explosive=True)
    if rf.kind == "sqrt_shift":
        return GrowthClass("sublinear", exponent=0.5, coefficient=1.0)
    if rf.kind == "sine_mix":
        a, _, c = p
        if a == 0:
            return GrowthClass("bounded", exponent=0.0, coefficient=c, bound=c + 1.0)
        return GrowthClass("asymptotically_linear", exponent=1.0, coefficient=a)
    if rf.kind == "piecewise_linear":
        xs, ys, slope = p
        if slope == 0:
            return GrowthClass("bounded", exponent=0.0, coefficient=ys[-1], bound=max(ys))
        return GrowthClass("asymptotically_linear", exponent=1.0, coefficient=slope)
    return GrowthClass("bounded", exponent=0.0, coefficient=p[0], bound=p[0])


# ---------------------------------------------------------------------------
# fixed points


@dataclass(frozen=True)
class FixedPoint:
    """One solution of x = lambda(x), or an interval of them.

    ``cls`` is 'stable', 'unstable', 'saddle_left_stable',
    'saddle_right_stable' or 'interval'. For intervals ``location`` is the
    midpoint and ``lo``/``hi`` the end points.
    """

    location: float
    slope: float
    cls: str
    lo: float | None = None
    hi: float | None = None

    @property
    def is_stable(self) -> bool:
        return self.cls == "stable"


@dataclass(frozen=True)
class FixedPointReport:
    points: tuple[FixedPoint, ...]
    complete: bool
    search_hi: float

    @property
    def stable(self) -> list[FixedPoint]:
        return [p for p in self.points if p.cls == "stable"]

    @property
    def unstable(self) -> list[FixedPoint]:
        return [p for p in self.points if p.cls == "unstable"]

    @property
    def locations(self) -> list[float]:
        return [p.location for p in self.points]

    def classes(self) -> list[str]:
        return [p.cls for p in self.points]


def default_search_hi(rf: RateFunction) -> float:
    growth = classify_growth(rf)
    if growth.regime == "asymptotically_linear" and growth.coefficient < 1:
        return 10.0 * (evaluate(rf, 0.0) + 1.0) / (1.0 - growth.coefficient)
    if growth.regime == "bounded":
        return max(100.0, 2.0 * growth.bound)
    return 100.0


def _gap(rf: RateFunction, x):
    return evaluate(rf, x) - x


def _classify(rf: RateFunction, x: float, *, always_probe: bool = False) -> FixedPoint:
    slope = derivative(rf, x)
    if not always_probe:
        if slope < 1.0 - CLASS_MARGIN:
            return FixedPoint(x, slope, "stable")
        if slope > 1.0 + CLASS_MARGIN:
            return FixedPoint(x, slope, "unstable")
    right = _gap(rf, x + PROBE_DELTA)
    if x - PROBE_DELTA < 0:
        # nothing to the left of the origin: only the right side decides
        return FixedPoint(x, slope, "stable" if right < 0 else "unstable")
    left = _gap(rf, x - PROBE_DELTA)
    if left > 0 and right < 0:
        cls = "stable"
    elif left < 0 and right > 0:
        cls = "unstable"
    elif left > 0 and right > 0:
        cls = "saddle_left_stable"
    elif left < 0 and right < 0:
        cls = "saddle_right_stable"
    else:
        cls = "stable" if slope < 1 else "unstable"
    return FixedPoint(x, slope, cls)


def _scan_roots(rf: RateFunction, hi: float) -> list[float]:
    cells = 4096
    prev_count = None
    while True:
        grid = np.linspace(0.0, hi, cells + 1)
        g = _gap(rf, grid)
        sign = np.sign(g)
        brackets = np.nonzero(sign[:-1] * sign[1:] < 0)[0]
        exact = np.nonzero(sign == 0)[0]
        count = len(brackets) + len(exact)
        if count == prev_count or cells >= 2**20:
            break
        prev_count = count
        cells *= 2
    roots = [float(grid[i]) for i in exact]
    for i in brackets:
        roots.append(
            brentq(lambda x: _gap(rf, x), grid[i], grid[i + 1], xtol=FP_TOL, rtol=4 * np.finfo(float).eps)
        )
    return sorted(roots)


def _piecewise_fixed_points(rf: RateFunction, hi: float) -> list[FixedPoint]:
    xs, ys, slope = rf.params
    segments = [
        (xs[i], xs[i + 1], (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]), ys[i])
        for i in range(len(xs) - 1)
    ]
    segments.append((xs[-1], math.inf, slope, ys[-1]))
    found: list[FixedPoint] = []
    for a, b, m, ya in segments:
        if a > hi:
            break
        b = min(b, hi)
        # on [a, b]: lambda(x) - x = (ya - a) + (m - 1)(x - a)
        offset = ya - a
        if abs(m - 1.0) < IDENTITY_TOL and abs(offset) < IDENTITY_TOL:
            found.append(FixedPoint(0.5 * (a + b), 1.0, "interval", lo=a, hi=b))
            continue
        if abs(m - 1.0) < IDENTITY_TOL:
            continue
        root = a - offset / (m - 1.0)
        if a - IDENTITY_TOL <= root <= b + IDENTITY_TOL:
            found.append(_classify(rf, min(max(root, a), b), always_probe=True))
    # merge duplicates at shared knots and points swallowed by intervals
    merged: list[FixedPoint] = []
    for fp in sorted(found, key=lambda p: p.lo if p.cls == "interval" else p.location):
        if merged:
            last = merged[-1]
            if last.cls == "interval" and fp.cls == "interval" and abs(fp.lo - last.hi) < IDENTITY_TOL:
                merged[-1] = FixedPoint(0.5 * (last.lo + fp.hi), 1.0, "interval", lo=last.lo, hi=fp.hi)
                continue
            if last.cls == "interval" and fp.cls != "interval" and fp.location <= last.hi + IDENTITY_TOL:
                continue
            if fp.cls == "interval" and last.cls != "interval" and last.location >= fp.lo - IDENTITY_TOL:
                merged[-1] = fp
                continue
            if fp.cls != "interval" and last.cls != "interval" and abs(fp.location - last.location) < IDENTITY_TOL:
                continue
        merged.append(fp)
    return merged


def find_fixed_points(rf: RateFunction, search_hi: float | None = None) -> FixedPointReport:
    """All solutions of x = lambda(x) on [0, search_hi], sorted and classified.

    Smooth kinds are scanned on a grid (refined until the number of sign
    changes stabilises) and polished with a bracketing root finder.
    Piecewise-linear rates are solved exactly segment by segment, so
    tangential roots and whole intervals of fixed points are found as well.
    """
    hi = default_search_hi(rf) if search_hi is None else float(search_hi)
    if not hi > 0:
        raise ValueError("search_hi must be > 0")
    if rf.kind == "piecewise_linear":
        points = _piecewise_fixed_points(rf, hi)
    elif rf.kind == "affine" and rf.params[0] == 1.0:
        beta = rf.params[1]
        points = [FixedPoint(0.5 * hi, 1.0, "interval", lo=0.0, hi=hi)] if beta == 0 else []
    elif rf.is_affine:
        alpha, beta = rf.affine_coefficients()
        root = beta / (1.0 - alpha)
        points = [_classify(rf, root)] if 0 <= root <= hi else []
    else:
        points = [_classify(rf, r) for r in _scan_roots(rf, hi)]
    growth = classify_growth(rf)
    complete = not (evaluate(rf, hi) > hi and growth.regime not in ("sublinear", "bounded"))
    return FixedPointReport(tuple(points), complete, hi)
