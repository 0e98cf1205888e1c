"""Sample-path rate functional for N_{.T}/T and its scalar contraction.

The Lagrangian is the relative entropy of the path slope a = f'(s) against
the intensity b = lambda(f(s)/s):

    L(s, f, f') = a log(a / b) - a + b,

and I(f) is its integral over s in [0, 1]. Paths are piecewise linear on a
grid with f(0) = 0. On the first segment f(s)/s equals the segment slope
exactly, so the s -> 0 limit needs no special casing once quadrature nodes
stay off s = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .rate_fn import RateFunction, classify_growth, derivative, evaluate

GAUSS_NODES = 32
_GL_X, _GL_W = np.polynomial.legendre.leggauss(GAUSS_NODES)
_THETA = 0.5 * (_GL_X + 1.0)
_WEIGHT = 0.5 * _GL_W
_TINY = 1e-300


@dataclass(frozen=True)
class Path:
    """Piecewise-linear counting path on [0, 1] with f(0) = 0."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)
        if grid.shape != values.shape or grid.ndim != 1 or len(grid) < 2:
            raise ValueError("grid and values must be 1-d arrays of equal length >= 2")
        if grid[0] != 0.0 or grid[-1] != 1.0 or np.any(np.diff(grid) <= 0):
            raise ValueError("grid must increase strictly from 0 to 1")
        if values[0] != 0.0:
            raise ValueError("paths start at f(0) = 0")
        if np.any(np.diff(values) < 0):
            raise ValueError("counting paths are nondecreasing")

    @classmethod
    def straight(cls, x: float, n: int) -> "Path":
        grid = np.linspace(0.0, 1.0, n + 1)
        return cls(grid, x * grid)

    @classmethod
    def graded(cls, x: float, n: int, power: float) -> "Path":
        """Straight line on the grid (i/n)^power, packed towards s = 0."""
        grid = np.linspace(0.0, 1.0, n + 1) ** power
        return cls(grid, x * grid)

    @classmethod
    def from_function(cls, fn, n: int) -> "Path":
        grid = np.linspace(0.0, 1.0, n + 1)
        values = np.array([fn(s) for s in grid], dtype=float)
        values[0] = 0.0
        return cls(grid, values)

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.values) / np.diff(self.grid)

    @property
    def endpoint(self) -> float:
        return float(self.values[-1])

    def refine(self) -> "Path":
        """Split every segment in two; the path itself is unchanged."""
        mid_grid = 0.5 * (self.grid[:-1] + self.grid[1:])
        mid_vals = 0.5 * (self.values[:-1] + self.values[1:])
        grid = np.empty(2 * len(self.grid) - 1)
        values = np.empty_like(grid)
        grid[0::2], grid[1::2] = self.grid, mid_grid
        values[0::2], values[1::2] = self.values, mid_vals
        return Path(grid, values)


@dataclass
class RateValue:
    value: float
    integrand_samples: np.ndarray = field(repr=False, default=None)
    minimizer: Path | None = field(repr=False, default=None)
    converged: bool = True
    formal: bool = False
    n_grid: int | None = None

    @property
    def infinite(self) -> bool:
        return math.isinf(self.value)


def lagrangian(rf: RateFunction, alpha: float, f_val: float, f_slope: float) -> float:
    """Pointwise L(alpha, f, f'); uses 0 log 0 = 0 and returns inf when
    lambda(f/alpha) = 0 but f' > 0."""
    if not alpha > 0:
        raise ValueError("lagrangian needs alpha in (0, 1]")
    if f_val < 0 or f_slope < 0:
        raise ValueError("f and f' must be nonnegative")
    b = evaluate(rf, f_val / alpha)
    a = f_slope
    if a == 0:
        return b
    if b == 0:
        return math.inf
    return a * math.log(a / b) - a + b


def _segment_nodes(grid: np.ndarray, values: np.ndarray):
    h = np.diff(grid)
    slopes = np.diff(values) / h
    s = grid[:-1, None] + h[:, None] * _THETA[None, :]
    f = values[:-1, None] + slopes[:, None] * (s - grid[:-1, None])
    return h, slopes, s, f


def _functional(rf: RateFunction, grid: np.ndarray, values: np.ndarray, with_grad: bool):
    """Discrete I(v) and, optionally, dI/dv for node values v (all nodes)."""
    h, slopes, s, f = _segment_nodes(grid, values)
    y = np.maximum(f / s, 0.0)
    b = evaluate(rf, y)
    a = np.broadcast_to(slopes[:, None], b.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = np.log(a / b)
        term = np.where(a > 0, a * log_ratio, 0.0)
    if np.any((b <= 0) & (a > 0)):
        value = math.inf
    else:
        integrand = term - a + b
        value = float(np.sum(h[:, None] * _WEIGHT[None, :] * integrand))
    if not with_grad:
        return value, None
    bp = derivative(rf, y)
    # dL/da = log(a/b); dL/df = (1 - a/b) lambda'(f/s) / s
    dlda = np.log(np.maximum(a, _TINY) / np.maximum(b, _TINY))
    dldf = (1.0 - a / np.maximum(b, _TINY)) * bp / s
    hw = h[:, None] * _WEIGHT[None, :]
    grad = np.zeros_like(values)
    # f = v_i (1 - theta) + v_{i+1} theta ; a = (v_{i+1} - v_i) / h
    grad[:-1] += np.sum(hw * (dldf * (1.0 - _THETA) - dlda / h[:, None]), axis=1)
    grad[1:] += np.sum(hw * (dldf * _THETA + dlda / h[:, None]), axis=1)
    return value, grad


def rate_of_path(rf: RateFunction, f: Path) -> RateValue:
    """I(f) by 32-node Gauss-Legendre quadrature on every linear segment."""
    h, slopes, s, fv = _segment_nodes(f.grid, f.values)
    b = evaluate(rf, np.maximum(fv / s, 0.0))
    a = np.broadcast_to(slopes[:, None], b.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        integrand = np.where(a > 0, a * np.log(a / b), 0.0) - a + b
    integrand = np.where((b <= 0) & (a > 0), np.inf, integrand)
    samples = np.column_stack([s.ravel(), integrand.ravel()])
    if np.any(np.isinf(integrand)):
        value = math.inf
    else:
        value = float(np.sum(h[:, None] * _WEIGHT[None, :] * integrand))
    return RateValue(value, samples, formal=_is_formal(rf), n_grid=len(f.grid) - 1)


def _is_formal(rf: RateFunction) -> bool:
    # the large-deviation statement is only proved for bounded rates
    return classify_growth(rf).regime != "bounded"


def _softmax(w):
    z = np.exp(w - w.max())
    return z / z.sum()


def _minimize_on_grid(rf, x, grid, start_values, max_iters):
    """Minimise over increments d = x * softmax(w): monotone, nonnegative,
    pinned at both ends by construction.

    The curvature in w_k scales like the increment itself, so the search
    runs in v with w = w0 + v / sqrt(p0), which keeps tiny cells on graded
    grids from stalling.
    """
    inc0 = np.maximum(np.diff(start_values), 1e-12 * max(x, 1.0))
    p0 = inc0 / inc0.sum()
    w0 = np.log(p0)
    scale = 1.0 / np.sqrt(p0)

    def values_of(v):
        p = _softmax(w0 + scale * v)
        values = np.concatenate([[0.0], x * np.cumsum(p)])
        values[-1] = x
        return p, values

    def fun(v):
        p, values = values_of(v)
        val, grad_v = _functional(rf, grid, values, True)
        if not math.isfinite(val):
            return 1e300, np.zeros_like(v)
        # dv_j/dp_k = x [k < j] over nodes j = 1..n ; chain through softmax
        g_p = x * np.cumsum(grad_v[1:][::-1])[::-1]
        g_w = p * (g_p - np.dot(p, g_p))
        return val, scale * g_w

    res = minimize(
        fun, np.zeros_like(w0), jac=True, method="L-BFGS-B",
        options={"maxiter": max_iters, "ftol": 0, "gtol": 1e-12, "maxcor": 30},
    )
    _, values = values_of(res.x)
    value, _ = _functional(rf, grid, values, False)
    # "abnormal termination" after the objective stops improving is still a minimum
    converged = bool(res.success) or "ABNORMAL" in str(res.message).upper()
    return values, value, converged


def scalar_rate(
    rf: RateFunction,
    x: float,
    n_grid: int = 64,
    *,
    start: Path | None = None,
    max_iters: int = 500,
    refine: bool = True,
    grading: float = 3.0,
) -> RateValue:
    """I(x) = inf { I(f) : f(0) = 0, f(1) = x, f nondecreasing }.

    Quasi-Newton descent over the node values of an n_grid path on the grid
    (i/n)^grading, starting from the straight line s -> s x unless ``start``
    is given, then one polishing pass on the twice-refined grid. Minimisers
    steepen sharply as s -> 0 away from fixed points, which a uniform grid
    (grading = 1) resolves only at rate ~h^0.4.
    """
    if not x >= 0:
        raise ValueError("x must be >= 0")
    if n_grid < 2:
        raise ValueError("n_grid must be >= 2")
    if not grading >= 1:
        raise ValueError("grading must be >= 1")
    if x == 0:
        # the only admissible path is f = 0, costing lambda(0) on all of [0, 1]
        path = Path.straight(0.0, 2 * n_grid if refine else n_grid)
        out = rate_of_path(rf, path)
        out.minimizer = path
        return out
    path = start if start is not None else Path.graded(x, n_grid, grading)
    if abs(path.endpoint - x) > 1e-12 * max(1.0, x):
        raise ValueError("start path must end at x")
    values, _, converged = _minimize_on_grid(rf, x, path.grid, path.values, max_iters)
    path = Path(path.grid, values)
    if refine:
        fine = path.refine()
        values, _, conv2 = _minimize_on_grid(rf, x, fine.grid, fine.values, max_iters)
        path = Path(fine.grid, values)
        converged = converged and conv2
    out = rate_of_path(rf, path)
    out.value = max(out.value, 0.0) if out.value > -1e-9 else out.value
    out.minimizer = path
    out.converged = converged
    return out


def euler_lagrange_residual(rf: RateFunction, f: Path) -> tuple[float, np.ndarray]:
    """Max |discrete Euler-Lagrange residual| over interior nodes.

    The residual at node j is the derivative of the discretised functional
    with respect to f(s_j), divided by the node's dual cell width; this is the
    central-difference form of dL/df - d/ds dL/df'. Nodes touching a
    zero-slope segment are skipped and returned in the second element.
    """
    grid, values = f.grid, f.values
    slopes = f.slopes
    _, grad = _functional(rf, grid, values, True)
    cell = 0.5 * (grid[2:] - grid[:-2])
    resid = grad[1:-1] / cell
    flat = (slopes[:-1] <= 0) | (slopes[1:] <= 0)
    skipped = np.nonzero(flat)[0] + 1
    usable = resid[~flat]
    if usable.size == 0:
        return math.nan, skipped
    return float(np.max(np.abs(usable))), skipped
