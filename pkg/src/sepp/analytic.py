"""Exact quantities: moments, marginal laws, tails and the mean-field flow.

Moments for the affine rate lambda(z) = beta + alpha z (gamma = 0) are
written through

    E_L(d) = expm1(d L) / d,   L = log(t + 1),   E_L(0) = L,

which absorbs the removable singularities at alpha = 1/2 and alpha = 1:

    E[N_t]   = (t+1) beta E_L(alpha - 1)
    Var[N_t] = (t+1) beta [2 E_L(2 alpha - 1) - E_L(alpha - 1)]
    Cov[N_t, N_s] = ((t+1)/(s+1))^alpha Var[N_s],   t > s.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad, solve_ivp
from scipy.special import gammaln, logsumexp

from .rate_fn import RateFunction, classify_growth, evaluate

SEAM = 1e-9


def _expm1_ratio(d: float, L: float) -> float:
    """expm1(d L) / d with the d -> 0 limit L."""
    if abs(d) < SEAM:
        return L * (1.0 + 0.5 * d * L)
    return math.expm1(d * L) / d


def _check_affine(alpha, beta):
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be >= 0")


def mean_affine(alpha: float, beta: float, t: float) -> float:
    """E[N_t] for lambda(z) = beta + alpha z started from gamma = 0."""
    _check_affine(alpha, beta)
    return (t + 1.0) * beta * _expm1_ratio(alpha - 1.0, math.log1p(t))


def variance_affine(alpha: float, beta: float, t: float) -> float:
    _check_affine(alpha, beta)
    L = math.log1p(t)
    return (t + 1.0) * beta * (2.0 * _expm1_ratio(2.0 * alpha - 1.0, L) - _expm1_ratio(alpha - 1.0, L))


def covariance_affine(alpha: float, beta: float, t: float, s: float) -> float:
    """Cov[N_t, N_s] for t > s >= 0."""
    if not t > s >= 0:
        raise ValueError("covariance_affine needs t > s >= 0 (covariance is symmetric)")
    return ((t + 1.0) / (s + 1.0)) ** alpha * variance_affine(alpha, beta, s)


def variance_scaling(alpha: float, beta: float) -> tuple[str, float]:
    """Normaliser of Var[N_t] for large t and the limit of the ratio."""
    if abs(alpha - 1.0) < SEAM:
        return "t^2", 2.0 * beta
    if abs(alpha - 0.5) < SEAM:
        return "t log t", 2.0 * beta
    if alpha < 0.5:
        return "t", beta / ((1.0 - 2.0 * alpha) * (1.0 - alpha))
    return f"t^{2 * alpha:g}", 2.0 * beta / (2.0 * alpha - 1.0)


def variance_scale(alpha: float, t: float) -> float:
    """Value of the normaliser named by :func:`variance_scaling` at t."""
    if abs(alpha - 1.0) < SEAM:
        return t * t
    if abs(alpha - 0.5) < SEAM:
        return t * math.log(t)
    if alpha < 0.5:
        return t
    return t ** (2.0 * alpha)


@dataclass(frozen=True)
class MomentReport:
    t: float
    mean: float
    variance: float
    scaling_label: str
    scaling_limit: float
    scaled_variance: float


def moments_affine(alpha: float, beta: float, t: float) -> MomentReport:
    label, limit = variance_scaling(alpha, beta)
    var = variance_affine(alpha, beta, t)
    scale = variance_scale(alpha, t) if t > 1 else math.nan
    return MomentReport(t, mean_affine(alpha, beta, t), var, label, limit, var / scale)


# ---------------------------------------------------------------------------
# lambda(z) = alpha z with offset gamma: negative binomial law


def linear_gamma_stats(alpha: float, gamma: float, t: float) -> tuple[float, float]:
    """(E[N_t], Var[N_t]) for intensity alpha (N_{t-} + gamma) / (t + 1)."""
    if not (alpha > 0 and gamma > 0):
        raise ValueError("alpha and gamma must be > 0")
    g = (t + 1.0) ** alpha
    return gamma * (g - 1.0), gamma * (g * g - g)


def linear_gamma_covariance(alpha: float, gamma: float, t: float, s: float) -> float:
    """Cov[N_t, N_s], t > s, from the conditional negative-binomial law.

    E[N_t | N_s] = N_s R + gamma (R - 1) with R = ((t+1)/(s+1))^alpha, so
    Cov = R Var[N_s] = gamma (t+1)^alpha ((s+1)^alpha - 1).
    """
    if not t > s >= 0:
        raise ValueError("needs t > s >= 0")
    return gamma * (t + 1.0) ** alpha * ((s + 1.0) ** alpha - 1.0)


def linear_gamma_covariance_display(alpha: float, gamma: float, t: float, s: float) -> float:
    """The published closed form
    ((s+1)^a - 1) [gamma (t+1)^a + (gamma - gamma^2) ((t+1)^a/(s+1)^a - 1)].

    It agrees with :func:`linear_gamma_covariance` only for gamma = 1; kept
    for comparison.
    """
    if not t > s >= 0:
        raise ValueError("needs t > s >= 0")
    ta, sa = (t + 1.0) ** alpha, (s + 1.0) ** alpha
    return (sa - 1.0) * (gamma * ta + (gamma - gamma * gamma) * (ta / sa - 1.0))


def _negbin_logpmf(k, size, p_success):
    k = np.asarray(k, dtype=float)
    log_coef = gammaln(k + size) - gammaln(size) - gammaln(k + 1.0)
    with np.errstate(divide="ignore"):
        log_fail = np.log1p(-p_success) if p_success < 1 else -np.inf
        tail = np.where(k > 0, k * log_fail, 0.0)
    return log_coef + tail + size * math.log(p_success)


def negbin_pmf(alpha: float, gamma: float, t: float, k):
    """P(N_t = k) = C(k+gamma-1, k) (1 - q)^k q^gamma with q = (t+1)^-alpha.

    The binomial coefficient is Gamma(k+gamma) / (Gamma(gamma) k!), so
    non-integer gamma is allowed.
    """
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    if np.any(np.asarray(k) < 0):
        raise ValueError("k must be >= 0")
    q = (t + 1.0) ** (-alpha)
    out = np.exp(_negbin_logpmf(k, gamma, q))
    return float(out) if np.ndim(out) == 0 else out


def negbin_conditional_pmf(alpha: float, gamma: float, t: float, s: float, m: int, k):
    """P(N_t = k + m | N_s = m) for t > s: negative binomial with size
    gamma + m and success probability ((s+1)/(t+1))^alpha."""
    if not t > s >= 0:
        raise ValueError("needs t > s >= 0")
    if m < 0 or np.any(np.asarray(k) < 0):
        raise ValueError("m and k must be >= 0")
    q = ((s + 1.0) / (t + 1.0)) ** alpha
    out = np.exp(_negbin_logpmf(k, gamma + m, q))
    return float(out) if np.ndim(out) == 0 else out


def negbin_tail(alpha: float, gamma: float, t: float, ell: int, terms: int = 200_000) -> float:
    """P(N_t >= ell) by direct summation of the exact pmf (log-sum-exp)."""
    q = (t + 1.0) ** (-alpha)
    k = np.arange(ell, ell + terms, dtype=float)
    logp = _negbin_logpmf(k, gamma, q)
    top = logp.max()
    return math.exp(top) * float(np.sum(np.exp(logp - top)))


# ---------------------------------------------------------------------------
# general rates: forward-equation ladder


def void_probability(rf: RateFunction, gamma: float, t: float) -> float:
    """P(N_t = 0) = exp(-int_0^t lambda(gamma / (s+1)) ds)."""
    integral, _ = quad(lambda s: evaluate(rf, gamma / (s + 1.0)), 0.0, t, epsabs=1e-12, epsrel=1e-12, limit=200)
    return math.exp(-integral)


@dataclass
class PmfLadder:
    t: float
    gamma: float
    probs: np.ndarray
    truncation_mass: float
    absorbing: bool = False
    warning: str | None = None
    void_check: float | None = None
    log_probs: np.ndarray | None = field(default=None, repr=False)

    @property
    def k_max(self) -> int:
        return len(self.probs) - 1

    def tail(self, ell: int) -> float:
        """P(N_t >= ell) as a sum of nonnegative terms (no cancellation)."""
        return math.exp(self.log_tail(ell))

    def log_tail(self, ell: int) -> float:
        if self.log_probs is not None:
            if not self.absorbing:
                raise ValueError("log-space tails need an absorbing top level")
            return float(logsumexp(self.log_probs[ell:]))
        extra = 0.0 if self.absorbing else max(self.truncation_mass, 0.0)
        total = float(np.sum(self.probs[ell:])) + extra
        return math.log(total) if total > 0 else -math.inf


def pmf_ladder(
    rf: RateFunction,
    gamma: float,
    t: float,
    k_max: int,
    *,
    absorbing: bool = False,
    rtol: float = 1e-10,
    atol: float = 1e-14,
) -> PmfLadder:
    """p_k(t) = P(N_t = k) for k <= k_max from the forward equations

        dp_k/dt = lambda((gamma+k-1)/(t+1)) p_{k-1} - lambda((gamma+k)/(t+1)) p_k.

    With ``absorbing`` the top level collects all mass that reaches k_max,
    so probs[k_max] = P(N_t >= k_max). Accuracy is absolute (``atol``); use
    :func:`log_pmf_ladder` for probabilities far below 1e-14.
    """
    if k_max < 0:
        raise ValueError("k_max must be >= 0")
    levels = gamma + np.arange(k_max + 1, dtype=float)

    def rhs(s, p):
        lam = evaluate(rf, levels / (s + 1.0))
        out = -lam * p
        out[1:] += lam[:-1] * p[:-1]
        if absorbing:
            out[-1] = lam[-2] * p[-2] if k_max > 0 else 0.0
        return out

    p0 = np.zeros(k_max + 1)
    p0[0] = 1.0
    if t == 0:
        probs = p0
    else:
        sol = solve_ivp(rhs, (0.0, t), p0, method="DOP853", rtol=rtol, atol=atol)
        if not sol.success:
            raise RuntimeError(f"ladder integration failed: {sol.message}")
        probs = np.maximum(sol.y[:, -1], 0.0)
    trunc = 0.0 if absorbing else 1.0 - float(np.sum(probs))
    ladder = PmfLadder(t, gamma, probs, trunc, absorbing)
    if trunc > 0.01:
        ladder.warning = f"truncation mass {trunc:.3g} > 0.01; increase k_max"
        warnings.warn(ladder.warning, RuntimeWarning, stacklevel=2)
    ladder.void_check = void_probability(rf, gamma, t)
    return ladder


def log_pmf_ladder(rf: RateFunction, gamma: float, t: float, k_max: int, *, rtol: float = 1e-10) -> PmfLadder:
    """The absorbing ladder solved for y_k = log p_k, for deep tails.

    In tau = log t the equations read

        dy_k/dtau = t [lambda_{k-1} exp(y_{k-1} - y_k) - lambda_k]

    (no outflow at the absorbing top). The start at tiny t0 uses the
    leading-order short-time law p_k(t0) ~ prod_{j<k} lambda_j(0) t0^k / k!,
    whose relative error is O(t0 max_j lambda_j(0)) <= 1e-9.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    levels = gamma + np.arange(k_max + 1, dtype=float)
    rates0 = evaluate(rf, levels)
    if np.any(rates0[:-1] <= 0):
        # some level cannot be left at t = 0: fall back to the linear ladder
        lin = pmf_ladder(rf, gamma, t, k_max, absorbing=True)
        with np.errstate(divide="ignore"):
            lin.log_probs = np.log(lin.probs)
        return lin
    t0 = min(1e-9 / max(1.0, float(rates0.max())), 1e-3 * t)
    k = np.arange(k_max + 1, dtype=float)
    y0 = np.concatenate([[0.0], np.cumsum(np.log(rates0[:-1]))]) + k * math.log(t0) - gammaln(k + 1.0)
    y0[0] = -rates0[0] * t0

    def rhs(tau, y):
        s = math.exp(tau)
        lam = evaluate(rf, levels / (s + 1.0))
        out = np.empty_like(y)
        out[0] = -lam[0]
        out[1:] = lam[:-1] * np.exp(y[:-1] - y[1:]) - lam[1:]
        out[-1] = lam[-2] * math.exp(y[-2] - y[-1])
        return s * out

    sol = solve_ivp(rhs, (math.log(t0), math.log(t)), y0, method="LSODA", rtol=rtol, atol=1e-10)
    if not sol.success:
        raise RuntimeError(f"log-ladder integration failed: {sol.message}")
    logp = sol.y[:, -1]
    ladder = PmfLadder(t, gamma, np.exp(logp), 0.0, absorbing=True, log_probs=logp)
    ladder.void_check = void_probability(rf, gamma, t)
    return ladder


# ---------------------------------------------------------------------------
# tails


@dataclass(frozen=True)
class TailLaw:
    """Predicted normalised log-tail of P(N_t >= ell).

    kind 'exponential': (1/ell) log P -> coefficient.
    kind 'poisson_type': (1/(ell log ell)) log P -> coefficient.
    kind 'no_decay': P(N_t >= ell) stays bounded away from zero.
    """

    kind: str
    coefficient: float | None

    def normalise(self, ell, log_tail):
        ell = np.asarray(ell, dtype=float)
        if self.kind == "exponential":
            return log_tail / ell
        if self.kind == "poisson_type":
            return log_tail / (ell * np.log(ell))
        raise ValueError("no normalisation for a non-decaying tail")


def tail_asymptote(rf: RateFunction, t: float) -> TailLaw:
    growth = classify_growth(rf)
    if growth.regime == "asymptotically_linear":
        return TailLaw("exponential", math.log1p(-((t + 1.0) ** (-growth.coefficient))))
    if growth.regime == "sublinear":
        return TailLaw("poisson_type", -(1.0 - growth.exponent))
    if growth.regime == "bounded":
        return TailLaw("poisson_type", -1.0)
    return TailLaw("no_decay", None)


# ---------------------------------------------------------------------------
# deterministic mean-field flow


@dataclass(frozen=True)
class FlowCurve:
    t: np.ndarray
    y: np.ndarray

    def __call__(self, t):
        return np.interp(t, self.t, self.y)


def deterministic_flow(
    rf: RateFunction, y0: float, t_max: float, t_eval=None, *, rtol: float = 1e-10
) -> FlowCurve:
    """Solve dY/dt = (lambda(Y) - Y) / (t + 1), Y(0) = y0.

    Integrated in u = log(1 + t), where the system is autonomous:
    dY/du = lambda(Y) - Y.
    """
    if not y0 >= 0:
        raise ValueError("y0 must be >= 0")
    if t_eval is None:
        t_eval = np.concatenate([[0.0], np.geomspace(1e-3, t_max, 400)])
    t_eval = np.asarray(t_eval, dtype=float)
    u_eval = np.log1p(t_eval)
    sol = solve_ivp(
        lambda u, y: evaluate(rf, np.maximum(y, 0.0)) - y,
        (0.0, float(u_eval[-1])),
        [y0],
        method="DOP853",
        t_eval=u_eval,
        rtol=rtol,
        atol=1e-12,
    )
    if not sol.success:
        raise RuntimeError(f"flow integration failed: {sol.message}")
    return FlowCurve(t_eval, np.maximum(sol.y[0], 0.0))
