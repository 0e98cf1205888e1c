"""Compiled inner loops for event sampling.

Rates are evaluated from (code, packed params) so one kernel covers every
built-in family; see RateFunction.packed for the layout.
"""

import math

import numpy as np
from numba import njit

AFFINE, POWER, SQRT_SHIFT, SINE_MIX, PIECEWISE, CONSTANT = range(6)

NEWTON_TOL = 1e-12
NEWTON_MAX = 200


@njit(nogil=True, cache=True, inline="always")
def rate(code, p, x):
    if code == AFFINE:
        return p[1] + p[0] * x
    if code == POWER:
        z = x + p[2]
        e = p[1]
        if e == 2.0:
            return p[0] * z * z
        if e == 0.5:
            return p[0] * math.sqrt(z)
        if e == 1.0:
            return p[0] * z
        return p[0] * z**e
    if code == SQRT_SHIFT:
        return math.sqrt(1.0 + x)
    if code == SINE_MIX:
        return p[0] * x - math.sin(p[1] * x) + p[2]
    if code == PIECEWISE:
        return _piecewise(p, x)
    return p[0]


@njit(nogil=True, cache=True)
def _piecewise(p, x):
    n = int(p[0])
    xs = p[1 : 1 + n]
    ys = p[1 + n : 1 + 2 * n]
    if x >= xs[n - 1]:
        return ys[n - 1] + p[1 + 2 * n] * (x - xs[n - 1])
    i = np.searchsorted(xs, x, side="right") - 1
    w = (x - xs[i]) / (xs[i + 1] - xs[i])
    return ys[i] + w * (ys[i + 1] - ys[i])


@njit(nogil=True, cache=True, inline="always")
def invert_affine(alpha, beta, level, t_now, target):
    """Time t >= t_now with beta (t - t_now) + alpha level log((t+1)/(t_now+1)) = target.

    ``level`` is n + gamma. Returns inf when the intensity is identically 0.
    The compensator is concave and increasing in t, so Newton started at
    t_now climbs monotonically to the root without overshooting.
    """
    c = alpha * level
    u0 = t_now + 1.0
    if beta == 0.0:
        if c == 0.0:
            return math.inf
        return u0 * math.exp(target / c) - 1.0
    if c == 0.0:
        return t_now + target / beta
    u = u0
    for _ in range(NEWTON_MAX):
        g = beta * (u - u0) + c * math.log(u / u0) - target
        if abs(g) <= NEWTON_TOL * max(1.0, target):
            break
        step = -g / (beta + c / u)
        if step <= 0.0:
            break
        u += step
        if step <= 1e-16 * u:
            break
    return u - 1.0


@njit(nogil=True, cache=True, inline="always")
def next_jump_thinning(code, p, level, t_now, horizon, rng):
    """First accepted event after t_now, or inf if none up to horizon.

    Between jumps the argument level/(t+1) only decreases, so the intensity
    at the current proposal clock bounds all later intensities.
    """
    s = t_now
    bound = rate(code, p, level / (s + 1.0))
    while True:
        if bound <= 0.0:
            return math.inf
        s += rng.standard_exponential() / bound
        if s > horizon:
            return math.inf
        lam = rate(code, p, level / (s + 1.0))
        if rng.random() * bound <= lam:
            return s
        bound = lam


@njit(nogil=True, cache=True, inline="always")
def _next(code, p, alpha, beta, inversion, level, t, horizon, rng):
    if inversion:
        return invert_affine(alpha, beta, level, t, rng.standard_exponential())
    return next_jump_thinning(code, p, level, t, horizon, rng)


@njit(nogil=True, cache=True)
def path_times(code, p, alpha, beta, inversion, gamma, horizon, max_events, rng):
    """Jump times in (0, horizon]; returns (times, exploded)."""
    cap = 64
    times = np.empty(cap)
    n = 0
    t = 0.0
    while n < max_events:
        t = _next(code, p, alpha, beta, inversion, n + gamma, t, horizon, rng)
        if t > horizon:
            return times[:n].copy(), False
        if n == cap:
            cap *= 2
            grown = np.empty(cap)
            grown[:n] = times[:n]
            times = grown
        times[n] = t
        n += 1
    return times[:n].copy(), True


@njit(nogil=True, cache=True)
def path_counts(code, p, alpha, beta, inversion, gamma, horizon, max_events, checkpoints, rng, out):
    """Write N at each sorted checkpoint into ``out``.

    Returns (events, exploded, time of the last event). After an explosion
    the remaining checkpoints hold max_events.
    """
    n = 0
    t = 0.0
    j = 0
    m = checkpoints.shape[0]
    while n < max_events:
        t_next = _next(code, p, alpha, beta, inversion, n + gamma, t, horizon, rng)
        while j < m and checkpoints[j] < t_next:
            out[j] = n
            j += 1
        if t_next > horizon:
            return n, False, t
        t = t_next
        n += 1
    while j < m:
        out[j] = n
        j += 1
    return n, True, t
