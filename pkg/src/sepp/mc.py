"""Declarative Monte Carlo experiments for the limit theorems of the model.

An :class:`ExperimentSpec` fully determines its :class:`ExperimentReport`:
replication i of group g draws from the Philox stream keyed by
(master_seed, spawn_key=(g, i)), results are stored by index, and every
reduction runs over the index-ordered arrays. Worker count and completion
order therefore never reach the numbers.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import stats
from scipy.optimize import isotonic_regression

from . import _io, _kernels, analytic
from .rate_fn import RateFunction, RateFunctionError, classify_growth, find_fixed_points
from .sim import SimConfig, kernel_args, make_rng

KINDS = ("LLN", "CLT", "GammaLimit", "Basin", "L2Rate", "FluidLimit", "Tail", "Explosion", "SteadyScan")
_KIND_ALIASES = {k.lower(): k for k in KINDS}
_KIND_ALIASES.update(
    {
        "gamma_limit": "GammaLimit",
        "l2_rate": "L2Rate",
        "fluid_limit": "FluidLimit",
        "steady_scan": "SteadyScan",
    }
)
CSV_NAMES = {
    "LLN": "lln",
    "CLT": "clt",
    "GammaLimit": "gamma_limit",
    "Basin": "basin",
    "L2Rate": "l2_rate",
    "FluidLimit": "fluid_limit",
    "Tail": "tail",
    "Explosion": "explosion",
    "SteadyScan": "steady_scan",
}

# kind-specific parameters and their defaults
PARAM_DEFAULTS: dict[str, dict[str, Any]] = {
    "LLN": {"tol": 0.1},
    "CLT": {},
    "GammaLimit": {},
    "Basin": {"attribution_cap": 0.25, "unresolved_max": 0.1, "band_se": 2.0},
    "L2Rate": {"n_checkpoints": 13, "t_min": 10.0},
    "FluidLimit": {"mesh": 1001},
    "Tail": {"ells": [25, 50, 100, 200]},
    "Explosion": {"max_events": 10**6},
    "SteadyScan": {},
}
COMMON_PARAMS = {"max_events": 10**7, "method": "auto"}

SCHEMA_VERSION = 1
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


class ExperimentError(ValueError):
    """Invalid experiment; ``problems`` lists every violated constraint."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def canonical_kind(name) -> str | None:
    if not isinstance(name, str):
        return None
    return _KIND_ALIASES.get(name.strip().lower())


def resolve_workers(workers: int | None = None) -> int:
    if workers is None:
        env = os.environ.get("SEPP_THREADS")
        if env:
            try:
                workers = int(env)
            except ValueError:
                raise ValueError(f"SEPP_THREADS must be an integer (got {env!r})") from None
        else:
            workers = os.cpu_count() or 1
    return max(1, int(workers))


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating)) and not isinstance(x, bool)


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    rf: RateFunction
    gamma: float = 0.0
    horizons: tuple = (1.0,)
    replications: int = 1000
    master_seed: int = 0
    gammas: tuple | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "horizons", tuple(float(h) for h in np.atleast_1d(self.horizons)))
        if self.gammas is not None:
            object.__setattr__(self, "gammas", tuple(float(g) for g in np.atleast_1d(self.gammas)))
        kind = canonical_kind(self.kind)
        if kind is not None:
            object.__setattr__(self, "kind", kind)
        merged = dict(COMMON_PARAMS)
        merged.update(PARAM_DEFAULTS.get(kind, {}))
        merged.update(self.params or {})
        object.__setattr__(self, "params", merged)
        problems = self.problems()
        if problems:
            raise ExperimentError(problems)

    @property
    def horizon(self) -> float:
        return self.horizons[-1]

    @property
    def gamma_grid(self) -> tuple:
        return self.gammas if self.gammas is not None else (self.gamma,)

    def problems(self) -> list[str]:
        out = []
        if self.kind not in KINDS:
            return [f"experiment.kind: unknown kind {self.kind!r} (expected one of {list(KINDS)})"]
        if not (isinstance(self.replications, (int, np.integer)) and not isinstance(self.replications, bool)
                and self.replications >= 1):
            out.append(f"experiment.replications: must be an integer >= 1 (got {self.replications!r})")
        if not (isinstance(self.master_seed, (int, np.integer)) and 0 <= self.master_seed < 2**64):
            out.append(f"experiment.master_seed: must be a 64-bit unsigned integer (got {self.master_seed!r})")
        h = np.asarray(self.horizons)
        if h.size == 0 or not np.all(np.isfinite(h)) or np.any(h <= 0):
            out.append("experiment.horizons: must be positive and finite")
        elif np.any(np.diff(h) <= 0):
            out.append("experiment.horizons: must be strictly increasing")
        if not (_is_number(self.gamma) and self.gamma >= 0):
            out.append(f"experiment.gamma: must be >= 0 (got {self.gamma!r})")
        if self.gammas is not None:
            g = np.asarray(self.gammas)
            if g.size == 0 or np.any(g < 0) or not np.all(np.isfinite(g)):
                out.append("experiment.gammas: must be a non-empty list of finite values >= 0")
        if self.kind in ("Basin", "FluidLimit"):
            if self.gammas is None:
                out.append(f"experiment.gammas: required for kind {self.kind}")
            elif np.any(np.diff(self.gammas) <= 0):
                out.append("experiment.gammas: must be strictly increasing")
        allowed = set(COMMON_PARAMS) | set(PARAM_DEFAULTS[self.kind])
        for key in sorted(set(self.params) - allowed):
            out.append(f"experiment.params.{key}: unknown parameter for kind {self.kind}")
        me = self.params.get("max_events")
        if not (isinstance(me, (int, np.integer)) and not isinstance(me, bool) and me >= 1):
            out.append(f"experiment.params.max_events: must be an integer >= 1 (got {me!r})")
        if self.params.get("method") not in ("auto", "inversion", "thinning"):
            out.append(f"experiment.params.method: unknown sampler {self.params.get('method')!r}")
        out += [f"experiment.{p}" for p in _kind_problems(self)]
        return out

    # -- config round trip ------------------------------------------------
    @classmethod
    def from_config(cls, cfg: dict) -> "ExperimentSpec":
        if not isinstance(cfg, dict):
            raise ExperimentError(["experiment: must be an object"])
        problems = []
        known = {"kind", "rate", "gamma", "gammas", "horizons", "horizon", "replications", "master_seed", "params"}
        problems += [f"experiment.{k}: unknown field" for k in sorted(set(cfg) - known)]
        kind = canonical_kind(cfg.get("kind"))
        if "kind" not in cfg:
            problems.append("experiment.kind: missing required field")
        elif kind is None:
            problems.append(f"experiment.kind: unknown kind {cfg['kind']!r} (expected one of {list(KINDS)})")
        rf = None
        if "rate" not in cfg:
            problems.append("experiment.rate: missing required field")
        else:
            try:
                rf = RateFunction.from_config(cfg["rate"])
            except RateFunctionError as err:
                problems += [f"experiment.{p}" for p in err.problems]
        horizons = cfg.get("horizons", cfg.get("horizon", 1.0))
        if not (_is_number(horizons) or (isinstance(horizons, list) and all(_is_number(h) for h in horizons))):
            problems.append("experiment.horizons: must be a number or a list of numbers")
        for name in ("gamma", "replications", "master_seed"):
            if name in cfg and not _is_number(cfg[name]):
                problems.append(f"experiment.{name}: must be a number (got {cfg[name]!r})")
        gammas = cfg.get("gammas")
        if gammas is not None and not (isinstance(gammas, list) and all(_is_number(g) for g in gammas)):
            problems.append("experiment.gammas: must be a list of numbers")
        params = cfg.get("params", {})
        if not isinstance(params, dict):
            problems.append("experiment.params: must be an object")
        if problems:
            raise ExperimentError(problems)
        return cls(
            kind=kind,
            rf=rf,
            gamma=cfg.get("gamma", 0.0),
            horizons=horizons,
            replications=cfg.get("replications", 1000),
            master_seed=cfg.get("master_seed", 0),
            gammas=gammas,
            params=params,
        )

    def to_config(self) -> dict:
        cfg = {
            "kind": self.kind,
            "rate": self.rf.to_config(),
            "gamma": self.gamma,
            "horizons": list(self.horizons),
            "replications": int(self.replications),
            "master_seed": int(self.master_seed),
            "params": dict(self.params),
        }
        if self.gammas is not None:
            cfg["gammas"] = list(self.gammas)
        return cfg

    def spec_hash(self) -> str:
        return _io.sha256_text(_io.dumps(self.to_config()))


def _kind_problems(spec: ExperimentSpec) -> list[str]:
    """Theorem-scope checks for each kind."""
    rf, kind = spec.rf, spec.kind
    growth = classify_growth(rf)
    out = []
    if kind == "LLN":
        if growth.explosive:
            out.append("rate: explosive rate functions are rejected for LLN")
        elif not find_fixed_points(rf).complete:
            out.append("rate: fixed-point search is incomplete (N_t/t may grow without bound)")
    elif kind == "CLT":
        if not rf.is_affine:
            out.append("rate: CLT needs an affine rate")
        elif rf.affine_coefficients()[0] >= 0.5:
            out.append("rate.alpha: CLT needs alpha < 1/2")
    elif kind == "GammaLimit":
        if rf.kind != "affine" or rf.params[1] != 0 or rf.params[0] <= 0:
            out.append("rate: GammaLimit needs a linear rate (affine with beta = 0, alpha > 0)")
        if not spec.gamma > 0:
            out.append("gamma: GammaLimit needs gamma > 0 (gamma = 0 leaves all mass at 0)")
    elif kind == "Basin":
        if growth.explosive or len(find_fixed_points(rf).stable) < 2:
            out.append("rate: Basin needs at least two stable fixed points")
    elif kind in ("L2Rate", "SteadyScan"):
        if rf.kind != "affine":
            out.append(f"rate: {kind} needs an affine rate")
        elif kind == "L2Rate" and rf.params[0] >= 1:
            out.append("rate.alpha: L2Rate needs alpha < 1")
        elif kind == "SteadyScan" and rf.params[0] <= 0:
            out.append("rate.alpha: SteadyScan needs alpha > 0")
        if kind == "L2Rate":
            if spec.gamma != 0:
                out.append("gamma: L2Rate compares against the flow from 0 and needs gamma = 0")
            t_min = spec.params.get("t_min")
            if not (_is_number(t_min) and 0 < t_min < spec.horizon):
                out.append("params.t_min: must lie in (0, final horizon)")
            n_cp = spec.params.get("n_checkpoints")
            if not (isinstance(n_cp, int) and n_cp >= 3):
                out.append("params.n_checkpoints: must be an integer >= 3")
    elif kind in ("FluidLimit", "Tail"):
        if growth.regime not in ("asymptotically_linear", "sublinear") and not (
            kind == "Tail" and growth.regime == "bounded"
        ):
            out.append(f"rate: {kind} needs an asymptotically linear or sublinear rate (got {growth.regime})")
        if kind == "FluidLimit":
            mesh = spec.params.get("mesh")
            if not (isinstance(mesh, int) and mesh >= 2):
                out.append("params.mesh: must be an integer >= 2")
        if kind == "Tail":
            ells = spec.params.get("ells")
            if not (isinstance(ells, (list, tuple)) and ells and all(isinstance(e, int) and e >= 2 for e in ells)):
                out.append("params.ells: must be a non-empty list of integers >= 2")
    if kind == "LLN":
        tol = spec.params.get("tol")
        if not (_is_number(tol) and tol > 0):
            out.append("params.tol: must be > 0")
    if kind == "Basin":
        for key in ("attribution_cap", "unresolved_max", "band_se"):
            if not (_is_number(spec.params.get(key)) and spec.params[key] > 0):
                out.append(f"params.{key}: must be > 0")
    return out


@dataclass
class ExperimentReport:
    kind: str
    spec: ExperimentSpec
    summaries: list = field(default_factory=list)
    derived: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def flagged(self) -> bool:
        return bool(self.flags)

    @property
    def metadata(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "spec_hash": self.spec.spec_hash(),
            "master_seed": int(self.spec.master_seed),
            "stream_derivation": "Philox(SeedSequence(master_seed, spawn_key=(group, replication)))",
        }

    def payload(self) -> dict:
        """Numeric content; wall time is excluded so reruns compare byte for byte."""
        return {
            "kind": self.kind,
            "spec": self.spec.to_config(),
            "summaries": self.summaries,
            "derived": self.derived,
            "flags": self.flags,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return _io.dumps(self.payload())


# ---------------------------------------------------------------------------
# replication engine


@dataclass
class CountSample:
    """N at each checkpoint for every replication, in replication order."""

    checkpoints: np.ndarray
    counts: np.ndarray
    exploded: np.ndarray
    last_time: np.ndarray


def sample_counts(
    rf: RateFunction,
    gamma: float,
    checkpoints,
    replications: int,
    master_seed: int,
    group: int = 0,
    *,
    workers: int | None = None,
    max_events: int = 10**7,
    method: str = "auto",
) -> CountSample:
    """Simulate ``replications`` independent paths up to the last checkpoint."""
    cps = np.ascontiguousarray(checkpoints, dtype=float)
    cfg = SimConfig(rf, gamma=float(gamma), horizon=float(cps[-1]), max_events=int(max_events), method=method)
    args = kernel_args(cfg)
    counts = np.zeros((replications, len(cps)), dtype=np.int64)
    exploded = np.zeros(replications, dtype=bool)
    last = np.zeros(replications)

    def work(lo, hi):
        for i in range(lo, hi):
            rng = make_rng(master_seed, group, i)
            _, ex, t_last = _kernels.path_counts(
                *args, cfg.gamma, cfg.horizon, cfg.max_events, cps, rng, counts[i]
            )
            exploded[i] = ex
            last[i] = t_last

    n_workers = min(resolve_workers(workers), replications)
    if n_workers == 1:
        work(0, replications)
    else:
        n_chunks = min(replications, 8 * n_workers)
        bounds = np.linspace(0, replications, n_chunks + 1).astype(int)
        with ThreadPoolExecutor(n_workers) as pool:
            for fut in [pool.submit(work, lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]:
                fut.result()
    return CountSample(cps, counts, exploded, last)


def summarize(values) -> dict:
    x = np.asarray(values, dtype=float)
    n = len(x)
    mean = float(np.mean(x))
    out = {"n": n, "mean": mean}
    if n > 1:
        dev2 = (x - mean) ** 2
        var = float(np.sum(dev2) / (n - 1))
        out["variance"] = var
        out["se"] = math.sqrt(var / n)
        out["se_variance"] = float(np.std(dev2, ddof=1) / math.sqrt(n))
    else:
        out.update(variance=math.nan, se=math.nan, se_variance=math.nan)
    for q, v in zip(QUANTILES, np.quantile(x, QUANTILES)):
        out[f"q{int(round(100 * q)):02d}"] = float(v)
    return out


def covariance_with_se(x, y) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    prod = (x - x.mean()) * (y - y.mean())
    n = len(x)
    return float(np.sum(prod) / (n - 1)), float(np.std(prod, ddof=1) / math.sqrt(n))


SUMMARY_FIELDS = ("gamma", "t", "n", "mean", "variance", "se", "se_variance", "q05", "q25", "q50", "q75", "q95")


def _checkpoint_summaries(sample: CountSample, gamma: float) -> list[dict]:
    rows = []
    for j, t in enumerate(sample.checkpoints):
        row = {"gamma": gamma, "t": float(t)}
        row.update(summarize(sample.counts[:, j]))
        rows.append(row)
    return rows


def _summary_table(summaries) -> tuple:
    return SUMMARY_FIELDS, [[row[k] for k in SUMMARY_FIELDS] for row in summaries]


def _covariances(sample: CountSample) -> list[dict]:
    out = []
    c = sample.counts
    m = c.shape[1]
    if c.shape[0] < 2:
        return out
    for j in range(m - 1):
        cov, se = covariance_with_se(c[:, m - 1], c[:, j])
        out.append({"t": float(sample.checkpoints[-1]), "s": float(sample.checkpoints[j]), "cov": cov, "se": se})
    return out


def _sample(spec: ExperimentSpec, gamma: float, checkpoints, group: int, workers) -> CountSample:
    return sample_counts(
        spec.rf,
        gamma,
        checkpoints,
        spec.replications,
        spec.master_seed,
        group,
        workers=workers,
        max_events=spec.params["max_events"],
        method=spec.params["method"],
    )


def _exploded_flag(sample: CountSample) -> list[str]:
    k = int(sample.exploded.sum())
    return [f"{k} replications hit max_events before the horizon"] if k else []


# ---------------------------------------------------------------------------
# experiments


def run_lln(spec: ExperimentSpec, workers: int | None = None) -> ExperimentReport:
    """Where N_T/T lands relative to the fixed points of lambda."""
    fps = find_fixed_points(spec.rf)
    stable = np.array([p.location for p in fps.stable])
    tol = float(spec.params["tol"])
    sample = _sample(spec, spec.gamma, spec.horizons, 0, workers)
    rep = ExperimentReport(spec.kind, spec, _checkpoint_summaries(sample, spec.gamma))
    per_t = []
    plot = []
    for j, t in enumerate(sample.checkpoints):
        y = sample.counts[:, j] / t
        entry = {"t": float(t)}
        if stable.size:
            d = np.min(np.abs(y[:, None] - stable[None, :]), axis=1)
            entry["within_stable"] = float(np.mean(d < tol))
        else:
            entry["within_stable"] = 0.0
        near_any = np.zeros(len(y), dtype=bool)
        fractions = []
        for fp in fps.points:
            if fp.cls == "interval":
                hit = (y >= fp.lo - tol) & (y <= fp.hi + tol)
            else:
                hit = np.abs(y - fp.location) < tol
            near_any |= hit
            fractions.append({"location": fp.location, "class": fp.cls, "fraction": float(np.mean(hit))})
        entry["near_fixed_point"] = fractions
        entry["fixed_point_free"] = float(np.mean(~near_any))
        per_t.append(entry)
        lo, med, hi = np.quantile(y, [0.05, 0.5, 0.95])
        plot.append([float(t), float(med), float(lo), float(hi)])
    rep.derived = {
        "tol": tol,
        "fixed_points": [{"location": p.location, "class": p.cls} for p in fps.points],
        "checkpoints": per_t,
        "final_ratio": summarize(sample.counts[:, -1] / spec.horizon),
    }
    rep.tables["lln"] = _summary_table(rep.summaries)
    rep.tables["plot"] = (("x", "y", "y_lo", "y_hi"), plot)
    rep.flags = _exploded_flag(sample)
    return rep


def run_clt(spec: ExperimentSpec, workers: int | None = None) -> ExperimentReport:
    """(N_T - beta T/(1-alpha)) / sqrt(T) against N(0, beta/((1-2alpha)(1-alpha)))."""
    alpha, beta = spec.rf.affine_coefficients()
    T = spec.horizon
    sample = _sample(spec, spec.gamma, spec.horizons, 0, workers)
    n_T = sample.counts[:, -1].astype(float)
    z = (n_T - beta * T / (1.0 - alpha)) / math.sqrt(T)
    sigma2 = beta / ((1.0 - 2.0 * alpha) * (1.0 - alpha))
    ks = stats.kstest(z, stats.norm(0.0, math.sqrt(sigma2)).cdf)
    s = summarize(z)
    derived = {
        "statistic": s,
        "limit_variance": sigma2,
        "variance_rel_error": abs(s["variance"] / sigma2 - 1.0) if sigma2 > 0 else math.nan,
        "ks_distance": float(ks.statistic),
        "ks_pvalue": float(ks.pvalue),
    }
    if spec.gamma == 0 and spec.rf.kind in ("affine", "constant"):
        # centring at the exact finite-T mean removes the O(T^(alpha - 1/2)) drift
        exact = analytic.mean_affine(alpha, beta, T)
        z_exact = (n_T - exact) / math.sqrt(T)
        ks2 = stats.kstest(z_exact, stats.norm(0.0, math.sqrt(sigma2)).cdf)
        derived["exact_mean"] = exact
        derived["centring_bias"] = (exact - beta * T / (1.0 - alpha)) / math.sqrt(T)
        derived["ks_distance_exact_centring"] = float(ks2.statistic)
    rep = ExperimentReport(spec.kind, spec, _checkpoint_summaries(sample, spec.gamma), derived)
    rep.tables["clt"] = _summary_table(rep.summaries)
    rep.flags = _exploded_flag(sample)
    return rep


def total_variation(counts, pmf) -> float:
    """TV distance between the empirical law of integer ``counts`` and pmf(k)."""
    counts = np.asarray(counts, dtype=np.int64)
    k_hi = int(counts.max())
    emp = np.bincount(counts, minlength=k_hi + 1) / len(counts)
    p = np.asarray(pmf(np.arange(k_hi + 1)), dtype=float)
    return 0.5 * (float(np.sum(np.abs(emp - p))) + max(0.0, 1.0 - float(np.sum(p))))


def run_gamma_limit(spec: ExperimentSpec, workers: int | None = None) -> ExperimentReport:
    """N_T / T^alpha against Gamma(gamma, 1); exact negative binomial law at T."""
    alpha = spec.rf.params[0]
    gamma, T = spec.gamma, spec.horizon
    sample = _sample(spec, gamma, spec.horizons, 0, workers)
    n_T = sample.counts[:, -1]
    x = n_T / T**alpha
    ks = stats.kstest(x, stats.gamma(gamma).cdf)
    s = summarize(x)
    mean_exact, var_exact = analytic.linear_gamma_stats(alpha, gamma, T)
    derived = {
        "statistic": s,
        "ks_distance": float(ks.statistic),
        "ks_pvalue": float(ks.pvalue),
        "limit_mean": gamma,
        "limit_variance": gamma,
        "mean_z": (s["mean"] - gamma) / s["se"] if s["se"] > 0 else math.nan,
        "variance_rel_error": abs(s["variance"] / gamma - 1.0),
        "tv_exact_law": total_variation(n_T, lambda k: analytic.negbin_pmf(alpha, gamma, T, k)),
        "exact_mean": mean_exact,
        "exact_variance": var_exact,
    }
    rep = ExperimentReport(spec.kind, spec, _checkpoint_summaries(sample, gamma), derived)
    rep.tables["gamma_limit"] = _summary_table(rep.summaries)
    return rep


def attribution_tolerances(locations, cap: float) -> list[float]:
    """Half the distance to the nearest other fixed point, capped."""
    locs = sorted(locations)
    out = []
    for i, x in enumerate(locs):
        gaps = [abs(x - y) for j, y in enumerate(locs) if j != i]
        out.append(min([cap] + [0.5 * g for g in gaps]))
    return out


def monotone_violation(p, se) -> tuple[float, np.ndarray]:
    """Largest standardised residual of p against its decreasing isotonic fit."""
    p = np.asarray(p, dtype=float)
    se = np.asarray(se, dtype=float)
    fit = -isotonic_regression(-p, weights=1.0 / np.maximum(se, 1e-12) ** 2).x
    return float(np.max(np.abs(p - fit) / se)), fit


def run_basin(spec: ExperimentSpec, workers: int | None = None) -> ExperimentReport:
    """Finite-horizon basin frequencies across the gamma grid."""
    fps = find_fixed_points(spec.rf)
    locs = [p.location for p in fps.points if p.cls != "interval"]
    tols = dict(zip(sorted(locs), attribution_tolerances(locs, float(spec.params["attribution_cap"]))))
    stable = sorted(p.location for p in fps.stable)
    stable_tol = np.array([tols[x] for x in stable])
    n = spec.replications
    rows, summaries = [], []
    hit_counts = np.zeros((len(spec.gamma_grid), len(stable)), dtype=np.int64)
    unresolved_counts = np.zeros(len(spec.gamma_grid), dtype=np.int64)
    for g_idx, gamma in enumerate(spec.gamma_grid):
        sample = _sample(spec, gamma, spec.horizons, g_idx, workers)
        summaries += _checkpoint_summaries(sample, gamma)
        y = sample.counts[:, -1] / spec.horizon
        dist = np.abs(y[:, None] - np.array(stable)[None, :])
        nearest = np.argmin(dist, axis=1)
        ok = dist[np.arange(n), nearest] < stable_tol[nearest]
        ok &= ~sample.exploded
        hit_counts[g_idx] = np.bincount(nearest[ok], minlength=len(stable))
        unresolved_counts[g_idx] = n - hit_counts[g_idx].sum()
    p_hat = hit_counts / n
    unresolved = unresolved_counts / n
    se = np.sqrt(p_hat * (1 - p_hat) / n)
    # a zero or one frequency still carries binomial uncertainty of order 1/n
    se_floor = np.sqrt(np.maximum(p_hat * (1 - p_hat), 1.0 / n) / n)
    band = float(spec.params["band_se"])
    viol, fit = monotone_violation(p_hat[:, 0], se_floor[:, 0])
    for g_idx, gamma in enumerate(spec.gamma_grid):
        rows.append(
            {
                "gamma": gamma,
                "p": [float(v) for v in p_hat[g_idx]],
                "se": [float(v) for v in se[g_idx]],
                "unresolved": float(unresolved[g_idx]),
                "counts": [int(c) for c in hit_counts[g_idx]],
                "unresolved_count": int(unresolved_counts[g_idx]),
                # the identity holds in counts; summing the rounded frequencies can miss 1 by an ulp
                "bookkeeping": (int(hit_counts[g_idx].sum()) + int(unresolved_counts[g_idx])) / n,
            }
        )
    rep = ExperimentReport(spec.kind, spec, summaries)
    rep.derived = {
        "stable_points": stable,
        "attribution_tol": [float(v) for v in stable_tol],
        "basins": rows,
        "monotone_violation": viol,
        "monotone_within_band": viol <= band,
        "isotonic_fit": fit,
        "max_unresolved": float(unresolved.max()),
    }
    if unresolved.max() > spec.params["unresolved_max"]:
        rep.flags.append(
            f"unresolved fraction {unresolved.max():.3g} exceeds {spec.params['unresolved_max']}: horizon too short"
        )
    header = ["gamma", "unresolved"] + [f"p{i + 1}" for i in range(len(stable))] + [
        f"se{i + 1}" for i in range(len(stable))
    ]
    rep.tables["basin"] = (
        header,
        [[r["gamma"], r["unresolved"], *r["p"], *r["se"]] for r in rows],
    )
    rep.tables["plot"] = (
        ("x", "y", "y_lo", "y_hi"),
        [[g, p_hat[i, 0], p_hat[i, 0] - band * se[i, 0], p_hat[i, 0] + band * se[i, 0]]
         for i, g in enumerate(spec.gamma_grid)],
    )
    return rep


def fit_slope(t, m) -> float:
    slope, _ = np.polyfit(np.log(t), np.log(m), 1)
    return float(slope)


def run_l2_rate(spec: ExperimentSpec, workers: int | None = None) -> ExperimentReport:
    """Decay of E[(Y_t - Ybar_t)^2] with Y_t = N_t/(t+1) and Ybar the mean-field flow."""
    alpha, _ = spec.rf.affine_coefficients()
    T = spec.horizon
    cps = np.geomspace(float(spec.params["t_min"]), T, int(spec.params["n_checkpoints"]))
    cps = np.unique(np.concatenate([cps, spec.horizons]))
    flow = analytic.deterministic_flow(spec.rf, 0.0, T, t_eval=np.concatenate([[0.0], cps]))
    ybar = flow.y[1:]
    sample = _sample(spec, 0.0, cps, 0, workers)
    y = sample.counts / (cps + 1.0)
    sq = (y - ybar[None, :]) ** 2
    m_hat = sq.mean(axis=0)
    m_se = sq.std(axis=0, ddof=1) / math.sqrt(sq.shape[0]) if sq.shape[0] > 1 else np.full(len(cps), math.nan)
    upper = cps >= T / 10.0
    derived = {
        "checkpoints": cps,
        "m_hat": m_hat,
        "m_se": m_se,
        "flow": ybar,
        "fit_window": [float(cps[upper][0]), float(T)],
    }
    if abs(alpha - 0.5) < analytic.SEAM:
        c = m_hat * cps / np.log(cps)
        ratio = c[upper] / c[-1]
        derived.update(model="log(t)/t", constant=float(c[-1]), constant_ratio=ratio,
                       ratio_range=[float(ratio.min()), float(ratio.max())])
    else:
        predicted = -1.0 if alpha < 0.5 else -2.0 * (1.0 - alpha)
        slope = fit_slope(cps[upper], m_hat[upper])
        derived.update(model="power", slope=slope, predicted_slope=predicted,
                       slope_error=abs(slope - predicted))
    rep = ExperimentReport(spec.kind, spec, _checkpoint_summaries(sample, 0.0), derived)
    rep.tables["l2_rate"] = (
        ("t", "m_hat", "m_se", "flow"),
        [[t, m, s, f] for t, m, s, f in zip(cps, m_hat, m_se, ybar)],
    )
    rep.flags = _exploded_flag(sample)
    return rep


def fluid_curve(rf: RateFunction, s):
    """Deterministic limit of N_s / gamma (linear growth) or N_s / gamma^beta (sublinear)."""
    g = classify_growth(rf)
    s = np.asarray(s, dtype=float)
    if g.regime == "asymptotically_linear":
        return (s + 1.0) ** g.coefficient - 1.0, 1.0
    if g.regime == "sublinear":
        b = g.exponent
        return g.coefficient / (1.0 - b) * ((s + 1.0) ** (1.0 - b) - 1.0), b
    raise ValueError(f"no fluid limit for regime {g.regime}")


def run_fluid_limit(spec: ExperimentSpec, workers: int | None = None) -> ExperimentReport:
    """Median sup-norm distance between the rescaled path and its fluid curve."""
    mesh = np.linspace(0.0, spec.horizon, int(spec.params["mesh"]))
    curve, power = fluid_curve(spec.rf, mesh)
    rows, summaries = [], []
    for g_idx, gamma in enumerate(spec.gamma_grid):
        sample = _sample(spec, gamma, mesh, g_idx, workers)
        scale = gamma**power
        dev = np.max(np.abs(sample.counts / scale - curve[None, :]), axis=1)
        summaries += _checkpoint_summaries(
            CountSample(mesh[-1:], sample.counts[:, -1:], sample.exploded, sample.last_time), gamma
        )
        rows.append({"gamma": gamma, "scale": scale, "sup_deviation": summarize(dev)})
    medians = [r["sup_deviation"]["q50"] for r in rows]
    rep = ExperimentReport(spec.kind, spec, summaries)
    rep.derived = {
        "scaling_exponent": power,
        "rows": rows,
        "medians": medians,
        "medians_decreasing": bool(np.all(np.diff(medians) < 0)),
        "curve_at_zero": float(curve[0]),
    }
    rep.tables["fluid_limit"] = (
        ("gamma", "median", "q05", "q95"),
        [[r["gamma"], r["sup_deviation"]["q50"], r["sup_deviation"]["q05"], r["sup_deviation"]["q95"]] for r in rows],
    )
    rep.tables["plot"] = (
        ("x", "y", "y_lo", "y_hi"),
        [[r["gamma"], r["sup_deviation"]["q50"], r["sup_deviation"]["q25"], r["sup_deviation"]["q75"]] for r in rows],
    )
    return rep


def run_tail(spec: ExperimentSpec, workers: int | None = None) -> ExperimentReport:
    """Normalised log-tails from the log-space forward-equation ladder."""
    t = spec.horizon
    ells = sorted(int(e) for e in spec.params["ells"])
    law = analytic.tail_asymptote(spec.rf, t)
    ladder = analytic.log_pmf_ladder(spec.rf, spec.gamma, t, max(ells))
    rows = []
    for ell in ells:
        lt = ladder.log_tail(ell)
        norm = float(law.normalise(ell, lt))
        rows.append(
            {
                "ell": ell,
                "log_tail": lt,
                "normalised": norm,
                "rel_error": abs(norm / law.coefficient - 1.0),
            }
        )
    rep = ExperimentReport(spec.kind, spec, [])
    errs = [r["rel_error"] for r in rows]
    rep.derived = {
        "law": law.kind,
        "predicted": law.coefficient,
        "rows": rows,
        "void_check": ladder.void_check,
        "ladder_p0": float(ladder.probs[0]),
        "error_decreasing": bool(np.all(np.diff(errs) < 0)),
    }
    rep.tables["tail"] = (
        ("ell", "log_tail", "normalised", "predicted", "rel_error"),
        [[r["ell"], r["log_tail"], r["normalised"], law.coefficient, r["rel_error"]] for r in rows],
    )
    return rep


def run_explosion(spec: ExperimentSpec, workers: int | None = None) -> ExperimentReport:
    """Fraction of runs reaching max_events before the horizon."""
    sample = _sample(spec, spec.gamma, spec.horizons[-1:], 0, workers)
    n = spec.replications
    k = int(sample.exploded.sum())
    ci = stats.binomtest(k, n).proportion_ci(0.99, method="exact")
    void = analytic.void_probability(spec.rf, spec.gamma, spec.horizon)
    frac = k / n
    se = math.sqrt(frac * (1 - frac) / n)
    times = sample.last_time[sample.exploded]
    rep = ExperimentReport(spec.kind, spec, [])
    rep.derived = {
        "exploded": k,
        "fraction": frac,
        "se": se,
        "ci99": [float(ci.low), float(ci.high)],
        "ci_inside_open_unit": bool(ci.low > 0 and ci.high < 1),
        "void_probability": void,
        "non_exploded": 1 - frac,
        # 3 SE collapses to 0 at fraction 0 or 1; the exact upper bound does not
        "void_bound_ok": bool(max(1 - frac + 3 * se, 1 - ci.low) >= void),
        "explosion_time": summarize(times) if k else None,
    }
    rep.tables["explosion"] = (
        ("replications", "exploded", "fraction", "ci_lo", "ci_hi", "void_probability"),
        [[n, k, frac, ci.low, ci.high, void]],
    )
    return rep


def steady_normaliser(alpha: float, beta: float, T: float) -> tuple[str, float, float]:
    """(label, s(T), predicted limit of N_T / s(T)) by regime."""
    if abs(alpha - 1.0) < analytic.SEAM:
        return "T log T", T * math.log(T), beta
    if alpha < 1:
        return "T", T, beta / (1.0 - alpha)
    return "T^alpha", T**alpha, beta / (alpha - 1.0)


def run_steady_scan(spec: ExperimentSpec, workers: int | None = None) -> ExperimentReport:
    alpha, beta = spec.rf.affine_coefficients()
    T = spec.horizon
    sample = _sample(spec, spec.gamma, spec.horizons, 0, workers)
    label, s_T, predicted = steady_normaliser(alpha, beta, T)
    x = sample.counts[:, -1] / s_T
    s = summarize(x)
    derived = {
        "normaliser": label,
        "statistic": s,
        "predicted": predicted,
        "rel_error": abs(s["mean"] / predicted - 1.0),
        "z": (s["mean"] - predicted) / s["se"] if s["se"] > 0 else math.nan,
        "covariances": _covariances(sample),
    }
    if spec.gamma == 0:
        derived["exact_mean_ratio"] = analytic.mean_affine(alpha, beta, T) / s_T
    rep = ExperimentReport(spec.kind, spec, _checkpoint_summaries(sample, spec.gamma), derived)
    rep.tables["steady_scan"] = _summary_table(rep.summaries)
    rep.flags = _exploded_flag(sample)
    return rep


RUNNERS = {
    "LLN": run_lln,
    "CLT": run_clt,
    "GammaLimit": run_gamma_limit,
    "Basin": run_basin,
    "L2Rate": run_l2_rate,
    "FluidLimit": run_fluid_limit,
    "Tail": run_tail,
    "Explosion": run_explosion,
    "SteadyScan": run_steady_scan,
}


def run_experiment(spec: ExperimentSpec, workers: int | None = None) -> ExperimentReport:
    start = time.perf_counter()
    rep = RUNNERS[spec.kind](spec, workers)
    rep.wall_time = time.perf_counter() - start
    return rep


def report_files(rep: ExperimentReport) -> dict[str, str]:
    """File name -> text for report.json and its CSV extracts."""
    files = {"report.json": rep.to_json()}
    for name, (header, rows) in rep.tables.items():
        files[f"{name}.csv"] = _io.csv_text(header, rows)
    return files
