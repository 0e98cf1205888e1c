"""Exact sampling of N_t with intensity lambda((N_{t-} + gamma) / (t + 1))."""

from __future__ import annotations

import bisect
import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .rate_fn import RateFunction

DEFAULT_MAX_EVENTS = 10**7
METHODS = ("auto", "inversion", "thinning")


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Philox stream for ``seed``; a non-empty ``key`` selects an independent
    sub-stream.

    Sub-streams use ``key`` as the SeedSequence spawn key, so replication i
    gets the same stream whichever worker runs it.
    """
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class SimConfig:
    rf: RateFunction
    gamma: float = 0.0
    horizon: float = 1.0
    max_events: int = DEFAULT_MAX_EVENTS
    seed: int = 0
    method: str = "auto"

    def __post_init__(self):
        problems = []
        if not self.gamma >= 0:
            problems.append(f"gamma must be >= 0 (got {self.gamma})")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            problems.append(f"horizon must be positive and finite (got {self.horizon})")
        if not (isinstance(self.max_events, (int, np.integer)) and self.max_events >= 1):
            problems.append(f"max_events must be an integer >= 1 (got {self.max_events})")
        if not (isinstance(self.seed, (int, np.integer)) and 0 <= self.seed < 2**64):
            problems.append(f"seed must be a 64-bit unsigned integer (got {self.seed})")
        if self.method not in METHODS:
            problems.append(f"method must be one of {METHODS} (got {self.method!r})")
        elif self.method == "inversion" and not self.rf.is_affine:
            problems.append("inversion needs an affine or constant rate")
        elif self.method != "inversion" and not self.rf.is_affine and not self.rf.monotone:
            problems.append("thinning needs a nondecreasing rate function")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def use_inversion(self) -> bool:
        if self.method == "auto":
            return self.rf.is_affine
        return self.method == "inversion"


@dataclass(frozen=True)
class Trajectory:
    gamma: float
    horizon: float
    jump_times: np.ndarray = field(repr=False)
    exploded: bool = False
    seed: int | None = None
    replication: int | None = None

    @property
    def explosion_time(self) -> float | None:
        """Time at which the event guard tripped (the last recorded jump)."""
        if not self.exploded:
            return None
        return float(self.jump_times[-1])

    @property
    def n_events(self) -> int:
        return len(self.jump_times)

    def count_at(self, t: float) -> int:
        return count_at(self, t)

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "replication": self.replication,
                "gamma": self.gamma,
                "horizon": self.horizon,
                "exploded": self.exploded,
                "jump_times": [float(x) for x in self.jump_times],
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "Trajectory":
        d = json.loads(line)
        return cls(
            gamma=d["gamma"],
            horizon=d["horizon"],
            jump_times=np.asarray(d["jump_times"], dtype=float),
            exploded=d["exploded"],
            seed=d["seed"],
            replication=d.get("replication"),
        )


def count_at(traj: Trajectory, t: float) -> int:
    """N_t = #{jumps <= t}."""
    if not 0 <= t <= traj.horizon:
        raise ValueError(f"t must lie in [0, {traj.horizon}] (got {t})")
    return bisect.bisect_right(traj.jump_times, t)


def next_jump_inversion(rf: RateFunction, n: int, gamma: float, t_now: float, u: float) -> float:
    """Next jump time for an affine rate by solving Lambda(t) = -log(u).

    Lambda(t) = beta (t - t_now) + alpha (n + gamma) log((t+1)/(t_now+1)).
    Returns inf when the intensity is zero forever.
    """
    if not 0 < u <= 1:
        raise ValueError("u must lie in (0, 1]")
    alpha, beta = rf.affine_coefficients()
    return _kernels.invert_affine(alpha, beta, n + gamma, t_now, -math.log(u))


def next_jump_thinning(
    rf: RateFunction, n: int, gamma: float, t_now: float, horizon: float, rng: np.random.Generator
) -> float | None:
    """Next jump time by thinning against the decreasing intensity bound;
    None when no jump occurs before ``horizon``."""
    if not rf.monotone:
        raise ValueError("thinning needs a nondecreasing rate function")
    t = _kernels.next_jump_thinning(rf.code, rf.packed, n + gamma, t_now, horizon, rng)
    return None if math.isinf(t) else t


def kernel_args(cfg: SimConfig) -> tuple:
    """Positional (code, params, alpha, beta, inversion) prefix for the kernels."""
    rf = cfg.rf
    alpha, beta = rf.affine_coefficients() if rf.is_affine else (0.0, 0.0)
    return rf.code, rf.packed, alpha, beta, cfg.use_inversion


def simulate(cfg: SimConfig, rng: np.random.Generator | None = None, replication: int | None = None) -> Trajectory:
    """One trajectory on [0, horizon].

    Without ``rng`` the stream is make_rng(cfg.seed) or, when ``replication``
    is given, make_rng(cfg.seed, replication).
    """
    if rng is None:
        rng = make_rng(cfg.seed) if replication is None else make_rng(cfg.seed, replication)
    times, exploded = _kernels.path_times(
        *kernel_args(cfg), float(cfg.gamma), float(cfg.horizon), int(cfg.max_events), rng
    )
    return Trajectory(cfg.gamma, cfg.horizon, times, bool(exploded), cfg.seed, replication)


# ---------------------------------------------------------------------------
# serialisation


def write_jsonl(trajectories, fh) -> None:
    for traj in trajectories:
        fh.write(traj.to_json())
        fh.write("\n")


def read_jsonl(fh) -> list[Trajectory]:
    return [Trajectory.from_json(line) for line in fh if line.strip()]


def write_csv(trajectories, fh) -> None:
    """Compact long format: one (seed, replication, k, t_k) row per jump."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["seed", "replication", "k", "t_k"])
    for traj in trajectories:
        rep = "" if traj.replication is None else traj.replication
        for k, t in enumerate(traj.jump_times, start=1):
            writer.writerow([traj.seed, rep, k, repr(float(t))])


def trajectories_to_csv(trajectories) -> str:
    buf = io.StringIO()
    write_csv(trajectories, buf)
    return buf.getvalue()
