import io
import math

import numpy as np
import pytest
from scipy import stats

from sepp.mc import sample_counts
from sepp.rate_fn import RateFunction as R
from sepp.sim import (
    SimConfig,
    Trajectory,
    count_at,
    make_rng,
    next_jump_inversion,
    next_jump_thinning,
    read_jsonl,
    simulate,
    trajectories_to_csv,
    write_jsonl,
)

GOLDEN = (1 + math.sqrt(5)) / 2


# -- single-jump samplers -------------------------------------------------


def test_inversion_examples():
    assert next_jump_inversion(R.affine(1.0, 0.0), 0, 1.0, 0.0, 0.5) == pytest.approx(1.0, abs=1e-12)
    assert next_jump_inversion(R.affine(0.0, 1.0), 7, 0.0, 0.0, 0.5) == pytest.approx(math.log(2), abs=1e-12)
    assert math.isinf(next_jump_inversion(R.affine(1.0, 0.0), 0, 0.0, 0.0, 0.5))


@pytest.mark.parametrize("alpha,beta,n,gamma,t0", [(0.5, 1.0, 3, 1.0, 2.0), (2.0, 0.3, 10, 0.0, 0.1), (0.25, 4.0, 0, 2.5, 50.0)])
def test_inversion_solves_compensator_equation(alpha, beta, n, gamma, t0):
    for u in (0.9, 0.5, 1e-3, 1e-9):
        t = next_jump_inversion(R.affine(alpha, beta), n, gamma, t0, u)
        comp = beta * (t - t0) + alpha * (n + gamma) * math.log((t + 1) / (t0 + 1))
        assert comp == pytest.approx(-math.log(u), rel=1e-11, abs=1e-11)
        assert t >= t0


def test_inversion_rejects_bad_uniform():
    with pytest.raises(ValueError):
        next_jump_inversion(R.affine(1, 1), 0, 0, 0, 0.0)


def test_thinning_constant_rate_is_exponential():
    rng = make_rng(5)
    draws = [next_jump_thinning(R.constant(2.0), 0, 0.0, 0.0, 1e9, rng) for _ in range(20000)]
    assert stats.kstest(draws, stats.expon(scale=0.5).cdf).pvalue > 0.01


def test_thinning_zero_intensity_returns_none():
    assert next_jump_thinning(R.power(1.0, 0.5), 0, 0.0, 0.0, 100.0, make_rng(0)) is None
    assert next_jump_thinning(R.affine(1.0, 0.0), 0, 0.0, 3.0, 100.0, make_rng(0)) is None


def test_thinning_respects_horizon():
    rng = make_rng(1)
    for _ in range(200):
        t = next_jump_thinning(R.constant(0.1), 0, 0.0, 0.0, 0.5, rng)
        assert t is None or 0 < t <= 0.5


def test_thinning_requires_monotone_rate():
    with pytest.raises(ValueError):
        next_jump_thinning(R.sine_mix(0.5, 2.0, 3.0), 0, 0.0, 0.0, 1.0, make_rng(0))


@pytest.mark.parametrize("n,gamma,t0", [(0, 0.0, 0.0), (3, 1.0, 0.5), (20, 2.0, 4.0)])
def test_first_jump_inversion_vs_thinning(n, gamma, t0):
    rf = R.affine(0.5, 1.0)
    rng_u, rng_t = make_rng(100), make_rng(200)
    inv = np.array([next_jump_inversion(rf, n, gamma, t0, 1.0 - u) for u in rng_u.random(100_000)])
    thin = np.array([next_jump_thinning(rf, n, gamma, t0, 1e12, rng_t) for _ in range(100_000)])
    assert stats.ks_2samp(inv, thin).pvalue > 0.01


# -- trajectories ---------------------------------------------------------


def test_sim_config_validation_lists_problems():
    with pytest.raises(ValueError) as exc:
        SimConfig(R.constant(1), gamma=-1, horizon=0, max_events=0, seed=-3)
    assert str(exc.value).count(";") == 3
    with pytest.raises(ValueError):
        SimConfig(R.sqrt_shift(), method="inversion")
    with pytest.raises(ValueError):
        SimConfig(R.sine_mix(0.5, 2.0, 3.0))
    assert SimConfig(R.affine(1, 1)).use_inversion
    assert not SimConfig(R.affine(1, 1), method="thinning").use_inversion
    assert not SimConfig(R.sqrt_shift()).use_inversion


@pytest.mark.parametrize("rf", [R.affine(0.5, 1.0), R.sqrt_shift(), R.sine_mix(), R.constant(2.0)], ids=lambda r: r.kind)
def test_trajectory_invariants(rf):
    traj = simulate(SimConfig(rf, gamma=1.5, horizon=50.0, seed=9))
    jt = traj.jump_times
    assert np.all(np.diff(jt) > 0)
    assert jt.size == 0 or (jt[0] > 0 and jt[-1] <= 50.0)
    assert not traj.exploded and traj.explosion_time is None


def test_simulate_is_deterministic():
    cfg = SimConfig(R.sqrt_shift(), gamma=2.0, horizon=200.0, seed=123)
    a, b = simulate(cfg), simulate(cfg)
    assert a.jump_times.tobytes() == b.jump_times.tobytes()
    c = simulate(SimConfig(R.sqrt_shift(), gamma=2.0, horizon=200.0, seed=124))
    assert c.jump_times.tobytes() != a.jump_times.tobytes()


def test_explosion_guard():
    traj = simulate(SimConfig(R.power(1.0, 2.0, 1.0), gamma=1.0, horizon=10.0, max_events=5000, seed=1))
    assert traj.exploded
    assert traj.n_events == 5000
    assert traj.explosion_time == traj.jump_times[-1]


def test_count_at_examples():
    empty = Trajectory(0.0, 3.0, np.array([]))
    assert count_at(empty, 1.7) == 0
    traj = Trajectory(0.0, 3.0, np.array([0.5, 2.0]))
    assert count_at(traj, 1.0) == 1
    assert count_at(traj, 2.0) == 2
    assert count_at(traj, 0.0) == 0
    with pytest.raises(ValueError):
        count_at(traj, 3.5)
    with pytest.raises(ValueError):
        traj.count_at(-0.1)


def test_jsonl_round_trip_and_stability():
    trajs = [simulate(SimConfig(R.affine(0.5, 1.0), horizon=5.0, seed=4), replication=i) for i in range(3)]
    buf = io.StringIO()
    write_jsonl(trajs, buf)
    text = buf.getvalue()
    back = read_jsonl(io.StringIO(text))
    for a, b in zip(trajs, back):
        assert a.jump_times.tobytes() == b.jump_times.tobytes()
        assert (a.seed, a.replication, a.gamma, a.horizon, a.exploded) == (b.seed, b.replication, b.gamma, b.horizon, b.exploded)
    buf2 = io.StringIO()
    write_jsonl([simulate(SimConfig(R.affine(0.5, 1.0), horizon=5.0, seed=4), replication=i) for i in range(3)], buf2)
    assert buf2.getvalue() == text


def test_csv_rows_round_trip_floats():
    traj = simulate(SimConfig(R.constant(3.0), horizon=2.0, seed=8))
    lines = trajectories_to_csv([traj]).splitlines()
    assert lines[0] == "seed,replication,k,t_k"
    assert len(lines) == traj.n_events + 1
    parsed = np.array([float(line.split(",")[3]) for line in lines[1:]])
    assert parsed.tobytes() == traj.jump_times.tobytes()


# -- distributional oracles ----------------------------------------------


def test_inversion_and_thinning_paths_agree():
    rf = R.affine(0.5, 1.0)
    a = sample_counts(rf, 1.0, [5.0], 20_000, 1, method="inversion", workers=1).counts[:, 0]
    b = sample_counts(rf, 1.0, [5.0], 20_000, 2, method="thinning", workers=1).counts[:, 0]
    k = np.arange(max(a.max(), b.max()) + 2)
    table = np.vstack([np.bincount(a, minlength=len(k)), np.bincount(b, minlength=len(k))])
    table = table[:, table.sum(axis=0) >= 10]
    assert stats.chi2_contingency(table).pvalue > 0.001


def test_poisson_lln_constant_rate():
    s = sample_counts(R.constant(3.0), 0.0, [1000.0], 2000, 3, workers=1)
    ratio = s.counts[:, 0] / 1000.0
    assert np.all((ratio >= 2.8) & (ratio <= 3.2))


def test_sqrt_shift_concentrates_at_golden_ratio():
    s = sample_counts(R.sqrt_shift(), 5.0, [1e4], 1000, 21, workers=1)
    within = np.abs(s.counts[:, 0] / 1e4 - GOLDEN) < 0.1
    assert within.mean() >= 0.95
