import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cookiewalk.env import ConfigError, ErgodicRenewal, Explicit, Homogeneous
from cookiewalk.estimators import (EstimateWithCI, ReplicaPlan, _lemma1_race, crossing_tail,
                                   escape_probability, excursion_census, fit_power_law,
                                   hill_estimate, inverse_speed_estimate, leftover_density,
                                   leftover_formula, map_replicas, mean_estimate, phase_point,
                                   proportion_estimate, replica_env, run_replicas, speed_estimate,
                                   truncated_crossing_mean, verify_lemma_bound)
from cookiewalk.seeding import make_rng, replica_rng
from cookiewalk.walk import (CookiesEaten, FirstOf, HitLevel, RecordFlags, SecondPassage,
                             TimeHorizon, new_walk, run_until, simulate)


# interval arithmetic


def test_wilson_reference_values():
    # 50/100 and 10/100 at 95%, textbook values
    lo, hi = proportion_estimate(50, 100).ci(0.95)
    assert (lo, hi) == pytest.approx((0.40383, 0.59617), abs=5e-5)
    lo, hi = proportion_estimate(10, 100).ci(0.95)
    assert (lo, hi) == pytest.approx((0.05523, 0.17437), abs=5e-5)


def test_wilson_never_leaves_unit_interval():
    assert proportion_estimate(0, 40).ci(0.99)[0] == 0.0
    assert proportion_estimate(40, 40).ci(0.99)[1] == pytest.approx(1.0, abs=1e-15)
    assert proportion_estimate(0, 40).ci(0.99)[1] > 0


def test_bernoulli_synthetic():
    rng = np.random.default_rng(1)
    x = rng.random(100_000) < 0.3
    est = proportion_estimate(int(x.sum()), len(x))
    assert est.stderr == pytest.approx(math.sqrt(est.value * (1 - est.value) / len(x)))
    assert abs(est.value - 0.3) <= 3 * est.stderr


def test_geometric_synthetic():
    rng = np.random.default_rng(2)
    x = rng.geometric(0.2, 50_000)
    est = mean_estimate(x)
    assert est.stderr == pytest.approx(x.std(ddof=1) / math.sqrt(len(x)))
    assert abs(est.value - 5.0) <= 3 * est.stderr
    assert est.method == "mean" and not est.flags


def test_mean_ci_and_zero_exclusion():
    e = EstimateWithCI(1.0, 0.2, 10, "mean")
    lo, hi = e.ci(0.99)
    assert lo == pytest.approx(1.0 - 2.5758293 * 0.2, abs=1e-6)
    assert e.excludes_zero()
    assert not EstimateWithCI(0.3, 0.2, 10, "mean").excludes_zero()


@pytest.mark.parametrize("alpha", [0.7, 1.5, 3.0])
def test_hill_on_pareto(alpha):
    rng = np.random.default_rng(3)
    x = (1 - rng.random(200_000)) ** (-1 / alpha)
    est = hill_estimate(x)
    assert est.n == 10_000
    assert abs(est.value - alpha) <= 4 * est.stderr


def test_hill_flags():
    assert "too-few-points" in hill_estimate(np.arange(1, 40)).flags
    assert "degenerate-top" in hill_estimate(np.ones(500)).flags


def test_power_law_fit():
    x = np.array([16, 32, 64, 128, 256])
    fit = fit_power_law(x, 3.0 * x**0.4)
    assert fit["gamma"] == pytest.approx(0.4, abs=1e-10)
    assert fit["C"] == pytest.approx(3.0, rel=1e-10)


# replica engine


def test_single_replica_equals_direct_run():
    plan = ReplicaPlan(Homogeneous(3, 0.7), TimeHorizon(5000), 1, base_seed=17,
                       record=RecordFlags(visits=True))
    (rec,) = run_replicas(plan)
    state = new_walk(Homogeneous(3, 0.7))
    state.rng = replica_rng(17, 0)
    direct = run_until(state, TimeHorizon(5000), RecordFlags(visits=True))
    assert rec.header["base_seed"] == 17
    rec.header = direct.header = {}
    assert rec.to_json() == direct.to_json()


def test_worker_count_does_not_matter():
    plan = ReplicaPlan(Homogeneous(2, 0.8), FirstOf((HitLevel(60), TimeHorizon(20_000))), 40, 5,
                       RecordFlags(visits=True))
    a = [r.to_json() for r in run_replicas(plan, workers=1)]
    b = [r.to_json() for r in run_replicas(plan, workers=8)]
    assert a == b


def test_map_replicas_keeps_order():
    assert map_replicas(lambda i: i * i, 50, workers=4) == [i * i for i in range(50)]


def test_symmetric_hit_right_proportion():
    plan = ReplicaPlan(Homogeneous(0, 0.5), FirstOf((HitLevel(-100), HitLevel(100))), 10_000, 3,
                       RecordFlags(hit_times=False, samples=None))
    recs = run_replicas(plan)
    est = proportion_estimate(sum(r.x == 100 for r in recs), len(recs))
    assert abs(est.value - 0.5) <= 3 * est.stderr


def test_vary_env_draws_distinct_environments():
    plan = ReplicaPlan(ErgodicRenewal(0.95, 0.6), TimeHorizon(10), 3, 1, vary_env=True)
    seeds = {replica_env(plan, i).env_seed for i in range(3)}
    assert len(seeds) == 3
    assert replica_env(plan, 1) == replica_env(plan, 1)


def test_plan_validation():
    with pytest.raises(ConfigError):
        ReplicaPlan(Homogeneous(1, 0.7), TimeHorizon(1), replicas=0)


# speed


def test_ballistic_speed_is_one():
    plan = ReplicaPlan(Homogeneous(10**4, 1.0), TimeHorizon(10**4), 5)
    for est in speed_estimate(plan, [10, 100, 10**4]):
        assert est.value == 1.0 and est.stderr == 0.0


def test_symmetric_speed_is_zero():
    plan = ReplicaPlan(Homogeneous(0, 0.5), TimeHorizon(10**5), 200, 4)
    (est,) = speed_estimate(plan, [10**5])
    assert abs(est.value) <= 3 * est.stderr


def test_speed_horizons_validated():
    plan = ReplicaPlan(Homogeneous(1, 0.7), TimeHorizon(10), 2)
    with pytest.raises(ConfigError):
        speed_estimate(plan, [100, 10])


def test_speed_estimator_deterministic():
    plan = ReplicaPlan(Homogeneous(3, 0.7), TimeHorizon(10**4), 30, 8)
    assert speed_estimate(plan, [100, 10**4]) == speed_estimate(plan, [100, 10**4])


def test_inverse_speed_ballistic():
    plan = ReplicaPlan(Homogeneous(10**3, 1.0), TimeHorizon(1), 3)
    assert [e.value for e in inverse_speed_estimate(plan, [10, 100])] == [1.0, 1.0]


# crossing times


def test_truncated_mean_trivial_cases():
    assert truncated_crossing_mean(ReplicaPlan(Homogeneous(10**3, 1.0), TimeHorizon(1), 4),
                                   100, 8).value == 1.0
    est = truncated_crossing_mean(ReplicaPlan(Homogeneous(0, 0.5), TimeHorizon(1), 50, 2), 30, 1)
    assert est.value == 1.0


def test_truncated_mean_grows_with_cap():
    plan = ReplicaPlan(Homogeneous(3, 0.7), TimeHorizon(1), 300, 6)
    ms = [2**k for k in range(4, 11)]
    ests = [truncated_crossing_mean(plan, 100, m) for m in ms]
    vals = [e.value for e in ests]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    fit = fit_power_law(ms, vals, [e.stderr for e in ests])
    assert fit["gamma"] - 3 * fit["gamma_se"] > 0


def test_crossing_tail_ballistic():
    tail = crossing_tail(ReplicaPlan(Homogeneous(10**4, 1.0), TimeHorizon(1), 2), (0, 300), [2],
                         burn_in=10)
    assert tail.survival[0].value == 0.0
    assert tail.increments == 2 * 291


def test_crossing_tail_flags():
    tail = crossing_tail(ReplicaPlan(Homogeneous(1, 0.7), TimeHorizon(1), 2, 1), (0, 40), [2, 8],
                         burn_in=5, budget=10**5, delta=0.4)
    assert "recurrent-regime" in tail.flags and "low-power" in tail.flags


# leftovers and excursions


def test_leftover_formula_values():
    assert leftover_formula(3, 0.7) == pytest.approx(0.5)
    assert leftover_formula(2, 0.9) == pytest.approx(0.75)
    assert leftover_formula(1, 1.0) == 0.0


def test_leftover_ballistic_zero():
    est = leftover_density(ReplicaPlan(Homogeneous(1, 1.0), TimeHorizon(1), 3), (10, 200), margin=50)
    assert est.value == 0.0 and est.censored_fraction == 0.0


def test_leftover_density_transient_point():
    est = leftover_density(ReplicaPlan(Homogeneous(2, 0.9), TimeHorizon(1), 40, 2), (100, 1000),
                           margin=2000)
    assert abs(est.value - 0.75) <= 3 * est.stderr + 0.02


def test_leftover_censoring_flagged():
    est = leftover_density(ReplicaPlan(Homogeneous(0, 0.5), TimeHorizon(1), 4, 2), (10, 20),
                           margin=10**4, budget=1000)
    assert est.censored_fraction == 1.0 and "margin-not-reached" in est.flags


def test_excursions_ballistic():
    cen = excursion_census(ReplicaPlan(Homogeneous(1, 1.0), TimeHorizon(1), 2), (0, 100), 3,
                           margin=10)
    assert cen.c[0] == 1.0


def test_excursion_density_search():
    plan = ReplicaPlan(Homogeneous(2, 0.9), TimeHorizon(1), 20, 3)
    k0 = next(k for k in range(1, 30)
              if excursion_census(plan, (100, 2000), k, margin=2000).within_k0.value >= 0.9)
    assert k0 < 30
    depth = next(2**R for R in range(1, 16)
                 if excursion_census(plan, (100, 2000), k0, deep_depth=2**R,
                                     margin=2000).deep_density.value <= 0.01)
    assert depth <= 2**15


# escape probability


def test_escape_ballistic_and_symmetric():
    assert escape_probability(Homogeneous(1, 1.0), 20, budget=1000).value == 1.0
    assert escape_probability(Homogeneous(0, 0.5), 20, budget=10**5).value < 0.5


def _escape_flags(env, seed, budget, level=50):
    out = []
    for i in range(300):
        raw = simulate(env, replica_rng(seed, i), SecondPassage(level, 0),
                       RecordFlags(hit_times=False, samples=None), budget=budget)
        out.append((raw.maxpos >= level, raw.censored))
    return out


def test_escape_per_replica_nesting():
    # a run escaping under the larger budget escapes under the smaller one
    # whenever it had reached the level by then
    env = Homogeneous(3, 0.7)
    small, big = _escape_flags(env, 4, 10**4), _escape_flags(env, 4, 10**5)
    for (r1, c1), (r2, c2) in zip(small, big):
        if r2 and c2 and r1:
            assert c1


@pytest.mark.xfail(strict=True, reason="escape proxy is not monotone in the budget")
def test_escape_monotone_in_budget():
    env = Homogeneous(2, 0.7)
    vals = [escape_probability(env, 300, 0, budget=b).value for b in (10**4, 10**5, 10**6)]
    assert vals == sorted(vals)


# lemma checks


def test_lemma3_zero_cookies_exact():
    rep = verify_lemma_bound("3", {"N": 50, "c": 1, "gamma": 0})
    assert rep.bound == pytest.approx(1 / (2 + 2 / 50))
    assert rep.empirical.value == pytest.approx(0.5, abs=1e-12)
    assert rep.passed and rep.empirical.method == "exact"


def test_lemma1_default_passes():
    rep = verify_lemma_bound("1", {"N": 200, "alpha": 1, "M": 3, "p": 0.7}, replicas=2000)
    assert rep.bound == pytest.approx(0.03) and rep.passed


def test_lemma1_race_matches_full_walk():
    # cutting excursions right of the origin must not change the race
    N, M, p, thr = 6, 2, 0.6, 10
    env = Explicit.from_mapping({x: [p] * M for x in range(-N + 1, 1)})
    stack = np.full(N, M, np.int64)
    n = 3000
    race = [_lemma1_race(make_rng(1, 9, i), stack, p, thr, 10**6) for i in range(n)]
    est = proportion_estimate(sum(v == 1 for v in race), n)
    hits = cens = 0
    for i in range(n):
        raw = simulate(env, make_rng(2, 9, i), FirstOf((HitLevel(-N), CookiesEaten(thr))),
                       RecordFlags(hit_times=False, samples=None), budget=10**6)
        hits += raw.reason == "hit_level"
        cens += raw.censored
    lo, hi = hits / n, (hits + cens) / n
    se = math.sqrt(2) * max(est.stderr, 1 / n)
    assert lo - 4 * se <= est.value <= hi + 4 * se
    assert 0.05 < est.value < 0.95


def test_lemma1_unsatisfiable():
    with pytest.raises(ConfigError):
        verify_lemma_bound("1", {"N": 10, "alpha": 2, "M": 3})


def test_lemma4_positive_across_scales():
    for N in (16, 32, 64):
        rep = verify_lemma_bound("4", {"N": N, "gamma": 1.0, "p": 0.75}, replicas=2000)
        assert rep.passed and rep.empirical.ci(0.99)[0] > 0


def test_lemma5_and_corollary_run():
    r5 = verify_lemma_bound("5", {"k": 6, "N": 8, "eps": 0.03, "b": 1, "M": 2, "p": 0.75},
                            replicas=500)
    assert 0 <= r5.empirical.value <= 1 and r5.direction == "lower"
    rc = verify_lemma_bound("cor1", {"N": 40, "M1": 6, "p": 0.9, "eps": 0.2}, replicas=500)
    assert rc.bound == pytest.approx(0.8)
    assert set(rc.to_dict()) >= {"lemma", "params", "empirical", "stderr", "bound", "pass"}


def test_unknown_lemma():
    with pytest.raises(ConfigError):
        verify_lemma_bound("7", {})


# phase points


def test_phase_point_columns():
    pts = phase_point(2, 0.9, [100, 1000], 10, escape_budget=10**4,
                      leftover_sites=(100, 300), tail_sites=(100, 300))
    assert [p.horizon for p in pts] == [100, 1000]
    assert pts[0].delta == pytest.approx(1.6)
    assert pts[0].leftover_density is not None and pts[0].tail_alpha is not None
    rec = phase_point(2, 0.7, [100], 5, escape_budget=10**3)
    assert rec[0].leftover_density is None
