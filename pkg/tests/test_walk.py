import csv
import io
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cookiewalk.env import EnvironmentState, Explicit, Homogeneous, OneSidedHomogeneous, Patched, CookieStack
from cookiewalk.seeding import WALK_TAG, make_rng
from cookiewalk.walk import (CookiesEaten, FirstOf, HitLevel, RecordFlags, SecondPassage,
                             TimeHorizon, VisitCount, couple_with_symmetric, gamma_event,
                             geometric_grid, new_walk, run_until, simulate, step)

envs = st.sampled_from([
    Homogeneous(0, 0.5), Homogeneous(1, 0.8), Homogeneous(3, 0.7), Homogeneous(2, 1.0),
    OneSidedHomogeneous(2, 0.9, 3),
    Explicit.from_mapping({-1: [0.75], 0: [0.9, 0.6], 4: [0.55, 0.55, 0.55]}),
    Patched(Homogeneous(1, 0.6), ((-3, 2, CookieStack((0.95, 0.7))),)),
])


# single steps


def test_ballistic_step():
    s = new_walk(Homogeneous(1, 1.0), seed=3)
    for k in range(1, 50):
        assert step(s) == k


def test_exhausted_step_keeps_drift():
    s = new_walk(Homogeneous(0, 0.5), seed=4)
    for _ in range(100):
        x0 = s.x
        assert abs(step(s) - x0) == 1
    assert s.drift_total == 0.0


@pytest.mark.parametrize("p", [0.6, 0.75, 0.9])
def test_martingale_increments_on_fresh_sites(p):
    s = new_walk(Homogeneous(50, p), seed=5)
    seen = set()
    for _ in range(400):
        v0 = s.martingale
        step(s)
        seen.add(round(s.martingale - v0, 12))
    assert seen <= {round(2 * (1 - p), 12), round(-2 * p, 12)}
    assert len(seen) == 2


@pytest.mark.parametrize("q", [Fraction(1, 2), Fraction(7, 10), Fraction(1)])
def test_martingale_identity_exact(q):
    d = 2 * q - 1
    assert q * (1 - d) + (1 - q) * (-1 - d) == 0


# compiled loop versus the reference stepper


@given(envs, st.integers(0, 2**32), st.integers(1, 400), st.integers(-3, 3))
def test_kernel_matches_reference_stepper(spec, seed, steps, start):
    raw = simulate(spec, make_rng(seed, WALK_TAG, 0), TimeHorizon(steps),
                   RecordFlags(hit_times=False, samples=None, path=True), start=start)
    s = new_walk(spec, seed, start)
    ref = [start] + [step(s) for _ in range(steps)]
    assert raw.path.tolist() == ref
    assert raw.drift == pytest.approx(s.drift_total, abs=1e-9)
    assert raw.eaten == s.eaten


@given(envs, st.integers(0, 2**32), st.integers(1, 300), st.integers(1, 300))
def test_resumed_run_equals_single_run(spec, seed, n1, n2):
    a = new_walk(spec, seed)
    run_until(a, TimeHorizon(n1), RecordFlags(samples=None))
    ra = run_until(a, TimeHorizon(n2), RecordFlags(samples=None))
    b = new_walk(spec, seed)
    rb = run_until(b, TimeHorizon(n1 + n2), RecordFlags(samples=None))
    assert (a.x, a.n, a.eaten, a.env.consumed) == (b.x, b.n, b.eaten, b.env.consumed)
    assert a.drift_total == pytest.approx(b.drift_total, abs=1e-9)
    assert ra.x == rb.x and ra.n == rb.n


def test_window_growth_matches_reference():
    # long symmetric run forces several window doublings
    spec = Homogeneous(0, 0.5)
    raw = simulate(spec, make_rng(2, WALK_TAG, 0), TimeHorizon(200_000),
                   RecordFlags(hit_times=True, samples=None, path=True), budget=200_000)
    s = new_walk(spec, 2)
    for _ in range(200_000):
        step(s)
    assert raw.x == s.x == raw.path[-1]


# run_until


def test_ballistic_hitting_time():
    s = new_walk(Homogeneous(10**6, 1.0), seed=1)
    rec = run_until(s, HitLevel(100))
    assert rec.reason == "hit_level"
    assert rec.hit_times[100] == 100 and rec.n == 100


def test_censoring_tag():
    rec = run_until(new_walk(Homogeneous(0, 0.5), seed=1), HitLevel(10**6), budget=1000)
    assert rec.reason == "censored" and rec.censored and rec.n == 1000


def test_time_horizon_is_relative_to_run_start():
    s = new_walk(Homogeneous(2, 0.7), seed=1)
    run_until(s, TimeHorizon(30))
    run_until(s, TimeHorizon(20))
    assert s.n == 50


def test_cookies_eaten_stop():
    rec = run_until(new_walk(Homogeneous(1, 1.0), seed=1), CookiesEaten(17))
    assert rec.reason == "cookies_eaten" and rec.eaten == 17 and rec.x == 17


def test_visit_count_stop():
    rec = run_until(new_walk(Homogeneous(0, 0.5), seed=8), VisitCount(0, 4),
                    RecordFlags(visits=True))
    assert rec.reason == "visit_count" and rec.x == 0 and rec.visits[0] == 4


def test_second_passage_stop():
    s = new_walk(Homogeneous(0, 0.5), seed=6)
    rec = run_until(s, SecondPassage(3, 0), RecordFlags(), budget=10**7)
    assert rec.reason == "second_passage" and rec.x == 0
    assert rec.n > rec.hit_times[3]


def test_first_of_stops_at_earliest():
    rec = run_until(new_walk(Homogeneous(1, 1.0), seed=1),
                    FirstOf((HitLevel(40), FirstOf((TimeHorizon(25), HitLevel(-3))))))
    assert rec.reason == "time_horizon" and rec.n == 25


def test_first_of_must_be_nonempty():
    with pytest.raises(ValueError):
        FirstOf(())


@given(envs, st.integers(0, 2**20))
def test_record_invariants(spec, seed):
    s = new_walk(spec, seed)
    rec = run_until(s, TimeHorizon(2000), RecordFlags(visits=True, excursions=True,
                                                      leftover=True))
    for x in rec.hit_times:
        assert rec.visits.get(x, 0) >= 1
    for x, e in rec.excursion_counts.items():
        assert e <= rec.visits[x]
    for x, left in rec.leftover_cookies.items():
        assert left == s.env.remaining(x)


@given(st.integers(1, 5), st.floats(0.51, 1.0), st.integers(0, 2**20))
def test_cookie_accounting(M, p, seed):
    s = new_walk(Homogeneous(M, p), seed)
    rec = run_until(s, TimeHorizon(3000), RecordFlags(visits=True))
    eaten = sum(s.env.consumed.values())
    assert s.eaten == eaten
    assert s.drift_total == pytest.approx((2 * p - 1) * eaten, rel=1e-12, abs=1e-12)
    assert s.drift_total <= (2 * p - 1) * M * len(rec.visits) + 1e-9


def test_reproducibility():
    a = run_until(new_walk(Homogeneous(3, 0.7), 9), TimeHorizon(10**5),
                  RecordFlags(visits=True, leftover=True))
    b = run_until(new_walk(Homogeneous(3, 0.7), 9), TimeHorizon(10**5),
                  RecordFlags(visits=True, leftover=True))
    assert a.to_json() == b.to_json()


def test_geometric_samples_and_csv():
    rec = run_until(new_walk(Homogeneous(2, 0.8), 1), TimeHorizon(1000))
    assert [n for n, _, _ in rec.position_samples] == geometric_grid(1000).tolist()
    assert geometric_grid(1000).tolist() == [1, 2, 4, 8, 16, 32, 64, 128, 256, 512]
    rows = list(csv.reader(io.StringIO(rec.samples_csv())))
    assert rows[0] == ["n", "x", "drift"] and len(rows) == 11


def test_explicit_window_hit_right_matches_oracle():
    # oracle value 25/32 for one 0.75 cookie at -1, 0, 1 (independent enumeration)
    env = Explicit.from_mapping({-1: [0.75], 0: [0.75], 1: [0.75]})
    n = 20000
    hits = 0
    for i in range(n):
        raw = simulate(env, make_rng(1, WALK_TAG, i), FirstOf((HitLevel(-2), HitLevel(2))),
                       RecordFlags(hit_times=False, samples=None))
        hits += raw.x == 2
    phat = hits / n
    assert abs(phat - 0.78125) <= 3 * np.sqrt(0.78125 * 0.21875 / n)


# the Gamma event


def _gamma(spec, seed, e, n, M1):
    s = new_walk(spec, seed)
    rec = run_until(s, FirstOf((HitLevel(4 * n), SecondPassage(2 * n, n))),
                    RecordFlags(passages=((2 * n, n),), samples=None), budget=10**7)
    return gamma_event(rec, s.env, e, n, M1)


def test_gamma_ballistic():
    # the straight path eats one cookie per site, leaving M - 1 behind
    assert all(_gamma(Homogeneous(3, 1.0), k, 0.75, 8, 2) for k in range(5))
    assert not any(_gamma(Homogeneous(3, 1.0), k, 0.75, 8, 3) for k in range(5))


def test_gamma_fails_without_cookies():
    out = [_gamma(Homogeneous(0, 0.5), k, 0.5, 8, 1) for k in range(40)]
    assert not any(out)


def test_gamma_undecided_when_censored():
    s = new_walk(Homogeneous(0, 0.5), 1)
    rec = run_until(s, HitLevel(10**6), RecordFlags(passages=((64, 32),)), budget=10)
    assert gamma_event(rec, s.env, 0.5, 32, 1) is None


def test_gamma_high_probability_for_many_cookies():
    n_rep = 10_000
    hits = sum(bool(_gamma(Homogeneous(6, 0.9), k, 0.75, 32, 2)) for k in range(n_rep))
    assert hits / n_rep >= 0.9


# coupling with the symmetric walk


def test_symmetric_coupling_dominates():
    for k in range(1000):
        x, y = couple_with_symmetric(Homogeneous(3, 0.7), make_rng(k, WALK_TAG, 0), 2000)
        assert (x >= y).all()


def test_reflected_same_uniform_coupling_can_fail():
    # pushing the symmetric walk right at the origin breaks the ordering
    fails = 0
    for k in range(200):
        x, y = couple_with_symmetric(Homogeneous(3, 0.7), make_rng(k, WALK_TAG, 0), 2000,
                                     reflected=True)
        fails += bool((x < y).any())
    assert fails > 0


def test_coupling_excited_path_is_the_walk():
    x, _ = couple_with_symmetric(Homogeneous(2, 0.8), make_rng(4, WALK_TAG, 0), 500)
    s = new_walk(Homogeneous(2, 0.8), 4)
    assert x.tolist() == [0] + [step(s) for _ in range(500)]
