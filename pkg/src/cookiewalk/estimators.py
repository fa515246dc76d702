"""Seeded replica engine and Monte Carlo estimators.

Replica ``i`` of a plan always draws from ``replica_rng(base_seed, i)``, so
results depend only on the plan, never on the number of worker threads.
The compiled stepping loop releases the GIL, so threads give real
parallelism on multi-core machines.

Proportions carry Wilson score intervals; means carry the plain standard
error; tail indices carry the asymptotic Hill standard error
``alpha / sqrt(k)``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit
from scipy.stats import norm

from .env import (ConfigError, CookieStack, EnvironmentSpec, ErgodicRenewal, Explicit, Homogeneous,
                  Patched, EnvironmentState)
from .seeding import AUX_TAG, derive_seed_sequence, replica_rng
from .walk import (CookiesEaten, FirstOf, HitLevel, RawRun, RecordFlags, SecondPassage,
                   StoppingCondition, TimeHorizon, TrajectoryRecord, run_until, simulate, WalkState)
from . import oracle

__all__ = [
    "ReplicaPlan",
    "EstimateWithCI",
    "PhasePoint",
    "TailEstimate",
    "LemmaReport",
    "map_replicas",
    "run_replicas",
    "replica_env",
    "mean_estimate",
    "proportion_estimate",
    "hill_estimate",
    "speed_estimate",
    "inverse_speed_estimate",
    "truncated_crossing_mean",
    "fit_power_law",
    "crossing_tail",
    "leftover_density",
    "leftover_formula",
    "excursion_census",
    "escape_probability",
    "phase_point",
    "verify_lemma_bound",
    "lemma5_product_bound",
]


# --------------------------------------------------------------------------
# plans and estimates


@dataclass(frozen=True)
class ReplicaPlan:
    """What to run and how many times.

    ``vary_env`` gives each replica its own draw of a random environment
    (only meaningful for :class:`ErgodicRenewal`; its ``env_seed`` is
    replaced by a seed derived from ``base_seed`` and the replica index).
    """

    env: EnvironmentSpec
    stop: StoppingCondition
    replicas: int = 1
    base_seed: int = 0
    record: RecordFlags = RecordFlags()
    budget: Optional[int] = None
    start: int = 0
    vary_env: bool = False

    def __post_init__(self):
        if self.replicas < 1:
            raise ConfigError("replicas", "must be at least 1")


@dataclass(frozen=True)
class EstimateWithCI:
    value: float
    stderr: float
    n: int
    method: str
    censored_fraction: float = 0.0
    flags: tuple = ()

    def ci(self, level: float = 0.99) -> tuple[float, float]:
        z = float(norm.ppf(0.5 + level / 2))
        if self.method == "proportion-wilson":
            return _wilson(self.value, self.n, z)
        return self.value - z * self.stderr, self.value + z * self.stderr

    def excludes_zero(self, level: float = 0.99) -> bool:
        lo, hi = self.ci(level)
        return lo > 0 or hi < 0

    def to_dict(self) -> dict:
        return {"value": self.value, "stderr": self.stderr, "n": self.n, "method": self.method,
                "censored_fraction": self.censored_fraction, "flags": list(self.flags)}


def _wilson(phat: float, n: int, z: float) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    den = 1 + z * z / n
    centre = (phat + z * z / (2 * n)) / den
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / den
    return max(0.0, centre - half), min(1.0, centre + half)


def mean_estimate(values, censored_fraction: float = 0.0, flags=()) -> EstimateWithCI:
    v = np.asarray(values, dtype=float)
    n = len(v)
    se = float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return EstimateWithCI(float(v.mean()) if n else float("nan"), se, n, "mean",
                          censored_fraction, tuple(flags))


def proportion_estimate(successes: int, n: int, censored_fraction: float = 0.0,
                        flags=()) -> EstimateWithCI:
    phat = successes / n if n else float("nan")
    se = math.sqrt(phat * (1 - phat) / n) if n else float("nan")
    return EstimateWithCI(phat, se, n, "proportion-wilson", censored_fraction, tuple(flags))


def hill_estimate(sample, fraction: float = 0.05, min_k: int = 50) -> EstimateWithCI:
    """Hill estimate of the tail index from the top ``max(min_k, fraction*n)`` points."""
    x = np.sort(np.asarray(sample, dtype=float))[::-1]
    n = len(x)
    k = max(min_k, int(fraction * n))
    flags = []
    if k >= n:
        return EstimateWithCI(float("nan"), float("nan"), n, "hill", 0.0, ("too-few-points",))
    logs = np.log(x[:k]) - math.log(x[k])
    s = float(logs.sum())
    if s <= 0:
        return EstimateWithCI(float("inf"), float("nan"), k, "hill", 0.0, ("degenerate-top",))
    alpha = k / s
    return EstimateWithCI(alpha, alpha / math.sqrt(k), k, "hill", 0.0, tuple(flags))


# --------------------------------------------------------------------------
# replica engine


def map_replicas(fn: Callable[[int], object], replicas: int, workers: int = 1) -> list:
    """``[fn(0), ..., fn(replicas-1)]`` computed on ``workers`` threads."""
    if workers <= 1 or replicas == 1:
        return [fn(i) for i in range(replicas)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(replicas)))


def replica_env(plan: ReplicaPlan, i: int) -> EnvironmentSpec:
    if plan.vary_env and isinstance(plan.env, ErgodicRenewal):
        seed = int(derive_seed_sequence(plan.base_seed, AUX_TAG, i).generate_state(1, np.uint64)[0])
        return replace(plan.env, env_seed=seed)
    return plan.env


def _raw(plan: ReplicaPlan, i: int, stop=None, record=None, budget=None) -> RawRun:
    return simulate(replica_env(plan, i), replica_rng(plan.base_seed, i),
                    plan.stop if stop is None else stop,
                    plan.record if record is None else record,
                    budget=plan.budget if budget is None else budget, start=plan.start)


def run_replicas(plan: ReplicaPlan, workers: int = 1) -> list[TrajectoryRecord]:
    def one(i):
        state = WalkState(EnvironmentState(replica_env(plan, i)), replica_rng(plan.base_seed, i),
                          x=plan.start)
        rec = run_until(state, plan.stop, plan.record, budget=plan.budget)
        rec.header["replica"] = i
        rec.header["base_seed"] = plan.base_seed
        return rec
    return map_replicas(one, plan.replicas, workers)


_LEAN = RecordFlags(hit_times=False, samples=None)


# --------------------------------------------------------------------------
# speed


def speed_estimate(plan: ReplicaPlan, horizons: Sequence[int], workers: int = 1
                   ) -> list[EstimateWithCI]:
    """Mean of ``X_n / n`` at each horizon ``n`` (one run per replica)."""
    horizons = [int(h) for h in horizons]
    if horizons != sorted(horizons) or not horizons or horizons[0] < 1:
        raise ConfigError("horizons", "must be ascending positive integers")
    rec = RecordFlags(hit_times=False, samples=horizons)

    def one(i):
        raw = _raw(plan, i, TimeHorizon(horizons[-1]), rec, horizons[-1])
        return (raw.sample_x - plan.start) / np.asarray(horizons, float)
    rows = np.array(map_replicas(one, plan.replicas, workers))
    return [mean_estimate(rows[:, j]) for j in range(len(horizons))]


def inverse_speed_estimate(plan: ReplicaPlan, levels: Sequence[int], budget: int = 10**8,
                           workers: int = 1) -> list[EstimateWithCI]:
    """Mean of ``T_R / R`` per level ``R``; runs censored before ``T_R`` are
    reported through ``censored_fraction`` and left out of the mean."""
    levels = sorted(int(r) for r in levels)
    rec = RecordFlags(hit_times=True, samples=None)

    def one(i):
        raw = _raw(plan, i, HitLevel(plan.start + levels[-1]), rec, budget)
        out = []
        for r in levels:
            j = plan.start + r - raw.lo
            t = raw.hit_time[j] if 0 <= j < len(raw.hit_time) else -1
            out.append(t / r if t >= 0 else np.nan)
        return out
    rows = np.array(map_replicas(one, plan.replicas, workers))
    res = []
    for j in range(len(levels)):
        col = rows[:, j]
        ok = ~np.isnan(col)
        res.append(mean_estimate(col[ok], censored_fraction=1 - ok.mean()))
    return res


def truncated_crossing_mean(plan: ReplicaPlan, V: int, m: float, workers: int = 1
                            ) -> EstimateWithCI:
    """Estimate of ``E[(T_V / V) ^ m]``.

    The step budget is ``ceil(m * V)``; a run censored there has
    ``T_V / V > m``, so contributing ``m`` is exact.
    """
    if V < 1 or m < 1:
        raise ConfigError("V", "need V >= 1 and m >= 1")
    budget = int(math.ceil(m * V))

    def one(i):
        raw = _raw(plan, i, HitLevel(plan.start + V), _LEAN, budget)
        return (min(raw.steps / V, m), raw.censored)
    vals = map_replicas(one, plan.replicas, workers)
    cen = float(np.mean([c for _, c in vals]))
    return mean_estimate([v for v, _ in vals], censored_fraction=cen)


def fit_power_law(x, y, yerr=None) -> dict:
    """Least-squares fit of ``log y = log C + gamma log x``.

    Returns ``{"gamma", "gamma_se", "C"}``; ``yerr`` turns on inverse
    variance weights (delta method on the log scale).
    """
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    w = None
    if yerr is not None:
        rel = np.asarray(yerr, float) / np.asarray(y, float)
        w = 1.0 / np.maximum(rel, 1e-12)
    coef, cov = np.polyfit(lx, ly, 1, w=w, cov="unscaled" if w is not None else True)
    return {"gamma": float(coef[0]), "gamma_se": float(math.sqrt(cov[0, 0])),
            "C": float(math.exp(coef[1]))}


# --------------------------------------------------------------------------
# crossing-time tails


@dataclass(frozen=True)
class TailEstimate:
    m_grid: tuple
    survival: tuple           # EstimateWithCI per m
    alpha: EstimateWithCI     # Hill index of the uncensored increments
    increments: int
    censored_increments: int
    flags: tuple = ()


def crossing_tail(plan: ReplicaPlan, x_range: tuple[int, int], m_grid: Sequence[int],
                  budget: int = 10**7, burn_in: int = 100, workers: int = 1,
                  delta: Optional[float] = None) -> TailEstimate:
    """Pooled survival of ``T_{x+1} - T_x`` over ``x`` in ``x_range`` and its Hill index.

    Sites closer than ``burn_in`` to the start are skipped.  An increment
    started but not finished within the budget is censored: it enters the
    survival estimate only for ``m`` it already exceeds and is left out of
    the Hill fit.
    """
    x_lo = max(int(x_range[0]), plan.start + burn_in)
    x_hi = int(x_range[1])
    if x_hi <= x_lo:
        raise ConfigError("x_range", "empty after burn-in")
    rec = RecordFlags(hit_times=True, samples=None)

    def one(i):
        raw = _raw(plan, i, HitLevel(x_hi + 1), rec, budget)
        t = np.full(x_hi - x_lo + 2, -1, np.int64)
        sl = raw.site_slice(x_lo, x_hi + 1)
        t[sl.start - (x_lo - raw.lo):sl.stop - (x_lo - raw.lo)] = raw.hit_time[sl]
        done = (t[:-1] >= 0) & (t[1:] >= 0)
        inc = (t[1:] - t[:-1])[done]
        open_ = (t[:-1] >= 0) & (t[1:] < 0)
        cens = (raw.n - t[:-1])[open_]
        return inc, cens
    parts = map_replicas(one, plan.replicas, workers)
    inc = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0)
    cens = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0)
    flags = []
    if delta is not None and delta <= 1:
        flags.append("recurrent-regime")
    if len(inc) < 100:
        flags.append("low-power")
    total = len(inc) + len(cens)
    surv = []
    for m in m_grid:
        k = int((inc >= m).sum() + (cens >= m).sum())
        surv.append(proportion_estimate(k, total, censored_fraction=len(cens) / max(total, 1)))
    alpha = hill_estimate(inc) if len(inc) else EstimateWithCI(float("nan"), float("nan"), 0,
                                                                "hill", 1.0, ("no-data",))
    alpha = replace(alpha, censored_fraction=len(cens) / max(total, 1),
                    flags=alpha.flags + tuple(flags))
    return TailEstimate(tuple(m_grid), tuple(surv), alpha, len(inc), len(cens), tuple(flags))


# --------------------------------------------------------------------------
# leftover cookies and excursions


def leftover_formula(M: int, p: float) -> float:
    """Long-run density of uneaten cookies, ``(M(2p-1) - 1)/(2p-1)``."""
    return (M * (2 * p - 1) - 1) / (2 * p - 1)


def leftover_density(plan: ReplicaPlan, site_range: tuple[int, int], margin: int = 5000,
                     budget: int = 10**9, workers: int = 1) -> EstimateWithCI:
    """Mean uneaten cookies per site over ``site_range``.

    Each replica runs until it first hits ``site_hi + margin``; the
    per-replica site average is the sample unit.  Replicas censored
    before that level are dropped and flagged.
    """
    a, b = int(site_range[0]), int(site_range[1])
    level = b + margin

    def one(i):
        raw = _raw(plan, i, HitLevel(level), _LEAN, budget)
        if raw.censored:
            return None
        return float(raw.leftover(a, b).mean())
    vals = map_replicas(one, plan.replicas, workers)
    ok = [v for v in vals if v is not None]
    cen = 1 - len(ok) / len(vals)
    flags = ("margin-not-reached",) if cen > 0 else ()
    return mean_estimate(ok, censored_fraction=cen, flags=flags)


@dataclass(frozen=True)
class ExcursionCensus:
    c: tuple                  # c(l) for l = 0..k0
    within_k0: EstimateWithCI
    deep_density: Optional[EstimateWithCI]
    sites: int


def excursion_census(plan: ReplicaPlan, site_range: tuple[int, int], k0: int,
                     deep_depth: Optional[int] = None, margin: int = 5000,
                     budget: int = 10**9, workers: int = 1) -> ExcursionCensus:
    """Distribution of the number of excursions from ``x`` into ``(-inf, x)``.

    ``c(l)`` is the fraction of sites in ``site_range`` with exactly ``l``
    left excursions.  With ``deep_depth = D`` the census also reports the
    density of sites having an excursion that reaches ``x - D`` among their
    first ``k0`` excursions.
    """
    a, b = int(site_range[0]), int(site_range[1])
    rec = RecordFlags(hit_times=False, samples=None, excursions=True,
                      deep_excursions=None if deep_depth is None else (int(deep_depth), int(k0)))

    def one(i):
        raw = _raw(plan, i, HitLevel(b + margin), rec, budget)
        sl = raw.site_slice(a, b)
        counts = np.bincount(np.minimum(raw.exc[sl], k0 + 1), minlength=k0 + 2)
        deep = float(raw.deep[sl].mean()) if deep_depth is not None else 0.0
        return counts, deep, raw.censored
    parts = map_replicas(one, plan.replicas, workers)
    counts = sum(p[0] for p in parts)
    nsites = int(counts.sum())
    c = tuple((counts[:k0 + 1] / nsites).tolist())
    per_rep = [p[0][:k0 + 1].sum() / p[0].sum() for p in parts]
    cen = float(np.mean([p[2] for p in parts]))
    within = mean_estimate(per_rep, censored_fraction=cen)
    deep = mean_estimate([p[1] for p in parts], censored_fraction=cen) if deep_depth else None
    return ExcursionCensus(c, within, deep, nsites)


# --------------------------------------------------------------------------
# transience


def escape_probability(env: EnvironmentSpec, replicas: int, base_seed: int = 0,
                       level: int = 50, budget: int = 10**6, workers: int = 1) -> EstimateWithCI:
    """Fraction of runs that reach ``level`` and do not return to 0 within ``budget`` steps.

    Runs that never reach ``level`` within the budget count as non-escapes
    and are reported through ``censored_fraction``.
    """
    plan = ReplicaPlan(env, SecondPassage(level, 0), replicas, base_seed, _LEAN, budget)
    rec = RecordFlags(hit_times=False, samples=None, passages=())

    def one(i):
        raw = _raw(plan, i, record=rec)
        reached = raw.maxpos >= level
        return reached and raw.censored, not reached
    vals = map_replicas(one, replicas, workers)
    esc = sum(v[0] for v in vals)
    unreached = sum(v[1] for v in vals) / replicas
    return proportion_estimate(esc, replicas, censored_fraction=unreached)


@dataclass(frozen=True)
class PhasePoint:
    M: int
    p: float
    speed_hat: EstimateWithCI
    escape_prob: EstimateWithCI
    leftover_density: Optional[EstimateWithCI]
    tail_alpha: Optional[EstimateWithCI]
    horizon: int = 0

    @property
    def delta(self) -> float:
        return self.M * (2 * self.p - 1)


def phase_point(M: int, p: float, horizons: Sequence[int], replicas: int, base_seed: int = 0,
                escape_budget: int = 10**6, leftover_sites: tuple[int, int] = (100, 2000),
                tail_sites: tuple[int, int] = (100, 1000), workers: int = 1) -> list[PhasePoint]:
    """All phase-diagram estimates at ``(M, p)``, one point per horizon.

    Leftover density and tail index are only computed on the transient
    side (``M(2p-1) > 1``).
    """
    env = Homogeneous(M, p)
    plan = ReplicaPlan(env, TimeHorizon(max(horizons)), replicas, base_seed)
    speeds = speed_estimate(plan, horizons, workers)
    esc = escape_probability(env, replicas, base_seed, budget=escape_budget, workers=workers)
    left = tail = None
    if env.delta > 1:
        left = leftover_density(replace(plan, stop=HitLevel(0)), leftover_sites, workers=workers)
        tail = crossing_tail(plan, tail_sites, [2], workers=workers, delta=env.delta).alpha
    return [PhasePoint(M, p, s, esc, left, tail, h) for s, h in zip(speeds, horizons)]


# --------------------------------------------------------------------------
# lemma bounds


@dataclass(frozen=True)
class LemmaReport:
    lemma: str
    params: dict
    empirical: EstimateWithCI
    bound: float
    passed: bool
    direction: str            # "upper": empirical <= bound, "lower": empirical >= bound
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"lemma": self.lemma, "params": self.params, "empirical": self.empirical.value,
                "stderr": self.empirical.stderr, "n": self.empirical.n,
                "method": self.empirical.method, "bound": self.bound, "pass": self.passed,
                "direction": self.direction, **self.extra}


def _spread_sites(lo: int, hi: int, k: int) -> list[int]:
    """``k`` distinct sites of ``[lo, hi]`` spaced as evenly as possible."""
    n = hi - lo + 1
    if k > n:
        raise ConfigError("params", f"cannot place {k} sites in [{lo}, {hi}]")
    if k == 0:
        return []
    return sorted({lo + (j * n) // k for j in range(k)})


def _cookie_env(counts: dict[int, int], p: float) -> EnvironmentSpec:
    stacks = {x: CookieStack.uniform(c, p) for x, c in counts.items() if c > 0}
    return Patched(Homogeneous(0, 0.5), tuple((x, x + 1, st) for x, st in sorted(stacks.items())))


def _place(total: int, lo: int, hi: int, placement: str, per_site_max: Optional[int] = None
           ) -> dict[int, int]:
    """Distribute ``total`` cookies over ``[lo, hi]``."""
    if total <= 0:
        return {}
    if placement == "origin":
        if not lo <= 0 <= hi:
            raise ConfigError("placement", "origin not inside the interval")
        return {0: total}
    if placement == "spread":
        n = hi - lo + 1
        per = -(-total // n)
        if per_site_max is not None and per > per_site_max:
            raise ConfigError("params", "too many cookies for the interval")
        k = -(-total // per)
        sites = _spread_sites(lo, hi, k)
        out = {x: per for x in sites}
        extra = per * len(sites) - total
        for x in sites[:extra]:
            out[x] -= 1
        return out
    raise ConfigError("placement", f"unknown placement {placement!r}")


def _stop_fraction(plan: ReplicaPlan, event: Callable[[RawRun], bool], workers: int,
                   record: RecordFlags = _LEAN) -> tuple[int, float]:
    def one(i):
        raw = _raw(plan, i, record=record)
        return event(raw), raw.censored
    vals = map_replicas(one, plan.replicas, workers)
    return sum(v[0] for v in vals), float(np.mean([v[1] for v in vals]))


@njit(cache=True)
def _lemma1_race(rng, cookies, p, thr, budget):
    """Race between hitting ``-N`` and eating ``thr`` cookies.

    ``cookies[j]`` is the stack height at ``-j`` for ``j < N``; there are no
    cookies right of the origin, so an excursion from 1 returns to 0 with
    probability one and changes nothing.  Such excursions are cut (1 maps
    back to 0), which keeps the law of the race and removes their
    heavy-tailed duration from the budget.  Returns 1 (hit ``-N``),
    0 (threshold reached) or -1 (censored).
    """
    left = cookies.copy()
    N = left.shape[0]
    x = 0
    eaten = 0
    for _ in range(budget):
        j = -x
        q = 0.5
        if left[j] > 0:
            left[j] -= 1
            eaten += 1
            q = p
        x += 1 if rng.random() < q else -1
        if x == -N:
            return 1
        if eaten >= thr:
            return 0
        if x == 1:
            x = 0
    return -1


def lemma5_product_bound(N: int, b: float, eps: float, p: float) -> float:
    """Finite-``N`` product ``prod_{i=1}^N (1 - (1+b(2p-1))/(N+i) - eps(2p-1)/N)``."""
    d = 2 * p - 1
    return math.prod(1 - (1 + b * d) / (N + i) - eps * d / N for i in range(1, N + 1))


def verify_lemma_bound(lemma_id: str, params: dict, replicas: int = 10000, base_seed: int = 0,
                       workers: int = 1, budget: int = 10**6, z: float = 3.0) -> LemmaReport:
    """Confront a lemma's probability bound with simulation (or exact values).

    Supported ids and their parameters:

    ``"1"``
        ``N, alpha, M, p`` and ``placement`` (``"spread"``): ``M`` cookies on
        ``ceil(alpha N)`` sites of ``(-N, 0]``.  Event: hit ``-N`` before
        eating ``M alpha N / 4`` cookies.  Upper bound ``2M/(alpha N)``.
        Excursions to the right of the origin are cut short (see
        :func:`_lemma1_race`); runs still censored count as events.
    ``"3"``
        ``N, c, gamma, p, placement`` (``"spread"`` or ``"origin"``):
        ``floor(gamma N)`` cookies in ``(-cN, N)``.  Event: hit ``-cN``
        before ``N``.  Lower bound ``(1 - gamma(2p-1))/(1 + c + 2/N)``.
        Solved exactly when the state space is small.
    ``"4"``
        ``N, gamma, p, placement``: fewer than ``gamma N`` cookies in
        ``(-N, N)``.  Event: still inside ``(-N, N]`` at time ``N^2/2``.
        The bound is only "some c0 > 0": passes when the Wilson lower
        limit is positive; the estimate is the reported ``c0``.
    ``"5"``
        ``k, N, eps, b, M, p``: environment meeting the block conditions
        with the maximal allowed counts.  Event: exit ``(-2^k, 2^k)`` left
        with fewer than ``eps 2^{k+1}`` cookies left in ``[-2^k, 2^k)``.
        Lower bound: the finite-``N`` product (the statement is a limit in
        ``k``).
    ``"cor1"``
        ``N, M1, p, eps, placement``: ``M1`` cookies on a quarter of the
        sites of ``(-N, 0)``.  Event: ``T_N < T_{-N}``.  Lower bound
        ``1 - eps``.
    """
    P = dict(params)
    lid = str(lemma_id)
    d = lambda p: 2 * p - 1  # noqa: E731
    if lid == "1":
        N, alpha, M, p = int(P["N"]), float(P["alpha"]), int(P["M"]), float(P.get("p", 0.7))
        k = math.ceil(alpha * N)
        if not 1 <= k <= N:
            raise ConfigError("alpha", "need 1 <= alpha N <= N sites in (-N, 0]")
        sites = _spread_sites(-N + 1, 0, k) if k < N else list(range(-N + 1, 1))
        thr = math.ceil(M * alpha * N / 4)
        stack = np.zeros(N, np.int64)
        stack[[-x for x in sites]] = M
        vals = map_replicas(lambda i: _lemma1_race(replica_rng(base_seed, i), stack, p, thr, budget),
                            replicas, workers)
        cen = float(np.mean([v == -1 for v in vals]))
        hits = sum(v != 0 for v in vals)
        est = proportion_estimate(hits, replicas, censored_fraction=cen)
        bound = 2 * M / (alpha * N)
        return LemmaReport(lid, P, est, bound, est.value - z * est.stderr <= bound, "upper")
    if lid == "3":
        N, c, gamma, p = int(P["N"]), float(P["c"]), float(P["gamma"]), float(P.get("p", 0.75))
        placement = P.get("placement", "spread")
        left = int(round(c * N))
        total = int(math.floor(gamma * N))
        counts = _place(total, -left + 1, N - 1, placement)
        env = _cookie_env(counts, p)
        bound = (1 - gamma * d(p)) / (1 + c + 2 / N)
        n_states = (left + N - 1) * math.prod(v + 1 for v in counts.values())
        if n_states <= 200_000:
            sol = oracle.solve(oracle.OracleProblem(-left, N, env, 0))
            est = EstimateWithCI(1 - sol.value, 0.0, sol.states, "exact")
            extra = {"residual": sol.residual}
        else:
            plan = ReplicaPlan(env, FirstOf((HitLevel(-left), HitLevel(N))), replicas, base_seed,
                               _LEAN, budget)
            hits, cen = _stop_fraction(plan, lambda r: r.x == -left, workers)
            est = proportion_estimate(hits, replicas, censored_fraction=cen)
            extra = {}
        return LemmaReport(lid, P, est, bound, est.value + z * est.stderr >= bound, "lower",
                           {"cookies": sum(counts.values()), **extra})
    if lid == "4":
        N, gamma, p = int(P["N"]), float(P["gamma"]), float(P.get("p", 0.75))
        if gamma * d(p) >= 1:
            raise ConfigError("gamma", "need gamma(2p-1) < 1")
        placement = P.get("placement", "spread")
        total = max(math.ceil(gamma * N) - 1, 0)
        env = _cookie_env(_place(total, -N + 1, N - 1, placement), p)
        horizon = N * N // 2
        plan = ReplicaPlan(env, FirstOf((HitLevel(-N), HitLevel(N + 1), TimeHorizon(horizon))),
                           replicas, base_seed, _LEAN, horizon)
        late, _ = _stop_fraction(plan, lambda r: r.reason == "time_horizon", workers)
        est = proportion_estimate(late, replicas)
        lo, _ = est.ci(0.997)
        return LemmaReport(lid, P, est, 0.0, lo > 0, "lower", {"c0": est.value})
    if lid == "5":
        k, N, eps, b, M, p = (int(P["k"]), int(P["N"]), float(P["eps"]), float(P["b"]),
                              int(P["M"]), float(P["p"]))
        if eps * d(p) > N ** -2:
            raise ConfigError("eps", "need eps(2p-1) <= N^-2")
        K = 2 ** k
        if K % N:
            raise ConfigError("N", "N must divide 2^k")
        w = K // N
        counts: dict[int, int] = {}
        for i in range(N):
            blk = _place(int(math.floor(b * w)), -(i + 1) * w + 1, -i * w, "spread", M)
            counts.update(blk)
        for x, v in _place(int(math.floor(eps * K)), 0, K - 1, "spread", M).items():
            counts[x] = counts.get(x, 0) + v
        env = _cookie_env(counts, p)
        plan = ReplicaPlan(env, FirstOf((HitLevel(-K), HitLevel(K))), replicas, base_seed,
                           _LEAN, budget)

        def event(raw: RawRun) -> bool:
            if raw.x != -K:
                return False
            return int(raw.leftover(-K, K - 1).sum()) < eps * 2 * K
        hits, cen = _stop_fraction(plan, event, workers)
        est = proportion_estimate(hits, replicas, censored_fraction=cen)
        bound = lemma5_product_bound(N, b, eps, p)
        return LemmaReport(lid, P, est, bound, est.value + z * est.stderr >= bound, "lower",
                           {"limit_bound": 2 ** -(1 + b * d(p))})
    if lid == "cor1":
        N, M1, p, eps = int(P["N"]), int(P["M1"]), float(P["p"]), float(P["eps"])
        placement = P.get("placement", "spread")
        k = math.ceil((N - 1) / 4)
        if placement == "spread":
            sites = _spread_sites(-N + 1, -1, k)
        elif placement == "far":
            sites = list(range(-N + 1, -N + 1 + k))
        else:
            raise ConfigError("placement", f"unknown placement {placement!r}")
        env = _cookie_env({x: M1 for x in sites}, p)
        plan = ReplicaPlan(env, FirstOf((HitLevel(-N), HitLevel(N))), replicas, base_seed,
                           _LEAN, budget)
        hits, cen = _stop_fraction(plan, lambda r: r.x == N, workers)
        est = proportion_estimate(hits, replicas, censored_fraction=cen)
        bound = 1 - eps
        return LemmaReport(lid, P, est, bound, est.value + z * est.stderr >= bound, "lower")
    raise ConfigError("lemma", f"unknown lemma id {lemma_id!r}")
