"""Excited random walk: stepping, stopping rules and trajectory records.

The walker at ``x`` reads the top cookie of ``x`` (intensity ``q``, or 1/2
when the stack is empty), eats it, and jumps right with probability ``q``.
``drift_total`` accumulates ``2q - 1`` so that ``x - drift_total`` is a
martingale.

:func:`step` is a plain Python reference implementation.  :func:`run_until`
drives the compiled loop in :mod:`cookiewalk._kernel`; both draw exactly one
uniform per step from the same generator, so they produce identical paths.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import _kernel as K
from .env import EnvironmentSpec, EnvironmentState, compile_env, consume, intensity_at, spec_to_dict
from .seeding import make_rng, WALK_TAG

__all__ = [
    "WalkState",
    "new_walk",
    "step",
    "HitLevel",
    "TimeHorizon",
    "VisitCount",
    "CookiesEaten",
    "SecondPassage",
    "FirstOf",
    "StoppingCondition",
    "RecordFlags",
    "TrajectoryRecord",
    "RawRun",
    "simulate",
    "run_until",
    "gamma_event",
    "couple_with_symmetric",
    "geometric_grid",
    "DEFAULT_BUDGET",
]

DEFAULT_BUDGET = 10_000_000


@dataclass
class WalkState:
    env: EnvironmentState
    rng: np.random.Generator
    x: int = 0
    n: int = 0
    drift_total: float = 0.0
    eaten: int = 0

    @property
    def martingale(self) -> float:
        return self.x - self.drift_total


def new_walk(spec: EnvironmentSpec, seed: int = 0, start: int = 0, replica: int = 0) -> WalkState:
    return WalkState(EnvironmentState(spec), make_rng(seed, WALK_TAG, replica), x=start)


def step(state: WalkState) -> int:
    q = intensity_at(state.env, state.x)
    if q != 0.5:
        consume(state.env, state.x)
        state.eaten += 1
        state.drift_total += 2.0 * q - 1.0
    state.x += 1 if state.rng.random() < q else -1
    state.n += 1
    return state.x


# --------------------------------------------------------------------------
# stopping conditions


@dataclass(frozen=True)
class HitLevel:
    level: int


@dataclass(frozen=True)
class TimeHorizon:
    n_max: int


@dataclass(frozen=True)
class VisitCount:
    site: int
    threshold: int


@dataclass(frozen=True)
class CookiesEaten:
    count: int


@dataclass(frozen=True)
class SecondPassage:
    """Stop at the first visit to ``then`` at or after the first hit of ``first``."""

    first: int
    then: int


@dataclass(frozen=True)
class FirstOf:
    conditions: tuple

    def __post_init__(self):
        if not self.conditions:
            raise ValueError("FirstOf needs at least one condition")
        object.__setattr__(self, "conditions", tuple(self.conditions))


StoppingCondition = Union[HitLevel, TimeHorizon, VisitCount, CookiesEaten, SecondPassage, FirstOf]


def _flatten(stop) -> list:
    if isinstance(stop, FirstOf):
        out = []
        for c in stop.conditions:
            out.extend(_flatten(c))
        return out
    return [stop]


@dataclass(frozen=True)
class RecordFlags:
    hit_times: bool = True
    visits: bool = False
    leftover: bool = False
    excursions: bool = False
    deep_excursions: Optional[tuple[int, int]] = None  # (depth, k0)
    samples: Union[str, Sequence[int], None] = "geometric"
    path: bool = False
    passages: tuple[tuple[int, int], ...] = ()


def geometric_grid(limit: int) -> np.ndarray:
    """Times 1, 2, 4, ... not exceeding ``limit``."""
    out = []
    t = 1
    while t <= limit:
        out.append(t)
        t *= 2
    return np.array(out, dtype=np.int64)


_REASONS = {
    K.REASON_LEVEL: "hit_level",
    K.REASON_HORIZON: "time_horizon",
    K.REASON_VISITS: "visit_count",
    K.REASON_COOKIES: "cookies_eaten",
    K.REASON_PASSAGE: "second_passage",
    K.REASON_BUDGET: "censored",
}

_EMPTY_I64 = np.zeros(0, np.int64)
_EMPTY_I32 = np.zeros(0, np.int32)
_EMPTY_U8 = np.zeros(0, np.uint8)
_EMPTY_F64 = np.zeros(0, np.float64)


@dataclass
class RawRun:
    """Array-level output of :func:`simulate` (window ``[lo, lo + len)``)."""

    spec: EnvironmentSpec
    start: int
    n_start: int
    x: int
    n: int
    drift: float
    eaten: int
    reason: str
    lo: int
    minpos: int
    maxpos: int
    consumed: np.ndarray
    hit_time: np.ndarray
    visits: np.ndarray
    exc: np.ndarray
    deep: np.ndarray
    sample_times: np.ndarray
    sample_x: np.ndarray
    sample_d: np.ndarray
    path: np.ndarray
    passages: tuple
    pass_time: np.ndarray

    @property
    def censored(self) -> bool:
        return self.reason == "censored"

    @property
    def steps(self) -> int:
        return self.n - self.n_start

    def site_slice(self, a: int, b: int) -> slice:
        """Index range for sites ``a..b`` (inclusive), clipped to the window."""
        a = max(a, self.lo)
        b = min(b, self.lo + len(self.consumed) - 1)
        return slice(a - self.lo, max(b - self.lo + 1, a - self.lo))

    def stack_lengths(self, a: int, b: int) -> np.ndarray:
        cenv = compile_env(self.spec, a, b)
        sites = np.arange(a, b + 1)
        out = np.zeros(len(sites), np.int64)
        j = sites - cenv.tbl_lo
        inside = (j >= 0) & (j < len(cenv.cnt))
        out[inside] = cenv.cnt[j[inside]]
        out[~inside & (sites >= cenv.base_from)] = cenv.base_cnt
        return out

    def leftover(self, a: int, b: int) -> np.ndarray:
        """Cookies left at sites ``a..b`` (must lie inside the window)."""
        sl = self.site_slice(a, b)
        if sl.stop - sl.start != b - a + 1:
            raise ValueError(f"sites {a}..{b} not inside simulated window")
        return self.stack_lengths(a, b) - self.consumed[sl]


def _grow(arr: np.ndarray, old_lo: int, new_lo: int, new_len: int, fill) -> np.ndarray:
    if arr.shape[0] == 0:
        return arr
    out = np.full(new_len, fill, dtype=arr.dtype)
    off = old_lo - new_lo
    out[off:off + arr.shape[0]] = arr
    return out


def simulate(spec: EnvironmentSpec, rng: np.random.Generator, stop: StoppingCondition,
             record: RecordFlags = RecordFlags(), budget: Optional[int] = None, start: int = 0,
             consumed_init: Optional[dict] = None, n_start: int = 0, drift_start: float = 0.0,
             eaten_start: int = 0) -> RawRun:
    """Run the compiled loop until ``stop`` fires or the step budget runs out."""
    conds = _flatten(stop)
    levels, passages, stop_pass = [], [], []
    horizon = K.NO_LIMIT
    vsite, vthr, cthr = K.NO_LIMIT, K.NO_LIMIT, K.NO_LIMIT
    for c in conds:
        if isinstance(c, HitLevel):
            levels.append(int(c.level))
        elif isinstance(c, TimeHorizon):
            horizon = min(horizon, n_start + int(c.n_max))
        elif isinstance(c, VisitCount):
            if vsite != K.NO_LIMIT:
                raise ValueError("at most one VisitCount condition is supported")
            vsite, vthr = int(c.site), int(c.threshold)
        elif isinstance(c, CookiesEaten):
            cthr = min(cthr, eaten_start + int(c.count))
        elif isinstance(c, SecondPassage):
            passages.append((int(c.first), int(c.then)))
            stop_pass.append(True)
        else:
            raise TypeError(f"unknown stopping condition {c!r}")
    for pr in record.passages:
        passages.append((int(pr[0]), int(pr[1])))
        stop_pass.append(False)
    if budget is None:
        budget = DEFAULT_BUDGET if horizon == K.NO_LIMIT else horizon - n_start
    budget = int(budget)

    below = [lv for lv in levels if lv < start]
    above = [lv for lv in levels if lv > start]
    w0 = min(budget + 1, 4096)
    lo = max(max(below), start - w0) if below else start - w0
    hi = min(min(above), start + w0) if above else start + w0
    band_lo, band_hi = start - budget - 1, start + budget + 1
    lo, hi = max(lo, band_lo), min(hi, band_hi)

    if record.samples is None:
        st = _EMPTY_I64
    elif isinstance(record.samples, str):
        st = geometric_grid(budget) + n_start
    else:
        st = np.asarray(sorted(int(t) for t in record.samples), dtype=np.int64) + n_start
    sx = np.zeros(len(st), np.int64)
    sd = np.full(len(st), np.nan)
    path = np.zeros(budget + 1, np.int64) if record.path else _EMPTY_I64
    if record.path:
        path[0] = start

    size = hi - lo + 1
    consumed = np.zeros(size, np.int32)
    if consumed_init:
        for xx, c in consumed_init.items():
            if lo <= xx <= hi:
                consumed[xx - lo] = c
    hit_time = np.full(size, -1, np.int64) if record.hit_times else _EMPTY_I64
    visits = np.zeros(size, np.int64) if record.visits else _EMPTY_I64
    rec_exc = record.excursions or record.deep_excursions is not None
    exc = np.zeros(size, np.int32) if rec_exc else _EMPTY_I32
    deep = np.zeros(size, np.uint8) if record.deep_excursions is not None else _EMPTY_U8
    depth, k0 = record.deep_excursions if record.deep_excursions is not None else (0, 0)
    if len(visits):
        visits[start - lo] += 1

    pr = np.array([p[0] for p in passages], np.int64)
    ps = np.array([p[1] for p in passages], np.int64)
    pstop = np.array(stop_pass, np.bool_)
    pstate = np.zeros(len(passages), np.int64)
    ptime = np.full(len(passages), -1, np.int64)

    ist = np.zeros(K.IST_SIZE, np.int64)
    ist[K.X] = start
    ist[K.N] = n_start
    ist[K.EATEN] = eaten_start
    ist[K.MAXPOS] = start
    ist[K.MINPOS] = start
    ist[K.BUDGET] = n_start + budget
    ist[K.VCOUNT] = 1 if vsite == start else 0
    ist[K.HORIZON] = horizon
    ist[K.VSITE] = vsite
    ist[K.VTHR] = vthr
    ist[K.CTHR] = cthr
    ist[K.DEPTH] = depth
    ist[K.K0] = k0
    ist[K.LO] = lo
    ist[K.N0] = n_start
    fst = np.array([drift_start])
    levels_arr = np.array(levels, np.int64)

    while True:
        cenv = compile_env(spec, lo, hi)
        K.advance(rng, ist, fst, consumed, cenv.tbl_lo, cenv.cnt, cenv.ptr, cenv.vals,
                  cenv.base_cnt, cenv.base_ptr, cenv.base_from, levels_arr, pr, ps, pstop,
                  pstate, ptime, hit_time, visits, exc, deep, st, sx, sd, path)
        if ist[K.REASON] != K.REASON_OUT:
            break
        x = int(ist[K.X])
        new_lo, new_hi = lo, hi
        if x - 1 < lo:
            new_lo = max(band_lo, lo - 2 * (hi - lo + 1))
        if x + 1 > hi:
            new_hi = min(band_hi, hi + 2 * (hi - lo + 1))
        new_len = new_hi - new_lo + 1
        consumed_new = _grow(consumed, lo, new_lo, new_len, 0)
        if consumed_init:
            for xx, c in consumed_init.items():
                if new_lo <= xx <= new_hi and not (lo <= xx <= hi):
                    consumed_new[xx - new_lo] = c
        consumed = consumed_new
        hit_time = _grow(hit_time, lo, new_lo, new_len, -1)
        visits = _grow(visits, lo, new_lo, new_len, 0)
        exc = _grow(exc, lo, new_lo, new_len, 0)
        deep = _grow(deep, lo, new_lo, new_len, 0)
        lo, hi = new_lo, new_hi
        ist[K.LO] = lo

    sidx = int(ist[K.SIDX])
    return RawRun(spec=spec, start=start, n_start=n_start, x=int(ist[K.X]), n=int(ist[K.N]),
                  drift=float(fst[0]), eaten=int(ist[K.EATEN]), reason=_REASONS[int(ist[K.REASON])],
                  lo=lo, minpos=int(ist[K.MINPOS]), maxpos=int(ist[K.MAXPOS]), consumed=consumed,
                  hit_time=hit_time, visits=visits, exc=exc, deep=deep,
                  sample_times=st[:sidx] - n_start, sample_x=sx[:sidx], sample_d=sd[:sidx],
                  path=path[: int(ist[K.N]) - n_start + 1] if record.path else path,
                  passages=tuple(passages), pass_time=ptime)


# --------------------------------------------------------------------------
# records


@dataclass
class TrajectoryRecord:
    reason: str
    start: int
    x: int
    n: int
    drift: float
    eaten: int
    hit_times: dict[int, int] = field(default_factory=dict)
    second_passage: dict[tuple[int, int], int] = field(default_factory=dict)
    visits: dict[int, int] = field(default_factory=dict)
    leftover_cookies: dict[int, int] = field(default_factory=dict)
    excursion_counts: dict[int, int] = field(default_factory=dict)
    deep_excursion_sites: frozenset = frozenset()
    position_samples: list[tuple[int, int, float]] = field(default_factory=list)
    path: Optional[np.ndarray] = None
    header: dict = field(default_factory=dict)

    @property
    def censored(self) -> bool:
        return self.reason == "censored"

    @classmethod
    def from_raw(cls, raw: RawRun, record: RecordFlags) -> "TrajectoryRecord":
        rec = cls(reason=raw.reason, start=raw.start, x=raw.x, n=raw.n, drift=raw.drift,
                  eaten=raw.eaten)
        if len(raw.hit_time):
            idx = np.flatnonzero(raw.hit_time >= 0)
            rec.hit_times = dict(zip((idx + raw.lo).tolist(), raw.hit_time[idx].tolist()))
        for (r, s), t in zip(raw.passages, raw.pass_time.tolist()):
            if t >= 0:
                rec.second_passage[(r, s)] = t
        if len(raw.visits):
            idx = np.flatnonzero(raw.visits)
            rec.visits = dict(zip((idx + raw.lo).tolist(), raw.visits[idx].tolist()))
        if record.leftover:
            left = raw.leftover(raw.minpos, raw.maxpos)
            rec.leftover_cookies = dict(zip(range(raw.minpos, raw.maxpos + 1), left.tolist()))
        if record.excursions and len(raw.exc):
            idx = np.flatnonzero(raw.exc)
            rec.excursion_counts = dict(zip((idx + raw.lo).tolist(), raw.exc[idx].tolist()))
        if len(raw.deep):
            rec.deep_excursion_sites = frozenset((np.flatnonzero(raw.deep) + raw.lo).tolist())
        rec.position_samples = list(zip(raw.sample_times.tolist(), raw.sample_x.tolist(),
                                        raw.sample_d.tolist()))
        if record.path:
            rec.path = raw.path
        return rec

    def summary(self) -> dict:
        return {
            "header": self.header,
            "reason": self.reason,
            "start": self.start,
            "final": {"x": self.x, "n": self.n, "drift": self.drift, "eaten": self.eaten},
            "hit_times": {str(k): v for k, v in sorted(self.hit_times.items())},
            "second_passage": {f"{r}->{s}": t for (r, s), t in sorted(self.second_passage.items())},
            "visits": {str(k): v for k, v in sorted(self.visits.items())},
            "leftover_cookies": {str(k): v for k, v in sorted(self.leftover_cookies.items())},
            "excursion_counts": {str(k): v for k, v in sorted(self.excursion_counts.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=1)

    def samples_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "x", "drift"])
        for n, x, d in self.position_samples:
            w.writerow([n, x, repr(float(d))])
        return buf.getvalue()


def run_until(state: WalkState, stop: StoppingCondition, record: RecordFlags = RecordFlags(),
              budget: Optional[int] = None) -> TrajectoryRecord:
    """Advance ``state`` in place and return what was recorded along the way.

    Every run carries a hard step budget (``DEFAULT_BUDGET`` unless a
    :class:`TimeHorizon` or explicit ``budget`` is given); a run that
    exhausts it is tagged ``"censored"``.
    """
    raw = simulate(state.env.spec, state.rng, stop, record, budget=budget, start=state.x,
                   consumed_init=state.env.consumed, n_start=state.n,
                   drift_start=state.drift_total, eaten_start=state.eaten)
    state.x, state.n, state.drift_total, state.eaten = raw.x, raw.n, raw.drift, raw.eaten
    sl = raw.site_slice(raw.minpos, raw.maxpos)
    for i, c in zip(range(sl.start, sl.stop), raw.consumed[sl].tolist()):
        if c:
            state.env.consumed[raw.lo + i] = c
    rec = TrajectoryRecord.from_raw(raw, record)
    rec.header = {"env": spec_to_dict(state.env.spec)}
    return rec


# --------------------------------------------------------------------------
# the Gamma(e, n) event


def gamma_event(record: TrajectoryRecord, env_final: EnvironmentState, e: float, n: int,
                M1: int, x_shift: int = 0) -> Optional[bool]:
    """Tri-state indicator of the shifted event Gamma^x(e, n).

    (a) after the first hit of ``x+2n`` the walk reaches ``x+4n`` before
    ``x+n``; (b) at that moment at least ``e*n`` sites of ``(x+n, x+2n)``
    hold ``M1`` or more cookies.  ``record`` must carry hit times and the
    passage ``(x+2n, x+n)``; ``env_final`` must be the environment at the
    end of the run, which has to stop at ``T_{x+4n}`` for (b) to be read.
    Returns ``None`` when censoring leaves the event undecided.
    """
    a, b, c = x_shift + n, x_shift + 2 * n, x_shift + 4 * n
    t2 = record.hit_times.get(b)
    if t2 is None:
        return None
    back = record.second_passage.get((b, a))
    t4 = record.hit_times.get(c)
    if t4 is None:
        return False if back is not None else None
    if back is not None and back < t4:
        return False
    if record.n != t4:
        raise ValueError("environment snapshot must be taken at the first hit of x+4n")
    full = sum(1 for y in range(a + 1, b) if env_final.remaining(y) >= M1)
    return full >= e * n


# --------------------------------------------------------------------------
# coupling with a symmetric walk


def couple_with_symmetric(spec: EnvironmentSpec, rng: np.random.Generator, steps: int,
                          start: int = 0, reflected: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Drive the excited walk and a simple symmetric walk with the same uniforms.

    The excited walk jumps right iff ``U < q`` and the symmetric walk iff
    ``U < 1/2``.  Since ``q >= 1/2`` and the two paths keep the same
    parity, the excited path never falls below the symmetric one.  With
    ``reflected=True`` the symmetric walk is pushed right whenever it sits
    at ``start``; domination can then fail (see the tests).

    Returns the two paths ``(X_0..X_steps, Y_0..Y_steps)``.
    """
    saved = rng.bit_generator.state
    raw = simulate(spec, rng, TimeHorizon(steps),
                   RecordFlags(hit_times=False, samples=None, path=True), start=start)
    # the compiled loop draws exactly one uniform per step, so replaying the
    # saved generator state reproduces them
    replay = np.random.Generator(type(rng.bit_generator)())
    replay.bit_generator.state = saved
    u = replay.random(steps)
    if not reflected:
        y = start + np.concatenate(([0], np.cumsum(np.where(u < 0.5, 1, -1))))
    else:
        y = np.empty(steps + 1, np.int64)
        y[0] = cur = start
        for k in range(steps):
            cur += 1 if (cur == start or u[k] < 0.5) else -1
            y[k + 1] = cur
    return raw.path, y.astype(np.int64)
