"""Exact hitting probabilities and visit counts on bounded windows.

A cookie walk confined to ``(a, b)`` and absorbed at ``a`` and ``b`` is a
finite absorbing Markov chain on states ``(position, consumption profile)``.
The profile records how many cookies have been eaten at each interior site
and is encoded as a mixed-radix integer.  Only states reachable from the
start are kept, and the first-step equations are solved with a sparse
direct solver.

:func:`brute_force_hit` computes the same hit probability by propagating
path mass step by step and shares no code with the linear solver.
:func:`birth_death_hit` gives the closed-form ruin probability of a
memoryless nearest-neighbour chain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order
from scipy.sparse.linalg import splu

from .env import ConfigError, EnvironmentSpec

__all__ = [
    "HitRightProb",
    "ExpectedVisits",
    "MeanAbsorptionTime",
    "OracleProblem",
    "OracleSolution",
    "OracleSizeError",
    "OracleNumericError",
    "solve",
    "expected_leftover",
    "brute_force_hit",
    "BirthDeathSpec",
    "birth_death_hit",
    "DEFAULT_STATE_CAP",
    "RESIDUAL_TOL",
]

DEFAULT_STATE_CAP = 10_000_000
RESIDUAL_TOL = 1e-12


class OracleSizeError(ValueError):
    """The state space exceeds the configured cap."""


class OracleNumericError(ArithmeticError):
    """The linear solve did not reach the residual tolerance."""

    def __init__(self, residual: float):
        super().__init__(f"linear solve residual {residual:.3e} exceeds {RESIDUAL_TOL:.0e}")
        self.residual = residual


@dataclass(frozen=True)
class HitRightProb:
    pass


@dataclass(frozen=True)
class ExpectedVisits:
    """Expected number of times ``n >= 0`` with ``X_n = site`` before absorption."""

    site: int


@dataclass(frozen=True)
class MeanAbsorptionTime:
    pass


Query = Union[HitRightProb, ExpectedVisits, MeanAbsorptionTime]


@dataclass(frozen=True)
class OracleProblem:
    """Walk on ``[a, b]`` started at ``start`` and absorbed at ``a`` or ``b``.

    ``background`` optionally assigns a right-jump probability in ``(0, 1)``
    to sites whose stacks are empty (default 1/2).  With an environment
    without cookies this turns the problem into a birth-death chain.
    """

    a: int
    b: int
    env: EnvironmentSpec
    start: int
    query: Query = HitRightProb()
    background: tuple = ()
    cap: int = DEFAULT_STATE_CAP

    def __post_init__(self):
        if not self.a < self.start < self.b:
            raise ConfigError("start", f"need a < start < b, got {self.a}, {self.start}, {self.b}")
        bg = tuple(sorted(dict(self.background).items()))
        for x, q in bg:
            if not 0.0 < q < 1.0:
                raise ConfigError("background", f"probability at {x} must lie in (0, 1)")
        object.__setattr__(self, "background", bg)

    def interior(self) -> range:
        return range(self.a + 1, self.b)


@dataclass(frozen=True)
class OracleSolution:
    value: float
    residual: float
    states: int

    def to_dict(self) -> dict:
        return {"value": self.value, "residual": self.residual, "states": self.states}


@dataclass
class _Chain:
    Q: sp.csr_matrix           # transient -> transient
    exit_right: np.ndarray     # one-step absorption probability at b
    exit_left: np.ndarray
    pos: np.ndarray            # site of each transient state
    after: np.ndarray          # profile code after the cookie at pos is eaten
    start_index: int
    sites: np.ndarray
    stack_len: np.ndarray
    radix: np.ndarray


def _build_chain(problem: OracleProblem) -> _Chain:
    sites = np.array(list(problem.interior()), dtype=np.int64)
    stacks = [problem.env.stack(int(x)) for x in sites]
    lens = np.array([len(s) for s in stacks], dtype=np.int64)
    nprof = 1
    for m in lens:
        nprof *= int(m) + 1
        if nprof * len(sites) > problem.cap:
            raise OracleSizeError(f"state count exceeds cap {problem.cap}")
    radix = np.ones(len(sites), dtype=np.int64)
    for i in range(1, len(sites)):
        radix[i] = radix[i - 1] * (lens[i - 1] + 1)
    bg = dict(problem.background)
    bgq = np.array([bg.get(int(x), 0.5) for x in sites])
    width = max(int(lens.max(initial=0)), 1)
    table = np.full((len(sites), width), np.nan)
    for i, s in enumerate(stacks):
        table[i, :len(s)] = s.intensities

    npos = len(sites)
    total = npos * nprof
    idx = np.arange(total, dtype=np.int64)
    pi = idx // nprof
    prof = idx % nprof
    digit = (prof // radix[pi]) % (lens[pi] + 1)
    fresh = digit < lens[pi]
    q = np.where(fresh, table[pi, np.minimum(digit, width - 1)], bgq[pi])
    after = prof + np.where(fresh, radix[pi], 0)

    right_in = pi + 1 < npos
    left_in = pi - 1 >= 0
    rows = np.concatenate([idx[right_in], idx[left_in]])
    cols = np.concatenate([(pi[right_in] + 1) * nprof + after[right_in],
                           (pi[left_in] - 1) * nprof + after[left_in]])
    vals = np.concatenate([q[right_in], 1.0 - q[left_in]])
    full = sp.csr_matrix((vals, (rows, cols)), shape=(total, total))

    s0 = (problem.start - problem.a - 1) * nprof
    order = breadth_first_order(full, s0, directed=True, return_predecessors=False)
    keep = np.sort(order)
    Q = full[keep][:, keep].tocsr()
    start_index = int(np.searchsorted(keep, s0))
    exit_right = np.where(right_in[keep], 0.0, q[keep])
    exit_left = np.where(left_in[keep], 0.0, 1.0 - q[keep])
    return _Chain(Q, exit_right, exit_left, pi[keep], after[keep], start_index, sites, lens, radix)


def _solve_checked(A: sp.csr_matrix, rhs: np.ndarray) -> tuple[np.ndarray, float]:
    lu = splu(A.tocsc())
    x = lu.solve(rhs)
    x += lu.solve(rhs - A @ x)  # one step of iterative refinement
    res = float(np.max(np.abs(A @ x - rhs), initial=0.0))
    if not np.all(np.isfinite(x)) or res > RESIDUAL_TOL:
        raise OracleNumericError(res)
    return x, res


def solve(problem: OracleProblem) -> OracleSolution:
    """Exact answer to ``problem.query`` with the solver residual."""
    ch = _build_chain(problem)
    n = ch.Q.shape[0]
    A = (sp.identity(n, format="csr") - ch.Q).tocsr()
    qry = problem.query
    if isinstance(qry, HitRightProb):
        h, res = _solve_checked(A, ch.exit_right)
        return OracleSolution(float(h[ch.start_index]), res, n)
    if isinstance(qry, MeanAbsorptionTime):
        t, res = _solve_checked(A, np.ones(n))
        return OracleSolution(float(t[ch.start_index]), res, n)
    if isinstance(qry, ExpectedVisits):
        g, res = _occupation(A, ch)
        mask = ch.sites[ch.pos] == qry.site
        return OracleSolution(float(g[mask].sum()), res, n)
    raise TypeError(f"unknown query {qry!r}")


def _occupation(A: sp.csr_matrix, ch: _Chain) -> tuple[np.ndarray, float]:
    e = np.zeros(A.shape[0])
    e[ch.start_index] = 1.0
    return _solve_checked(A.T.tocsr(), e)


def expected_leftover(problem: OracleProblem) -> tuple[dict[int, float], float]:
    """Expected cookies left at each interior site when the walk is absorbed.

    Returns the per-site map and the solver residual.  Sites ``a`` and ``b``
    are never left, so their cookies are ignored.
    """
    ch = _build_chain(problem)
    A = (sp.identity(ch.Q.shape[0], format="csr") - ch.Q).tocsr()
    g, res = _occupation(A, ch)
    w = g * (ch.exit_right + ch.exit_left)
    out = {}
    for i, x in enumerate(ch.sites.tolist()):
        eaten = (ch.after // ch.radix[i]) % (ch.stack_len[i] + 1)
        out[x] = float(np.dot(w, ch.stack_len[i] - eaten))
    return out, res


def brute_force_hit(a: int, b: int, env: EnvironmentSpec, start: int, tol: float = 1e-15,
                    max_steps: int = 1_000_000, background: Optional[Mapping[int, float]] = None
                    ) -> float:
    """Hit-right probability by step-by-step propagation of path mass.

    Every state ``(x, eaten-tuple)`` carries the total probability of the
    paths that are there at time ``n``; mass reaching ``b`` is summed.  The
    loop stops once the unabsorbed mass falls below ``tol``, and the result
    is within ``tol`` of the truth.
    """
    bg = dict(background or {})
    stacks = {x: env.stack(x).intensities for x in range(a + 1, b)}
    mass = {(start, tuple(0 for _ in range(a + 1, b))): 1.0}
    right = 0.0
    for _ in range(max_steps):
        nxt: dict = {}
        for (x, eaten), m in mass.items():
            k = x - a - 1
            stack = stacks[x]
            if eaten[k] < len(stack):
                q = stack[eaten[k]]
                eaten = eaten[:k] + (eaten[k] + 1,) + eaten[k + 1:]
            else:
                q = bg.get(x, 0.5)
            for y, w in ((x + 1, q), (x - 1, 1.0 - q)):
                if w == 0.0:
                    continue
                if y == b:
                    right += m * w
                elif y != a:
                    key = (y, eaten)
                    nxt[key] = nxt.get(key, 0.0) + m * w
        mass = nxt
        if math.fsum(mass.values()) < tol:
            return right
    raise OracleNumericError(math.fsum(mass.values()))


# --------------------------------------------------------------------------
# birth-death chains


@dataclass(frozen=True)
class BirthDeathSpec:
    """Nearest-neighbour chain on ``[lo, hi]`` absorbed at both ends.

    ``q`` maps interior sites to right-jump probabilities; missing sites
    jump right with probability ``default``.
    """

    lo: int
    hi: int
    start: int
    q: tuple = ()
    default: float = 0.5
    rounding: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if not self.lo < self.start < self.hi:
            raise ConfigError("start", f"need lo < start < hi, got {self.lo}, {self.start}, {self.hi}")
        q = tuple(sorted(dict(self.q).items()))
        for x, v in q + ((None, self.default),):
            if not 0.0 < v < 1.0:
                raise ConfigError("q", f"probability at {x} must lie in (0, 1)")
        object.__setattr__(self, "q", q)

    def prob(self, x: int) -> float:
        return dict(self.q).get(x, self.default)

    @classmethod
    def biased_region(cls, eps: float, kappa: float, L: float, start: int = 0) -> "BirthDeathSpec":
        """Walker biased by ``eps`` on ``[-K, K]`` racing to ``(L+kappa)/eps``
        against ``(-L+kappa)/eps``, with ``K = kappa/eps``.

        All three lengths are rounded to the nearest integer (``K >= 1``);
        the rounding is kept in ``rounding``.
        """
        K = _round_len(kappa / eps, "kappa/eps")
        hi = int(round((L + kappa) / eps))
        lo = int(round((-L + kappa) / eps))
        if not lo < -K:
            raise ConfigError("L", "lower target must lie left of the biased region")
        q = tuple((x, 0.5 + eps) for x in range(-K, K + 1))
        rnd = (("kappa/eps", kappa / eps, K), ("(L+kappa)/eps", (L + kappa) / eps, hi),
               ("(-L+kappa)/eps", (-L + kappa) / eps, lo))
        return cls(lo, hi, start, q, 0.5, rnd)

    def problem(self) -> OracleProblem:
        """The same chain as a cookie-free :class:`OracleProblem`."""
        from .env import Explicit
        bg = {x: self.prob(x) for x in range(self.lo + 1, self.hi)}
        return OracleProblem(self.lo, self.hi, Explicit(()), self.start, HitRightProb(),
                             tuple(bg.items()))


def _round_len(value: float, name: str) -> int:
    r = int(round(value))
    if r < 1:
        raise ConfigError(name, f"{name} = {value:g} rounds below one site")
    return r


def birth_death_hit(spec: BirthDeathSpec) -> float:
    """``P(hit hi before lo)`` from ``start``.

    With ``rho_j = (1 - q_j)/q_j`` and ``S_k = sum_{i=lo+1}^{k} log rho_i``
    the answer is ``sum_{k=lo}^{start-1} e^{S_k} / sum_{k=lo}^{hi-1} e^{S_k}``.
    Both sums are taken after subtracting the largest exponent, with
    ``math.fsum``, so no intermediate overflows.
    """
    logs = [0.0]
    acc = 0.0
    for x in range(spec.lo + 1, spec.hi):
        q = spec.prob(x)
        acc += math.log1p(-q) - math.log(q)
        logs.append(acc)
    top = max(logs)
    terms = [math.exp(v - top) for v in logs]
    k = spec.start - spec.lo
    return math.fsum(terms[:k]) / math.fsum(terms)
