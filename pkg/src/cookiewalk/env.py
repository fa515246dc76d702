"""Cookie environments.

An environment assigns to every site ``x`` a finite stack of cookie
intensities (right-jump probabilities, each in ``(1/2, 1]``).  Each visit
to ``x`` consumes the top cookie; once a stack is empty the site behaves
like a symmetric walk (intensity exactly ``1/2``).

Specs are immutable and hashable.  :class:`EnvironmentState` holds the
mutable consumption counts for one walker.
"""
from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Union

import numpy as np

from .seeding import ENV_TAG, derive_seed_sequence

__all__ = [
    "ConfigError",
    "CookieStack",
    "Homogeneous",
    "OneSidedHomogeneous",
    "ErgodicRenewal",
    "Explicit",
    "Patched",
    "EnvironmentSpec",
    "EnvironmentState",
    "intensity_at",
    "consume",
    "materialize_renewal",
    "renewal_gap_law",
    "renewal_mean_cookies",
    "sigma_for_mean",
    "sigma_power_condition",
    "total_drift_per_site",
    "spec_to_dict",
    "spec_from_dict",
    "parse_env",
    "CompiledEnv",
    "compile_env",
]


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _check_intensity(q, field="intensity"):
    if not (0.5 < q <= 1.0):
        raise ConfigError(field, f"cookie intensity must lie in (1/2, 1], got {q!r}")


@dataclass(frozen=True)
class CookieStack:
    """Ordered cookie intensities at one site; index 0 is eaten first."""

    intensities: tuple[float, ...] = ()

    def __post_init__(self):
        vals = tuple(float(q) for q in self.intensities)
        for q in vals:
            _check_intensity(q)
        object.__setattr__(self, "intensities", vals)

    def __len__(self):
        return len(self.intensities)

    @classmethod
    def uniform(cls, count: int, q: float) -> "CookieStack":
        return cls((q,) * int(count))

    @property
    def drift(self) -> float:
        return sum(2.0 * q - 1.0 for q in self.intensities)


EMPTY = CookieStack()


# --------------------------------------------------------------------------
# spec variants


@dataclass(frozen=True)
class Homogeneous:
    """``M`` cookies of intensity ``p`` at every site."""

    M: int
    p: float

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 0:
            raise ConfigError("M", f"must be a non-negative integer, got {self.M!r}")
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "p", float(self.p))
        if self.M > 0:
            _check_intensity(self.p, "p")
        elif not (0.5 <= self.p <= 1.0):
            raise ConfigError("p", f"must lie in [1/2, 1], got {self.p!r}")

    @property
    def delta(self) -> float:
        return self.M * (2.0 * self.p - 1.0)

    def stack(self, x: int) -> CookieStack:
        return _uniform_stack(self.M, self.p)


@dataclass(frozen=True)
class OneSidedHomogeneous:
    """``M`` cookies of intensity ``p`` at sites ``>= boundary``; none to the left."""

    M: int
    p: float
    boundary: int = 0

    def __post_init__(self):
        Homogeneous(self.M, self.p)  # validation only
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "p", float(self.p))
        object.__setattr__(self, "boundary", int(self.boundary))

    @property
    def delta(self) -> float:
        return self.M * (2.0 * self.p - 1.0)

    def stack(self, x: int) -> CookieStack:
        return _uniform_stack(self.M, self.p) if x >= self.boundary else EMPTY


@dataclass(frozen=True)
class ErgodicRenewal:
    """Stationary-ergodic environment driven by a renewal process.

    Gap variables take the value 0 with probability ``sigma`` and ``2**n``
    (``2 <= n <= n_max``) with probability proportional to
    ``4**(-eps_tail * n)``.  Site ``x`` carries one cookie of intensity
    ``strength`` per renewal epoch located at ``x + 1``.
    """

    sigma: float
    eps_tail: float
    strength: float = 0.75
    n_max: int = 20
    env_seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.sigma < 1.0):
            raise ConfigError("sigma", f"must lie in (0, 1), got {self.sigma!r}")
        if not (0.5 < self.eps_tail < 1.0):
            raise ConfigError("eps_tail", f"must lie in (1/2, 1), got {self.eps_tail!r}")
        if int(self.n_max) != self.n_max or self.n_max < 2:
            raise ConfigError("n_max", f"must be an integer >= 2, got {self.n_max!r}")
        _check_intensity(self.strength, "strength")
        object.__setattr__(self, "n_max", int(self.n_max))
        object.__setattr__(self, "env_seed", int(self.env_seed))

    def stack(self, x: int) -> CookieStack:
        count = int(_renewal_counts(self, x, x)[0])
        return _uniform_stack(count, self.strength)


@dataclass(frozen=True)
class Explicit:
    """Arbitrary finite table of stacks; unlisted sites are empty."""

    stacks: tuple[tuple[int, CookieStack], ...] = ()

    def __post_init__(self):
        items = []
        seen = set()
        for x, st in self.stacks:
            x = int(x)
            if x in seen:
                raise ConfigError("stacks", f"site {x} listed twice")
            seen.add(x)
            if not isinstance(st, CookieStack):
                st = CookieStack(tuple(st))
            items.append((x, st))
        object.__setattr__(self, "stacks", tuple(sorted(items)))

    @classmethod
    def from_mapping(cls, stacks: Mapping[int, Union[CookieStack, Iterable[float]]]) -> "Explicit":
        return cls(tuple(stacks.items()))

    @functools.cached_property
    def table(self) -> dict[int, CookieStack]:
        return dict(self.stacks)

    def stack(self, x: int) -> CookieStack:
        return self.table.get(x, EMPTY)


@dataclass(frozen=True)
class Patched:
    """``base`` environment with half-open intervals ``[lo, hi)`` overwritten.

    Every site of an override interval receives the same template stack.
    """

    base: "EnvironmentSpec"
    overrides: tuple[tuple[int, int, CookieStack], ...] = ()

    def __post_init__(self):
        items = []
        for lo, hi, st in self.overrides:
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ConfigError("overrides", f"interval [{lo}, {hi}) is reversed")
            if not isinstance(st, CookieStack):
                st = CookieStack(tuple(st))
            items.append((lo, hi, st))
        items.sort()
        for (a0, b0, _), (a1, b1, _) in zip(items, items[1:]):
            if a1 < b0:
                raise ConfigError("overrides", f"intervals [{a0},{b0}) and [{a1},{b1}) overlap")
        object.__setattr__(self, "overrides", tuple(items))

    def override_at(self, x: int):
        for lo, hi, st in self.overrides:
            if lo <= x < hi:
                return st
        return None

    def stack(self, x: int) -> CookieStack:
        st = self.override_at(x)
        return self.base.stack(x) if st is None else st


EnvironmentSpec = Union[Homogeneous, OneSidedHomogeneous, ErgodicRenewal, Explicit, Patched]


@functools.lru_cache(maxsize=256)
def _uniform_stack(count: int, q: float) -> CookieStack:
    return CookieStack.uniform(count, q) if count > 0 else EMPTY


def total_drift_per_site(spec: EnvironmentSpec, x: int = 0) -> float:
    """Sum of ``2q - 1`` over the stack at ``x``."""
    return spec.stack(x).drift


# --------------------------------------------------------------------------
# renewal environment

_RENEWAL_CHUNK = 4096


def renewal_gap_law(spec: ErgodicRenewal) -> tuple[np.ndarray, np.ndarray]:
    """Support and probabilities of one gap variable.

    Reads the construction as a single law on ``{0} U {2**n : 2 <= n <= n_max}``
    with ``gamma`` normalising the truncated geometric tail.
    """
    ns = np.arange(2, spec.n_max + 1)
    w = 4.0 ** (-spec.eps_tail * ns)
    gamma = (1.0 - spec.sigma) / w.sum()
    values = np.concatenate([[0], 2 ** ns]).astype(np.int64)
    probs = np.concatenate([[spec.sigma], gamma * w])
    return values, probs


def renewal_mean_cookies(spec: ErgodicRenewal) -> float:
    """Mean number of cookies per site, ``1 / E[gap]``."""
    values, probs = renewal_gap_law(spec)
    return 1.0 / float(np.dot(values, probs))


def sigma_for_mean(target: float, eps_tail: float, n_max: int = 20) -> float:
    """Zero-gap probability giving exactly ``target`` cookies per site on average."""
    ns = np.arange(2, n_max + 1)
    w = 4.0 ** (-eps_tail * ns)
    mean_positive_gap = float(np.dot(2.0 ** ns, w) / w.sum())
    one_minus = 1.0 / (target * mean_positive_gap)
    if not (0.0 < one_minus < 1.0):
        raise ConfigError("sigma", f"no sigma in (0,1) reaches mean {target}")
    return 1.0 - one_minus


def sigma_power_condition(sigma: float, M: float) -> bool:
    """``sum_{n>=2} sigma**n >= M``.

    This is not sufficient for a mean of ``M`` cookies per site; use
    :func:`renewal_mean_cookies` to check the actual mean.
    """
    return sigma * sigma / (1.0 - sigma) >= M


def _renewal_side_counts(spec: ErgodicRenewal, side: int, extent: int) -> np.ndarray:
    """Renewal multiplicities at positions ``1..extent`` on one half-line.

    Gaps are drawn in fixed-size chunks from a side-specific stream, so the
    prefix is identical whatever ``extent`` is requested.
    """
    values, probs = renewal_gap_law(spec)
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    rng = np.random.Generator(np.random.PCG64(derive_seed_sequence(spec.env_seed, ENV_TAG, side)))
    counts = np.zeros(extent + 1, dtype=np.int64)
    pos = 0
    while pos <= extent:
        gaps = values[np.searchsorted(cdf, rng.random(_RENEWAL_CHUNK), side="right")]
        epochs = pos + np.cumsum(gaps)
        keep = epochs[(epochs >= 1) & (epochs <= extent)]
        np.add.at(counts, keep, 1)
        pos = int(epochs[-1])
    return counts[1:]


@functools.lru_cache(maxsize=16)
def _renewal_side_cached(spec: ErgodicRenewal, side: int, extent: int) -> np.ndarray:
    return _renewal_side_counts(spec, side, extent)


def _side_extent(n: int) -> int:
    # round up to a power of two so repeated queries hit the cache
    return max(1024, 1 << int(math.ceil(math.log2(max(n, 1)))))


def _renewal_counts(spec: ErgodicRenewal, x_lo: int, x_hi: int) -> np.ndarray:
    """Cookie counts for sites ``x_lo..x_hi`` (inclusive)."""
    out = np.zeros(x_hi - x_lo + 1, dtype=np.int64)
    if x_hi >= 0:
        # site x >= 0 takes the epochs at x + 1 of the right half
        a = max(x_lo, 0)
        right = _renewal_side_cached(spec, +1, _side_extent(x_hi + 1))
        out[a - x_lo:] = right[a:x_hi + 1]
    if x_lo < 0:
        # site x < 0 takes the epochs at -x of the mirrored left half
        b = min(x_hi, -1)
        left = _renewal_side_cached(spec, -1, _side_extent(-x_lo))
        sites = np.arange(x_lo, b + 1)
        out[: b - x_lo + 1] = left[-sites - 1]
    return out


def materialize_renewal(spec: ErgodicRenewal, x_lo: int, x_hi: int) -> dict[int, CookieStack]:
    """Stacks of the renewal environment on ``[x_lo, x_hi]``.

    Deterministic in ``spec.env_seed`` and consistent across overlapping
    windows.  Sites without cookies map to an empty stack.
    """
    if x_lo > x_hi:
        raise ConfigError("window", f"x_lo={x_lo} exceeds x_hi={x_hi}")
    counts = _renewal_counts(spec, x_lo, x_hi)
    return {x_lo + i: _uniform_stack(int(c), spec.strength) for i, c in enumerate(counts)}


# --------------------------------------------------------------------------
# mutable state


@dataclass
class EnvironmentState:
    """Consumption counts of one walker on top of an immutable spec."""

    spec: EnvironmentSpec
    consumed: dict[int, int] = field(default_factory=dict)
    cache: dict[int, CookieStack] = field(default_factory=dict)

    def stack(self, x: int) -> CookieStack:
        st = self.cache.get(x)
        if st is None:
            if isinstance(self.spec, ErgodicRenewal):
                lo = (x // 1024) * 1024
                self.cache.update(materialize_renewal(self.spec, lo, lo + 1023))
                st = self.cache[x]
            else:
                st = self.spec.stack(x)
                self.cache[x] = st
        return st

    def remaining(self, x: int) -> int:
        return len(self.stack(x)) - self.consumed.get(x, 0)

    def intensity_at(self, x: int) -> float:
        return intensity_at(self, x)

    def consume(self, x: int) -> None:
        consume(self, x)


def intensity_at(state: EnvironmentState, x: int) -> float:
    st = state.stack(x)
    c = state.consumed.get(x, 0)
    return st.intensities[c] if c < len(st) else 0.5


def consume(state: EnvironmentState, x: int) -> None:
    c = state.consumed.get(x, 0)
    if c < len(state.stack(x)):
        state.consumed[x] = c + 1


# --------------------------------------------------------------------------
# serialisation


def spec_to_dict(spec: EnvironmentSpec) -> dict:
    if isinstance(spec, Homogeneous):
        return {"variant": "homogeneous", "M": spec.M, "p": spec.p}
    if isinstance(spec, OneSidedHomogeneous):
        return {"variant": "onesided", "M": spec.M, "p": spec.p, "boundary": spec.boundary}
    if isinstance(spec, ErgodicRenewal):
        return {"variant": "renewal", "sigma": spec.sigma, "eps_tail": spec.eps_tail,
                "strength": spec.strength, "n_max": spec.n_max, "env_seed": spec.env_seed}
    if isinstance(spec, Explicit):
        return {"variant": "explicit",
                "stacks": {str(x): list(st.intensities) for x, st in spec.stacks}}
    if isinstance(spec, Patched):
        return {"variant": "patched", "base": spec_to_dict(spec.base),
                "overrides": [{"lo": lo, "hi": hi, "stack": list(st.intensities)}
                              for lo, hi, st in spec.overrides]}
    raise TypeError(f"not an environment spec: {spec!r}")


def _need(d: dict, key: str, prefix: str):
    if key not in d:
        raise ConfigError(prefix + key, "missing")
    return d[key]


def spec_from_dict(d: Mapping, prefix: str = "env.") -> EnvironmentSpec:
    if not isinstance(d, Mapping):
        raise ConfigError(prefix.rstrip("."), "expected a JSON object")
    variant = _need(d, "variant", prefix)
    try:
        if variant == "homogeneous":
            return Homogeneous(int(_need(d, "M", prefix)), float(_need(d, "p", prefix)))
        if variant == "onesided":
            return OneSidedHomogeneous(int(_need(d, "M", prefix)), float(_need(d, "p", prefix)),
                                       int(d.get("boundary", 0)))
        if variant == "renewal":
            return ErgodicRenewal(float(_need(d, "sigma", prefix)), float(_need(d, "eps_tail", prefix)),
                                  float(d.get("strength", 0.75)), int(d.get("n_max", 20)),
                                  int(d.get("env_seed", 0)))
        if variant == "explicit":
            stacks = _need(d, "stacks", prefix)
            if not isinstance(stacks, Mapping):
                raise ConfigError(prefix + "stacks", "expected an object keyed by site")
            return Explicit.from_mapping({int(k): CookieStack(tuple(v)) for k, v in stacks.items()})
        if variant == "patched":
            base = spec_from_dict(_need(d, "base", prefix), prefix + "base.")
            ov = []
            for i, o in enumerate(d.get("overrides", [])):
                p = f"{prefix}overrides[{i}]."
                ov.append((int(_need(o, "lo", p)), int(_need(o, "hi", p)),
                           CookieStack(tuple(_need(o, "stack", p)))))
            return Patched(base, tuple(ov))
    except ConfigError as err:
        if err.field.startswith(prefix):
            raise
        raise ConfigError(prefix + err.field, str(err).split(": ", 1)[-1]) from None
    except (TypeError, ValueError) as err:
        raise ConfigError(prefix.rstrip("."), str(err)) from None
    raise ConfigError(prefix + "variant", f"unknown variant {variant!r}")


def parse_env(text: str) -> EnvironmentSpec:
    """Parse a JSON document or a shorthand.

    Shorthands: ``homogeneous:M,p``, ``onesided:M,p[,boundary]`` and
    ``explicit:SITE=q1/q2;SITE=q1``.
    """
    text = text.strip()
    if text.startswith("{"):
        try:
            return spec_from_dict(json.loads(text))
        except json.JSONDecodeError as err:
            raise ConfigError("env", f"malformed JSON: {err}") from None
    kind, _, rest = text.partition(":")
    try:
        if kind == "homogeneous":
            M, p = rest.split(",")
            return Homogeneous(int(M), float(p))
        if kind == "onesided":
            parts = rest.split(",")
            return OneSidedHomogeneous(int(parts[0]), float(parts[1]),
                                       int(parts[2]) if len(parts) > 2 else 0)
        if kind == "explicit":
            stacks = {}
            for item in filter(None, rest.split(";")):
                site, _, qs = item.partition("=")
                stacks[int(site)] = CookieStack(tuple(float(q) for q in filter(None, qs.split("/"))))
            return Explicit.from_mapping(stacks)
    except ConfigError:
        raise
    except (ValueError, IndexError) as err:
        raise ConfigError("env", f"cannot parse {text!r}: {err}") from None
    raise ConfigError("env", f"unknown environment shorthand {text!r}")


# --------------------------------------------------------------------------
# flat representation for the compiled kernels

_FAR_LEFT = -(1 << 62)


@dataclass(frozen=True)
class CompiledEnv:
    """Array form of a spec over a window.

    Sites in ``[tbl_lo, tbl_lo + len(cnt))`` use the table (``cnt`` cookies
    starting at ``vals[ptr]``).  Other sites use the base rule: ``base_cnt``
    cookies starting at ``vals[base_ptr]`` when ``x >= base_from``.
    """

    tbl_lo: int
    cnt: np.ndarray
    ptr: np.ndarray
    vals: np.ndarray
    base_cnt: int
    base_ptr: int
    base_from: int

    def stack_len(self, x: int) -> int:
        i = x - self.tbl_lo
        if 0 <= i < len(self.cnt):
            return int(self.cnt[i])
        return self.base_cnt if x >= self.base_from else 0


def _table_from_stacks(stacks: list[CookieStack]):
    vals: list[float] = []
    offsets: dict[tuple, int] = {}
    cnt = np.zeros(len(stacks), dtype=np.int64)
    ptr = np.zeros(len(stacks), dtype=np.int64)
    for i, st in enumerate(stacks):
        key = st.intensities
        if key not in offsets:
            offsets[key] = len(vals)
            vals.extend(key)
        cnt[i] = len(key)
        ptr[i] = offsets[key]
    return cnt, ptr, vals


@functools.lru_cache(maxsize=64)
def compile_env(spec: EnvironmentSpec, lo: int, hi: int) -> CompiledEnv:
    """Compile ``spec`` for a walker confined to ``[lo, hi]``."""
    if isinstance(spec, (Homogeneous, OneSidedHomogeneous)):
        base_from = _FAR_LEFT if isinstance(spec, Homogeneous) else spec.boundary
        vals = np.full(max(spec.M, 1), spec.p)
        return CompiledEnv(0, np.zeros(0, np.int64), np.zeros(0, np.int64), vals,
                           spec.M, 0, base_from)
    if isinstance(spec, ErgodicRenewal):
        counts = _renewal_counts(spec, lo, hi)
        vals = np.full(max(int(counts.max(initial=0)), 1), spec.strength)
        return CompiledEnv(lo, counts.astype(np.int64), np.zeros(len(counts), np.int64),
                           vals, 0, 0, 0)
    if isinstance(spec, Explicit):
        sites = [x for x, _ in spec.stacks if lo <= x <= hi]
        if not sites:
            return CompiledEnv(0, np.zeros(0, np.int64), np.zeros(0, np.int64),
                               np.full(1, 0.5), 0, 0, 0)
        t_lo, t_hi = min(sites), max(sites)
        cnt, ptr, vals = _table_from_stacks([spec.stack(x) for x in range(t_lo, t_hi + 1)])
        return CompiledEnv(t_lo, cnt, ptr, np.array(vals or [0.5]), 0, 0, 0)
    if isinstance(spec, Patched):
        base = compile_env(spec.base, lo, hi)
        ov = [(max(a, lo), min(b, hi + 1), st) for a, b, st in spec.overrides
              if max(a, lo) < min(b, hi + 1)]
        if not ov:
            return base
        h_lo = min(a for a, _, _ in ov)
        h_hi = max(b for _, b, _ in ov) - 1
        if len(base.cnt):
            h_lo = min(h_lo, base.tbl_lo)
            h_hi = max(h_hi, base.tbl_lo + len(base.cnt) - 1)
        n = h_hi - h_lo + 1
        cnt = np.empty(n, np.int64)
        ptr = np.empty(n, np.int64)
        for i in range(n):
            x = h_lo + i
            j = x - base.tbl_lo
            if 0 <= j < len(base.cnt):
                cnt[i], ptr[i] = base.cnt[j], base.ptr[j]
            elif x >= base.base_from:
                cnt[i], ptr[i] = base.base_cnt, base.base_ptr
            else:
                cnt[i], ptr[i] = 0, 0
        vals = list(base.vals)
        for a, b, st in ov:
            off = len(vals)
            vals.extend(st.intensities)
            cnt[a - h_lo:b - h_lo] = len(st)
            ptr[a - h_lo:b - h_lo] = off
        return CompiledEnv(h_lo, cnt, ptr, np.array(vals), base.base_cnt, base.base_ptr,
                           base.base_from)
    raise TypeError(f"not an environment spec: {spec!r}")
