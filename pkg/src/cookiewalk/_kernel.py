"""Compiled stepping loop shared by the walk, estimators and blocks modules.

The loop is resumable: all scalar state lives in ``ist``/``fst`` and the
per-site arrays cover the window ``[lo, lo + len(consumed))``.  When the
walker would step outside the window the loop returns with
``REASON_OUT`` and the caller grows the arrays before resuming.
"""
import numpy as np
from numba import njit

# ist layout
X, N, EATEN, MAXPOS, MINPOS, BUDGET, VCOUNT, SIDX, REASON, HORIZON, \
    VSITE, VTHR, CTHR, DEPTH, K0, LO, N0 = range(17)
IST_SIZE = 17

REASON_RUNNING = 0
REASON_LEVEL = 1
REASON_HORIZON = 2
REASON_VISITS = 3
REASON_COOKIES = 4
REASON_PASSAGE = 5
REASON_BUDGET = 6
REASON_OUT = 7

NO_LIMIT = np.int64(1) << np.int64(62)


@njit(nogil=True, cache=True)
def advance(rng, ist, fst, consumed,
            tbl_lo, cnt, ptr, vals, base_cnt, base_ptr, base_from,
            levels, pass_r, pass_s, pass_stop, pass_state, pass_time,
            hit_time, visits, exc, deep, sample_times, sample_x, sample_d, path):
    x = ist[X]
    n = ist[N]
    eaten = ist[EATEN]
    maxpos = ist[MAXPOS]
    minpos = ist[MINPOS]
    budget = ist[BUDGET]
    vcount = ist[VCOUNT]
    sidx = ist[SIDX]
    horizon = ist[HORIZON]
    vsite = ist[VSITE]
    vthr = ist[VTHR]
    cthr = ist[CTHR]
    depth = ist[DEPTH]
    k0 = ist[K0]
    lo = ist[LO]
    n0 = ist[N0]
    hi = lo + consumed.shape[0] - 1
    drift = fst[0]
    ntbl = cnt.shape[0]
    nlev = levels.shape[0]
    npass = pass_r.shape[0]
    nsamp = sample_times.shape[0]
    rec_hit = hit_time.shape[0] > 0
    rec_vis = visits.shape[0] > 0
    rec_exc = exc.shape[0] > 0
    rec_deep = deep.shape[0] > 0
    rec_path = path.shape[0] > 0
    reason = REASON_RUNNING

    while True:
        if n >= budget:
            reason = REASON_BUDGET
            break
        if x - 1 < lo or x + 1 > hi:
            reason = REASON_OUT
            break
        i = x - lo
        c = consumed[i]
        q = 0.5
        j = x - tbl_lo
        if 0 <= j < ntbl:
            if c < cnt[j]:
                q = vals[ptr[j] + c]
        elif x >= base_from and c < base_cnt:
            q = vals[base_ptr + c]
        if q != 0.5:
            consumed[i] = c + 1
            eaten += 1
            drift += 2.0 * q - 1.0
        if rng.random() < q:
            x += 1
        else:
            if rec_exc:
                exc[i] += 1
            x -= 1
        n += 1
        k = x - lo
        if x > maxpos:
            maxpos = x
        if x < minpos:
            minpos = x
        if rec_deep:
            y = x + depth
            if y <= maxpos and y <= hi:
                if exc[y - lo] <= k0:
                    deep[y - lo] = 1
        if rec_hit and hit_time[k] < 0:
            hit_time[k] = n
        if rec_vis:
            visits[k] += 1
        if rec_path and n - n0 < path.shape[0]:
            path[n - n0] = x
        if x == vsite:
            vcount += 1
        while sidx < nsamp and sample_times[sidx] == n:
            sample_x[sidx] = x
            sample_d[sidx] = drift
            sidx += 1
        for m in range(npass):
            if pass_state[m] == 0 and x == pass_r[m]:
                pass_state[m] = 1
            if pass_state[m] == 1 and x == pass_s[m]:
                pass_state[m] = 2
                pass_time[m] = n
                if pass_stop[m] and reason == REASON_RUNNING:
                    reason = REASON_PASSAGE
        for m in range(nlev):
            if x == levels[m]:
                reason = REASON_LEVEL
        if reason != REASON_RUNNING:
            break
        if vcount >= vthr:
            reason = REASON_VISITS
            break
        if eaten >= cthr:
            reason = REASON_COOKIES
            break
        if n >= horizon:
            reason = REASON_HORIZON
            break

    ist[X] = x
    ist[N] = n
    ist[EATEN] = eaten
    ist[MAXPOS] = maxpos
    ist[MINPOS] = minpos
    ist[VCOUNT] = vcount
    ist[SIDX] = sidx
    ist[REASON] = reason
    fst[0] = drift
