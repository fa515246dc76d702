"""Exact hit-right probability on a small window against simulation."""
from cookiewalk.env import CookieStack, Explicit
from cookiewalk.oracle import OracleProblem, expected_leftover, solve
from cookiewalk.seeding import WALK_TAG, make_rng
from cookiewalk.walk import FirstOf, HitLevel, RecordFlags, simulate


def main():
    env = Explicit.from_mapping({x: CookieStack((0.75, 0.75)) for x in (-2, -1, 0, 1, 2)})
    a, b, start = -3, 3, 0
    sol = solve(OracleProblem(a, b, env, start))
    left, _ = expected_leftover(OracleProblem(a, b, env, start))
    n = 20000
    stop = FirstOf((HitLevel(a), HitLevel(b)))
    lean = RecordFlags(hit_times=False, samples=None)
    hits = sum(simulate(env, make_rng(0, WALK_TAG, i), stop, lean, start=start).x == b
               for i in range(n))
    print(f"exact P(hit {b} before {a}) = {sol.value:.6f} (residual {sol.residual:.1e}, "
          f"{sol.states} states)")
    print(f"Monte Carlo over {n} runs    = {hits / n:.6f}")
    print("expected leftover cookies:", {x: round(v, 4) for x, v in left.items()})


if __name__ == "__main__":
    main()
