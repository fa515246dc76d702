"""Escape probability, speed and leftover density across the phase boundary.

Run with ``python demos/phase_diagram.py``; takes a couple of minutes.
"""
from cookiewalk.estimators import phase_point

POINTS = [(2, 0.7), (3, 0.7), (2, 0.9), (10, 0.9)]


def main():
    print(f"{'M':>3} {'p':>5} {'delta':>6} {'speed':>8} {'escape':>8} {'leftover':>9}")
    for M, p in POINTS:
        (pt,) = phase_point(M, p, [10**5], replicas=200, base_seed=1, escape_budget=10**5)
        left = "" if pt.leftover_density is None else f"{pt.leftover_density.value:.3f}"
        print(f"{M:>3} {p:>5} {pt.delta:>6.2f} {pt.speed_hat.value:>8.4f} "
              f"{pt.escape_prob.value:>8.3f} {left:>9}")


if __name__ == "__main__":
    main()
