"""Block process of a weakly excited walk coupled with a coarse cookie walk."""
from cookiewalk.blocks import BlockConfig, coupled_run, event_probabilities, smallest_M0


def main():
    eps, kappa, L, v = 0.05, 0.2, 2, 24
    ep = event_probabilities(BlockConfig(eps, kappa, L, v), replicas=2000)
    c1 = (ep.P_A_lower - 0.5) / kappa
    M0 = smallest_M0(0.5 + c1 * kappa)
    print(f"P(A1) min {ep.P_A1_min:.4f}, P(A2) upper {ep.P_A2_upper:.5f}, c1 {c1:.3f}, M0 {M0}")
    cfg = BlockConfig(eps, kappa, L, v, M0, c1)
    run = coupled_run(cfg, 10**5, seed=7)
    for k, val in run.summary().items():
        print(f"{k:>24}: {val}")
    print(run.fine.to_csv().splitlines()[:6])


if __name__ == "__main__":
    main()
