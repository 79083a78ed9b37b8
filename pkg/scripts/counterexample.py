"""M/D/1 server fed by a (1, 2) lost-sales inventory: why no product form exists.

Compares the two ratios a product form would force, checks them against a
direct solve of the departure chain, and scans the replenishment rate.
"""

import numpy as np

from envq.mg1 import md1_inventory_counterexample, solve_counterexample_chain

if __name__ == "__main__":
    lam, mu = 1.0, 2.0
    print("nu, ratio_level0, ratio_level1, gap, rank_one_residual")
    for nu in [0.1, 0.5, 1.0, 3.0, 10.0, 100.0]:
        ce = md1_inventory_counterexample(lam, mu, nu)
        chain = solve_counterexample_chain(lam, mu, nu)
        print(f"{nu:g}, {ce.ratio_level0:.6f}, {ce.ratio_level1:.6f}, "
              f"{ce.ratio_level1 - ce.ratio_level0:+.2e}, {chain.rank_one_residual:.4e}")
    chain = solve_counterexample_chain(lam, mu, 3.0)
    cond = chain.pi_hat[:6] / chain.pi_hat[:6].sum(axis=1, keepdims=True)
    print("\nstock law given level after departure (nu = 3), columns stock 2, 1, 0:")
    print(np.array2string(cond, precision=5, suppress_small=True))
