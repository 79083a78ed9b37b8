"""Print g(N) for the preventive-maintenance example and mark the optimum.

Usage: python3 scripts/maintenance_curve.py [slope ...]   (default slopes 0.01 0.001)
"""

import sys

from envq.models import MaintenanceSpec, optimize_maintenance


def curve(slope, n_max=100):
    spec = MaintenanceSpec(1.0, 1.5, lambda k: slope * k, 0.3, 0.1, c_m=1.0, c_r=2.0, c_b=1.0)
    return optimize_maintenance(spec, range(1, n_max + 1))


if __name__ == "__main__":
    slopes = [float(x) for x in sys.argv[1:]] or [0.01, 0.001]
    for slope in slopes:
        opt = curve(slope)
        print(f"# breakdown rate {slope} * k: N* = {opt.N_star}")
        print("N,g")
        for n, g in zip(opt.N, opt.g):
            print(f"{n},{float(g)!r}{'  <- min' if n == opt.N_star else ''}")
