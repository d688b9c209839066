"""Short side-by-side run of every scheme at desk scale.

A few thousand slots are enough to see the learners leave the random
baseline behind. Convergence usually needs longer horizons; see the
acceptance tests. Run with ``python3 notebooks/02_schemes.py [slots]``.
"""

import sys
import time

from omnisurf.harness import desk_config, run

slots = int(sys.argv[1]) if len(sys.argv) > 1 else 3000

print(f"{'mode':<18}{'tail mean':>10}{'mean':>8}{'converged at':>14}{'wall s':>8}")
for mode in ("random", "mab", "deepios", "deepios_no_branch", "deepios_twin"):
    t0 = time.perf_counter()
    res = run(desk_config(mode=mode, seed=0, horizon=slots))
    conv = "-" if res.convergence_slot is None else str(res.convergence_slot)
    print(f"{mode:<18}{res.tail_mean:>10.3f}{res.rates.mean():>8.3f}{conv:>14}"
          f"{time.perf_counter() - t0:>8.0f}")
