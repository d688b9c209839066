"""Walk through a single slot: geometry, channels, estimation, precoding, reward.

Run with ``python3 notebooks/01_one_slot.py``.
"""

import numpy as np

from omnisurf import channel as chn
from omnisurf.env import EnvConfig, JointAction, SurfaceEnv
from omnisurf.ios import DEFAULT_ES_RATIOS, es_amplitude_from_ratio

psi_o, psi_b = chn.directional_cosines(chn.Geometry())
print(f"BS-surface directional cosines: {psi_o:.5f}, {psi_b:.5f}")

print("ES reflect amplitude per power ratio:")
for r in DEFAULT_ES_RATIOS:
    print(f"  {r:>6g} -> {es_amplitude_from_ratio(r)[0]:.4f}")

env = SurfaceEnv(EnvConfig(), seed=0)
obs = env.reset()
print("observation shapes:", obs.h_hat.shape, obs.phi_r_prev.shape, obs.phi_t_prev.shape)

n1, n2 = env.action_count()
print(f"{n1} phase increments x {n2} amplitude options")
for a2 in range(n2):
    _, reward, link = env.step(JointAction(n1 // 2, a2))
    rates = np.array2string(np.asarray(link.rate), precision=2)
    print(f"  amplitude {a2}: sum rate {link.sum_rate:6.3f}  reward {reward:7.3f}  per-UE {rates}")
