"""
Guided DDIM sampling
====================

The guidance weight rises from 0 at t = 0 to ``beta`` at t = T along a
power-cosine curve.  Small ``gamma`` keeps it near ``beta`` for almost the
whole trajectory and drops it only at the very end.
"""

# %%
import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from objcompose import SamplerSchedule, dynamic_beta

t = np.linspace(0, 1000, 500)
fig, ax = plt.subplots(figsize=(5, 3))
for gamma in (0.01, 0.3, 1.0, 3.0):
    ax.plot(t, dynamic_beta(t, 1000, 2.0, gamma), label=f"gamma={gamma}")
ax.set_xlabel("t")
ax.set_ylabel("guidance weight")
ax.legend()
fig.savefig("guidance.png", dpi=100, bbox_inches="tight")

# %% The 50-step sampler visits these training timesteps.
sched = SamplerSchedule(ddim_steps=50)
print(sched.timesteps()[:6], "...", sched.timesteps()[-3:])
print("weights", np.round(sched.guidance()[[0, 25, 48, 49]], 4))
