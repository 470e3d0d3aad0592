"""
What a crossfire attack looks like on the monitored links
=========================================================

Run with ``python demos/01_crossfire_traffic.py``.
"""

# %%
import numpy as np

from crossfire import ScenarioConfig, build_topology, run_scenario

config = ScenarioConfig(seed=0)
topology = build_topology(config)
print(topology.describe())

# %%
# Columns of the sample matrix follow ``topology.monitored``; the pivotal
# link carries everything headed for the server side.
samples = run_scenario(config)
t = np.array([s.timestamp for s in samples])
flows = np.stack([s.flows for s in samples])
sizes = np.stack([s.sizes for s in samples])
pivotal = topology.monitored.index(topology.pivotal_links[0])
a0, a1 = config.attack_window
before = t < a0
during = (t >= a0) & (t < a1)
print(f"pivotal link {topology.pivotal_links[0]}:")
print(f"  mean flows   before {flows[before, pivotal].mean():6.2f}  during {flows[during, pivotal].mean():6.2f}")
print(f"  mean Kbit/dt before {sizes[before, pivotal].mean():8.1f}  during {sizes[during, pivotal].mean():8.1f}")

# %%
# The bots ramp their rate inside every group slot, so the attack share of
# the pivotal link grows within each slot and drops at the hand-over.
quiet = run_scenario(config.replace(attack_window=None))
extra = sizes[:, pivotal] - np.array([s.sizes[pivotal] for s in quiet])
for start in np.arange(a0, a1, 300.0):
    sel = (t >= start) & (t < start + 300.0)
    print(f"  [{start:6.0f}, {start + 300:6.0f}) attack Kbit/dt on pivotal link {extra[sel].mean():7.2f}")
