"""
Convex hulls and the mixing ratio
=================================

The mixing ratio is the overlap of the two swarms' convex hulls as a share of
their union. This script builds the hulls by hand for one snapshot and checks
the number against ``mixing_ratio``.
"""

# %%
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from swarmwall.config import SimConfig
from swarmwall.geometry import convex_hull, convex_intersection, polygon_area, union_area
from swarmwall.metrics import mixing_ratio
from swarmwall.scenarios import ScenarioSpec
from swarmwall.sim import init_world

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

# %%
# A uniform start (Case 3) gives heavily overlapping hulls.
world = init_world(ScenarioSpec(3, 15, 15), SimConfig(), seed=3)
pa = world.positions[world.swarm == 0]
pb = world.positions[world.swarm == 1]
ha, hb = convex_hull(pa), convex_hull(pb)
inter = convex_intersection(ha, hb)

by_hand = 100.0 * polygon_area(inter) / union_area(ha, hb)
print(f"intersection {polygon_area(inter):.0f}, union {union_area(ha, hb):.0f}")
print(f"mixing by hand {by_hand:.3f}%  vs  mixing_ratio {mixing_ratio(pa, pb):.3f}%")

# %%
# Plot the two hulls and their overlap.
fig, ax = plt.subplots(figsize=(5, 5))
for pts, hull, c in ((pa, ha, "tab:blue"), (pb, hb, "tab:red")):
    ax.scatter(pts[:, 0], pts[:, 1], s=10, c=c)
    v = np.vstack([hull.vertices, hull.vertices[:1]])
    ax.plot(v[:, 0], v[:, 1], c=c)
ax.fill(inter.vertices[:, 0], inter.vertices[:, 1], color="grey", alpha=0.4)
ax.set_aspect("equal")
ax.set_title(f"mixing {by_hand:.1f}%")
fig.tight_layout()
fig.savefig(OUT / "hulls.png", dpi=120)
