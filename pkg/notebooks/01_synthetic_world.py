"""
The synthetic world
===================

A seeded noise field assigns every point of a 32 km square one of eight
scene classes. Each location gets a ground photo (a horizon view whose
palette and skyline depend on the class) and aerial tiles at three zooms.
"""

# %%
import sys
from pathlib import Path

import numpy as np

from crossview.imageio import write_ppm
from crossview.synthworld import CLASS_NAMES, WorldSpec, render_pair, world_field

out = Path(sys.argv[1] if len(sys.argv) > 1 else "world_tour")
out.mkdir(parents=True, exist_ok=True)
world = WorldSpec(seed=0)
field = world_field(world)

# %% Class frequencies over uniform samples
rng = np.random.default_rng(0)
pts = rng.uniform(world.margin, world.extent - world.margin, (100_000, 2))
freq = np.bincount(field.classes(pts[:, 0], pts[:, 1]), minlength=8) / len(pts)
for name, f in zip(CLASS_NAMES, freq):
    print(f"{name:9s} {f:6.1%}")

# %% A coarse class map, one character per kilometre
xs = np.arange(500, world.extent, 1000.0)
grid = field.classes(xs[None, :] + 0 * xs[:, None], xs[::-1, None] + 0 * xs[None, :])
for row in grid:
    print("".join("~-.^:suM"[c] for c in row))

# %% One sample per class: ground view next to its three aerial zooms
for c in range(8):
    hit = np.flatnonzero(field.classes(pts[:2000, 0], pts[:2000, 1]) == c)[0]
    s = render_pair(world, tuple(pts[hit]), sample_id=c)
    strip = np.concatenate([s.ground_image] + [s.aerial_tiles[z] for z in world.zooms], axis=2)
    write_ppm(out / f"class{c}_{CLASS_NAMES[c]}.ppm", strip)
print("wrote", len(list(out.glob("*.ppm"))), "strips to", out)
