"""Drive the autopilot around town A and look at what the cameras see.

Run from the repo root:  python3 demos/01_drive_the_expert.py
Writes a couple of PGM frames next to this script so you can open them.
"""
import os

import numpy as np

from cicsteer import simtown as st
from cicsteer.datapipe import save_pgm

town = st.build_town("A", seed=0)
print(f"town A: {len(town.nodes)} nodes, "
      f"{len(town.intersections())} intersections")

# random drive with the steering-noise pulses we use for data collection
rng = np.random.default_rng(42)
route = st.random_route(town, rng, min_length=200.0)
noise = st.make_noise_schedule(np.random.default_rng(42), duration=30.0)
log = st.run_episode(town, route, st.CONDITIONS["noonClear"], seed=0,
                     duration=30.0, noise=noise,
                     cameras=("left", "front", "right"))

print(f"termination: {log.termination} after {log.elapsed:.1f}s, "
      f"{len(log.frames)} frames")

cmds = {}
for f in log.frames:
    cmds[f.command] = cmds.get(f.command, 0) + 1
print("command mix:", cmds)

steer = np.array([f.labels["front"] for f in log.frames])
print(f"expert steering: mean {steer.mean():+.3f}, "
      f"min {steer.min():+.2f}, max {steer.max():+.2f}")

# the noise pulses push the car around; the label stays the corrective value
executed = np.array([f.executed for f in log.frames])
print(f"largest |executed - label| (noise injection): "
      f"{np.abs(executed - steer).max():.2f}")

here = os.path.dirname(__file__)
mid = log.frames[len(log.frames) // 2]
for cam in ("left", "front", "right"):
    path = os.path.join(here, f"expert_{cam}.pgm")
    save_pgm(path, mid.images[cam])
    print("wrote", path)
