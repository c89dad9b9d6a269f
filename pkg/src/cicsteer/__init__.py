"""Conditional imitation co-learning for steering, at desk scale.

A self-contained stack: numpy-backed autodiff (numerics), branched network
with co-learning head (netarch), steering objectives (losses), a 2D driving
world with an expert autopilot (simtown), dataset plumbing (datapipe), the
training loop (trainer), the closed-loop benchmark (bench), and a CLI (cli).
"""

__version__ = "0.1.0"
