"""What the co-learning head actually computes.

The branched network has four command branches (left, right, straight,
follow). A plain conditional network trains each branch only on its own
samples. The co-learning head mixes the branch outputs with an input-dependent
unit-diagonal matrix C, so gradient from any sample reaches every coupled
branch. With the head zeroed out the model is exactly the plain network.
"""
import numpy as np

from cicsteer.netarch import (ArchitectureConfig, COMMANDS, DEFAULT_R, Model)

cfg = ArchitectureConfig(head_mode="gtu")
model = Model(cfg)
model.init_params(seed=0)

rng = np.random.default_rng(0)
images = rng.random((1, 1, 48, 64))

# fresh head generators are zero, so C is the identity -> pure CIL
t = model.bind()
feats = model.shared_features(images, t)
C = model.colearn_matrix(feats, t).data[0]
print("C at init (identity = plain conditional network):")
print(np.round(C, 3))

cil = Model(ArchitectureConfig(head_mode="none"))
cil.init_params(seed=0)
gap = max(abs(model.predict(images[0], c) - cil.predict(images[0], c))
          for c in COMMANDS)
print(f"max |CIC@init - CIL| over commands: {gap:.2e}")

# nudge the gating generators and the coupling wakes up
for name in model.params:
    if name.startswith("head."):
        model.params[name] += rng.normal(size=model.params[name].shape) * 0.5
t = model.bind()
C = model.colearn_matrix(model.shared_features(images, t), t).data[0]
print("\nC with a non-trivial GTU head (off-diagonals in (-1, 1)):")
print(np.round(C, 3))

print("\nDEFAULT manual relationship matrix (left<->right, straight<->follow):")
print(DEFAULT_R.astype(int))

# the point of the coupling: a right-branch change leaks into "left" output
manual = Model(ArchitectureConfig(head_mode="manual", relationship=DEFAULT_R))
manual.init_params(seed=0)
manual.params["head.e.b"][:] = 0.5
before = manual.predict(images[0], "left")
manual.params["branch1.out.b"] += 0.2   # branch1 = right
after = manual.predict(images[0], "left")
print(f"\n'left' prediction before/after perturbing the right branch: "
      f"{before:+.4f} -> {after:+.4f}  (CIL would not move at all)")
