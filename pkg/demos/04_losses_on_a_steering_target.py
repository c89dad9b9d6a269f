"""The four ways this package turns a steering angle into a training target.

  mse      - plain regression on the scalar
  cce      - 9-class one-hot over steering bins (step 0.2 across [-0.8, 0.8])
  hybrid   - CCE plus W * (expected steering - label)^2
  coexist  - neighbouring classes get partial credit through a Gaussian
             co-existence matrix instead of a hard one-hot
  sine     - the label becomes the phase of a sampled sine wave
"""
import numpy as np

from cicsteer import losses

y = 0.33
print(f"steering label y = {y}")

k = losses.discretize(y)
print(f"\nclass midpoints: {np.round(losses.MIDPOINTS, 1)}")
print(f"discretize({y}) -> class {k} (midpoint {losses.MIDPOINTS[k]:+.1f})")

onehot = losses.one_hot([k])[0]
print("one-hot target:", onehot.astype(int))

mu = losses.coexistence_matrix()
print("\ncoexistence row for that class (Gaussian neighbour credit):")
print(np.round(mu[k], 3))

# a softmax prediction that's close-but-not-exact
scores = np.exp(-((np.arange(9) - (k + 0.7)) ** 2))
scores = scores / scores.sum()
print("\nexample prediction:", np.round(scores, 3))
print(f"expected-value decode: {losses.expected_steering_np(scores):+.3f} "
      f"(argmax decode: {losses.argmax_steering_np(scores):+.1f})")

# sine encoding: the label lives in the phase, the decode is two FFT bins
wave = losses.sine_encode(y)
print(f"\nsine target: {losses.SINE_SAMPLES} samples, "
      f"first few = {np.round(wave[:4], 3)}")
print(f"sine decode round trip: {losses.sine_decode(wave):+.4f}")

for yy in (-0.8, -0.1, 0.0, 0.45, 0.8):
    assert abs(losses.sine_decode(losses.sine_encode(yy)) - yy) < 1e-9
print("round trip exact for every label in [-0.8, 0.8]")
