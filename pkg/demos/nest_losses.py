"""The three NEST regularizers on matrices small enough to read.

1. Coverage: a 64 x 16 activation matrix whose spectrum decays over three
   decades has a handful of directions the batch barely uses. Gradient
   descent on the coverage loss alone lifts them until none is left below
   the threshold rho / C.
2. Targeted alignment: the prototype for a sample is a linear mix of its
   label neighbours, extrapolated along the label axis. Two neighbours at
   68 and 74 bpm give a 70 bpm prototype two thirds of the way to the first.
3. Diversity: the contrastive term is small when every sample is closest
   to its own augmented twin and grows as the twins get shuffled.
"""
import numpy as np

from nestrppg import ndmath as nd
from nestrppg.ndmath import Tensor
from nestrppg.nest import BatchNest, count_below_threshold, loss_cm, loss_dm, prototype_coefficients

rng = np.random.default_rng(0)

print("-- coverage --")
u, _ = np.linalg.qr(rng.standard_normal((64, 16)))
v, _ = np.linalg.qr(rng.standard_normal((16, 16)))
m = Tensor(u * np.geomspace(1, 1e-3, 16) @ v.T, requires_grad=True)
adam = nd.AdamState.for_params([m], lr=0.01)
for step in range(201):
    if step % 50 == 0:
        s = np.linalg.svd(m.data, compute_uv=False)
        lam = s / s.sum()
        print(f"step {step:3d}  below 0.1/16: {count_below_threshold(m.data, 0.1):2d}  "
              f"smallest normalized sv {lam.min():.5f}")
    m.grad = None
    loss_cm([m], rho=0.1).backward()
    nd.adam_step([m], [m.grad], adam)

print("\n-- targeted alignment --")
labels = np.array([70.0, 68.0, 74.0])
coef = prototype_coefficients(labels, K=2, sigma=5.0)
print("prototype of the 70 bpm sample =", " + ".join(f"{c:.4f}*O[{j}]" for j, c in enumerate(coef[0]) if c))
# the prototype lies on the line through its neighbours, at the right label
reps = np.array([[0.0, 0.0], [0.0, 1.0], [3.0, 1.0]])
print("neighbours at 68 and 74 bpm:", reps[1], reps[2], "-> prototype", coef[0] @ reps)

print("\n-- diversity --")
base = rng.random((12, 8))
twin = base + 0.05 * rng.standard_normal(base.shape)
hr = np.linspace(60, 120, 12)
for label, other in (("matched twins", twin), ("shuffled twins", twin[rng.permutation(12)])):
    value = loss_dm(BatchNest([Tensor(base)], hr), BatchNest([Tensor(other)], hr), tau=0.2).item()
    print(f"{label:<15} L_DM = {value:+.3f}")
