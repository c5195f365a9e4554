"""
Blending a local and an aggregate prediction
============================================

Each target coordinate mixes the prediction of a region model (which sees
a crop) with the whole-face model.  The mixing weight has a closed form;
here it is compared with a brute-force scan and tried on two typical
situations.
"""

import numpy as np

from f2p.ensemble import fit_weights_general, fit_weights_pair

rng = np.random.default_rng(1)
n = 300
target = rng.uniform(-1, 1, n)

# a sharp local model and a blurry aggregate: most weight goes local
local = target + rng.normal(scale=0.1, size=n)
aggregate = target + rng.normal(scale=0.4, size=n)
w = fit_weights_pair(local, aggregate, target)

grid = np.linspace(-2, 2, 40001)
err = ((grid[:, None] * local + (1 - grid[:, None]) * aggregate - target) ** 2).sum(axis=1)
print(f"closed form {w:.4f}, grid {grid[err.argmin()]:.4f}")

# a property the crop cannot see (say, where the nose sits on the face):
# the local model only knows the mean, so the aggregate takes over
blind_local = np.full(n, target.mean())
good_aggregate = target + rng.normal(scale=0.1, size=n)
print(f"blind local model weight {fit_weights_pair(blind_local, good_aggregate, target):+.4f}")

# against a noisy aggregate the constant is not useless: mixing it in
# shrinks the aggregate toward the mean
print(f"against the noisy aggregate {fit_weights_pair(blind_local, aggregate, target):+.4f}")

# with more than two contributors the weights still sum to one
third = target + rng.normal(scale=0.2, size=n)
weights = fit_weights_general(np.stack([local, aggregate, third], axis=1), target)
print(weights.round(4), weights.sum())
