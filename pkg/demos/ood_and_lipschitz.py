# %% [markdown]
# Model head, median ensemble selection, the mixture-mass OOD rule, and
# bi-Lipschitz bounds of residual stacks.

# %%
import numpy as np

from dlcert.datamodel import LatentGaussian, OperatingRange
from dlcert.headens import HeadConfig, head_transform, ood_detect
from dlcert.lipschitz import (
    Composition,
    Dense,
    LeakyRelu,
    Residual,
    bilipschitz_bounds,
    empirical_lipschitz_probe,
    random_residual_net,
    singular_value_bounds,
)

# %%
head_transform(LatentGaussian(0.0, 1.0), -10, 10), head_transform(LatentGaussian(0.6745, 0.1), 0, 1)

# %%
cfg = HeadConfig(OperatingRange([0.0], [1.0]), [False])
agree = [[LatentGaussian(0.1, 0.05)] for _ in range(5)]
ood_detect(agree, cfg).outside_mass

# %%
# drag one member away and watch the outside mass cross 0.15
for shift in (0.0, 0.1, 0.2, 0.4):
    members = agree[:4] + [[LatentGaussian(0.1 + shift, 0.05)]]
    res = ood_detect(members, cfg)
    print(shift, round(res.outside_mass[0], 4), res.ood)

# %%
bilipschitz_bounds(Composition([Residual(0.1)] * 3))

# %%
W = np.random.default_rng(0).normal(size=(6, 6))
lo, hi = singular_value_bounds(W)
bilipschitz_bounds(Composition([Dense(lo, hi), LeakyRelu(0.1)]))

# %%
net = random_residual_net(8, 3, 0.1, seed=0)
empirical_lipschitz_probe(net, -np.ones(8), np.ones(8), 10_000, seed=0, batched=True)
