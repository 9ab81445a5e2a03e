# %% [markdown]
# Weakly supervised toy: pairs of inputs share one content factor, an affine
# VAE is trained with the pairwise loss, and its latents go through the
# regression-based disentanglement checks.

# %%
import numpy as np

from dlcert.linmodel import test_1_to_1_mapping, test_content_style_separation
from dlcert.pairelbo import export_latents, latent_grid, roundtrip_consistency, toy_train
from dlcert.simstudy import gen_toy_disentangled, gen_toy_latents

# %%
# latents that are a noisy permutation of the factors pass most of the time
ds = gen_toy_latents(1000, seed=0)
out = test_1_to_1_mapping(ds.latent_mu[:, 0, :], ds.v_content)
out.passed, out.details["recovered_indices"], ds.metadata["permutation"]

# %%
bad = gen_toy_latents(1000, seed=0, entangled=True)
test_1_to_1_mapping(bad.latent_mu[:, 0, :], bad.v_content).details["reason"]

# %%
problem = gen_toy_disentangled(2000, k=2, l=1, seed=0)
result = toy_train(problem, 500, seed=0, lr=0.1)
result.smoothed_trace(50)[::90]

# %%
latents = export_latents(result.model, problem)
z = latents.latent_mu[:, 0, :]
np.round(np.corrcoef(np.hstack([z, problem.factors_lhs]).T)[:3, 3:], 2)

# %%
# posterior sd per latent: values near 1 mean the latent ignores its input
result.model.encode(problem.lhs)[1].mean(axis=0)

# %%
print(test_1_to_1_mapping(z, latents.v_content).details["n_significant"])
print(test_content_style_separation(z[:, :2], z[:, 2:], latents.v_style).passed)

# %%
# a stronger observation gain over more pixels keeps the latents informative
strong = gen_toy_disentangled(2000, k=2, l=1, seed=0, d=64, gain=0.2)
res2 = toy_train(strong, 300, seed=0, lr=0.02)
res2.model.encode(strong.lhs)[1].mean(axis=0)

# %%
rt = roundtrip_consistency(res2.model.encode_mean, res2.model.decode, latent_grid(3, 5))
rt.max_deviation, rt.mean_deviation
