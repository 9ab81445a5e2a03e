"""Statistical tests for certifying uncertainty estimates, disentangled
representations and out-of-distribution rejection of learned models.

Modules
-------
statdist        distributions, prediction intervals, special functions
datamodel       evaluation records, JSONL loading and validation
calibration     calibration curves, PIT dispersion, subgroup aggregation
linmodel        OLS with p-values and the disentanglement tests
generalization  holdout retraining tests and ensemble disagreement
headens         latent-to-output head and the ensemble OOD rule
pairelbo        pairwise ELBO and a small affine VAE trainer
lipschitz       bi-Lipschitz bounds and an empirical probe
simstudy        seeded scenarios and the false-failure study
cli             ``dlcert`` command
"""

__version__ = "0.1.0"
