# %% [markdown]
# Calibration checks on synthetic forecasts: marginal curve, PIT dispersion,
# subgroup conditioning, and how many samples the curve test needs.

# %%
import numpy as np

from dlcert.calibration import (
    certify_uncertainty_quantification,
    compute_calibration_curve,
    pit_histogram,
    pit_values,
    test_calibration_curve,
    test_conditional_calibration,
)
from dlcert.simstudy import compute_failure_table, gen_conditional_failure, gen_perfect_calibration
from dlcert.statdist import NormalArray

# %%
ds = gen_perfect_calibration(100_000, seed=0)
curve = compute_calibration_curve(ds.y_pred[0], ds.y_obs[:, 0])
np.column_stack([curve.ps, curve.observed_frequencies])[::4]

# %%
# too narrow and too wide predictions for the same observations
obs = ds.y_obs[:, 0]
for sd in (0.5, 1.0, 2.0):
    preds = NormalArray(np.zeros(obs.size), np.full(obs.size, sd))
    pit = pit_values(preds, obs)
    print(sd, test_calibration_curve(preds, obs).passed, round(float(np.var(pit, ddof=1)), 4))

# %%
edges, counts = pit_histogram(pit_values(ds.y_pred[0], obs), 10)
counts

# %% [markdown]
# A constant N(0, 2) forecast is marginally right when x is ignored, and
# wrong once we condition on x.

# %%
cond = gen_conditional_failure(100_000, seed=0)
print(test_calibration_curve(cond.y_pred[0], cond.y_obs[:, 0]).passed)
res = test_conditional_calibration(cond, 0, n_min=10_000)
[(g["conditioning"][0]["lo"], g["conditioning"][0]["hi"], g["calibration_passed"]) for g in res.subgroups]

# %%
report = certify_uncertainty_quantification(cond)
report["status"], len(report["failing_subgroups"])

# %%
# false failures of a perfect model versus sample size (small trial count for speed)
table = compute_failure_table(n_grid=(10, 100, 1_000, 10_000), n_trials=50, seed=0)
table.frequencies
