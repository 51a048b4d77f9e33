# %% [markdown]
# # Accuracy versus reduction on a synthetic feeder
#
# Generate a 300-node unbalanced feeder and reduce it at several error
# bounds. Looser bounds allow more aggregation.

# %%
import numpy as np

from feederkron import GenParams, ReductionConfig, generate, run_reduction, validate_model
from feederkron.grid import assemble_admittance

net, lib = generate(GenParams(n=300, seed=11))
y = assemble_admittance(net)
print(f"{net.n} nodes, {len(lib)} scenarios")

# %% [markdown]
# Sweep the voltage-error bound and record the share of removed nodes.

# %%
for e_bar in (1e-4, 3e-4, 1e-3, 3e-3, 1e-2):
    model = run_reduction(net, lib, ReductionConfig(e_bar=e_bar), y=y)
    worst = validate_model(net, model, lib).max_err.max()
    print(f"E={e_bar:7.0e}  kept {len(model.kept):4d}  reduction {100 * model.reduction:5.1f}%  max err {worst:.2e}")

# %% [markdown]
# The magnitude objective is the default. The complex objective ranks
# candidates by complex voltage error and still enforces the magnitude bound.

# %%
cmplx = run_reduction(net, lib, ReductionConfig(e_bar=1e-3, objective="complex"), y=y)
print(f"complex objective: reduction {100 * cmplx.reduction:.1f}%")
