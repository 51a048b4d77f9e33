# %% [markdown]
# # Radialization and off-training accuracy
#
# Reduce using only the two extreme scenarios, then check errors on a
# larger library and restore a tree topology.

# %%
import numpy as np

from feederkron import GenParams, ReductionConfig, generate, radialize, reduced_topology, run_reduction, validate_model
from feederkron.grid import assemble_admittance
from feederkron.radial import find_maximal_cliques, is_tree

net, lib = generate(GenParams(n=200, seed=10, n_scenarios=168))
y = assemble_admittance(net)
train = lib.subset(["low", "high"])
model = run_reduction(net, train, ReductionConfig(e_bar=1e-3), y=y)
print(f"kept {len(model.kept)} of {net.n}")

# %% [markdown]
# Per-scenario maximum errors over all 168 scenarios, as a coarse histogram.

# %%
result = validate_model(net, model, lib)
counts, edges = np.histogram(result.max_err, bins=8)
for c, lo, hi in zip(counts, edges, edges[1:]):
    print(f"{lo:.2e} - {hi:.2e}  {'#' * int(c)}")
print("training max:", result.max_err[result.training].max())

# %% [markdown]
# The reduced network contains cliques. Reinserting the branching nodes of
# each clique's original subtree yields a tree with the same super-node voltages.

# %%
adj = reduced_topology(model.kron)
print("cliques:", len(find_maximal_cliques(adj)), "tree before:", is_tree(adj))
radial = radialize(model, net, y)
print("reinserted:", radial.reinserted, "tree after:", is_tree(reduced_topology(radial.kron)))
