# %% [markdown]
# # Inside one prompted block
#
# Virtual nodes, the extended neighborhood, and why the two implementations
# of the prompted block give the same numbers.

# %%
import numpy as np

from vgprompt import prompts as P
from vgprompt.tensor import Tensor
from vgprompt.verify import random_block, random_prompt

rng = np.random.default_rng(0)
d, N, K, M, r = 8, 6, 3, 2, 4
X = Tensor(rng.normal(size=(N, d)))
blk = random_block(rng, d)
bp = random_prompt(rng, d, M, r, alpha=0.3, beta=0.3)

# %% [markdown]
# Virtual nodes are `seeds @ P_g`. Each one links to its cosine top-K real
# nodes, and the real nodes may pick them as neighbors too.

# %%
X_ext, topo = P.selo_graph_attach(X, bp.seeds, bp.P_g, K)
print("extended features", X_ext.shape)
for v in range(N, N + M):
    print(f"virtual {v} -> real", topo.neighbors[v])
full = P.prompted_topology(X.data, bp, K)
print("real node neighbor lists:", full.neighbors[:N])

# %% [markdown]
# Compositional path: node prompt, edge prompt, then the stock block pieces.
# Fused path: prompts folded into one aggregation. They should agree to rounding.

# %%
a = P.prompted_block_compositional(X, blk, bp, K).data
b = P.prompted_block_fused(X, blk, bp, K).data
print("max |compositional - fused| =", np.abs(a - b).max())

# %% [markdown]
# Zero mixing weights and no virtual nodes leave the block untouched.

# %%
from vgprompt.grapher import grapher_block

off = random_prompt(rng, d, 0, r, alpha=0.0, beta=0.0)
same = np.array_equal(P.prompted_block_fused(X, blk, off, K).data, grapher_block(X, blk, K).data)
print("alpha=beta=0, M=0 reproduces the frozen block bit for bit:", same)

# %% [markdown]
# The node prompt adds `alpha * MLP_s(x) @ P_n`, a rank-r update.

# %%
Z = Tensor(rng.normal(size=(40, d)))
delta = P.selo_node_apply(Z, bp).data - (1 - bp.alpha) * Z.data
print(f"singular values of the node update (r={r}):", np.round(np.linalg.svd(delta, compute_uv=False), 6))
