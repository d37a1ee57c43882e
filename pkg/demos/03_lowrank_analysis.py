# %% [markdown]
# # How many directions do node features really use?
#
# Per-layer PCA of node features with the in-house Jacobi solver, then the
# same rank estimate on planted low-rank data.

# %%
import numpy as np

from vgprompt.analyzer import pca_analyze, rank_profile, rgb_map
from vgprompt.grapher import backbone_forward, init_backbone
from vgprompt.patchgraph import PatchConfig
from vgprompt.trainer import make_synthetic

pc = PatchConfig(image_h=32, image_w=32, patch_size=4, d=64, K=9)
bb = init_backbone(pc, n_blocks=4, d_ff=256, seed=0)
images, _ = make_synthetic(4, pc, seed=0)
layers = backbone_forward(images, bb, return_layers=True)

# %%
rep = rank_profile([l.data.reshape(-1, 64) for l in layers])
for layer in rep["layers"]:
    lam = np.array(layer["eigenvalues"])
    print(f"layer {layer['layer']}: rank {layer['est_rank']:2d} of 64,"
          f" top-3 energy {lam[:3].sum() / lam.sum():.2f}")

# %% [markdown]
# Sanity check on planted structure: rank-3 data plus small noise.

# %%
rng = np.random.default_rng(1)
X = rng.normal(size=(200, 3)) @ rng.normal(size=(3, 64))
for noise in (0.0, 1e-3, 1e-1):
    res = pca_analyze(X + noise * rng.normal(size=X.shape))
    print(f"noise {noise:g}: est_rank {res.est_rank}, rank at eps=0.05 {res.rank_at(0.05)}")

# %% [markdown]
# First three principal coefficients as colors, one pixel per patch.

# %%
res = pca_analyze(layers[-1].data[0], normalization="l2")
rgb = rgb_map(res.coefficients).reshape(8, 8, 3)
print(np.round(rgb[..., 0], 2))
