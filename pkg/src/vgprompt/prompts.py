"""Low-rank prompts for a frozen graph backbone.

Three prompt types act inside every block:

* graph prompts: ``M`` virtual nodes ``seeds @ P_g`` joined to the graph,
* node prompts: ``x <- alpha * MLP_s(x) @ P_n + (1 - alpha) * x`` on the
  aggregation center,
* edge prompts: ``beta`` times the neighbor mean of ``MLP_s(x_j) @ P_e``
  blended into the residual path.

Two independent implementations of a prompted block are provided. The
compositional one chains the per-module functions; the fused one folds the
prompts into a single aggregation/update pass. They must agree to rounding error,
which is how each is checked against the other.

Virtual nodes are candidates for the real nodes' KNN in the same block (so
the graph prompt reaches the output), they receive edges from their cosine
top-K real nodes, they never get node/edge prompts, and they are dropped at
block exit. The edge term is normalized by the neighborhood size in both
paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .grapher import (BackboneParams, BlockParams, aggregate, embed_patches, ffn, grapher_block,
                      update)
from .io import load_tensor, read_json, save_tensor, write_json
from .patchgraph import GraphTopology, topk
from .tensor import Tensor

PROMPT_TENSORS = ("seeds", "P_g", "P_e", "P_n", "S1", "S2")


class PromptConfigError(ValueError):
    pass


def hidden_width(d: int, r: int) -> int:
    """Width of the semantic extractor's hidden layer."""
    return max(r, d // 4)


@dataclass
class BlockPrompt:
    seeds: Tensor   # [M, r]
    P_g: Tensor     # [r, d]
    P_e: Tensor     # [r, d]
    P_n: Tensor     # [r, d]
    S1: Tensor      # [d, r_hidden]
    S2: Tensor      # [r_hidden, r]
    alpha: float = 0.2
    beta: float = 0.2

    @property
    def M(self) -> int:
        return self.seeds.shape[0]

    @property
    def r(self) -> int:
        return self.P_n.shape[0]

    @property
    def d(self) -> int:
        return self.P_n.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in PROMPT_TENSORS}

    def validate(self) -> None:
        r, d = self.r, self.d
        rh = self.S1.shape[1]
        if not r < d:
            raise PromptConfigError(f"rank r={r} must be smaller than d={d}")
        if rh < r:
            raise PromptConfigError(f"hidden width {rh} must be >= r={r}")
        if not (0.0 <= self.alpha <= 1.0):
            raise PromptConfigError(f"alpha={self.alpha} outside [0, 1]")
        if not (0.0 <= self.beta <= 1.0):
            raise PromptConfigError(f"beta={self.beta} outside [0, 1]")
        want = {"seeds": (self.M, r), "P_g": (r, d), "P_e": (r, d), "P_n": (r, d),
                "S1": (d, rh), "S2": (rh, r)}
        for k, shape in want.items():
            if getattr(self, k).shape != shape:
                raise PromptConfigError(f"{k} has shape {getattr(self, k).shape}, expected {shape}")


@dataclass
class PromptParams:
    blocks: list[BlockPrompt] = field(default_factory=list)

    def named_tensors(self) -> dict[str, Tensor]:
        return {f"block{b}.{k}": v for b, bp in enumerate(self.blocks) for k, v in bp.tensors().items()}

    def trainable(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def num_params(self) -> int:
        return sum(t.data.size for t in self.named_tensors().values())


def init_prompts(d: int, n_blocks: int, M: int, r: int, alpha: float = 0.2, beta: float = 0.2,
                 seed: int = 0, std: float = 0.02) -> PromptParams:
    """Near-transparent start: ``P_g``, ``P_e``, ``P_n`` zero, seeds and ``MLP_s`` small Gaussian."""
    rng = np.random.default_rng(seed)
    rh = hidden_width(d, r)
    blocks = []
    for b in range(n_blocks):
        bp = BlockPrompt(
            seeds=Tensor(rng.normal(0, std, (M, r)), name=f"block{b}.seeds"),
            P_g=Tensor(np.zeros((r, d)), name=f"block{b}.P_g"),
            P_e=Tensor(np.zeros((r, d)), name=f"block{b}.P_e"),
            P_n=Tensor(np.zeros((r, d)), name=f"block{b}.P_n"),
            S1=Tensor(rng.normal(0, std, (d, rh)), name=f"block{b}.S1"),
            S2=Tensor(rng.normal(0, std, (rh, r)), name=f"block{b}.S2"),
            alpha=alpha, beta=beta,
        )
        bp.validate()
        for t in bp.tensors().values():
            t.requires_grad = True
        blocks.append(bp)
    return PromptParams(blocks)


# ------------------------------------------------------------ the modules
def semantic_extract(x: Tensor, S1: Tensor, S2: Tensor) -> Tensor:
    """Low-rank semantic code ``gelu(x @ S1) @ S2`` of any ``[..., d]`` features."""
    return T.matmul(T.gelu(T.matmul(x, S1)), S2)


def virtual_features(seeds: Tensor, P_g: Tensor) -> Tensor:
    return T.matmul(seeds, P_g)


def selo_graph_attach(X: Tensor, seeds: Tensor, P_g: Tensor, K: int):
    """Append virtual prompt nodes to ``X`` (``[N, d]`` or ``[b, N, d]``).

    Returns the extended features ``[..., N + M, d]`` and the new edges: a
    :class:`GraphTopology` whose virtual lists hold each prompt node's cosine
    top-K real nodes (real lists are left empty). Batched input yields one
    topology per sample.
    """
    N, M = X.shape[-2], seeds.shape[0]
    p = virtual_features(seeds, P_g)
    if X.ndim == 3:
        p = T.broadcast_to(p, (X.shape[0], M, X.shape[-1]))
    X_ext = T.concat([X, p], axis=-2) if M else X
    vidx = topk(p.data, X.data, K, "cosine") if M else None

    def delta(v):
        lists = [[] for _ in range(N)] + ([] if v is None else [[int(j) for j in row] for row in v])
        return GraphTopology(n_real=N, n_virtual=M, neighbors=lists,
                             metric_tag=["none"] * N + ["cosine"] * M)

    if X.ndim == 3:
        return X_ext, [delta(None if vidx is None else v) for v in (vidx if M else [None] * X.shape[0])]
    return X_ext, delta(vidx)


def real_neighbors(X_ext: np.ndarray, n_real: int, K: int) -> np.ndarray:
    """Euclidean KNN of the real nodes over all real and virtual candidates."""
    return topk(X_ext[..., :n_real, :], X_ext, K, "euclidean", exclude_self=True)


def prompted_topology(X, bp: BlockPrompt, K: int) -> GraphTopology:
    """Full graph of one prompted block: real lists over ``N + M`` candidates plus virtual lists."""
    X = X if isinstance(X, Tensor) else Tensor(X)
    X_ext, topo = selo_graph_attach(X, bp.seeds, bp.P_g, K)
    ridx = real_neighbors(X_ext.data, X.shape[0], K)
    for i, row in enumerate(ridx):
        topo.neighbors[i] = [int(j) for j in row]
        topo.metric_tag[i] = "euclidean"
    return topo


def selo_node_apply(x_i: Tensor, bp: BlockPrompt) -> Tensor:
    """``alpha * MLP_s(x_i) @ P_n + (1 - alpha) * x_i``."""
    s = semantic_extract(x_i, bp.S1, bp.S2)
    return T.matmul(s, bp.P_n) * bp.alpha + x_i * (1.0 - bp.alpha)


def selo_edge_apply(x_c: Tensor, neighbor_feats: Tensor, bp: BlockPrompt) -> Tensor:
    """Blend the neighbor-averaged semantic message into ``x_c``.

    ``(beta / k) * sum_n MLP_s(x_n) @ P_e + (1 - beta) * x_c``; with no
    neighbors only the ``(1 - beta) * x_c`` part remains.
    """
    k = neighbor_feats.shape[-2]
    if k == 0:
        return x_c * (1.0 - bp.beta)
    msgs = T.matmul(semantic_extract(neighbor_feats, bp.S1, bp.S2), bp.P_e)
    return T.sum(msgs, axis=-2) * (bp.beta / k) + x_c * (1.0 - bp.beta)


def prompted_block_compositional(X: Tensor, block: BlockParams, bp: BlockPrompt, K: int,
                                 index: np.ndarray | None = None) -> Tensor:
    """Prompted block assembled from the individual prompt modules.

    graph attach -> node prompt on the aggregation center -> aggregation over
    the extended neighborhood -> edge prompt on the residual -> update ->
    FFN, virtual nodes dropped. ``index`` overrides the real nodes' neighbor
    lists (indices into the extended node set).
    """
    N = X.shape[-2]
    X_ext, _ = selo_graph_attach(X, bp.seeds, bp.P_g, K)
    if index is None:
        index = real_neighbors(X_ext.data, N, K)
    neighbors = T.gather(X_ext, index)
    center = selo_node_apply(X, bp)
    agg = aggregate(center, neighbors, block.W_agg)
    residual = selo_edge_apply(X, neighbors, bp)
    return ffn(update(residual, agg, block.W_update), block.W1, block.W2)


def prompted_block_fused(X: Tensor, block: BlockParams, bp: BlockPrompt, K: int,
                         index: np.ndarray | None = None) -> Tensor:
    """Prompted block with the prompts folded into one aggregation and update.

    ``g_hat = [x~ || max_j (x_j - x~)] W_agg`` with
    ``x~ = (1 - a) x + a MLP_s(x) P_n``, then
    ``f_hat = (1 - b) x + g_hat W_update + b * mean_j(MLP_s(x_j)) P_e``
    over the prompt-extended neighborhood, followed by the FFN.
    """
    N, d = X.shape[-2], X.shape[-1]
    a, b = bp.alpha, bp.beta
    nodes = X
    if bp.M:
        virt = T.matmul(bp.seeds, bp.P_g)
        if X.ndim == 3:
            virt = T.broadcast_to(virt, (X.shape[0], bp.M, d))
        nodes = T.concat([X, virt], axis=-2)
    if index is None:
        index = topk(nodes.data[..., :N, :], nodes.data, K, "euclidean", exclude_self=True)
    k = index.shape[-1]

    codes = T.matmul(T.gelu(T.matmul(nodes, bp.S1)), bp.S2)       # every node's MLP_s, once
    own = codes if not bp.M else T.take(codes, (Ellipsis, slice(0, N), slice(None)))
    x_t = X * (1.0 - a) + T.matmul(own, bp.P_n) * a

    if k:
        m = T.neighbor_max(nodes, index) - x_t
        edge = T.matmul(T.neighbor_mean(codes, index), bp.P_e) * b
    else:
        m = T.zeros(x_t.shape, X.data.dtype)
        edge = T.zeros(X.shape, X.data.dtype)
    g_hat = T.matmul(T.concat([x_t, m], axis=-1), block.W_agg)
    f_hat = X * (1.0 - b) + T.matmul(g_hat, block.W_update) + edge
    return T.matmul(T.gelu(T.matmul(f_hat, block.W1)), block.W2) + f_hat


# ------------------------------------------------------------- full model
def prompted_forward(image, backbone: BackboneParams, prompts: PromptParams | None,
                     path: str = "fused", return_layers: bool = False,
                     freeze_topology: bool = False):
    """Frozen backbone with per-block prompts. ``prompts=None`` runs the bare backbone.

    ``freeze_topology`` builds the neighbor lists once, in the first block,
    and reuses them (virtual nodes keep their slots after the real ones).
    """
    X = embed_patches(image, backbone.cfg, backbone.embedder)
    layers = [X]
    block_fn = {"fused": prompted_block_fused, "compositional": prompted_block_compositional}[path]
    K, index = backbone.cfg.K, None
    for b, blk in enumerate(backbone.blocks):
        if prompts is None:
            if freeze_topology and index is None:
                index = topk(X.data, X.data, K, "euclidean", exclude_self=True)
            X = grapher_block(X, blk, K, index=index)
        else:
            bp = prompts.blocks[b]
            if freeze_topology and index is None:
                X_ext, _ = selo_graph_attach(X, bp.seeds, bp.P_g, K)
                index = real_neighbors(X_ext.data, X.shape[-2], K)
            X = block_fn(X, blk, bp, K, index=index)
        layers.append(X)
    return layers if return_layers else X


# ------------------------------------------------------------ checkpoints
def save_prompts(prompts: PromptParams, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_json(directory / "manifest.json", {
        "kind": "prompts",
        "blocks": [{"M": bp.M, "r": bp.r, "alpha": bp.alpha, "beta": bp.beta, "d": bp.d,
                    "r_hidden": bp.S1.shape[1]} for bp in prompts.blocks],
    })
    for name, t in prompts.named_tensors().items():
        save_tensor(directory / f"{name}.vgpt", t.data)


def load_prompts(directory, backbone: BackboneParams | None = None) -> PromptParams:
    """Load prompts; with ``backbone`` the manifest is checked against its dims."""
    directory = Path(directory)
    man = read_json(directory / "manifest.json")
    if backbone is not None:
        if len(man["blocks"]) != backbone.n_blocks:
            raise PromptConfigError(
                f"prompt checkpoint has {len(man['blocks'])} blocks, backbone has {backbone.n_blocks}")
        for b, entry in enumerate(man["blocks"]):
            if entry["d"] != backbone.cfg.d:
                raise PromptConfigError(f"block{b}: prompt d={entry['d']} but backbone d={backbone.cfg.d}")
    blocks = []
    for b, entry in enumerate(man["blocks"]):
        ts = {k: Tensor(load_tensor(directory / f"block{b}.{k}.vgpt").astype(np.float64),
                        requires_grad=True, name=f"block{b}.{k}") for k in PROMPT_TENSORS}
        bp = BlockPrompt(**ts, alpha=entry["alpha"], beta=entry["beta"])
        bp.validate()
        blocks.append(bp)
    return PromptParams(blocks)
