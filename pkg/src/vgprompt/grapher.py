"""Frozen isotropic ViG backbone: max-relative graph convolution plus FFN blocks.

No bias terms, no normalization layers and no positional embeddings; the
aggregation is linear (no nonlinearity after ``W_agg``).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .io import load_tensor, read_json, save_tensor, write_json
from .patchgraph import PatchConfig, embed_patches, topk
from .tensor import Tensor


@dataclass
class BlockParams:
    W_agg: Tensor     # [2d, d]
    W_update: Tensor  # [d, d]
    W1: Tensor        # [d, d_ff]
    W2: Tensor        # [d_ff, d]

    def tensors(self) -> dict[str, Tensor]:
        return {"W_agg": self.W_agg, "W_update": self.W_update, "W1": self.W1, "W2": self.W2}


@dataclass
class BackboneParams:
    cfg: PatchConfig
    d_ff: int
    embedder: Tensor
    blocks: list[BlockParams] = field(default_factory=list)
    frozen: bool = True

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"embedder": self.embedder}
        for b, blk in enumerate(self.blocks):
            out.update({f"block{b}.{k}": v for k, v in blk.tensors().items()})
        return out

    def num_params(self) -> int:
        return sum(t.data.size for t in self.named_tensors().values())

    def astype(self, dtype) -> "BackboneParams":
        """Copy with every weight cast to ``dtype`` (exact for float32: weights are f32 values)."""
        def cast(t):
            return Tensor(t.data.astype(dtype), dtype=dtype)
        blocks = [BlockParams(**{k: cast(v) for k, v in blk.tensors().items()}) for blk in self.blocks]
        return BackboneParams(cfg=self.cfg, d_ff=self.d_ff, embedder=cast(self.embedder),
                              blocks=blocks, frozen=self.frozen)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_tensors().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def validate(self) -> None:
        d = self.cfg.d
        if self.embedder.shape != (self.cfg.patch_dim, d):
            raise T.ShapeError(f"embedder is {self.embedder.shape}, expected {(self.cfg.patch_dim, d)}")
        for b, blk in enumerate(self.blocks):
            want = {"W_agg": (2 * d, d), "W_update": (d, d), "W1": (d, self.d_ff), "W2": (self.d_ff, d)}
            for k, shape in want.items():
                got = blk.tensors()[k].shape
                if got != shape:
                    raise T.ShapeError(f"block{b}.{k} is {got}, expected {shape}")


def _f32_normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    # values stay exactly representable in the float32 checkpoint format
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32).astype(np.float64))


def init_backbone(cfg: PatchConfig, n_blocks: int, d_ff: int, seed: int = 0,
                  gain: float = 1.0) -> BackboneParams:
    """Random frozen backbone (a stand-in for pretrained weights)."""
    rng = np.random.default_rng(seed)
    d = cfg.d
    embedder = _f32_normal(rng, (cfg.patch_dim, d), gain / np.sqrt(cfg.patch_dim))
    blocks = []
    for _ in range(n_blocks):
        blocks.append(BlockParams(
            W_agg=_f32_normal(rng, (2 * d, d), gain / np.sqrt(2 * d)),
            W_update=_f32_normal(rng, (d, d), 0.5 * gain / np.sqrt(d)),
            W1=_f32_normal(rng, (d, d_ff), gain / np.sqrt(d)),
            W2=_f32_normal(rng, (d_ff, d), 0.5 * gain / np.sqrt(d_ff)),
        ))
    return BackboneParams(cfg=cfg, d_ff=d_ff, embedder=embedder, blocks=blocks)


# --------------------------------------------------------- per-node pieces
# Written for one node (``x_i: [d]``, ``neighbors: [k, d]``) but every op is
# shape-generic, so the same code runs on all nodes (and samples) at once.
def aggregate(x_i: Tensor, neighbors: Tensor, W_agg: Tensor) -> Tensor:
    """``[x_i || max_j (x_j - x_i)] @ W_agg``; an empty neighborhood contributes zeros."""
    if neighbors.shape[-2] == 0:
        m = T.zeros(x_i.shape, x_i.data.dtype)
    else:
        center = T.reshape(x_i, x_i.shape[:-1] + (1, x_i.shape[-1]))
        m = T.max(neighbors - center, axis=-2)
    return T.matmul(T.concat([x_i, m], axis=-1), W_agg)


def update(x_i: Tensor, agg: Tensor, W_update: Tensor) -> Tensor:
    return x_i + T.matmul(agg, W_update)


def ffn(X: Tensor, W1: Tensor, W2: Tensor) -> Tensor:
    return T.matmul(T.gelu(T.matmul(X, W1)), W2) + X


def grapher_block(X: Tensor, block: BlockParams, K: int, index: np.ndarray | None = None) -> Tensor:
    """One unprompted block on ``[..., N, d]`` features.

    ``index`` (``[..., N, k]``) overrides the KNN graph otherwise built from ``X``.
    """
    if index is None:
        index = topk(X.data, X.data, K, "euclidean", exclude_self=True)
    # max_j (x_j - x_i) == max_j x_j - x_i, also after rounding
    m = T.neighbor_max(X, index) - X if index.shape[-1] else T.zeros(X.shape, X.data.dtype)
    agg = T.matmul(T.concat([X, m], axis=-1), block.W_agg)
    return ffn(update(X, agg, block.W_update), block.W1, block.W2)


def backbone_forward(image, params: BackboneParams, return_layers: bool = False,
                     freeze_topology: bool = False):
    """Embed patches then run every block with a graph rebuilt from current features.

    With ``return_layers`` the list ``[embeddings, block1 out, ...]`` is
    returned instead of the final features. ``freeze_topology`` reuses the
    first block's graph in all later blocks.
    """
    X = embed_patches(image, params.cfg, params.embedder)
    layers = [X]
    index = None
    for blk in params.blocks:
        if index is None or not freeze_topology:
            index = topk(X.data, X.data, params.cfg.K, "euclidean", exclude_self=True)
        X = grapher_block(X, blk, params.cfg.K, index=index)
        layers.append(X)
    return layers if return_layers else X


# ------------------------------------------------------------ checkpoints
def save_backbone(params: BackboneParams, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = params.cfg
    write_json(directory / "manifest.json", {
        "kind": "backbone", "blocks": params.n_blocks, "d": cfg.d, "d_ff": params.d_ff,
        "image_h": cfg.image_h, "image_w": cfg.image_w, "channels": cfg.channels,
        "patch_size": cfg.patch_size, "K": cfg.K, "frozen": params.frozen,
        "tensors": sorted(params.named_tensors()),
    })
    for name, t in params.named_tensors().items():
        save_tensor(directory / f"{name}.vgpt", t.data)


def load_backbone(directory) -> BackboneParams:
    directory = Path(directory)
    man = read_json(directory / "manifest.json")
    cfg = PatchConfig(image_h=man["image_h"], image_w=man["image_w"], patch_size=man["patch_size"],
                      d=man["d"], K=man["K"], channels=man["channels"])

    def get(name):
        return Tensor(load_tensor(directory / f"{name}.vgpt").astype(np.float64))

    blocks = [BlockParams(**{k: get(f"block{b}.{k}") for k in ("W_agg", "W_update", "W1", "W2")})
              for b in range(man["blocks"])]
    params = BackboneParams(cfg=cfg, d_ff=man["d_ff"], embedder=get("embedder"), blocks=blocks,
                            frozen=man["frozen"])
    params.validate()
    return params
