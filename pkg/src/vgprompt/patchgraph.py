"""Image patches as graph nodes, and brute-force KNN graph construction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from . import tensor as T
from .tensor import Tensor

METRICS = ("euclidean", "cosine")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PatchConfig:
    image_h: int
    image_w: int
    patch_size: int
    d: int
    K: int
    channels: int = 3

    def __post_init__(self):
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} is not divisible by patch_size {self.patch_size}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")

    @property
    def n_patches(self) -> int:
        return (self.image_h // self.patch_size) * (self.image_w // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class GraphTopology:
    """Directed in-neighbor lists: ``neighbors[i]`` holds the ``j`` of edges ``j -> i``.

    Nodes ``0..n_real-1`` are image patches, the following ``n_virtual`` are
    prompt nodes. ``metric_tag[i]`` records the similarity that built list ``i``.
    """

    n_real: int
    n_virtual: int
    neighbors: list[list[int]]
    metric_tag: list[str] = field(default_factory=list)

    @property
    def n_nodes(self) -> int:
        return self.n_real + self.n_virtual

    def real_index(self) -> np.ndarray:
        """Neighbor indices of the real nodes as an ``[n_real, k]`` array."""
        lists = self.neighbors[: self.n_real]
        k = len(lists[0]) if lists else 0
        return np.array(lists, dtype=np.intp).reshape(self.n_real, k)

    def validate(self) -> None:
        n = self.n_nodes
        if len(self.neighbors) != n:
            raise ValueError(f"{len(self.neighbors)} neighbor lists for {n} nodes")
        for i, lst in enumerate(self.neighbors):
            if i in lst:
                raise ValueError(f"self-loop at node {i}")
            if len(set(lst)) != len(lst):
                raise ValueError(f"duplicate neighbors at node {i}")
            if any(j < 0 or j >= n for j in lst):
                raise ValueError(f"neighbor index out of range at node {i}")

    def to_json(self) -> dict:
        return {"n_real": self.n_real, "n_virtual": self.n_virtual,
                "metric_tag": list(self.metric_tag),
                "neighbors": [list(map(int, lst)) for lst in self.neighbors]}

    @classmethod
    def from_json(cls, obj) -> "GraphTopology":
        if isinstance(obj, list):
            return cls(n_real=len(obj), n_virtual=0, neighbors=[list(x) for x in obj])
        return cls(n_real=obj["n_real"], n_virtual=obj["n_virtual"],
                   neighbors=[list(x) for x in obj["neighbors"]],
                   metric_tag=list(obj.get("metric_tag", [])))


def patchify(images: np.ndarray, cfg: PatchConfig) -> np.ndarray:
    """``[..., h, w, c]`` images to ``[..., N, p*p*c]`` flattened patches, row-major."""
    images = np.asarray(images, dtype=np.float64)
    *lead, h, w, c = images.shape
    if (h, w, c) != (cfg.image_h, cfg.image_w, cfg.channels):
        raise ConfigError(f"image shape {(h, w, c)} does not match config "
                          f"{(cfg.image_h, cfg.image_w, cfg.channels)}")
    p = cfg.patch_size
    x = images.reshape(*lead, h // p, p, w // p, p, c)
    nd = len(lead)
    x = x.transpose(*range(nd), nd, nd + 2, nd + 1, nd + 3, nd + 4)
    return x.reshape(*lead, cfg.n_patches, cfg.patch_dim)


def embed_patches(image, cfg: PatchConfig, embedder: Tensor) -> Tensor:
    """Encode each patch of ``image`` as a ``d``-dimensional node feature.

    Accepts a single ``[h, w, c]`` image or a batch ``[b, h, w, c]``.
    """
    if isinstance(image, Tensor):
        image = image.data
    if embedder.shape != (cfg.patch_dim, cfg.d):
        raise T.ShapeError(f"embedder shape {embedder.shape}, expected {(cfg.patch_dim, cfg.d)}")
    dtype = embedder.data.dtype
    return T.matmul(Tensor(patchify(image, cfg).astype(dtype, copy=False), dtype=dtype), embedder)


# ----------------------------------------------------------------------- KNN
def _scores(queries: np.ndarray, candidates: np.ndarray, metric: str) -> np.ndarray:
    """Sort keys (smaller is closer) between every query and candidate row."""
    if metric == "euclidean":
        return cdist(queries, candidates, "sqeuclidean")
    if metric == "cosine":
        qn = np.linalg.norm(queries, axis=1, keepdims=True)
        cn = np.linalg.norm(candidates, axis=1, keepdims=True)
        # zero-norm rows have similarity 0 to everything
        q = np.divide(queries, qn, out=np.zeros_like(queries), where=qn > 0)
        c = np.divide(candidates, cn, out=np.zeros_like(candidates), where=cn > 0)
        return -(q @ c.T)
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def topk(queries: np.ndarray, candidates: np.ndarray, K: int, metric: str,
         exclude_self: bool = False) -> np.ndarray:
    """Indices of the ``K`` closest candidates for each query, best first.

    Works on ``[n, d]`` or batched ``[b, n, d]`` arrays. With ``exclude_self``
    query ``i`` never selects candidate ``i``. Ties go to the lower index.
    """
    queries = np.asarray(queries, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    if queries.ndim == 3:
        return np.stack([topk(q, c, K, metric, exclude_self) for q, c in zip(queries, candidates)]) \
            if len(queries) else np.zeros((0, queries.shape[1], 0), dtype=np.intp)
    nq, nc = len(queries), len(candidates)
    k = max(0, min(K, nc - 1 if exclude_self else nc))
    if k == 0 or nq == 0:
        return np.zeros((nq, k), dtype=np.intp)
    keys = _scores(queries, candidates, metric)
    if exclude_self:
        keys[np.arange(nq), np.arange(nq)] = np.inf
    order = np.argsort(keys, axis=1, kind="stable")
    return order[:, :k].astype(np.intp)


def knn_build(features, K: int, metric: str = "euclidean") -> GraphTopology:
    """Dynamic KNN graph: each node's in-neighbors are its ``min(K, n-1)`` closest nodes."""
    x = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 1:
        raise ValueError(f"knn_build needs a non-empty [n, d] feature matrix, got {x.shape}")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    idx = topk(x, x, K, metric, exclude_self=True)
    return GraphTopology(n_real=len(x), n_virtual=0, neighbors=idx.tolist(),
                         metric_tag=[metric] * len(x))
