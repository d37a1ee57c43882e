"""PCA of node features through a covariance eigendecomposition.

``Sigma = X^T X`` is diagonalized with a cyclic Jacobi solver (fixed sweep
order, so results are reproducible bit for bit), the effective rank is the
number of eigenvalues above a threshold, and the per-node component
coefficients ``X V`` can be mapped to RGB for visualization.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import save_tensor

# Reference values reported for ViG-M features (d = 768) at threshold 0.25.
RANK_REFERENCE = {"epsilon": 0.25, "d": 768, "CUB": 50, "Flowers": 60}

NORMALIZATIONS = ("none", "l2", "center", "center_l2")
MODES = ("relative", "absolute")


class AnalysisError(ValueError):
    pass


def jacobi_eigh(S: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps visit the pairs ``(p, q)``, ``p < q`` in row-major order until the
    off-diagonal Frobenius norm is at most ``tol`` times the norm of ``S``.
    Returns unsorted eigenvalues and the matching eigenvector columns.
    """
    A = np.array(S, dtype=np.float64, copy=True)
    n = A.shape[0]
    V = np.eye(n)
    scale = np.linalg.norm(A)
    if n < 2 or scale == 0.0:
        return np.diag(A).copy(), V
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))   # direct, no cancellation
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300 or abs(apq) < 1e-18 * scale:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p], A[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = A[p, :].copy(), A[q, :].copy()
                A[p, :], A[q, :] = c * ap - s * aq, s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
    else:
        raise AnalysisError(f"Jacobi did not converge in {max_sweeps} sweeps")
    return np.diag(A).copy(), V


def normalize_rows(X, mode: str = "l2") -> np.ndarray:
    """Feature normalization applied before the covariance.

    ``l2`` scales rows to unit norm (zero rows stay zero), ``center``
    subtracts the column mean, ``center_l2`` does both in that order.
    """
    X = np.asarray(X, dtype=np.float64)
    if mode not in NORMALIZATIONS:
        raise AnalysisError(f"unknown normalization {mode!r}; expected one of {NORMALIZATIONS}")
    if mode in ("center", "center_l2"):
        X = X - X.mean(axis=0, keepdims=True)
    if mode in ("l2", "center_l2"):
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        X = np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)
    return X


@dataclass
class PcaResult:
    eigenvalues: np.ndarray   # [d], non-increasing
    eigenvectors: np.ndarray  # [d, d], orthonormal columns
    coefficients: np.ndarray  # [N, d] = X V
    est_rank: int
    epsilon: float
    mode: str
    normalization: str

    @property
    def covariance(self) -> np.ndarray:
        V, lam = self.eigenvectors, self.eigenvalues
        return (V * lam) @ V.T

    def rank_at(self, epsilon: float) -> int:
        return estimate_rank(self.eigenvalues, epsilon, self.mode)

    def to_json(self) -> dict:
        return {"eigenvalues": self.eigenvalues.tolist(), "est_rank": self.est_rank,
                "epsilon": self.epsilon, "mode": self.mode, "normalization": self.normalization}


def estimate_rank(eigenvalues, epsilon: float, mode: str = "relative") -> int:
    """Count eigenvalues above ``epsilon`` (divided by the largest one in relative mode)."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if mode not in MODES:
        raise AnalysisError(f"unknown threshold mode {mode!r}; expected one of {MODES}")
    if mode == "relative":
        if lam.size == 0 or lam[0] <= 0:
            return 0
        lam = lam / lam[0]
    return int(np.sum(lam > epsilon))


def pca_analyze(X, epsilon: float = 0.25, mode: str = "relative", normalization: str = "none",
                sym_tol: float = 1e-10) -> PcaResult:
    """Eigen-decompose ``X^T X`` of already-normalized features ``X`` (``[N, d]``).

    ``normalization`` only labels what the caller applied. Eigenvectors
    have their largest-magnitude component made positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise AnalysisError(f"pca_analyze needs an [N, d] matrix with N >= 1, got {X.shape}")
    if X.shape[1] == 0:
        raise AnalysisError("feature dimension d must be >= 1")
    S = X.T @ X
    asym = np.linalg.norm(S - S.T)
    if asym > sym_tol * max(np.linalg.norm(S), 1e-300):
        raise AnalysisError(f"covariance is not symmetric (residue {asym:.3e})")
    S = 0.5 * (S + S.T)
    lam, V = jacobi_eigh(S)
    order = np.argsort(-lam, kind="stable")
    lam, V = lam[order], V[:, order]
    lead = np.argmax(np.abs(V), axis=0)
    signs = np.where(V[lead, np.arange(V.shape[1])] < 0, -1.0, 1.0)
    V = V * signs
    return PcaResult(eigenvalues=lam, eigenvectors=V, coefficients=X @ V,
                     est_rank=estimate_rank(lam, epsilon, mode), epsilon=epsilon, mode=mode,
                     normalization=normalization)


def coefficient_profile(coefficients: np.ndarray) -> np.ndarray:
    """Mean absolute coefficient per principal component (the long-tail curve)."""
    return np.mean(np.abs(coefficients), axis=0)


def rank_profile(features_per_layer, epsilon: float = 0.25, mode: str = "relative",
                 normalization: str = "l2", out_dir=None, rgb: bool = False) -> dict:
    """Per-layer rank estimates, spectra and coefficient-magnitude profiles.

    Each layer is a ``[N, d]`` array (or a Tensor) of node features that the
    function normalizes with ``normalization`` before the analysis. With
    ``out_dir`` a ``layer{i}_coefficients.csv`` histogram per layer is written,
    plus a ``layer{i}_rgb.vgpt`` coefficient map when ``rgb`` is set and d >= 3.
    """
    layers = []
    for i, feats in enumerate(features_per_layer):
        data = getattr(feats, "data", feats)
        data = np.asarray(data, dtype=np.float64).reshape(-1, np.shape(data)[-1])
        res = pca_analyze(normalize_rows(data, normalization), epsilon, mode, normalization)
        prof = coefficient_profile(res.coefficients)
        layers.append({"layer": i, "n_nodes": int(data.shape[0]), "d": int(data.shape[1]),
                       "est_rank": res.est_rank, "eigenvalues": res.eigenvalues.tolist(),
                       "coefficient_profile": prof.tolist()})
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            with open(Path(out_dir) / f"layer{i}_coefficients.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["component", "mean_abs_coefficient", "eigenvalue"])
                for j, (c, lam) in enumerate(zip(prof, res.eigenvalues)):
                    w.writerow([j + 1, repr(float(c)), repr(float(lam))])
            if rgb and data.shape[1] >= 3:
                save_tensor(Path(out_dir) / f"layer{i}_rgb.vgpt", rgb_map(res.coefficients))
    return {"reference": dict(RANK_REFERENCE), "epsilon": epsilon, "mode": mode,
            "normalization": normalization, "ranks": [l["est_rank"] for l in layers],
            "layers": layers}


def rgb_map(coefficients) -> np.ndarray:
    """First three component coefficients min-max scaled to ``[0, 1]`` per column.

    A constant column maps to 0.5.
    """
    C = np.asarray(getattr(coefficients, "data", coefficients), dtype=np.float64)
    if C.ndim != 2 or C.shape[1] < 3:
        raise AnalysisError(f"rgb_map needs at least 3 components, got shape {C.shape}")
    rgb = C[:, :3]
    lo, hi = rgb.min(axis=0), rgb.max(axis=0)
    span = hi - lo
    out = np.full(rgb.shape, 0.5)
    varying = span > 0
    out[:, varying] = (rgb[:, varying] - lo[varying]) / span[varying]
    return out
