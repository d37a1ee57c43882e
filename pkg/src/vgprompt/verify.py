"""Self-check suites run by ``vgprompt verify``.

Each suite returns a :class:`SuiteResult`; the CLI exits non-zero if any
fails. The randomized pieces are seeded so a failure is reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import prompts as P
from . import tensor as T
from .analyzer import estimate_rank, pca_analyze
from .gradcheck import gradcheck
from .grapher import BlockParams, backbone_forward, init_backbone
from .patchgraph import PatchConfig
from .tensor import Tensor
from .trainer import TrainConfig, fit, head_forward, init_head, make_model, make_synthetic


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


# ----------------------------------------------------------- random cases
def random_block(rng: np.random.Generator, d: int, d_ff: int | None = None, scale: float = 1.0) -> BlockParams:
    d_ff = d_ff or 2 * d
    def w(*shape):
        return Tensor(rng.normal(0, scale / np.sqrt(shape[0]), shape), requires_grad=True)
    return BlockParams(W_agg=w(2 * d, d), W_update=w(d, d), W1=w(d, d_ff), W2=w(d_ff, d))


def random_prompt(rng: np.random.Generator, d: int, M: int, r: int, alpha=None, beta=None,
                  scale: float = 0.5) -> P.BlockPrompt:
    """Block prompt with every tensor nonzero, so every path carries signal."""
    rh = P.hidden_width(d, r)
    def w(*shape):
        return Tensor(rng.normal(0, scale, shape), requires_grad=True)
    alpha = rng.uniform(0.05, 0.95) if alpha is None else alpha
    beta = rng.uniform(0.05, 0.95) if beta is None else beta
    bp = P.BlockPrompt(seeds=w(M, r), P_g=w(r, d), P_e=w(r, d), P_n=w(r, d),
                       S1=w(d, rh), S2=w(rh, r), alpha=float(alpha), beta=float(beta))
    bp.validate()
    return bp


def equivalence_grid():
    """The randomized-config grid: M, r, K, d with r < d."""
    return [(M, r, K, d) for M in (0, 1, 4) for r in (2, 8) for K in (1, 3, 5) for d in (8, 16) if r < d]


def dual_path_trials(n_trials: int, seed: int = 0):
    """Max-abs difference of the two prompted-block paths on ``n_trials`` random configs."""
    rng = np.random.default_rng(seed)
    grid = equivalence_grid()
    diffs = []
    for t in range(n_trials):
        M, r, K, d = grid[t % len(grid)]
        N = int(rng.integers(1, 13))
        X = Tensor(rng.normal(size=(N, d)))
        blk, bp = random_block(rng, d), random_prompt(rng, d, M, r)
        a = P.prompted_block_compositional(X, blk, bp, K).data
        b = P.prompted_block_fused(X, blk, bp, K).data
        diffs.append(((M, r, K, d, N), float(np.max(np.abs(a - b)))))
    return diffs


# ----------------------------------------------------------------- suites
def suite_gradcheck(seeds: int = 1) -> SuiteResult:
    rng = np.random.default_rng(1)
    cfg = PatchConfig(image_h=6, image_w=6, patch_size=2, d=16, K=3, channels=1)   # N = 9
    bb = init_backbone(cfg, n_blocks=1, d_ff=32, seed=1)
    bp = random_prompt(rng, 16, M=2, r=4, alpha=0.2, beta=0.2, scale=0.3)
    prompts = P.PromptParams([bp])
    head = Tensor(rng.normal(0, 0.3, (16, 3)), requires_grad=True)
    images = rng.normal(size=(2, 6, 6, 1))
    labels = np.array([0, 2])
    for k, v in bp.tensors().items():
        v.name = f"block0.{k}"
    head.name = "head"
    params = prompts.trainable() + [head]

    def loss():
        feats = P.prompted_forward(images, bb, prompts)
        return T.cross_entropy(head_forward(feats, head), labels)

    report = gradcheck(loss, params, tol=1e-4)
    worst = max(c.max_rel_error for c in report.checks)
    return SuiteResult("gradcheck", report.passed, f"{len(report.checks)} tensors, worst rel err {worst:.2e}")


def suite_dual_path(seeds: int = 50) -> SuiteResult:
    diffs = dual_path_trials(max(seeds, 1))
    worst_cfg, worst = max(diffs, key=lambda t: t[1])
    ok = worst <= 1e-10
    return SuiteResult("dual-path", ok, f"{len(diffs)} trials, max abs diff {worst:.2e} at (M,r,K,d,N)={worst_cfg}")


def suite_recovery(seeds: int = 20) -> SuiteResult:
    cfg = PatchConfig(image_h=8, image_w=8, patch_size=2, d=16, K=4, channels=3)
    bb = init_backbone(cfg, n_blocks=2, d_ff=32, seed=3)
    rng = np.random.default_rng(3)
    prompts = P.PromptParams([random_prompt(rng, 16, M=0, r=4, alpha=0.0, beta=0.0) for _ in range(2)])
    bad = 0
    for _ in range(max(seeds, 1)):
        img = rng.normal(size=(8, 8, 3))
        ref = backbone_forward(img, bb).data
        for path in ("fused", "compositional"):
            if not np.array_equal(P.prompted_forward(img, bb, prompts, path=path).data, ref):
                bad += 1
    return SuiteResult("recovery", bad == 0, f"{max(seeds, 1)} inputs x 2 paths, {bad} mismatches")


def lowrank_singular_values(r: int, d: int = 64, N: int = 96, seed: int = 0):
    """Singular values of stacked node-prompt deltas and of stacked edge-prompt terms."""
    rng = np.random.default_rng(seed)
    bp = random_prompt(rng, d, M=2, r=r)
    X = Tensor(rng.normal(size=(N, d)))
    node_delta = P.selo_node_apply(X, bp).data - (1 - bp.alpha) * X.data
    idx = rng.integers(0, N, size=(N, 5))
    nbrs = T.gather(X, idx)
    edge_term = P.selo_edge_apply(X, nbrs, bp).data - (1 - bp.beta) * X.data
    return np.linalg.svd(node_delta, compute_uv=False), np.linalg.svd(edge_term, compute_uv=False)


def suite_lowrank(seeds: int = 1) -> SuiteResult:
    worst = 0.0
    for r in (4, 8, 32):
        for sv in lowrank_singular_values(r):
            worst = max(worst, float(np.max(sv[r:])))
    return SuiteResult("low-rank", worst <= 1e-8, f"r in (4, 8, 32), largest sigma beyond r {worst:.2e}")


def suite_frozen(seeds: int = 1) -> SuiteResult:
    cfg = PatchConfig(image_h=8, image_w=8, patch_size=2, d=16, K=4, channels=3)
    bb = init_backbone(cfg, n_blocks=2, d_ff=32, seed=5)
    before = bb.checksum()
    model = make_model(bb, P.init_prompts(16, 2, M=2, r=4, seed=5), init_head(16, 2, seed=5))
    data = make_synthetic(16, cfg, seed=5)
    fit(model, data, data, TrainConfig(epochs=2, batch_size=8, seed=5))
    after = bb.checksum()
    return SuiteResult("frozen-backbone", before == after, f"checksum {before[:12]} -> {after[:12]}")


def suite_pca(seeds: int = 1) -> SuiteResult:
    rng = np.random.default_rng(7)
    problems = []
    for k in (1, 3, 5):
        U, _ = np.linalg.qr(rng.normal(size=(200, k)))
        Vt, _ = np.linalg.qr(rng.normal(size=(64, k)))
        X = U @ np.diag(rng.uniform(1.0, 1.5, k)) @ Vt.T
        res = pca_analyze(X)
        S = X.T @ X
        resid = np.linalg.norm(S @ res.eigenvectors - res.eigenvectors * res.eigenvalues, axis=0)
        if res.est_rank != k:
            problems.append(f"rank {res.est_rank} != {k}")
        if resid.max() > 1e-8 * np.linalg.norm(S):
            problems.append(f"eigen-residual {resid.max():.2e}")
        ranks = [estimate_rank(res.eigenvalues, e) for e in (0.05, 0.25, 0.5, 0.9)]
        if ranks != sorted(ranks, reverse=True):
            problems.append("rank not monotone in epsilon")
    return SuiteResult("pca", not problems, "; ".join(problems) or "constructed ranks 1, 3, 5 recovered")


SUITES = {
    "gradcheck": suite_gradcheck,
    "dual-path": suite_dual_path,
    "recovery": suite_recovery,
    "low-rank": suite_lowrank,
    "frozen-backbone": suite_frozen,
    "pca": suite_pca,
}


def run_suites(seeds: int | None = None, only=None) -> list[SuiteResult]:
    """Run every suite (or those named in ``only``). ``seeds`` sets the randomized trial counts."""
    results = []
    for name, fn in SUITES.items():
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        try:
            res = fn(seeds) if seeds is not None and name in ("dual-path", "recovery") else fn()
        except Exception as exc:  # a crash is a failed suite, not a crashed verifier
            res = SuiteResult(name, False, f"raised {type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results
