import numpy as np
import pytest
from hypothesis import given, strategies as st

from vgprompt import prompts as P
from vgprompt import tensor as T
from vgprompt.grapher import backbone_forward, grapher_block, init_backbone, save_backbone
from vgprompt.patchgraph import PatchConfig
from vgprompt.tensor import Tensor
from vgprompt.trainer import head_forward
from vgprompt.verify import dual_path_trials, lowrank_singular_values, random_block, random_prompt


def gelu(z):
    return 0.5 * z * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (z + 0.044715 * z ** 3)))


def mlp(x, bp):
    return gelu(x @ bp.S1.data) @ bp.S2.data


def reference_block(X, blk, bp, K):
    """Per-node numpy loop: extended KNN, node prompt on the center, normalized edge term."""
    N = len(X)
    ext = np.vstack([X, bp.seeds.data @ bp.P_g.data]) if bp.M else X
    out = np.empty_like(X)
    for i in range(N):
        cands = sorted((float(np.sum((ext[j] - X[i]) ** 2)), j) for j in range(len(ext)) if j != i)
        nbrs = [j for _, j in cands[:min(K, len(ext) - 1)]]
        center = bp.alpha * mlp(X[i], bp) @ bp.P_n.data + (1 - bp.alpha) * X[i]
        m = np.max([ext[j] - center for j in nbrs], axis=0) if nbrs else np.zeros_like(X[i])
        g = np.concatenate([center, m]) @ blk.W_agg.data
        edge = sum(mlp(ext[j], bp) @ bp.P_e.data for j in nbrs) * (bp.beta / len(nbrs)) if nbrs else 0.0
        out[i] = edge + (1 - bp.beta) * X[i] + g @ blk.W_update.data
    return gelu(out @ blk.W1.data) @ blk.W2.data + out


def hand_prompt(alpha=0.2, beta=0.2):
    d, r = 4, 2
    S1 = np.array([[0.5, -0.2], [0.1, 0.3], [-0.4, 0.2], [0.0, 0.6]])
    S2 = np.array([[1.0, -0.5], [0.25, 0.75]])
    Pn = np.array([[1.0, 0.0, -1.0, 0.5], [0.0, 2.0, 0.5, 0.0]])
    Pe = np.array([[0.5, 0.5, 0.0, -1.0], [1.0, 0.0, 0.0, 1.0]])
    Pg = np.array([[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]])
    return P.BlockPrompt(seeds=Tensor(np.array([[0.3, -0.7]])), P_g=Tensor(Pg), P_e=Tensor(Pe),
                         P_n=Tensor(Pn), S1=Tensor(S1), S2=Tensor(S2), alpha=alpha, beta=beta)


def scalar_mlp(x, S1, S2):
    h = []
    for j in range(len(S1[0])):
        z = sum(x[i] * S1[i][j] for i in range(len(x)))
        h.append(0.5 * z * (1 + np.tanh(np.sqrt(2 / np.pi) * (z + 0.044715 * z * z * z))))
    return [sum(h[j] * S2[j][c] for j in range(len(h))) for c in range(len(S2[0]))]


# ------------------------------------------------------ semantic extractor
def test_semantic_extract_zero_input_and_zero_s2(rng):
    bp = random_prompt(rng, 8, 2, 3)
    assert np.array_equal(P.semantic_extract(Tensor(np.zeros(8)), bp.S1, bp.S2).data, np.zeros(3))
    zero = Tensor(np.zeros_like(bp.S2.data))
    assert np.array_equal(P.semantic_extract(Tensor(rng.normal(size=(5, 8))), bp.S1, zero).data, np.zeros((5, 3)))


def test_semantic_extract_scalar_oracle():
    bp = hand_prompt()
    x = [0.2, -1.0, 0.7, 0.4]
    got = P.semantic_extract(Tensor(x), bp.S1, bp.S2).data
    assert np.allclose(got, scalar_mlp(x, bp.S1.data.tolist(), bp.S2.data.tolist()), rtol=0, atol=1e-15)


# ------------------------------------------------------------ graph prompt
def test_graph_attach_m0_is_identity(rng):
    X = Tensor(rng.normal(size=(5, 4)))
    ext, topo = P.selo_graph_attach(X, Tensor(np.zeros((0, 2))), Tensor(rng.normal(size=(2, 4))), 2)
    assert ext is X
    assert topo.n_virtual == 0 and all(l == [] for l in topo.neighbors)


def test_graph_attach_zero_pg_gives_zero_virtual_nodes(rng):
    X = Tensor(rng.normal(size=(5, 4)))
    ext, topo = P.selo_graph_attach(X, Tensor(rng.normal(size=(3, 2))), Tensor(np.zeros((2, 4))), 2)
    assert np.array_equal(ext.data[5:], np.zeros((3, 4)))
    # zero vectors: similarity 0 to everything, lowest indices win
    assert topo.neighbors[5:] == [[0, 1]] * 3


def test_graph_attach_cosine_oracle(rng):
    X = rng.normal(size=(4, 4))
    seeds, Pg = rng.normal(size=(1, 2)), rng.normal(size=(2, 4))
    ext, topo = P.selo_graph_attach(Tensor(X), Tensor(seeds), Tensor(Pg), 2)
    p = (seeds @ Pg)[0]
    sims = [float(p @ x / (np.linalg.norm(p) * np.linalg.norm(x))) for x in X]
    expect = [j for _, j in sorted((-s, j) for j, s in enumerate(sims))[:2]]
    assert topo.neighbors[4] == expect
    assert topo.metric_tag[4] == "cosine"
    assert np.allclose(ext.data[4], p)


def test_prompted_topology_invariants(rng):
    bp = random_prompt(rng, 6, 3, 2)
    for N, K in [(1, 3), (4, 2), (7, 5), (2, 9)]:
        topo = P.prompted_topology(rng.normal(size=(N, 6)), bp, K)
        topo.validate()
        assert topo.n_nodes == N + 3
        assert all(len(l) == min(K, N + 3 - 1) for l in topo.neighbors[:N])


def test_virtual_nodes_enter_real_neighborhoods():
    X = np.array([[0.0, 0.0, 0.0, 0.0], [5.0, 5.0, 5.0, 5.0]])
    bp = hand_prompt()
    bp.P_g = Tensor(np.zeros((2, 4)))          # virtual node at the origin, next to node 0
    topo = P.prompted_topology(X, bp, 1)
    assert topo.neighbors[0] == [2]


# ------------------------------------------------------- node / edge prompt
def test_node_apply_alpha0_is_identity(rng):
    bp = random_prompt(rng, 8, 2, 3, alpha=0.0)
    x = Tensor(rng.normal(size=(6, 8)))
    assert np.array_equal(P.selo_node_apply(x, bp).data, x.data)


def test_node_apply_alpha1_zero_pn():
    bp = hand_prompt(alpha=1.0)
    bp.P_n = Tensor(np.zeros((2, 4)))
    assert np.array_equal(P.selo_node_apply(Tensor([0.3, 0.1, -0.2, 0.9]), bp).data, np.zeros(4))


def test_node_apply_scalar_oracle():
    bp = hand_prompt(alpha=0.2)
    x = [0.2, -1.0, 0.7, 0.4]
    s = scalar_mlp(x, bp.S1.data.tolist(), bp.S2.data.tolist())
    Pn = bp.P_n.data.tolist()
    expect = [0.2 * sum(s[k] * Pn[k][c] for k in range(2)) + 0.8 * x[c] for c in range(4)]
    assert np.allclose(P.selo_node_apply(Tensor(x), bp).data, expect, rtol=0, atol=1e-15)


def test_edge_apply_beta0_is_identity(rng):
    bp = random_prompt(rng, 8, 2, 3, beta=0.0)
    x = Tensor(rng.normal(size=8))
    assert np.array_equal(P.selo_edge_apply(x, Tensor(rng.normal(size=(4, 8))), bp).data, x.data)


def test_edge_apply_zero_pe_scales_center():
    bp = hand_prompt(beta=0.2)
    bp.P_e = Tensor(np.zeros((2, 4)))
    x = np.array([1.0, -2.0, 0.5, 4.0])
    out = P.selo_edge_apply(Tensor(x), Tensor(np.ones((3, 4))), bp).data
    assert np.array_equal(out, 0.8 * x)


def test_edge_apply_empty_neighborhood():
    bp = hand_prompt(beta=0.2)
    x = np.array([1.0, -2.0, 0.5, 4.0])
    assert np.array_equal(P.selo_edge_apply(Tensor(x), Tensor(np.zeros((0, 4))), bp).data, 0.8 * x)


def test_edge_apply_averaged_sum_oracle():
    bp = hand_prompt(beta=0.2)
    xc = [0.5, 0.5, -0.5, 1.0]
    nbrs = [[0.2, -1.0, 0.7, 0.4], [1.0, 0.0, 0.3, -0.6]]
    S1, S2, Pe = bp.S1.data.tolist(), bp.S2.data.tolist(), bp.P_e.data.tolist()
    msgs = [scalar_mlp(n, S1, S2) for n in nbrs]
    expect = [0.2 / 2 * sum(sum(m[k] * Pe[k][c] for k in range(2)) for m in msgs) + 0.8 * xc[c]
              for c in range(4)]
    assert np.allclose(P.selo_edge_apply(Tensor(xc), Tensor(nbrs), bp).data, expect, rtol=0, atol=1e-15)


# ----------------------------------------------------------- prompted block
@pytest.mark.parametrize("path", [P.prompted_block_compositional, P.prompted_block_fused])
def test_block_matches_per_node_reference(rng, path):
    for M, N, K in [(0, 6, 3), (2, 6, 3), (4, 5, 5), (1, 1, 2)]:
        X = rng.normal(size=(N, 8))
        blk, bp = random_block(rng, 8), random_prompt(rng, 8, M, 3)
        got = path(Tensor(X), blk, bp, K).data
        assert np.allclose(got, reference_block(X, blk, bp, K), rtol=0, atol=1e-11)


@pytest.mark.parametrize("path", [P.prompted_block_compositional, P.prompted_block_fused])
def test_block_recovers_unprompted_bitwise(rng, path):
    for _ in range(10):
        X = Tensor(rng.normal(size=(7, 8)))
        blk = random_block(rng, 8)
        bp = random_prompt(rng, 8, 0, 3, alpha=0.0, beta=0.0)
        assert np.array_equal(path(X, blk, bp, 3).data, grapher_block(X, blk, 3).data)


def test_dual_path_fifty_configs():
    diffs = dual_path_trials(54, seed=3)
    assert max(d for _, d in diffs) <= 1e-10
    assert {c[:4] for c, _ in diffs} >= {(M, r, K, d) for M in (0, 1, 4) for r in (2, 8)
                                         for K in (1, 3, 5) for d in (8, 16) if r < d}


@pytest.mark.parametrize("M,N,K,k", [(0, 1, 3, 0), (0, 4, 1, 1), (1, 1, 3, 1), (4, 6, 5, 5), (1, 5, 5, 5)])
@pytest.mark.parametrize("r", [2, 8])
def test_dual_path_by_neighborhood_size(rng, M, N, K, k, r):
    X = Tensor(rng.normal(size=(N, 16)))
    blk, bp = random_block(rng, 16), random_prompt(rng, 16, M, r)
    assert P.prompted_topology(X, bp, K).real_index().shape[1] == k
    a = P.prompted_block_compositional(X, blk, bp, K).data
    b = P.prompted_block_fused(X, blk, bp, K).data
    assert np.max(np.abs(a - b)) <= 1e-10


def test_dual_path_batched(rng):
    X = Tensor(rng.normal(size=(3, 6, 8)))
    blk, bp = random_block(rng, 8), random_prompt(rng, 8, 2, 3)
    a = P.prompted_block_compositional(X, blk, bp, 3).data
    b = P.prompted_block_fused(X, blk, bp, 3).data
    assert np.max(np.abs(a - b)) <= 1e-10
    for i in range(3):
        assert np.allclose(b[i], P.prompted_block_fused(Tensor(X.data[i]), blk, bp, 3).data, rtol=0, atol=1e-12)


@given(st.integers(0, 10**6), st.sampled_from([4, 8, 32]))
def test_low_rank_structure(seed, r):
    node_sv, edge_sv = lowrank_singular_values(r, seed=seed)
    assert np.all(node_sv[r:] <= 1e-8) and np.all(edge_sv[r:] <= 1e-8)
    assert node_sv[r - 1] > 1e-3 and edge_sv[r - 1] > 1e-3   # the bound is not vacuous


def test_prompted_network_recovers_backbone(rng):
    cfg = PatchConfig(image_h=8, image_w=8, patch_size=2, d=16, K=4)
    bb = init_backbone(cfg, n_blocks=2, d_ff=32, seed=0)
    prompts = P.PromptParams([random_prompt(rng, 16, 0, 4, alpha=0.0, beta=0.0) for _ in range(2)])
    for _ in range(5):
        img = rng.normal(size=(8, 8, 3))
        ref = backbone_forward(img, bb).data
        assert np.array_equal(P.prompted_forward(img, bb, prompts).data, ref)
        assert np.array_equal(P.prompted_forward(img, bb, prompts, path="compositional").data, ref)


def test_zero_init_is_transparent_except_blend(rng):
    # P_n = P_e = P_g = 0 at init: node delta and edge term vanish exactly
    prompts = P.init_prompts(16, 1, M=2, r=4, alpha=0.2, beta=0.2, seed=0)
    bp = prompts.blocks[0]
    X = Tensor(rng.normal(size=(5, 16)))
    assert np.array_equal(P.selo_node_apply(X, bp).data, X.data * 0.8)
    nbrs = T.gather(X, rng.integers(0, 5, size=(5, 3)))
    assert np.array_equal(P.selo_edge_apply(X, nbrs, bp).data, X.data * 0.8)


def test_every_prompt_tensor_gets_gradient(rng):
    cfg = PatchConfig(image_h=8, image_w=8, patch_size=2, d=16, K=4, channels=3)
    bb = init_backbone(cfg, n_blocks=2, d_ff=32, seed=0)
    prompts = P.PromptParams([random_prompt(rng, 16, 3, 4, alpha=0.2, beta=0.2, scale=0.5) for _ in range(2)])
    head = Tensor(rng.normal(size=(16, 3)), requires_grad=True)
    imgs = rng.normal(size=(4, 8, 8, 3))
    T.cross_entropy(head_forward(P.prompted_forward(imgs, bb, prompts), head), [0, 1, 2, 0]).backward()
    for name, t in prompts.named_tensors().items():
        assert t.grad is not None and np.linalg.norm(t.grad) > 0, name


# ------------------------------------------------------------- params, io
def test_default_shapes():
    prompts = P.init_prompts(64, 4, M=4, r=32, seed=0)
    bp = prompts.blocks[0]
    assert (bp.alpha, bp.beta) == (0.2, 0.2)
    shapes = {k: v.shape for k, v in bp.tensors().items()}
    assert shapes == {"seeds": (4, 32), "P_g": (32, 64), "P_e": (32, 64), "P_n": (32, 64),
                      "S1": (64, 32), "S2": (32, 32)}
    assert np.all(bp.P_g.data == 0) and np.all(bp.P_e.data == 0) and np.all(bp.P_n.data == 0)
    assert all(t.requires_grad for t in prompts.trainable())
    assert abs(np.std(np.concatenate([b.S1.data.ravel() for b in prompts.blocks])) - 0.02) < 2e-3


def test_hidden_width():
    assert P.hidden_width(64, 8) == 16 and P.hidden_width(64, 32) == 32 and P.hidden_width(16, 2) == 4


@pytest.mark.parametrize("kw", [dict(d=8, r=8), dict(d=8, r=2, alpha=1.5), dict(d=8, r=2, beta=-0.1)])
def test_prompt_validation(kw):
    with pytest.raises(P.PromptConfigError):
        P.init_prompts(kw.pop("d"), 1, M=1, **kw)


def test_prompts_disjoint_from_backbone():
    cfg = PatchConfig(image_h=8, image_w=8, patch_size=2, d=16, K=4)
    bb = init_backbone(cfg, 2, 32)
    prompts = P.init_prompts(16, 2, M=2, r=4)
    ids = {id(t.data) for t in bb.named_tensors().values()}
    assert not ids & {id(t.data) for t in prompts.trainable()}


def test_prompt_checkpoint_roundtrip_and_validation(tmp_path, rng):
    cfg = PatchConfig(image_h=8, image_w=8, patch_size=2, d=16, K=4)
    bb = init_backbone(cfg, 2, 32)
    prompts = P.PromptParams([random_prompt(rng, 16, 2, 4) for _ in range(2)])
    for bp in prompts.blocks:
        for k, t in bp.tensors().items():
            t.data = t.data.astype(np.float32).astype(np.float64)
    P.save_prompts(prompts, tmp_path / "p")
    back = P.load_prompts(tmp_path / "p", bb)
    for name, t in prompts.named_tensors().items():
        assert np.array_equal(back.named_tensors()[name].data, t.data)
    assert [(b.alpha, b.beta) for b in back.blocks] == [(b.alpha, b.beta) for b in prompts.blocks]
    other = init_backbone(PatchConfig(image_h=8, image_w=8, patch_size=2, d=8, K=4), 2, 16)
    with pytest.raises(P.PromptConfigError):
        P.load_prompts(tmp_path / "p", other)
    with pytest.raises(P.PromptConfigError):
        P.load_prompts(tmp_path / "p", init_backbone(cfg, 3, 32))
