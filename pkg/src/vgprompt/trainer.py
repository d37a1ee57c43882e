"""Frozen-backbone fine-tuning: head, AdamW, cosine schedule, accounting."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .grapher import BackboneParams
from .patchgraph import PatchConfig
from .prompts import PromptParams, hidden_width, prompted_forward
from .tensor import Tensor

logger = logging.getLogger(__name__)

# Reference figures for a full-size ViG-M, averaged over ten vision datasets.
REF_FULL_FT_PARAMS_M = 48.68
REF_VGP_PARAMS_M = 2.61
REF_REDUCTION_PCT = 94.6
REF_FULL_FT_GFLOPS = 8.94
REF_VGP_GFLOPS = 9.22
REF_FLOP_OVERHEAD_PCT = 3.1


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message, step=None, lr=None, tensor=None):
        super().__init__(message)
        self.step, self.lr, self.tensor = step, lr, tensor


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    grad_clip: float | None = None
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    dtype: str = "float32"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass
class ParamReport:
    total_params: int
    trainable_params: int
    frozen_params: int
    full_finetune_params: int
    reduction_pct: float
    approx_flops_forward: int
    backbone_flops_forward: int

    @property
    def flop_overhead_pct(self) -> float:
        return 100.0 * (self.approx_flops_forward / self.backbone_flops_forward - 1.0)

    def to_json(self) -> dict:
        out = asdict(self)
        out["flop_overhead_pct"] = self.flop_overhead_pct
        return out


# ----------------------------------------------------------------- model
def head_forward(X: Tensor, W_head: Tensor) -> Tensor:
    """Mean-pool the real nodes of ``[..., N, d]`` features, then map to logits."""
    if W_head.shape[1] < 2:
        raise ValueError(f"head needs C >= 2 classes, got {W_head.shape[1]}")
    return T.matmul(T.mean(X, axis=-2), W_head)


def init_head(d: int, n_classes: int, seed: int = 0, std: float = 0.02) -> Tensor:
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(0, std, (d, n_classes)), requires_grad=True, name="head")


@dataclass
class PeftModel:
    """Frozen backbone, optional prompts (``None`` = linear probe), trainable head.

    Computation runs in the head's dtype; the backbone is used through a
    cast copy, so the stored weights are never written.
    """

    backbone: BackboneParams
    prompts: PromptParams | None
    head: Tensor
    freeze_topology: bool = False

    def __post_init__(self):
        dtype = self.head.data.dtype
        self._compute = self.backbone if self.backbone.embedder.data.dtype == dtype \
            else self.backbone.astype(dtype)

    def trainable(self) -> list[Tensor]:
        prompt_ts = [] if self.prompts is None else self.prompts.trainable()
        return prompt_ts + [self.head]

    def named_trainable(self) -> dict[str, Tensor]:
        out = {} if self.prompts is None else dict(self.prompts.named_tensors())
        out["head"] = self.head
        return out

    def logits(self, images) -> Tensor:
        feats = prompted_forward(images, self._compute, self.prompts,
                                 freeze_topology=self.freeze_topology)
        return head_forward(feats, self.head)


def make_model(backbone: BackboneParams, prompts: PromptParams | None, head: Tensor,
               dtype="float32", freeze_topology: bool = False) -> PeftModel:
    """Cast prompts and head to ``dtype`` in place and wrap them with the backbone."""
    for t in ([] if prompts is None else prompts.trainable()) + [head]:
        t.data = t.data.astype(dtype)
    return PeftModel(backbone, prompts, head, freeze_topology)


# ------------------------------------------------------------- optimizer
def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine annealing from ``base_lr`` (step 0) towards zero at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


class AdamW:
    """Adam with decoupled weight decay (``p <- p - lr * wd * p`` before the Adam step)."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data * (1 - lr * self.weight_decay) - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def train_step(images, labels, model: PeftModel, opt: AdamW, lr: float, step: int = 0,
               grad_clip: float | None = None) -> float:
    """One AdamW update of prompts and head on a batch; the backbone is never touched.

    Returns the batch loss (before the update). The batch's predictions are
    left in ``model.last_predictions``.
    """
    if not model.backbone.frozen:
        raise RuntimeError("train_step expects a frozen backbone")
    logits = model.logits(images)
    model.last_predictions = np.argmax(logits.data, axis=-1)
    loss = T.cross_entropy(logits, labels)
    value = float(loss.data)
    if not math.isfinite(value):
        bad = T.first_nonfinite(loss)
        culprit = next((n for n, t in model.named_trainable().items()
                        if not np.all(np.isfinite(t.data))), bad.op if bad is not None else "unknown")
        raise NonFiniteLoss(f"non-finite loss at step {step} (lr={lr:g}, offending tensor: {culprit})",
                            step=step, lr=lr, tensor=culprit)
    opt.zero_grad()
    loss.backward()
    if grad_clip is not None:
        clip_grad_norm(opt.params, grad_clip)
    opt.step(lr)
    return value


def predict(images, model: PeftModel, batch_size: int = 64) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch_size):
        out.append(np.argmax(model.logits(images[s:s + batch_size]).data, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def evaluate(images, labels, model: PeftModel, batch_size: int = 64) -> float:
    """Top-1 accuracy in ``[0, 1]``."""
    if len(images) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict(images, model, batch_size)
    return float(np.mean(pred == np.asarray(labels)))


def fit(model: PeftModel, train, val, cfg: TrainConfig, metrics_path=None) -> list[dict]:
    """Train for ``cfg.epochs`` epochs, recording one metrics record per epoch.

    ``train`` and ``val`` are ``(images, labels)`` pairs. With
    ``metrics_path`` each record is appended as a JSON line as soon as the
    epoch ends. ``train_loss`` and ``train_acc`` are running values over the
    epoch's steps (predictions taken before each update).
    """
    x_tr, y_tr = train
    x_va, y_va = val
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.trainable(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(x_tr) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        Path(metrics_path).write_text("")
    history, step = [], 0
    for epoch in range(cfg.epochs):
        epoch_lr = cosine_lr(cfg.lr, step, total)
        order = rng.permutation(len(x_tr))
        losses, correct = [], 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            lr = cosine_lr(cfg.lr, step, total)
            losses.append(train_step(x_tr[idx], y_tr[idx], model, opt, lr, step, cfg.grad_clip))
            correct += int(np.sum(model.last_predictions == y_tr[idx]))
            step += 1
        record = {"epoch": epoch + 1, "lr": epoch_lr, "train_loss": float(np.mean(losses)),
                  "train_acc": correct / len(x_tr), "val_acc": evaluate(x_va, y_va, model)}
        history.append(record)
        logger.info("epoch %d loss %.4f train %.3f val %.3f", epoch + 1, record["train_loss"],
                    record["train_acc"], record["val_acc"])
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    return history


# ------------------------------------------------------------ accounting
def count_params(backbone: BackboneParams, prompts: PromptParams | None, head: Tensor) -> ParamReport:
    """Exact parameter counts plus a forward FLOP estimate (2 x matmul mult-adds)."""
    frozen = backbone.num_params()
    prompt_n = 0 if prompts is None else prompts.num_params()
    head_n = head.data.size
    trainable = prompt_n + head_n
    full_ft = frozen + head_n
    cfg = backbone.cfg
    M = [0] * backbone.n_blocks if prompts is None else [bp.M for bp in prompts.blocks]
    r = None if prompts is None else [bp.r for bp in prompts.blocks]
    return ParamReport(
        total_params=frozen + trainable,
        trainable_params=trainable,
        frozen_params=frozen,
        full_finetune_params=full_ft,
        reduction_pct=100.0 * (1.0 - trainable / full_ft),
        approx_flops_forward=forward_flops(cfg, backbone.d_ff, backbone.n_blocks, head.shape[1], M, r),
        backbone_flops_forward=forward_flops(cfg, backbone.d_ff, backbone.n_blocks, head.shape[1]),
    )


def forward_flops(cfg: PatchConfig, d_ff: int, n_blocks: int, n_classes: int,
                  M: list[int] | None = None, r: list[int] | None = None) -> int:
    """``2 x`` multiply-adds of every matrix product in one single-image forward.

    KNN distance evaluations count as a Gram product. Without ``r`` the
    unprompted backbone is counted.
    """
    N, d, K = cfg.n_patches, cfg.d, cfg.K
    macs = N * cfg.patch_dim * d
    for b in range(n_blocks):
        m = 0 if M is None else M[b]
        n_all = N + m
        macs += N * n_all * d                    # real-node KNN distances
        macs += N * 2 * d * d + N * d * d        # aggregation, update
        macs += N * d * d_ff + N * d_ff * d      # ffn
        if r is not None:
            rb, rh = r[b], hidden_width(d, r[b])
            macs += m * rb * d                   # virtual features
            macs += m * N * d                    # cosine KNN of virtual nodes
            macs += n_all * (d * rh + rh * rb)   # semantic extractor on every node
            macs += N * rb * d * 2               # node and edge prompt projections
    macs += d * n_classes
    return 2 * macs


def closed_form_trainable(n_blocks: int, d: int, r: int, M: int, n_classes: int) -> int:
    rh = hidden_width(d, r)
    return n_blocks * (M * r + 3 * r * d + d * rh + rh * r) + d * n_classes


# ----------------------------------------------------------- synthetic data
def make_synthetic(n: int, cfg: PatchConfig, seed: int = 0, noise: float = 0.5):
    """Two-class images: horizontal (class 0) or vertical (class 1) sinusoidal stripes.

    Each image draws a random period, phase and per-channel color gain, then
    adds Gaussian pixel noise of std ``noise``. Classes are balanced.
    """
    rng = np.random.default_rng(seed)
    h, w, c = cfg.image_h, cfg.image_w, cfg.channels
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    images = np.empty((n, h, w, c))
    for i in range(n):
        period = rng.choice([4.0, 6.0, 8.0])
        phase = rng.uniform(0, 2 * np.pi)
        coord = yy if labels[i] == 0 else xx
        pattern = np.sin(2 * np.pi * coord / period + phase)
        gains = rng.uniform(0.5, 1.5, size=c)
        images[i] = pattern[..., None] * gains + noise * rng.normal(size=(h, w, c))
    return images, labels.astype(np.int64)
