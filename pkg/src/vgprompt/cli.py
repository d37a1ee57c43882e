"""Command line: ``vgprompt {train,eval,analyze,verify,report,gen-data}``.

Exit codes: 0 ok, 1 verification failure, 2 config or input error,
3 numeric failure (non-finite loss or activations).

Checkpoint layout (``paths.checkpoint_dir``)::

    run.json          mode, seed and the resolved config
    backbone/         manifest.json + one .vgpt per frozen tensor
    prompts/          same, only for mode = vgp
    head.vgpt

Reports (``paths.report_dir``): ``metrics.jsonl``, ``param_report.json``,
``eval.json``, ``analysis.json`` with ``layer{i}_coefficients.csv`` and
``layer{i}_rgb.vgpt``, ``report.txt`` and ``report.csv``. Nothing written
there carries a timestamp, so reruns with the same seed are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import analyzer, trainer
from .config import ConfigError, RunConfig, load_config, validate
from .grapher import init_backbone, load_backbone, save_backbone
from .io import FormatError, load_tensor, read_json, save_tensor, write_json
from .prompts import PromptConfigError, init_prompts, load_prompts, prompted_forward, save_prompts
from .tensor import NonFiniteError, ShapeError, Tensor
from .trainer import (count_params, evaluate, fit, init_head, make_model, make_synthetic)
from .verify import run_suites

log = logging.getLogger("vgprompt")

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


class InputError(Exception):
    pass


# ----------------------------------------------------------------- helpers
def data_seeds(seed: int) -> tuple[int, int]:
    """Seeds of the synthetic train and validation splits for run seed ``seed``."""
    return 10 * seed + 1, 10 * seed + 2


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    if getattr(args, "linear_probe", False):
        cfg.prompt.mode = "linear"
    return validate(cfg)


def _synthetic(cfg: RunConfig):
    pc = cfg.patch_config()
    s_tr, s_va = data_seeds(cfg.seed)
    return (make_synthetic(cfg.data.n_train, pc, seed=s_tr, noise=cfg.data.noise),
            make_synthetic(cfg.data.n_val, pc, seed=s_va, noise=cfg.data.noise))


def _load_split(data_dir: Path, split: str, cfg: RunConfig):
    img_p, lab_p = data_dir / f"{split}_images.vgpt", data_dir / f"{split}_labels.vgpt"
    for p in (img_p, lab_p):
        if not p.is_file():
            raise InputError(f"missing dataset file {p} (run gen-data or pass --synthetic)")
    images, labels = load_tensor(img_p).astype(np.float64), load_tensor(lab_p)
    m = cfg.model
    if images.ndim != 4 or images.shape[1:] != (m.image_h, m.image_w, m.channels):
        raise InputError(f"{img_p}: images {images.shape} do not match config "
                         f"(n, {m.image_h}, {m.image_w}, {m.channels})")
    if labels.shape != (images.shape[0],):
        raise InputError(f"{lab_p}: labels {labels.shape} do not match {images.shape[0]} images")
    return images, labels.astype(np.int64)


def _datasets(cfg: RunConfig, synthetic: bool, data_dir=None):
    if synthetic:
        return _synthetic(cfg)
    d = Path(data_dir or cfg.paths.data_dir)
    return _load_split(d, "train", cfg), _load_split(d, "val", cfg)


def _check_backbone(backbone, cfg: RunConfig):
    m, bc = cfg.model, backbone.cfg
    pairs = {"model.d": (bc.d, m.d), "model.d_ff": (backbone.d_ff, m.d_ff),
             "model.blocks": (backbone.n_blocks, m.blocks), "model.K": (bc.K, m.K),
             "model.patch": (bc.patch_size, m.patch), "model.image_h": (bc.image_h, m.image_h),
             "model.image_w": (bc.image_w, m.image_w), "model.channels": (bc.channels, m.channels)}
    for name, (have, want) in pairs.items():
        if have != want:
            raise ConfigError(name, f"checkpoint has {have}, config says {want}")


def load_checkpoint(ckpt: Path, cfg: RunConfig):
    """Backbone, prompts (or None) and head from a checkpoint directory, checked against ``cfg``."""
    if not (ckpt / "run.json").is_file():
        raise InputError(f"{ckpt} is not a checkpoint (no run.json)")
    run = read_json(ckpt / "run.json")
    backbone = load_backbone(ckpt / "backbone")
    _check_backbone(backbone, cfg)
    prompts = load_prompts(ckpt / "prompts", backbone) if run["mode"] == "vgp" else None
    head = Tensor(load_tensor(ckpt / "head.vgpt").astype(np.float64))
    if head.shape[0] != backbone.cfg.d:
        raise ConfigError("model.d", f"head expects d={head.shape[0]}, backbone has {backbone.cfg.d}")
    return backbone, prompts, head, run


def param_report(backbone, prompts, head, cfg: RunConfig) -> dict:
    rep = count_params(backbone, prompts, head).to_json()
    rep["mode"] = cfg.prompt.mode
    if prompts is not None:
        rep["closed_form_trainable"] = trainer.closed_form_trainable(
            cfg.model.blocks, cfg.model.d, cfg.prompt.r, cfg.prompt.M, head.shape[1])
    return rep


# ---------------------------------------------------------------- commands
def cmd_train(args) -> int:
    cfg = _config(args)
    train, val = _datasets(cfg, args.synthetic, args.data)
    n_classes = max(int(train[1].max()) + 1, 2)
    pc, seed = cfg.patch_config(), cfg.seed
    backbone = (load_backbone(args.backbone) if args.backbone
                else init_backbone(pc, cfg.model.blocks, cfg.model.d_ff, seed=seed))
    _check_backbone(backbone, cfg)
    prompts = None
    if cfg.prompt.mode == "vgp":
        p = cfg.prompt
        prompts = init_prompts(cfg.model.d, cfg.model.blocks, M=p.M, r=p.r, alpha=p.alpha,
                               beta=p.beta, seed=seed)
    head = init_head(cfg.model.d, n_classes, seed=seed)

    ckpt, reports = Path(cfg.paths.checkpoint_dir), Path(cfg.paths.report_dir)
    save_backbone(backbone, ckpt / "backbone")
    before = backbone.checksum()
    write_json(reports / "param_report.json", param_report(backbone, prompts, head, cfg))

    model = make_model(backbone, prompts, head, dtype=cfg.train.dtype,
                       freeze_topology=cfg.model.freeze_topology)
    t0 = time.perf_counter()
    history = fit(model, train, val, cfg.train_config(), metrics_path=reports / "metrics.jsonl")
    if backbone.checksum() != before:
        print("error: backbone weights changed during training", file=sys.stderr)
        return EXIT_VERIFY

    save_backbone(backbone, ckpt / "backbone")
    if prompts is not None:
        save_prompts(prompts, ckpt / "prompts")
    save_tensor(ckpt / "head.vgpt", head.data)
    write_json(ckpt / "run.json", {"mode": cfg.prompt.mode, "seed": seed, "n_classes": n_classes,
                                   "config": cfg.to_dict()})
    last = history[-1]
    print(f"trained {cfg.prompt.mode} for {len(history)} epochs in {time.perf_counter() - t0:.1f}s: "
          f"train_acc {last['train_acc']:.3f} val_acc {last['val_acc']:.3f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt = Path(args.checkpoint or cfg.paths.checkpoint_dir)
    backbone, prompts, head, run = load_checkpoint(ckpt, cfg)
    _, (images, labels) = _datasets(cfg, args.synthetic, args.data)
    model = make_model(backbone, prompts, head, dtype=cfg.train.dtype,
                       freeze_topology=cfg.model.freeze_topology)
    acc = evaluate(images, labels, model)
    write_json(Path(cfg.paths.report_dir) / "eval.json",
               {"accuracy": acc, "n": int(len(labels)), "mode": run["mode"]})
    print(f"{run['mode']} accuracy {acc:.4f} on {len(labels)} images")
    return EXIT_OK


def _analysis_features(args, cfg: RunConfig):
    """Per-layer ``[nodes, d]`` feature matrices from dumps, or from a checkpoint forward."""
    if args.features:
        return [load_tensor(p).astype(np.float64) for p in args.features]
    ckpt = Path(args.checkpoint or cfg.paths.checkpoint_dir)
    backbone, prompts, _, _ = load_checkpoint(ckpt, cfg)
    if args.synthetic:
        images = _synthetic(cfg)[1][0]
    elif args.data:
        images = load_tensor(args.data).astype(np.float64)
        if images.ndim == 3:
            images = images[None]
        m = cfg.model
        if images.ndim != 4 or images.shape[1:] != (m.image_h, m.image_w, m.channels):
            raise ConfigError("model.image_h", f"images {images.shape} do not match config "
                              f"({m.image_h}, {m.image_w}, {m.channels})")
    else:
        raise InputError("analyze needs --features, --data or --synthetic")
    images = images[: args.n_images]
    layers = prompted_forward(images, backbone, None if args.backbone_only else prompts,
                              return_layers=True, freeze_topology=cfg.model.freeze_topology)
    return [l.data.reshape(-1, l.shape[-1]) for l in layers]


def cmd_analyze(args) -> int:
    cfg = _config(args)
    feats = _analysis_features(args, cfg)
    out = Path(cfg.paths.report_dir)
    if args.dump_features:
        for i, f in enumerate(feats):
            save_tensor(Path(args.dump_features) / f"layer{i}.vgpt", f)
    report = analyzer.rank_profile(feats, args.epsilon, args.mode, args.normalization, out_dir=out,
                                   rgb=True)
    write_json(out / "analysis.json", report)
    ref = report["reference"]
    print(f"reference: CUB ~{ref['CUB']}, Flowers ~{ref['Flowers']} of d={ref['d']} at eps={ref['epsilon']}")
    print(f"eps={args.epsilon} mode={args.mode} normalization={args.normalization}")
    for layer in report["layers"]:
        print(f"layer {layer['layer']}: est_rank {layer['est_rank']} of d={layer['d']} "
              f"({layer['n_nodes']} nodes)")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_suites(seeds=args.seeds)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED suites: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"all {len(results)} suites passed")
    return EXIT_OK


def fmt_change(pct: float) -> str:
    """Signed percentage with one decimal; a zero change prints as ``0.0%``."""
    r = round(pct, 1)
    return "0.0%" if r == 0 else f"{r:+.1f}%"


def fmt_count(n: float) -> str:
    return f"{n / 1e6:.2f}M" if n >= 1e5 else str(int(n))


def report_rows(param: dict, metrics: list[dict] | None = None) -> list[list[str]]:
    """Table rows: header, the full-scale reference and this run."""
    header = ["setting", "full_ft_params", "trainable_params", "param_change", "flop_overhead",
              "final_train_acc", "final_val_acc"]
    ref = ["reference ViG-M (full scale)", f"{trainer.REF_FULL_FT_PARAMS_M:.2f}M",
           f"{trainer.REF_VGP_PARAMS_M:.2f}M",
           fmt_change(100 * (trainer.REF_VGP_PARAMS_M / trainer.REF_FULL_FT_PARAMS_M - 1)),
           fmt_change(100 * (trainer.REF_VGP_GFLOPS / trainer.REF_FULL_FT_GFLOPS - 1)), "-", "-"]
    full, train_n = param["full_finetune_params"], param["trainable_params"]
    last = metrics[-1] if metrics else {}
    ours = [f"this run ({param.get('mode', '?')})", fmt_count(full), fmt_count(train_n),
            fmt_change(100 * (train_n / full - 1)), fmt_change(param["flop_overhead_pct"]),
            f"{last['train_acc']:.4f}" if last else "-", f"{last['val_acc']:.4f}" if last else "-"]
    return [header, ref, ours]


def render_table(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    cfg = _config(args)
    reports = Path(cfg.paths.report_dir)
    param_p = Path(args.param_report or reports / "param_report.json")
    metrics_p = Path(args.metrics or reports / "metrics.jsonl")
    for p in (param_p, metrics_p):
        if not p.is_file():
            raise InputError(f"missing file {p}")
    param = read_json(param_p)
    metrics = [json.loads(l) for l in metrics_p.read_text().splitlines() if l.strip()]
    rows = report_rows(param, metrics)
    out = Path(args.out or reports)
    out.mkdir(parents=True, exist_ok=True)
    text = render_table(rows)
    (out / "report.txt").write_text(text)
    buf = _io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    (out / "report.csv").write_text(buf.getvalue())
    print(text, end="")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.paths.data_dir)
    for split, (images, labels) in zip(("train", "val"), _synthetic(cfg)):
        save_tensor(out / f"{split}_images.vgpt", images)
        save_tensor(out / f"{split}_labels.vgpt", labels)
    print(f"wrote {cfg.data.n_train} train / {cfg.data.n_val} val images to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vgprompt", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="INI run config (defaults used when omitted)")
        if seed:
            p.add_argument("--seed", type=int, help="override run.seed")

    p = sub.add_parser("train", help="train prompts + head on a frozen backbone")
    common(p)
    p.add_argument("--synthetic", action="store_true", help="use the seeded two-class stripe task")
    p.add_argument("--data", help="dataset dir (default paths.data_dir)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--linear-probe", action="store_true", help="train the head only")
    p.add_argument("--backbone", help="load a saved backbone instead of initializing one")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on the validation split")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--data")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze", help="per-layer PCA rank profile of node features")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="VGPT image tensor [n, H, W, C]")
    p.add_argument("--synthetic", action="store_true", help="analyze seeded validation images")
    p.add_argument("--features", nargs="+", help="analyze VGPT feature dumps [nodes, d] directly")
    p.add_argument("--n-images", type=int, default=4)
    p.add_argument("--backbone-only", action="store_true", help="skip the prompts")
    p.add_argument("--epsilon", type=float, default=0.25)
    p.add_argument("--mode", choices=analyzer.MODES, default="relative")
    p.add_argument("--normalization", choices=analyzer.NORMALIZATIONS, default="l2")
    p.add_argument("--dump-features", metavar="DIR", help="write per-layer features as VGPT")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("verify", help="run the invariant suites")
    p.add_argument("--seeds", type=int, help="randomized trials for dual-path and recovery")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("report", help="parameter / FLOP comparison table")
    common(p)
    p.add_argument("--metrics")
    p.add_argument("--param-report")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("gen-data", help="write the synthetic dataset as VGPT files")
    common(p)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_gen_data)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, PromptConfigError, InputError, FormatError, ShapeError,
            FileNotFoundError, json.JSONDecodeError, KeyError, analyzer.AnalysisError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (trainer.NonFiniteLoss, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
