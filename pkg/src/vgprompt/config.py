"""Run configuration: an INI-style file with fixed sections and keys.

Grammar (``configparser`` syntax; ``#`` or ``;`` start comments)::

    [model]     d, d_ff, blocks, K, patch, image_h, image_w, channels, freeze_topology
    [prompt]    mode (vgp | linear), M, r, alpha, beta
    [train]     lr, weight_decay, epochs, batch_size, grad_clip (number or "none"), dtype
    [data]      n_train, n_val, noise
    [paths]     data_dir, checkpoint_dir, report_dir
    [run]       seed

Every section and key is optional and falls back to the desk-scale defaults
below. Unknown sections or keys and out-of-range values are rejected with a
:class:`ConfigError` naming the offending ``section.key``.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .patchgraph import PatchConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ModelSection:
    d: int = 64
    d_ff: int = 256
    blocks: int = 4
    K: int = 9
    patch: int = 4
    image_h: int = 32
    image_w: int = 32
    channels: int = 3
    freeze_topology: bool = False


@dataclass
class PromptSection:
    mode: str = "vgp"
    M: int = 4
    r: int = 32
    alpha: float = 0.2
    beta: float = 0.2


@dataclass
class TrainSection:
    lr: float = 1e-3
    weight_decay: float = 0.05
    epochs: int = 20
    batch_size: int = 16
    grad_clip: float | None = None
    dtype: str = "float32"


@dataclass
class DataSection:
    n_train: int = 96
    n_val: int = 96
    noise: float = 0.5


@dataclass
class PathsSection:
    data_dir: str = "data"
    checkpoint_dir: str = "runs/checkpoint"
    report_dir: str = "runs/report"


@dataclass
class RunSection:
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    prompt: PromptSection = field(default_factory=PromptSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    paths: PathsSection = field(default_factory=PathsSection)
    run: RunSection = field(default_factory=RunSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    def patch_config(self) -> PatchConfig:
        m = self.model
        return PatchConfig(image_h=m.image_h, image_w=m.image_w, patch_size=m.patch, d=m.d, K=m.K,
                           channels=m.channels)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(lr=t.lr, weight_decay=t.weight_decay, epochs=t.epochs,
                           batch_size=t.batch_size, seed=self.seed, grad_clip=t.grad_clip,
                           dtype=t.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_ini(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {'none' if v is None else v}" for k, v in values.items()]
            lines.append("")
        return "\n".join(lines)


SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _convert(name: str, raw: str, default):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or (default is None and name == "train.grad_clip"):
            if default is None and text.lower() == "none":
                return None
            value = float(text)
            if not math.isfinite(value):
                raise ConfigError(name, f"must be finite, got {raw!r}")
            return value
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {type(default).__name__ if default is not None else 'float'}")
    return text


def _check(cond: bool, name: str, message: str):
    if not cond:
        raise ConfigError(name, message)


def validate(cfg: RunConfig) -> RunConfig:
    """Check every field against the invariants of the module that consumes it."""
    m, p, t, d = cfg.model, cfg.prompt, cfg.train, cfg.data
    _check(m.d >= 1, "model.d", f"must be >= 1, got {m.d}")
    _check(m.d_ff >= 1, "model.d_ff", f"must be >= 1, got {m.d_ff}")
    _check(m.blocks >= 0, "model.blocks", f"must be >= 0, got {m.blocks}")
    _check(m.K >= 1, "model.K", f"must be >= 1, got {m.K}")
    _check(m.patch >= 1, "model.patch", f"must be >= 1, got {m.patch}")
    _check(m.image_h >= 1, "model.image_h", f"must be >= 1, got {m.image_h}")
    _check(m.image_w >= 1, "model.image_w", f"must be >= 1, got {m.image_w}")
    _check(m.image_h % m.patch == 0, "model.image_h", f"{m.image_h} not divisible by patch {m.patch}")
    _check(m.image_w % m.patch == 0, "model.image_w", f"{m.image_w} not divisible by patch {m.patch}")
    _check(m.channels >= 1, "model.channels", f"must be >= 1, got {m.channels}")
    _check(p.mode in ("vgp", "linear"), "prompt.mode", f"must be 'vgp' or 'linear', got {p.mode!r}")
    _check(p.M >= 0, "prompt.M", f"must be >= 0, got {p.M}")
    _check(p.r >= 1, "prompt.r", f"must be >= 1, got {p.r}")
    _check(p.r < m.d, "prompt.r", f"rank r={p.r} must be smaller than d={m.d}")
    _check(0.0 <= p.alpha <= 1.0, "prompt.alpha", f"must lie in [0, 1], got {p.alpha}")
    _check(0.0 <= p.beta <= 1.0, "prompt.beta", f"must lie in [0, 1], got {p.beta}")
    _check(t.lr > 0, "train.lr", f"must be > 0, got {t.lr}")
    _check(t.weight_decay >= 0, "train.weight_decay", f"must be >= 0, got {t.weight_decay}")
    _check(t.epochs >= 1, "train.epochs", f"must be >= 1, got {t.epochs}")
    _check(t.batch_size >= 1, "train.batch_size", f"must be >= 1, got {t.batch_size}")
    _check(t.grad_clip is None or t.grad_clip > 0, "train.grad_clip", f"must be > 0 or none, got {t.grad_clip}")
    _check(t.dtype in ("float32", "float64"), "train.dtype", f"must be float32 or float64, got {t.dtype!r}")
    _check(d.n_train >= 1, "data.n_train", f"must be >= 1, got {d.n_train}")
    _check(d.n_val >= 1, "data.n_val", f"must be >= 1, got {d.n_val}")
    _check(d.noise >= 0, "data.noise", f"must be >= 0, got {d.noise}")
    _check(cfg.run.seed >= 0, "run.seed", f"must be >= 0, got {cfg.run.seed}")
    for k, v in asdict(cfg.paths).items():
        _check(bool(v), f"paths.{k}", "must not be empty")
    return cfg


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", f"syntax error: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(section, f"unknown section; expected one of {sorted(SECTIONS)}")
        obj = getattr(cfg, section)
        known = {f.name: f.default for f in fields(obj)}
        for key, raw in parser.items(section):
            name = f"{section}.{key}"
            if key not in known:
                raise ConfigError(name, f"unknown key; expected one of {sorted(known)}")
            setattr(obj, key, _convert(name, raw, known[key]))
    return validate(cfg)


def load_config(path=None) -> RunConfig:
    if path is None:
        return validate(RunConfig())
    p = Path(path)
    if not p.is_file():
        raise ConfigError("config", f"file not found: {p}")
    return parse_config(p.read_text())
