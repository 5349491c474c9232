"""Run configuration: a nested YAML file whose defaults are the published
hyperparameters.  Unknown keys are rejected; relative paths resolve against the
config file's directory."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

OUTPUT_ROOT_ENV = "MOFORMER_OUTPUT_ROOT"


@dataclass
class DataSection:
    pretrain_manifest: str | None = None
    finetune_manifest: str | None = None
    vocab: str | None = None
    graph_cache: str | None = None
    target_name: str = "target"
    target_unit: str = ""


@dataclass
class TransformerSection:
    d_emb: int = 512
    n_heads: int = 8
    n_layers: int = 6
    d_ff: int = 512
    max_len: int = 512


@dataclass
class CgcnnSection:
    atom_fea_len: int = 64
    n_conv: int = 3
    embed_size: int = 512
    r_cut: float = 8.0
    m_max: int = 12
    gauss_step: float = 0.2
    gauss_width: float = 0.2


@dataclass
class PretrainSection:
    batch_size: int = 32
    lr: float = 1e-5
    epochs: int = 15
    fractions: list[float] = field(default_factory=lambda: [0.95, 0.05])
    weight_decay: float = 0.0
    lam: float = 0.0051
    projector_dim: int = 512
    centered: bool = False
    max_steps: int | None = None


@dataclass
class FinetuneSection:
    encoder: str = "moformer"
    init: str | None = None
    # None means "use the published value for this encoder/init combination"
    lr_encoder: float | None = None
    lr_head: float | None = None
    batch_size: int | None = None
    epochs: int = 200
    weight_decay: float = 1e-6
    fractions: list[float] = field(default_factory=lambda: [0.7, 0.15, 0.15])
    remainder: str = "drop"
    train_subset: int | None = None
    standardize: bool = True
    repeats: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = True
    output_dir: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    transformer: TransformerSection = field(default_factory=TransformerSection)
    cgcnn: CgcnnSection = field(default_factory=CgcnnSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True), encoding="utf-8")

    def resolved(self) -> "RunConfig":
        """Copy with branch-specific fine-tuning defaults filled in."""
        cfg = from_dict(self.to_dict())
        ft = cfg.finetune
        if ft.encoder == "moformer":
            ft.lr_encoder = 5e-5 if ft.lr_encoder is None else ft.lr_encoder
            ft.lr_head = 0.01 if ft.lr_head is None else ft.lr_head
            ft.batch_size = 64 if ft.batch_size is None else ft.batch_size
        else:
            lr = 0.002 if ft.init else 0.01
            ft.lr_encoder = lr if ft.lr_encoder is None else ft.lr_encoder
            ft.lr_head = lr if ft.lr_head is None else ft.lr_head
            ft.batch_size = 128 if ft.batch_size is None else ft.batch_size
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root:
            cfg.output_dir = str(Path(root).resolve())
        return cfg


_PATH_FIELDS = {
    ("data", "pretrain_manifest"),
    ("data", "finetune_manifest"),
    ("data", "vocab"),
    ("data", "graph_cache"),
    ("finetune", "init"),
}


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        sub = known[name]
        key = f"{where}.{name}" if where else name
        default = sub.default_factory() if sub.default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key)
        else:
            kwargs[name] = _coerce(value, default, sub.type, key)
    return cls(**kwargs)


def _coerce(value, default, type_name: str, key: str):
    if value is None:
        if "None" in str(type_name):
            return None
        raise ConfigError(f"{key} may not be null")
    t = str(type_name)
    try:
        if t.startswith("bool"):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if t.startswith("int"):
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        if t.startswith("float"):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if t.startswith("str"):
            return str(value)
        if t.startswith("list"):
            return [float(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot use {value!r} as {t}") from None
    return value


def from_dict(raw: dict) -> RunConfig:
    cfg = _build(RunConfig, raw or {}, "")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.finetune.encoder not in ("moformer", "cgcnn"):
        raise ConfigError(f"finetune.encoder must be moformer or cgcnn, got {cfg.finetune.encoder!r}")
    if cfg.finetune.remainder not in ("drop", "train"):
        raise ConfigError("finetune.remainder must be 'drop' or 'train'")
    for name, fr in (("finetune", cfg.finetune.fractions), ("pretrain", cfg.pretrain.fractions)):
        if abs(sum(fr) - 1.0) > 1e-9 or min(fr) < 0:
            raise ConfigError(f"{name}.fractions must be non-negative and sum to 1, got {fr}")
    if len(cfg.finetune.fractions) != 3 or len(cfg.pretrain.fractions) != 2:
        raise ConfigError("finetune.fractions needs 3 entries, pretrain.fractions 2")
    if cfg.transformer.d_emb % cfg.transformer.n_heads:
        raise ConfigError("transformer.d_emb must be divisible by transformer.n_heads")
    if cfg.finetune.repeats < 1:
        raise ConfigError("finetune.repeats must be at least 1")


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Read YAML (or start from defaults), apply ``section.key=value`` overrides,
    and make relative paths absolute."""
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        base = path.resolve().parent
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        node = raw
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-section")
        node[parts[-1]] = yaml.safe_load(value)
    cfg = from_dict(raw)
    return absolutize(cfg, base)


def absolutize(cfg: RunConfig, base: Path) -> RunConfig:
    for section, name in _PATH_FIELDS:
        sec = getattr(cfg, section)
        value = getattr(sec, name)
        if value is not None and not Path(value).is_absolute():
            setattr(sec, name, str((base / value).resolve()))
    if not Path(cfg.output_dir).is_absolute():
        cfg.output_dir = str((base / cfg.output_dir).resolve())
    return cfg


def require_paths(cfg: RunConfig, *keys: tuple[str, str]) -> None:
    for section, name in keys:
        value = getattr(getattr(cfg, section), name)
        if value is None:
            raise ConfigError(f"{section}.{name} must be set for this command")
        if not Path(value).exists():
            raise ConfigError(f"{section}.{name} points at a missing path: {value}")
