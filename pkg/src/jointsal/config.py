"""Model and training configuration, ablation chain, and the TOML config file.

Config files are TOML with a ``[model]`` and a ``[train]`` table (dotted
keys such as ``model.depth = 2`` work too). Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .errors import ConfigError

# Rows of the incremental ablation, in order. Each level switches on one
# mechanism on top of all previous ones.
ABLATION_CHAIN = (
    "baseline",
    "decoder",
    "skip_connection",
    "multi_supervision",
    "transformer",
    "multi_task",
    "mam",
)
_FLAGS = ABLATION_CHAIN[1:]


@dataclass
class ModelConfig:
    input_height: int = 48
    input_width: int = 64
    in_channels: int = 3
    widths: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    branch_init_scale: float = 0.5
    embed_dim: int = 32
    num_heads: int = 4
    mlp_ratio: int = 4
    depth: int = 2
    dropout: float = 0.1
    decoder_width: int = 32
    num_classes: int = 4
    seg_width: int = 32
    mam_reduction: int = 4
    seg_grad_scale: float = 0.1
    decoder: bool = True
    skip_connection: bool = True
    multi_supervision: bool = True
    transformer: bool = True
    multi_task: bool = True
    mam: bool = True
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.validate()

    @classmethod
    def for_ablation(cls, level: str, **overrides) -> "ModelConfig":
        """Config with every mechanism up to and including ``level`` enabled."""
        if level not in ABLATION_CHAIN:
            raise ConfigError(f"unknown ablation level {level!r}; expected one of {ABLATION_CHAIN}")
        upto = ABLATION_CHAIN.index(level)
        flags = {name: i + 1 <= upto for i, name in enumerate(_FLAGS)}
        flags.update(overrides)
        return cls(**flags)

    @property
    def ablation_level(self) -> str:
        enabled = [getattr(self, f) for f in _FLAGS]
        return ABLATION_CHAIN[sum(enabled)]

    @property
    def stage_hw(self) -> list[tuple[int, int]]:
        """Feature grids of the four backbone stages (strides 4, 8, 16, 32)."""
        return [(-(-self.input_height // s), -(-self.input_width // s)) for s in (4, 8, 16, 32)]

    def validate(self) -> None:
        enabled = [getattr(self, f) for f in _FLAGS]
        if any(enabled[i + 1] and not enabled[i] for i in range(len(enabled) - 1)):
            on = [f for f in _FLAGS if getattr(self, f)]
            raise ConfigError(
                f"inconsistent ablation flags {on}: each of {list(_FLAGS)} requires all earlier ones"
            )
        if self.input_height % 16 or self.input_width % 16:
            raise ConfigError(
                f"input size {self.input_height}x{self.input_width} must be a multiple of 16 on both axes"
            )
        if len(self.widths) != 4:
            raise ConfigError(f"widths needs 4 stage channel counts, got {self.widths}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.depth < 1:
            raise ConfigError("transformer depth must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must count background plus at least one class")
        if self.embed_dim % self.mam_reduction:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by mam_reduction {self.mam_reduction}")
        if self.seg_grad_scale < 0:
            raise ConfigError("seg_grad_scale must be >= 0")


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    optimizer: str = ""
    lr: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    sal_batch_size: int = 8
    seg_batch_size: int = 1
    seg_batches_per_step: int = 1
    loss_lambda: float = 0.1
    epochs: int = 10
    lr_milestones: tuple = ()
    lr_decay: float = 0.1
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not self.optimizer:
            self.optimizer = "sgd_momentum" if self.phase == "pretrain" else "adam"
        if not self.lr:
            self.lr = 0.01 if self.phase == "pretrain" else 1e-5
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        self.validate()

    def validate(self) -> None:
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"phase must be 'pretrain' or 'finetune', got {self.phase!r}")
        if self.optimizer not in ("sgd_momentum", "adam"):
            raise ConfigError(f"optimizer must be 'sgd_momentum' or 'adam', got {self.optimizer!r}")
        if self.loss_lambda < 0:
            raise ConfigError("lambda must be >= 0")
        if self.phase == "finetune" and self.loss_lambda != 0:
            raise ConfigError("finetune phase requires lambda = 0 (the segmentation branch is frozen out)")
        if self.sal_batch_size < 1 or self.seg_batch_size < 1 or self.seg_batches_per_step < 0:
            raise ConfigError("batch sizes must be >= 1 and seg_batches_per_step >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if list(self.lr_milestones) != sorted(self.lr_milestones):
            raise ConfigError("lr_milestones must be increasing")


# config-file key -> dataclass field, where they differ
_KEY_ALIASES = {"train": {"lambda": "loss_lambda"}}
_FIELD_ALIASES = {sec: {v: k for k, v in m.items()} for sec, m in _KEY_ALIASES.items()}


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _line_of(text: str, key: str) -> int:
    pattern = re.compile(rf"^\s*(?:[\w.]+\.)?{re.escape(key)}\s*=", re.MULTILINE)
    m = pattern.search(text)
    return text.count("\n", 0, m.start()) + 1 if m else 0


def parse_config(text: str) -> tuple[ModelConfig, TrainConfig]:
    """Parse config text into (ModelConfig, TrainConfig)."""
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from None

    unknown = [k for k in doc if k not in ("model", "train")]
    if unknown:
        raise ConfigError(f"line {_line_of(text, unknown[0])}: unknown section {unknown[0]!r}")

    built = {}
    for section, cls in (("model", ModelConfig), ("train", TrainConfig)):
        values = dict(doc.get(section, {}))
        aliases = _KEY_ALIASES.get(section, {})
        kwargs: dict[str, Any] = {}
        if section == "model" and "ablation" in values:
            level = values.pop("ablation")
            try:
                kwargs.update(dataclasses.asdict(ModelConfig.for_ablation(level)))
            except ConfigError as exc:
                raise ConfigError(f"line {_line_of(text, 'ablation')}: {exc}") from None
        for key, value in values.items():
            name = aliases.get(key, key)
            if name not in _field_names(cls):
                raise ConfigError(f"line {_line_of(text, key)}: unknown key {section}.{key}")
            if isinstance(value, dict):
                raise ConfigError(f"line {_line_of(text, key)}: {section}.{key} must be a scalar or list")
            kwargs[name] = tuple(value) if isinstance(value, list) else value
        try:
            built[section] = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"{section}: {exc}") from None
    return built["model"], built["train"]


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    return parse_config(Path(path).read_text())


def dump_config(model: ModelConfig, train: TrainConfig) -> str:
    """Render both configs as TOML; ``parse_config`` inverts this."""
    doc = {}
    for section, cfg in (("model", model), ("train", train)):
        aliases = _FIELD_ALIASES.get(section, {})
        table = {}
        for f in fields(cfg):
            value = getattr(cfg, f.name)
            table[aliases.get(f.name, f.name)] = list(value) if isinstance(value, tuple) else value
        doc[section] = table
    return tomli_w.dumps(doc)


_HELP_NOTES = {
    "train.optimizer": "empty: sgd_momentum for pretrain, adam for finetune",
    "train.lr": "0: 0.01 for pretrain, 1e-5 for finetune",
    "train.lambda": "must be 0 for finetune",
    "train.lr_milestones": "steps at which lr is multiplied by lr_decay",
}


def _toml_literal(value) -> str:
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_toml_literal(v) for v in value) + "]"
    return tomli_w.dumps({"v": value}).split("=", 1)[1].strip()


def config_help() -> str:
    """One line per config key with its default, for ``--help`` output."""
    lines = []
    for section, cls in (("model", ModelConfig), ("train", TrainConfig)):
        aliases = _FIELD_ALIASES.get(section, {})
        for f in fields(cls):
            key = f"{section}.{aliases.get(f.name, f.name)}"
            line = f"{key} = {_toml_literal(f.default)}"
            if key in _HELP_NOTES:
                line += f"  ({_HELP_NOTES[key]})"
            lines.append(line)
    lines.append(f"model.ablation = one of {', '.join(ABLATION_CHAIN)}")
    return "\n".join(lines)
