"""
Typed run configuration and the flat ``key = value`` config file reader.

Keys are dotted by section (``train.lr = 0.001``). Every field of every section is
addressable; anything else is a ConfigError.
"""
import typing
from typing import Dict, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from shared.errors import ConfigError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    @field_validator("*", mode="before")
    @classmethod
    def _coerce_text(cls, value, info):
        if not isinstance(value, str):
            return value
        annotation = cls.model_fields[info.field_name].annotation
        args = typing.get_args(annotation)
        if type(None) in args and value.strip().lower() in ("", "none", "null"):
            return None
        origins = {typing.get_origin(annotation)} | {typing.get_origin(a) for a in args}
        if origins & {tuple, list}:
            return [v.strip() for v in value.split(",") if v.strip()]
        return value


class EncoderConfig(_Section):
    vocab_size: Optional[int] = None
    max_seq_len: int = 32
    model_dim: int = 32
    num_layers: int = 2
    num_heads: int = 2
    ffn_dim: int = 64
    adapter_bottleneck_dim: int = 8
    adapter_activation: str = "relu"
    head_out_dim: int = 32
    dropout_rate: float = 0.1

    @model_validator(mode="after")
    def _check(self):
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        if self.head_out_dim <= 0:
            raise ValueError("head_out_dim must be positive")
        if self.adapter_activation not in ("relu", "gelu"):
            raise ValueError(f"adapter_activation must be relu or gelu, got {self.adapter_activation}")
        if self.vocab_size is not None and self.vocab_size <= 4:
            raise ValueError("vocab_size must leave room beyond the 4 reserved tokens")
        return self

    @property
    def num_adapters(self) -> int:
        return 2 * self.num_layers

    @property
    def adapter_param_count(self) -> int:
        d, b = self.model_dim, self.adapter_bottleneck_dim
        return d * b + b + b * d + d


class ConditioningConfig(_Section):
    variant: str = "grad2task"
    embedding_size: int = 16
    hidden_size: int = 32
    gru_layers: int = 2
    adapt_hidden_multiplier: int = 2
    adapt_linear: bool = False
    normalize_features: bool = True
    fisher_mode: str = "batch"
    proto_per_class: Optional[int] = None
    probe_size: Optional[int] = None

    @field_validator("fisher_mode")
    @classmethod
    def _fisher_mode(cls, value):
        if value not in ("batch", "per_example"):
            raise ValueError(f"fisher_mode must be batch or per_example, got {value}")
        return value


class DataConfig(_Section):
    meta_train: Tuple[str, ...] = ("keyword-presence", "keyword-parity", "dominant-topic:3")
    meta_test: Tuple[str, ...] = ("lexicon-sentiment", "dominant-topic:5")
    train_per_class: int = 64
    val_per_class: int = 32
    test_size: int = 200
    min_len: int = 8
    max_len: int = 16
    words_per_family: int = 24
    vocab_limit: int = 1024
    label_noise: float = 0.0


class TrainConfig(_Section):
    stage: int = 1
    episodes_per_step: int = 4
    subsample_rounds: int = 1
    shots: int = 4
    query_shots: Optional[int] = None
    lr: float = 1e-3
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    max_epochs: int = 10
    patience: int = 2
    seed: int = 0
    checkpoint_path: Optional[str] = None
    steps_per_epoch: Optional[int] = None
    max_steps: Optional[int] = None
    extra_steps: Optional[int] = None
    val_episodes_per_task: int = 8
    pretrain_steps: int = 300
    pretrain_batch_size: int = 16
    pretrain_lr: float = 1e-3
    mask_rate: float = 0.15
    deterministic: bool = False

    @model_validator(mode="after")
    def _check(self):
        if self.episodes_per_step < 1:
            raise ValueError("episodes_per_step must be >= 1")
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.subsample_rounds < 1:
            raise ValueError("subsample_rounds must be >= 1")
        return self

    @property
    def query_k(self) -> int:
        return self.shots if self.query_shots is None else self.query_shots


class EvalConfig(_Section):
    shots: Tuple[int, ...] = (4, 8, 16)
    runs: int = 10
    batch_size: int = 64
    allow_overlap: bool = False


class SameDiffConfig(_Section):
    shots: Tuple[int, ...] = (4, 8, 16)
    train_pairs: int = 64
    eval_pairs: int = 40
    proj_dim: int = 16
    lr: float = 1e-2
    epochs: int = 200


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    conditioning: ConditioningConfig = Field(default_factory=ConditioningConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    samediff: SameDiffConfig = Field(default_factory=SameDiffConfig)

    def flat(self) -> Dict[str, object]:
        out = {}
        for section, values in self.model_dump().items():
            for key, value in values.items():
                out[f"{section}.{key}"] = list(value) if isinstance(value, tuple) else value
        return out


def read_config_file(path: str) -> Dict[str, str]:
    entries: Dict[str, str] = {}
    with open(path, "r") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            entries[key] = value
    return entries


def parse_override(text: str) -> Tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = (part.strip() for part in text.split("=", 1))
    return key, value


def build_run_config(entries: Dict[str, object]) -> RunConfig:
    nested: Dict[str, Dict[str, object]] = {}
    sections = RunConfig.model_fields
    for key, value in entries.items():
        section, _, field = key.partition(".")
        if section not in sections or not field:
            raise ConfigError(f"unknown config key '{key}'")
        if field not in sections[section].annotation.model_fields:
            raise ConfigError(f"unknown config key '{key}'")
        nested.setdefault(section, {})[field] = value
    try:
        return RunConfig.model_validate(nested)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
