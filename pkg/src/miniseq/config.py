"""Declarative JSON run configuration.

Key names mirror the usual training-config vocabulary
("batch_size_per_gpu", "optimizer", "lr_policy", "dtype", "loss_scale",
"loss_scaling", ...). Parsing is strict: unknown keys are rejected so a typo
cannot silently fall back to a default.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .blocks import DATA_LAYERS, DECODERS, ENCODERS, LOSSES


class ConfigError(ValueError):
    pass


_OPTIMIZERS = {"adam": "adam", "sgd": "sgd", "momentum": "momentum"}
_LR_POLICIES = ("constant", "exp_decay")
_TRANSPORTS = ("in_process", "tcp")
RUN_MODES = ("train", "eval", "train_eval", "infer")


@dataclass
class Config:
    batch_size_per_gpu: int = 32
    num_workers: int = 1
    use_allreduce: bool = False
    transport: str = "in_process"
    worker_addresses: list = field(default_factory=list)
    dtype: str = "float32"
    loss_scale: float | None = None
    loss_scaling: str | None = None
    loss_scaling_params: dict = field(default_factory=dict)
    optimizer: str = "adam"
    optimizer_params: dict = field(default_factory=dict)
    lr_policy: str = "constant"
    lr_policy_params: dict = field(default_factory=dict)
    encoder: str = "rnn"
    encoder_params: dict = field(default_factory=dict)
    decoder: str = "attention_rnn"
    decoder_params: dict = field(default_factory=dict)
    loss: str = "basic_sequence"
    loss_params: dict = field(default_factory=dict)
    data_layer: str = "copy_task"
    data_layer_params: dict = field(default_factory=dict)
    regularizers: list = field(default_factory=list)
    max_steps: int = 1000
    eval_every: int = 100
    eval_batches: int = 4
    infer_max_len: int = 32
    seed: int = 1234
    checkpoint_dir: str = "checkpoints"

    def validate(self) -> "Config":
        if self.batch_size_per_gpu < 1:
            raise ConfigError("batch_size_per_gpu must be >= 1")
        if self.num_workers < 1:
            raise ConfigError("num_workers must be >= 1")
        if self.dtype not in ("float32", "mixed"):
            raise ConfigError(f"dtype must be 'float32' or 'mixed', got {self.dtype!r}")
        if self.loss_scale is not None and self.loss_scaling is not None:
            raise ConfigError("'loss_scale' (static) and 'loss_scaling' (dynamic) are "
                              "mutually exclusive")
        if self.loss_scaling is not None and self.loss_scaling.lower() not in ("backoff", "logmax"):
            raise ConfigError(f"unknown loss_scaling {self.loss_scaling!r}")
        if self.optimizer.lower() not in _OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_policy not in _LR_POLICIES:
            raise ConfigError(f"unknown lr_policy {self.lr_policy!r}")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if self.decoder not in DECODERS:
            raise ConfigError(f"unknown decoder {self.decoder!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.data_layer not in DATA_LAYERS:
            raise ConfigError(f"unknown data_layer {self.data_layer!r}")
        if self.transport not in _TRANSPORTS:
            raise ConfigError(f"unknown transport {self.transport!r}")
        if self.transport == "tcp" and len(self.worker_addresses) != self.num_workers:
            raise ConfigError("tcp transport needs one worker address per worker")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        for reg in self.regularizers:
            extra = set(reg) - {"pattern", "kind", "lambda"}
            if extra:
                raise ConfigError(f"unknown regularizer keys {sorted(extra)}")
            if reg.get("kind", "l2_weight_decay") != "l2_weight_decay":
                raise ConfigError(f"unknown regularizer kind {reg.get('kind')!r}")
            if "pattern" not in reg or "lambda" not in reg:
                raise ConfigError("regularizer entries need 'pattern' and 'lambda'")
        return self

    @property
    def optimizer_kind(self) -> str:
        return _OPTIMIZERS[self.optimizer.lower()]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


def parse_config(data: bytes | str) -> Config:
    """Strict parse of the JSON document into a validated Config."""
    try:
        raw = json.loads(data)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e.msg} at line {e.lineno}"
                          f" column {e.colno}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    known = set(Config.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return Config(**raw).validate()


def load_config(path: str) -> Config:
    with open(path, "rb") as f:
        return parse_config(f.read())
