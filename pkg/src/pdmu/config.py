"""Run configuration: a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored. Unknown keys are errors, so a
typo never silently falls back to a default. ``none`` clears optional values.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass

from .errors import ConfigError

TASKS = ("delay-recall", "psmnist", "spikes", "spike-pattern")
VARIANTS = ("lmu", "pdmu", "bi-pdmu", "epdmu", "spiking-dmu")
MODES = ("sequential", "parallel")
SEED_ENV = "DLSSM_SEED"


@dataclass
class RunConfig:
    task: str = "delay-recall"
    variant: str = "pdmu"
    # layer sizes
    hidden: int = 32
    memory_order: typing.Optional[int] = None  # q, defaults to hidden
    delays: int = 5                            # n
    layers: int = 1
    theta: typing.Optional[float] = None       # memory window in steps, defaults to q
    gate_theta: typing.Optional[float] = None  # gate window in steps, defaults to n
    decode: str = "last"
    f_u: str = "relu"                          # memory/gate input activation
    f_o: str = "relu"                          # hidden output activation
    # training
    lr: float = 1e-3
    batch: int = 128
    epochs: int = 10
    max_steps: int = 0                         # 0 = no step budget
    patience: int = 0                          # 0 = no early stopping
    clip: float = 0.0                          # 0 = no gradient clipping
    seed: int = 0
    train_mode: str = "parallel"
    eval_mode: str = "parallel"
    dtype: str = "float64"
    # task data
    seq_len: int = 64
    delay: int = 4
    train_size: int = 2048
    val_size: int = 512
    data_dir: str = ""
    data_path: str = ""
    perm_seed: int = 0
    train_limit: int = 10000
    val_limit: int = 2000
    classes: int = 4
    channels: int = 16
    # spiking
    encoder_channels: int = 0
    lif_threshold: float = 1.0
    lif_leak: float = 0.9
    surrogate_width: float = 1.0
    readout_leak: float = 0.9
    # benchmark
    bench_repeats: int = 3
    bench_target: str = "classify"             # classify: last-step label; sequence: per-step target

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"task: must be one of {TASKS}, got {self.task!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: must be one of {VARIANTS}, got {self.variant!r}")
        for key in ("train_mode", "eval_mode"):
            if getattr(self, key) not in MODES:
                raise ConfigError(f"{key}: must be one of {MODES}, got {getattr(self, key)!r}")
        if self.variant == "bi-pdmu" and "sequential" in (self.train_mode, self.eval_mode):
            raise ConfigError("eval_mode: bi-pdmu is non-causal and forbids sequential mode")
        for key in ("hidden", "delays", "layers", "batch", "epochs", "seq_len",
                    "train_size", "val_size", "classes", "channels", "bench_repeats"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be >= 1, got {getattr(self, key)}")
        if self.memory_order is not None and self.memory_order < 1:
            raise ConfigError(f"memory_order: must be >= 1, got {self.memory_order}")
        if self.delays > 31:
            raise ConfigError(f"delays: must be < 32, got {self.delays}")
        if not 0 <= self.delay < self.seq_len:
            raise ConfigError(f"delay: must satisfy 0 <= delay < seq_len, got {self.delay}")
        if self.lr <= 0:
            raise ConfigError(f"lr: must be positive, got {self.lr}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype: must be float64 or float32, got {self.dtype!r}")
        if self.decode not in ("last", "mean"):
            raise ConfigError(f"decode: must be 'last' or 'mean', got {self.decode!r}")
        for key in ("max_steps", "patience", "encoder_channels"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key}: must be >= 0")
        for key in ("f_u", "f_o"):
            if getattr(self, key) not in ("relu", "identity"):
                raise ConfigError(f"{key}: must be 'relu' or 'identity', got {getattr(self, key)!r}")
        if self.bench_target not in ("classify", "sequence"):
            raise ConfigError(f"bench_target: must be 'classify' or 'sequence', got {self.bench_target!r}")
        if self.clip < 0:
            raise ConfigError("clip: must be >= 0")

    def as_dict(self):
        return dataclasses.asdict(self)

    def model_fields(self):
        """The subset that fixes parameter shapes; checkpoints must agree on it."""
        keys = ("variant", "hidden", "memory_order", "delays", "layers", "theta",
                "gate_theta", "encoder_channels", "task", "f_u", "f_o")
        return {k: getattr(self, k) for k in keys}


def _field_types():
    hints = typing.get_type_hints(RunConfig)
    return {f.name: hints[f.name] for f in dataclasses.fields(RunConfig)}


def _coerce(key, raw, hint):
    optional = typing.get_origin(hint) is typing.Union
    base = typing.get_args(hint)[0] if optional else hint
    if optional and raw.lower() == "none":
        return None
    try:
        if base is int:
            return int(raw)
        if base is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {base.__name__}") from None


def parse_config(text: str, env=None) -> RunConfig:
    types = _field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{key}: unknown key (line {lineno})")
        if key in values:
            raise ConfigError(f"{key}: duplicate key (line {lineno})")
        values[key] = _coerce(key, raw, types[key])
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        values["seed"] = _coerce(SEED_ENV, env[SEED_ENV], int)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.as_dict().items():
        lines.append(f"{key} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"
