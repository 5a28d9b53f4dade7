"""Model/training configuration and the ``[section] key = value`` file format."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .errors import ConfigurationError
from .schema import TASKS, TaskId

UNIFORM_DIMS = {"CTR": 64, "GCTR": 64, "OCTR": 64}
CONSTRAINED_DIMS = {"CTR": 128, "GCTR": 32, "OCTR": 32}


@dataclass
class ModelConfig:
    deep_dims: tuple = (512, 256, 128, 128)
    shallow_dims: tuple = (128, 64)
    gate_dims: tuple = (128, 64)
    dcn_layers: int = 2
    dcn_rank: int = 32
    task_dims: dict = field(default_factory=lambda: dict(UNIFORM_DIMS))
    se_ratio: int = 2
    slope: float = 0.2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    ln_eps: float = 1e-5
    emb_init_std: float = 0.1
    # ablation factors
    domain_adapt: bool = True
    use_dcn: bool = True
    norm: str = "pre"

    def __post_init__(self):
        self.deep_dims = tuple(int(v) for v in self.deep_dims)
        self.shallow_dims = tuple(int(v) for v in self.shallow_dims)
        self.gate_dims = tuple(int(v) for v in self.gate_dims)
        self.task_dims = {str(k if not isinstance(k, TaskId) else k.name): int(v) for k, v in self.task_dims.items()}
        if self.norm not in ("pre", "post"):
            raise ConfigurationError(f"norm must be 'pre' or 'post', got {self.norm!r}")
        if set(self.task_dims) != {t.name for t in TASKS}:
            raise ConfigurationError(f"task_dims must name exactly {[t.name for t in TASKS]}")
        if len(self.deep_dims) < 1 or len(self.shallow_dims) < 1:
            raise ConfigurationError("expert widths must be non-empty")
        if self.se_ratio < 1 or self.dcn_rank < 1 or self.dcn_layers < 0:
            raise ConfigurationError("se_ratio and dcn_rank must be >= 1, dcn_layers >= 0")

    @property
    def expert_dim(self) -> int:
        return self.deep_dims[-1]

    @property
    def shallow_dim(self) -> int:
        return self.shallow_dims[-1]

    def task_dim(self, task: TaskId) -> int:
        return self.task_dims[TaskId(task).name]


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    steps: int = 600
    seed: int = 0
    task_weights: dict = field(default_factory=lambda: {"CTR": 1.0, "GCTR": 0.5, "OCTR": 0.5})
    constrained: bool = True
    downsample: float = 1.0
    checkpoint_every: int = 0
    checkpoint_dir: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.task_weights = {str(k if not isinstance(k, TaskId) else k.name): float(v) for k, v in self.task_weights.items()}
        if set(self.task_weights) != {t.name for t in TASKS}:
            raise ConfigurationError(f"task_weights must name exactly {[t.name for t in TASKS]}")
        if any(w <= 0 for w in self.task_weights.values()):
            raise ConfigurationError("task weights must be positive")
        if any(w > self.task_weights["CTR"] for w in self.task_weights.values()):
            raise ConfigurationError("the CTR weight must be at least every other task weight")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if not 0.0 < self.downsample <= 1.0:
            raise ConfigurationError("downsample must lie in (0, 1]")
        if self.lr < 0:
            raise ConfigurationError("lr must be non-negative")

    def weight(self, task: TaskId) -> float:
        return self.task_weights[TaskId(task).name]

    def replace(self, **changes) -> "TrainConfig":
        model_changes = {k: v for k, v in changes.items() if k in {f.name for f in fields(ModelConfig)}}
        other = {k: v for k, v in changes.items() if k not in model_changes}
        model = dataclasses.replace(self.model, **model_changes) if model_changes else self.model
        return dataclasses.replace(self, model=model, **other)


@dataclass
class DataConfig:
    n_train: int = 50000
    n_eval: int = 10000
    alpha: float = 0.6
    teacher_seed: int = 0
    train_path: str = ""
    eval_path: str = ""


# ---------------------------------------------------------------------------
# file format


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, dict):
        return ",".join(f"{k}:{v}" for k, v in value.items())
    return str(value)


def _parse(text: str, like, key: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(like, int):
            return int(text, 0)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
        if isinstance(like, dict):
            out = {}
            for part in text.split(","):
                k, v = part.split(":")
                out[k.strip()] = type(next(iter(like.values())))(v)
            return out
        return text
    except (ValueError, StopIteration):
        raise ConfigurationError(f"bad value for {key}: {text!r}") from None


def _apply(obj, section: str, items: dict):
    known = {f.name: f for f in fields(obj) if f.name != "model"}
    changes = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigurationError(f"unknown config key {key!r} in [{section}]")
        changes[key] = _parse(raw, getattr(obj, key), f"{section}.{key}")
    return dataclasses.replace(obj, **changes)


def parse_config_text(text: str) -> tuple[TrainConfig, DataConfig]:
    cp = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigurationError(f"malformed config: {e}") from None
    train, data, model = TrainConfig(), DataConfig(), ModelConfig()
    for section in cp.sections():
        items = dict(cp.items(section))
        if section == "train":
            train = _apply(train, section, items)
        elif section == "model":
            model = _apply(model, section, items)
        elif section == "data":
            data = _apply(data, section, items)
        else:
            raise ConfigurationError(f"unknown config section [{section}]")
    return dataclasses.replace(train, model=model), data


def load_config(path) -> tuple[TrainConfig, DataConfig]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path!r}: {e}") from e


def render_config(train: TrainConfig, data: DataConfig | None = None) -> str:
    out = ["[train]"]
    out += [f"{f.name} = {_render(getattr(train, f.name))}" for f in fields(train) if f.name != "model"]
    out += ["", "[model]"]
    out += [f"{f.name} = {_render(getattr(train.model, f.name))}" for f in fields(train.model)]
    if data is not None:
        out += ["", "[data]"]
        out += [f"{f.name} = {_render(getattr(data, f.name))}" for f in fields(data)]
    return "\n".join(out) + "\n"
