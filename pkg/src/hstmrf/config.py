"""Configuration records, validation, ablation states and YAML loading."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Union, get_args, get_origin, get_type_hints

import yaml

ABLATION_STATES = ("full", "no_ape", "no_hst", "no_mbp", "no_sca", "maxavg_ca", "one_rf")

# flags that redefine the same component; at most one per group
_EXCLUSIVE = (("no_hst", "one_rf"), ("no_mbp", "one_rf"), ("no_sca", "maxavg_ca"))


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is set when the source file is known."""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)
        self.message = message
        self.line = line


@dataclass(frozen=True)
class ModelConfig:
    C: int = 8
    n_heads: int = 4
    d: int = 16
    patch_size: int = 2
    window: int = 4
    blocks_per_stage: tuple = (2, 2, 2)
    mlp_ratio: int = 4
    dropout_p: float = 0.5
    relative_position_bias: bool = False
    no_ape: bool = False
    no_hst: bool = False
    no_mbp: bool = False
    no_sca: bool = False
    maxavg_ca: bool = False
    one_rf: bool = False

    def __post_init__(self) -> None:
        blocks = self.blocks_per_stage
        if isinstance(blocks, int):
            blocks = (blocks,) * 3
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in blocks))
        self.validate()

    def validate(self) -> None:
        if self.C < 1:
            raise ConfigError(f"C must be positive, got {self.C}")
        if self.n_heads < 1 or self.d % self.n_heads:
            raise ConfigError(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        if self.patch_size != 2:
            raise ConfigError(f"patch_size is fixed at 2, got {self.patch_size}")
        if self.window < 1:
            raise ConfigError(f"window must be positive, got {self.window}")
        if len(self.blocks_per_stage) != 3 or any(b < 0 or b % 2 for b in self.blocks_per_stage):
            raise ConfigError("blocks_per_stage needs three even, nonnegative counts "
                              f"(W/SW pairs), got {self.blocks_per_stage}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        for group in _EXCLUSIVE:
            on = [f for f in group if getattr(self, f)]
            if len(on) > 1:
                raise ConfigError(f"ablation flags {', '.join(on)} are mutually exclusive")

    def check_input(self, h: int, w: int) -> None:
        for side in (h, w):
            if side % 16:
                raise ConfigError(f"input size {h}x{w}: sides must be divisible by 16")
            if side % (16 * self.window):
                raise ConfigError(f"input size {h}x{w}: window {self.window} must divide "
                                  f"{side // 4}, {side // 8} and {side // 16}")

    @property
    def ablation_state(self) -> str:
        for name in ABLATION_STATES[1:]:
            if getattr(self, name):
                return name
        return "full"


@dataclass(frozen=True)
class LossWeights:
    a: float = 0.6
    b: float = 0.2
    c: float = 0.2
    eta: float = 0.7
    gamma: float = 0.3
    boundary_gain: float = 5.0
    pool_k: int = 7

    def __post_init__(self) -> None:
        if min(self.a, self.b, self.c, self.eta, self.gamma, self.boundary_gain) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if abs(self.a + self.b + self.c - 1.0) > 1e-9:
            raise ConfigError(f"a + b + c must equal 1, got {self.a + self.b + self.c}")
        if abs(self.eta + self.gamma - 1.0) > 1e-9:
            raise ConfigError(f"eta + gamma must equal 1, got {self.eta + self.gamma}")
        if self.pool_k < 1 or self.pool_k % 2 == 0:
            raise ConfigError(f"pool_k must be a positive odd size, got {self.pool_k}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    batch_size: int = 8
    lr: float = 1e-4
    lr_min: float = 1e-6
    warmup_frac: float = 0.05
    weight_decay: float = 1e-2
    grad_clip: Optional[float] = None
    eval_every: int = 50
    checkpoint_every: int = 100

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"steps must be positive, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive when set, got {self.grad_clip}")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_frac * self.steps))


@dataclass(frozen=True)
class DataConfig:
    manifest: Optional[str] = None
    train_split: str = "train"
    eval_split: str = "train"
    image_size: int = 64


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    out: str = "runs/default"
    ablation: str = "full"

    def __post_init__(self) -> None:
        if self.ablation not in ABLATION_STATES:
            raise ConfigError(f"unknown ablation state {self.ablation!r}; "
                              f"valid states: {', '.join(ABLATION_STATES)}")
        self.model.check_input(self.data.image_size, self.data.image_size)

    def resolved_model(self) -> ModelConfig:
        """Model config with the ablation state applied (``full`` keeps any flags set by hand)."""
        if self.ablation == "full":
            return self.model
        return apply_ablation(self.model, self.ablation)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def apply_ablation(model: ModelConfig, state: str) -> ModelConfig:
    if state not in ABLATION_STATES:
        raise ConfigError(f"unknown ablation state {state!r}; valid states: {', '.join(ABLATION_STATES)}")
    flags = {name: False for name in ABLATION_STATES[1:]}
    if state != "full":
        flags[state] = True
    return replace(model, **flags)


def _to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


# ---------------------------------------------------------------- loading
def _coerce(value: Any, hint: Any, where: str, line: Optional[int]) -> Any:
    origin = get_origin(hint)
    if origin is Union:
        args = [a for a in get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], where, line)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}", line)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}", line)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}", line)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}", line)
        return value
    if hint is tuple:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}", line)
        return tuple(value)
    return value


def _build(cls, data: Any, node: Optional[yaml.Node], where: str):
    line = node.start_mark.line + 1 if node is not None else None
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping", line)
    key_nodes = {}
    if isinstance(node, yaml.MappingNode):
        key_nodes = {k.value: (k, v) for k, v in node.value}
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        knode, vnode = key_nodes.get(key, (None, None))
        kline = knode.start_mark.line + 1 if knode is not None else line
        path = f"{where}.{key}" if where else str(key)
        if key not in names:
            raise ConfigError(f"unknown key '{path}'", kline)
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, vnode, path)
        else:
            kwargs[key] = _coerce(value, hint, path, kline)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where or 'config'}: {exc.message}", exc.line or line) from None


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, None, "")


def load_config(path: Union[str, Path]) -> RunConfig:
    """Parse a YAML run config, rejecting unknown keys (errors carry line numbers)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path=str(path)) from None
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text) if node is not None else {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None, str(path)) from None
    try:
        return _build(RunConfig, data or {}, node, "")
    except ConfigError as exc:
        raise ConfigError(exc.message, exc.line, str(path)) from None


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
