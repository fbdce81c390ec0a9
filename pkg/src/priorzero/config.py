"""Run configuration: nested dataclasses, YAML loading with unknown-key
rejection, dotted-path overrides, and a resolved echo that reproduces every
effective value."""

import dataclasses
import hashlib
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .envs import EnvSpec
from .errors import ConfigError
from .rlft import RlftConfig
from .search import DirichletConfig, FusionConfig, SearchConfig

TRAIN_MODES = ("priorzero", "unizero", "frozen_prior", "non_alternating",
               "naive_policy_p1", "naive_rlft_p2", "azsft")
ORACLE_KINDS = ("lm", "scripted", "uniform")


@dataclass
class LmConfig:
    d_e: int = 16
    d_h: int = 32
    lr: float = 1e-2          # toy-model rate; full-scale tables use 1e-6 with Adam
    grad_clip: float = 1.0
    init_scale: float = 0.08


@dataclass
class CotConfig:
    enabled: bool = False
    max_tokens: int = 16
    temperature: float = 1.0


@dataclass
class OracleConfig:
    kind: str = "lm"               # lm | scripted | uniform
    temperature: float = 1.0
    history_window: int = 4
    scripted_action: str = ""
    scripted_mass: float = 0.8
    cot: CotConfig = field(default_factory=CotConfig)

    def __post_init__(self):
        if self.kind not in ORACLE_KINDS:
            raise ConfigError(f"unknown oracle kind {self.kind!r}")
        if self.kind == "scripted" and not self.scripted_action:
            raise ConfigError("scripted oracle needs scripted_action")


@dataclass
class WmConfig:
    d_emb: int = 16
    d_z: int = 32
    n_bins: int = 21
    v_max: float = 0.0        # 0 -> per-env default (10 for the room games, 1 for the grid)
    lr: float = 0.1           # SGD rate; the Adam-calibrated 3e-4 is far too small here
    grad_clip: float = 1.0
    init_scale: float = 0.08
    batch_size: int = 16
    h_train: int = 10
    h_collect: int = 4
    unroll: int = 5
    c_policy: float = 1.0
    c_value: float = 0.25
    c_reward: float = 1.0
    c_consistency: float = 2.0
    target_mode: str = "hard"     # hard | ema
    target_period: int = 100
    target_tau: float = 0.01

    def __post_init__(self):
        if self.target_mode not in ("hard", "ema"):
            raise ConfigError(f"unknown target update mode {self.target_mode!r}")


@dataclass
class ReplayConfig:
    capacity: int = 10_000
    td_horizon: int = 5


@dataclass
class LlmTrainConfig:
    batch_size: int = 16
    epochs: int = 1


@dataclass
class P2Config:
    episodes_per_iteration: int = 50
    iterations: int = 3
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    sample_actions: bool = True


@dataclass
class TrainerConfig:
    mode: str = "priorzero"
    gamma: float = 0.99
    total_env_steps: int = 400
    episodes_per_collect: int = 2
    eval_every: int = 1           # cycles between evaluations
    eval_episodes: int = 8
    eval_visit_temperature: float = 0.25
    n_wm: int = 120
    n_llm: int = 12
    warmup_wm_iters: int = 0      # 0 -> one full WM phase
    collect_in_llm_phase: bool = False
    p1_history_window: int = 25
    solve_return: float = 1.0

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.n_wm < 1 or self.n_llm < 0:
            raise ConfigError("n_wm must be >= 1 and n_llm >= 0")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    record_wall_time: bool = False
    env: EnvSpec = field(default_factory=lambda: EnvSpec("LoopTrapRooms"))
    lm: LmConfig = field(default_factory=LmConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    wm: WmConfig = field(default_factory=WmConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    rlft: RlftConfig = field(default_factory=RlftConfig)
    llm_train: LlmTrainConfig = field(default_factory=LlmTrainConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    p2: P2Config = field(default_factory=P2Config)


def _resolve_optional(ftype):
    """Return (inner_type, optional?) unwrapping Optional[...] and X | None."""
    origin = typing.get_origin(ftype)
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(ftype) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return ftype, False


def _coerce_scalar(value, ftype, path):
    if ftype is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if ftype is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if ftype is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if ftype is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build_dataclass(cls, data, path=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path or cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        sub_path = f"{path}.{f.name}" if path else f.name
        ftype, optional = _resolve_optional(hints[f.name])
        value = data[f.name]
        if value is None and optional:
            kwargs[f.name] = None
        elif dataclasses.is_dataclass(ftype):
            kwargs[f.name] = _build_dataclass(ftype, value, sub_path)
        else:
            kwargs[f.name] = _coerce_scalar(value, ftype, sub_path)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    return _build_dataclass(RunConfig, data or {})


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    return config_from_dict(data)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: RunConfig) -> str:
    """Resolved-config echo: every effective value, defaults included."""
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def config_hash(cfg: RunConfig) -> str:
    canon = yaml.safe_dump(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _parse_override_value(text: str, ftype):
    ftype, optional = _resolve_optional(ftype)
    if optional and text.lower() in ("null", "none"):
        return None
    if ftype is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean from {text!r}")
    if ftype is int:
        return int(text)
    if ftype is float:
        return float(text)
    return text


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply dotted-path overrides like search.fusion.alpha=0.3. Because the
    config dataclasses validate in __post_init__, the tree is rebuilt from a
    dict after each batch of edits."""
    data = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        dotted, text = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = data
        cls = RunConfig
        for key in keys[:-1]:
            hints = typing.get_type_hints(cls)
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"unknown config section {key!r} in {dotted!r}")
            inner, _ = _resolve_optional(hints[key])
            if not dataclasses.is_dataclass(inner):
                raise ConfigError(f"{key!r} in {dotted!r} is not a section")
            node, cls = node[key], inner
        leaf = keys[-1]
        hints = typing.get_type_hints(cls)
        if leaf not in hints:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[leaf] = _parse_override_value(text.strip(), hints[leaf])
    return config_from_dict(data)
