"""Run configuration: JSON file plus ``--section.key value`` overrides, strictly validated."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, get_type_hints

from .errors import ConfigError
from .modulation import SchemeError, parse_scheme
from .pipeline import InferenceSettings
from .pool import WC_MODES
from .reliability import ENTROPY_MODES
from .train import TrainConfig

THREADS_ENV = "RPCM_THREADS"


@dataclass(frozen=True)
class DataSection:
    num_train: int = 200
    num_eval: int = 40
    frames: int = 20
    height: int = 64
    width: int = 64
    seed_offset: int = 0


@dataclass(frozen=True)
class TrainSection:
    steps: int = 3000
    batch: int = 4
    lr: float = 0.02
    lr_late: float = 0.01
    lr_switch: float = 0.6
    momentum: float = 0.9
    grad_clip: float | None = 5.0
    teacher_forcing: bool = True
    mask_noise: float = 1.0


@dataclass(frozen=True)
class InferenceSection:
    tau: int = 5
    alpha: float = 1.0
    entropy_mode: str = "nat"
    reliability_measure: str = "entropy"
    logit_alpha: float = 0.9
    wc_mode: str = "weighted_mean"
    pool_capacity: int | None = None
    use_pool: bool = True


@dataclass(frozen=True)
class AblateSection:
    steps: int = 1000
    seeds: list[int] = field(default_factory=lambda: [0])


@dataclass(frozen=True)
class PathSection:
    data_dir: str = "data"
    out_dir: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scheme: str = "P2C"
    threads: int | None = None
    data: DataSection = DataSection()
    train: TrainSection = TrainSection()
    inference: InferenceSection = InferenceSection()
    ablate: AblateSection = AblateSection()
    paths: PathSection = PathSection()

    def validate(self) -> "RunConfig":
        try:
            scheme = parse_scheme(self.scheme)
        except SchemeError as exc:
            raise ConfigError(str(exc)) from exc
        inf = self.inference
        if inf.entropy_mode not in ENTROPY_MODES:
            raise ConfigError(f"inference.entropy_mode must be one of {ENTROPY_MODES}")
        if inf.reliability_measure not in ("entropy", "logit"):
            raise ConfigError("inference.reliability_measure must be 'entropy' or 'logit'")
        if inf.wc_mode not in WC_MODES:
            raise ConfigError(f"inference.wc_mode must be one of {WC_MODES}")
        if inf.tau < 1 or inf.alpha <= 0 or not 0 < inf.logit_alpha <= 1:
            raise ConfigError("need tau >= 1, alpha > 0 and logit_alpha in (0, 1]")
        if inf.pool_capacity is not None and inf.pool_capacity < 1:
            raise ConfigError("inference.pool_capacity must be >= 1")
        d = self.data
        if d.num_train < 0 or d.num_eval < 0 or d.frames < 3 or d.height % 4 or d.width % 4:
            raise ConfigError("data section out of range (frames >= 3, resolution divisible by 4)")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.ablate.steps < 1 or not self.ablate.seeds:
            raise ConfigError("ablate needs steps >= 1 and at least one seed")
        self.train_config().validate()
        return replace(self, scheme=scheme)

    def train_config(self, scheme: str | None = None, seed: int | None = None, steps: int | None = None,
                     threads: int = 1) -> TrainConfig:
        t = self.train
        return TrainConfig(
            scheme=scheme or self.scheme,
            steps=steps or t.steps,
            batch=t.batch,
            lr=t.lr,
            lr_late=t.lr_late,
            lr_switch=t.lr_switch,
            momentum=t.momentum,
            grad_clip=t.grad_clip,
            seed=self.seed if seed is None else seed,
            teacher_forcing=t.teacher_forcing,
            mask_noise=t.mask_noise,
            threads=threads,
            wc_mode=self.inference.wc_mode,
        )

    def inference_settings(self) -> InferenceSettings:
        return InferenceSettings(**asdict(self.inference))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _coerce(value: Any, hint: Any, where: str) -> Any:
    """Check ``value`` against a (simple) type hint, widening int to float."""
    text = str(hint)
    optional = "None" in text
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{where} may not be null")
    if "list[int]" in text:
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where} must be a list of integers")
        return list(value)
    if "bool" in text:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if "float" in text:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if "int" in text:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if "str" in text:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    raise ConfigError(f"{where}: unsupported type {text}")


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join((where + '.' if where else '') + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        key = f"{where}.{name}" if where else name
        if isinstance(hint, type) and is_dataclass(hint):
            kwargs[name] = _build(hint, value, key)
        else:
            kwargs[name] = _coerce(value, hint, key)
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[tuple[str, str]]) -> dict:
    """Set dotted keys (``train.steps``) from raw strings; values parse as JSON when they can."""
    out = json.loads(json.dumps(data))
    for key, raw in overrides:
        parts = key.replace("-", "_").split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {key}: {p} is not a section")
        node[parts[-1]] = _parse_value(raw)
    return out


def load_config(path: str | Path | None = None, overrides: list[tuple[str, str]] = ()) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(apply_overrides(data, list(overrides)))


def resolve_threads(cli_value: int | None, config: RunConfig | None = None) -> int:
    """--threads wins, then the config, then $RPCM_THREADS, then 1."""
    if cli_value is not None:
        n = cli_value
    elif config is not None and config.threads is not None:
        n = config.threads
    elif os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from exc
    else:
        n = 1
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n
