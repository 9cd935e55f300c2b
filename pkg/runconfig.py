"""Run configuration for the command line: one JSON file of parameter groups, dotted overrides,
and strict schema checks (unknown keys are errors)."""

from dataclasses import asdict, dataclass, field, fields, is_dataclass
import json
import pathlib

from errors import ConfigError
from reconstruction import ReconstructionConfig
from scene import SceneConfig
from training import TrainConfig
import config

SCHEMA_VERSION = 1


@dataclass
class GenConfig:
    n_stacks: int = 10
    height: int = 32
    width: int = 32
    seed: int = 0
    species: int = 0
    sigma_px: float = config.DENSITY_SIGMA_PX
    threshold: float = config.SPARSE_THRESHOLD
    n_jobs: int = 1

    def __post_init__(self) -> None:
        if self.n_stacks < 1 or self.height < 1 or self.width < 1:
            raise ConfigError(f'gen needs n_stacks, height and width >= 1, got {self.n_stacks}, {self.height}, {self.width}')
        if not self.sigma_px > 0:
            raise ConfigError(f'sigma_px must be positive, got {self.sigma_px}')


@dataclass
class ModelConfig:
    model: str = 'model1'
    hidden_features: int = config.HIDDEN_FEATURES
    merge_kernel: int = config.MERGE_KERNEL
    merge_density: str = 'hsi'

    def __post_init__(self) -> None:
        if self.model not in ('model1', 'model2'):
            raise ConfigError(f"model must be 'model1' or 'model2', got {self.model!r}")


@dataclass
class EvalConfig:
    mode: str = 'single'
    k: int = config.FOLDS
    saturation_threshold: float = config.SATURATION_THRESHOLD

    def __post_init__(self) -> None:
        if self.mode not in ('single', 'loocv', 'transfer'):
            raise ConfigError(f"eval mode must be 'single', 'loocv' or 'transfer', got {self.mode!r}")


@dataclass
class OverlayConfig:
    kind: str = 'sao2'
    wavelengths_nm: tuple = config.NBI_WAVELENGTHS_NM
    flat_field: float = config.FLAT_FIELD
    colormap: str = config.OVERLAY_COLORMAP
    value_range: tuple = (0.0, 1.0)

    def __post_init__(self) -> None:
        if self.kind not in ('sao2', 'nbi'):
            raise ConfigError(f"overlay kind must be 'sao2' or 'nbi', got {self.kind!r}")


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    geometry: ReconstructionConfig = field(default_factory=ReconstructionConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    overlay: OverlayConfig = field(default_factory=OverlayConfig)

    def __post_init__(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f'schema_version must be {SCHEMA_VERSION}, got {self.schema_version}')

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _merge(defaults: dict, given: dict, path: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f'{path or "config"} must be an object')
    merged = dict(defaults)
    for key, value in given.items():
        where = f'{path}.{key}' if path else key
        if key not in defaults:
            raise ConfigError(f'unknown config key {where!r}')
        merged[key] = _merge(defaults[key], value, where) if isinstance(defaults[key], dict) else value
    return merged


def _build(cls, data: dict, path: str):
    """Instantiates a (nested) dataclass; lists become tuples where the default is a tuple."""
    kwargs = {}
    defaults = cls()
    for f in fields(cls):
        value = data[f.name]
        default = getattr(defaults, f.name)
        where = f'{path}.{f.name}' if path else f.name
        if is_dataclass(default):
            value = _build(type(default), value, where)
        elif isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(f'{path or "config"}: {e}') from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f'{path or "config"}: invalid value: {e}') from e


def parse_override(text: str) -> tuple[list[str], object]:
    """'a.b=value' -> (['a', 'b'], value); the value is JSON when it parses, else a string."""
    key, sep, raw = text.partition('=')
    if not sep or not key:
        raise ConfigError(f'override {text!r} must look like group.key=value')
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split('.'), value


def apply_override(data: dict, keys: list[str], value) -> None:
    node = data
    for i, key in enumerate(keys):
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f'unknown config key {".".join(keys[:i + 1])!r}')
        if i == len(keys) - 1:
            if isinstance(node[key], dict):
                raise ConfigError(f'{".".join(keys)} is a group, override one of its keys')
            node[key] = value
        else:
            node = node[key]


def load_run_config(path: str | pathlib.Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the JSON file, then each override in order."""
    data = RunConfig().to_dict()
    if path is not None:
        try:
            given = json.loads(pathlib.Path(path).read_text(encoding='utf-8'))
        except OSError as e:
            raise ConfigError(f'cannot read config file {path}: {e}') from e
        except json.JSONDecodeError as e:
            raise ConfigError(f'config file {path} is not valid JSON: {e}') from e
        data = _merge(data, given, '')
    for text in overrides or []:
        keys, value = parse_override(text)
        apply_override(data, keys, value)
    return _build(RunConfig, data, '')
