"""Pipeline configuration: TOML file over a named profile."""

import copy
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import tomli

from .conv_rbm import DESK_LAYER_SPECS, FULL_LAYER_SPECS, LayerSpec, TrainOptions
from .crf import InferenceOptions
from .errors import ConfigError
from .numerics import OptimizerOptions
from .scatternet import ScatterConfig

logger = logging.getLogger("gshdl")

PROFILES = ("desk", "full")
# Accepted on the command line and in build_config; resolved to the canonical name.
PROFILE_ALIASES = {"paper": "full"}
FEATURE_STAGES = ("HC", "L3", "L4", "L5", "L6")


@dataclass(frozen=True)
class PriorSection:
    patch_count: int = 4000
    method: str = "lapack"

    def __post_init__(self) -> None:
        if self.patch_count < 1:
            raise ConfigError(f"prior.patch_count must be positive, got {self.patch_count}")
        if self.method not in ("lapack", "jacobi"):
            raise ConfigError(f"prior.method must be 'lapack' or 'jacobi', got {self.method!r}")


@dataclass(frozen=True)
class RbmSection:
    layers: Tuple[LayerSpec, ...] = tuple(LayerSpec(k, z) for k, z in DESK_LAYER_SPECS)
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 0.01
    cd_steps: int = 1
    momentum: float = 0.5
    use_priors: bool = True

    def __post_init__(self) -> None:
        if not self.layers:
            raise ConfigError("rbm.layers must name at least one layer")
        self.train_options(0)

    def train_options(self, seed: int) -> TrainOptions:
        return TrainOptions(self.epochs, self.batch_size, self.learning_rate, self.cd_steps, self.momentum, seed)


@dataclass(frozen=True)
class CrfSection:
    iterations: int = 20
    damping: float = 0.5
    schedule: str = "sequential"
    l2: float = 1e-4
    l2_grid: Tuple[float, ...] = (1e-4, 1e-3, 1e-2)
    lbfgs_iterations: int = 100
    beta: Optional[float] = None
    subsample: bool = False
    feature_layers: Tuple[str, ...] = ("L6",)

    def __post_init__(self) -> None:
        self.inference()
        if self.l2 < 0 or any(v < 0 for v in self.l2_grid):
            raise ConfigError("crf.l2 and crf.l2_grid must be >= 0")
        unknown = set(self.feature_layers) - set(FEATURE_STAGES)
        if not self.feature_layers or unknown:
            raise ConfigError(f"crf.feature_layers must be drawn from {FEATURE_STAGES}, got {self.feature_layers}")

    def inference(self) -> InferenceOptions:
        return InferenceOptions(self.iterations, self.damping, self.schedule)

    def optimizer(self) -> OptimizerOptions:
        return OptimizerOptions(max_iterations=self.lbfgs_iterations)


@dataclass(frozen=True)
class PruneSection:
    enabled: bool = False
    folds: int = 5
    tolerance: float = 0.5
    candidates: int = 3
    quick_iterations: int = 5
    quick_lbfgs_iterations: int = 30

    def __post_init__(self) -> None:
        if self.folds < 2:
            raise ConfigError(f"prune.folds must be >= 2, got {self.folds}")
        if self.candidates < 1 or self.tolerance < 0:
            raise ConfigError("prune.candidates must be >= 1 and prune.tolerance >= 0")


@dataclass(frozen=True)
class ExperimentSection:
    seed: int = 0
    folds: int = 5
    fractions: Tuple[float, float, float] = (0.45, 0.15, 0.40)
    sizes: Tuple[int, ...] = (8, 16, 32, 40)

    def __post_init__(self) -> None:
        if len(self.fractions) != 3:
            raise ConfigError("experiment.fractions needs train, validation and test fractions")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"experiment.fractions must sum to 1, got {sum(self.fractions)}")
        if self.folds < 1:
            raise ConfigError(f"experiment.folds must be >= 1, got {self.folds}")


@dataclass(frozen=True)
class SyntheticSection:
    num_images: int = 60
    size: int = 64
    num_classes: int = 4
    noise: float = 0.05


@dataclass(frozen=True)
class RuntimeSection:
    workers: int = 1


@dataclass(frozen=True)
class DatabaseSection:
    enabled: bool = False
    type: str = "sqlite"
    path: str = "runs/gshdl.db"
    host: str = "localhost"
    port: int = 5432
    dbname: str = "gshdl"
    user: str = "postgres"
    password: str = ""
    pool_size: int = 5
    max_overflow: int = 10
    pool_timeout: int = 30
    echo: bool = False


@dataclass(frozen=True)
class MonitoringSection:
    enabled: bool = False
    port: int = 9090


@dataclass(frozen=True)
class DebugSection:
    debug_logging: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    """Every option of the pipeline, grouped as in ``config.toml``."""

    profile: str = "desk"
    scatter: ScatterConfig = field(default_factory=ScatterConfig)
    prior: PriorSection = field(default_factory=PriorSection)
    rbm: RbmSection = field(default_factory=RbmSection)
    crf: CrfSection = field(default_factory=CrfSection)
    prune: PruneSection = field(default_factory=PruneSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    runtime: RuntimeSection = field(default_factory=RuntimeSection)
    database: DatabaseSection = field(default_factory=DatabaseSection)
    monitoring: MonitoringSection = field(default_factory=MonitoringSection)
    debug: DebugSection = field(default_factory=DebugSection)


_PROFILE_SETTINGS: Dict[str, Dict[str, Any]] = {
    "desk": {},
    "full": {
        "prior": {"patch_count": 100000},
        "rbm": {"layers": [{"num_filters": k, "filter_size": z} for k, z in FULL_LAYER_SPECS]},
        "prune": {"enabled": True},
        "synthetic": {"num_images": 200, "size": 128},
    },
}

_SECTIONS = {
    "scatter": ScatterConfig,
    "prior": PriorSection,
    "rbm": RbmSection,
    "crf": CrfSection,
    "prune": PruneSection,
    "experiment": ExperimentSection,
    "synthetic": SyntheticSection,
    "runtime": RuntimeSection,
    "database": DatabaseSection,
    "monitoring": MonitoringSection,
    "debug": DebugSection,
}


def _merge(base: Dict[str, Any], overlay: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _build_section(name: str, values: Dict[str, Any]):
    cls = _SECTIONS[name]
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown option(s) in [{name}]: {', '.join(sorted(unknown))}")
    values = dict(values)
    if name == "rbm" and "layers" in values:
        try:
            values["layers"] = tuple(
                layer if isinstance(layer, LayerSpec) else LayerSpec(int(layer["num_filters"]), int(layer["filter_size"]))
                for layer in values["layers"]
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"each [[rbm.layers]] entry needs num_filters and filter_size ({e})") from e
    if name == "crf" and values.get("beta") == "auto":
        values["beta"] = None
    for key in ("orientations", "l2_grid", "fractions", "sizes", "feature_layers"):
        if key in values:
            values[key] = tuple(values[key])
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"invalid [{name}] section: {e}") from e


def build_config(settings: Dict[str, Any], profile: str = "desk") -> PipelineConfig:
    """Validate a nested settings dict over ``profile`` defaults.

    Raises:
        ConfigError: Unknown profile, section or option, or an invalid value
    """
    profile = PROFILE_ALIASES.get(profile, profile)
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    unknown = set(settings) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    merged = _merge(_PROFILE_SETTINGS[profile], settings)
    sections = {name: _build_section(name, merged.get(name, {})) for name in _SECTIONS}
    return PipelineConfig(profile=profile, **sections)


def load_config(path: Optional[Union[str, Path]] = None, profile: str = "desk") -> PipelineConfig:
    """Load ``path`` (TOML) over the named profile.

    A missing file logs a warning and yields the profile defaults.

    Raises:
        ConfigError: Malformed TOML or invalid settings
    """
    settings: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                settings = tomli.load(f)
        except FileNotFoundError:
            logger.warning(f"Config file not found: {path}, using {profile} profile defaults")
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"malformed config file {path}: {e}") from e
    return build_config(settings, profile)


def with_seed(config: PipelineConfig, seed: int) -> PipelineConfig:
    """Copy of ``config`` with the experiment seed replaced."""
    return replace(config, experiment=replace(config.experiment, seed=seed))


def config_snapshot(config: PipelineConfig) -> Dict[str, Any]:
    """Plain, JSON-ready dict of every option (database credentials omitted)."""
    def plain(value):
        if isinstance(value, dict):
            return {k: plain(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [plain(v) for v in value]
        return value

    snapshot = plain(asdict(config))
    snapshot["database"].pop("password", None)
    return snapshot


