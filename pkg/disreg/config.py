"""Global configuration variables and run configuration for disreg."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

# Log-variances of every diagonal Gaussian are clamped to this range on construction.
LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0

# Number of squaring steps used by scaling-and-squaring integration.
DEFAULT_INTEGRATION_STEPS = 7

# Pixels closer than this to any border are excluded from tolerance-bearing checks and Jacobian statistics.
INTERIOR_MARGIN = 4

# Version tags written into group directories and dataset manifests.
GROUP_FORMAT_VERSION = 1
MANIFEST_VERSION = 1

# Maximum FFD control-point displacement (px) for each distortion degree at the default lattice spacing.
DEFAULT_GRID_SPACING_PX = 16
DEGREE_SCHEDULE_PX = {0: 0.0, 1: 1.6, 2: 3.2, 3: 4.8, 4: 6.4}


class ConfigError(ValueError):
    """Raised for invalid configuration values, unknown keys or config-incompatible inputs."""


@dataclass
class ModelConfig:
    """Architecture of the hierarchical disentangling VAE."""

    num_levels: int = 3
    num_modalities: int = 3
    image_size: tuple[int, int] = (64, 64)
    base_channels: int = 16
    max_channels: int = 64
    channels_per_level: list[int] | None = None
    latent_channels_per_level: list[int] | None = None
    conv_depth: int = 2
    reg_depth: int = 2
    integration_steps: int = DEFAULT_INTEGRATION_STEPS
    bn_momentum: float = 0.01
    negative_slope: float = 0.2
    velocity_log_var_offset: float = -6.0

    def validate(self) -> None:
        """Check value ranges.

        Raises:
            ConfigError: if any field is out of range.
        """
        if self.num_levels < 2:
            raise ConfigError(f"model.num_levels must be >= 2, got {self.num_levels}")
        if self.num_modalities < 2:
            raise ConfigError(f"model.num_modalities must be >= 2, got {self.num_modalities}")
        factor = 2**self.num_levels
        if any(s <= 0 or s % factor for s in self.image_size):
            raise ConfigError(f"model.image_size {tuple(self.image_size)} must be positive and divisible by {factor}")
        for name in ("channels_per_level", "latent_channels_per_level"):
            value = getattr(self, name)
            if value is not None and len(value) != self.num_levels:
                raise ConfigError(f"model.{name} must have {self.num_levels} entries, got {len(value)}")
        if min(self.base_channels, self.conv_depth, self.reg_depth, self.integration_steps) < 1:
            raise ConfigError("model channel counts, depths and integration steps must be positive")


@dataclass
class BaselineConfig:
    """Architecture of the ResUNet baseline and its Parzen-window MI estimator."""

    num_levels: int = 5
    base_channels: int = 16
    max_channels: int = 64
    num_bins: int = 32
    kernel_sigma: float = 1.0

    def validate(self) -> None:
        """Check value ranges.

        Raises:
            ConfigError: on non-positive sizes or kernel widths.
        """
        if self.num_levels < 1:
            raise ConfigError(f"baseline.num_levels must be >= 1, got {self.num_levels}")
        if min(self.base_channels, self.max_channels) < 1:
            raise ConfigError("baseline.base_channels and baseline.max_channels must be positive")
        if self.num_bins < 2:
            raise ConfigError(f"baseline.num_bins must be >= 2, got {self.num_bins}")
        if self.kernel_sigma <= 0:
            raise ConfigError(f"baseline.kernel_sigma must be > 0, got {self.kernel_sigma}")


@dataclass
class LossConfig:
    """Weights of the objective terms."""

    lambda_v: float = 20.0
    beta_z: float = 4.0
    sigma_x2: float = 0.02
    beta_warmup_epochs: int = 0

    def validate(self) -> None:
        """Check value ranges.

        Raises:
            ConfigError: if a weight is negative or sigma_x2 is not positive.
        """
        if self.lambda_v < 0 or self.beta_z < 0 or self.beta_warmup_epochs < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.sigma_x2 <= 0:
            raise ConfigError(f"loss.sigma_x2 must be > 0, got {self.sigma_x2}")


@dataclass
class TrainConfig:
    """Optimization protocol."""

    epochs: int = 500
    lr: float = 1e-3
    batch_size: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    num_workers: int = 0
    device: str = "cpu"
    deterministic: bool = True

    def validate(self) -> None:
        """Check value ranges.

        Raises:
            ConfigError: on non-positive counts or unknown devices.
        """
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("train.epochs, train.batch_size and train.lr must be positive")
        if self.device not in ("cpu", "gpu"):
            raise ConfigError(f"train.device must be 'cpu' or 'gpu', got {self.device!r}")


@dataclass
class PhantomConfig:
    """Synthetic phantom rendering parameters."""

    num_structures: int = 3
    modality_maps: list[list[float]] = field(
        default_factory=lambda: [
            [0.1, 0.4, 0.7, 1.0],
            [0.9, 0.6, 0.3, 0.05],
            [0.2, 0.9, 0.5, 0.7],
        ]
    )
    bias_field_strength: float = 0.1
    noise_sigma: float = 0.02


@dataclass
class DataConfig:
    """Dataset generation and ingestion."""

    num_train: int = 40
    num_val: int = 40
    num_test: int = 80
    train_degrees: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    val_degrees: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    test_degrees: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    grid_spacing_px: int = DEFAULT_GRID_SPACING_PX
    pixel_spacing_mm: tuple[float, float] = (1.0, 1.0)
    modality_ids: list[str] | None = None
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def validate(self) -> None:
        """Check value ranges.

        Raises:
            ConfigError: on negative counts or unknown degrees.
        """
        if min(self.num_train, self.num_val, self.num_test) < 0:
            raise ConfigError("data split counts must be nonnegative")
        for degree in (*self.train_degrees, *self.val_degrees, *self.test_degrees):
            if degree not in DEGREE_SCHEDULE_PX:
                raise ConfigError(f"Unknown distortion degree {degree}; expected one of {sorted(DEGREE_SCHEDULE_PX)}")


@dataclass
class EvalConfig:
    """Evaluation settings."""

    classes: list[int] | None = None
    split: str = "test"


@dataclass
class RunConfig:
    """Complete resolved configuration of one experiment."""

    model: ModelConfig = field(default_factory=ModelConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        """Validate all sections and their mutual consistency."""
        self.model.validate()
        self.baseline.validate()
        self.loss.validate()
        self.train.validate()
        self.data.validate()
        factor = 2 ** (self.baseline.num_levels - 1)
        if any(s % factor for s in self.model.image_size):
            raise ConfigError(
                f"model.image_size {tuple(self.model.image_size)} must be divisible by {factor} for "
                f"baseline.num_levels={self.baseline.num_levels}"
            )
        n_maps = len(self.data.phantom.modality_maps)
        if n_maps != self.model.num_modalities:
            raise ConfigError(
                f"data.phantom.modality_maps defines {n_maps} modalities but model.num_modalities is "
                f"{self.model.num_modalities}"
            )
        if self.data.modality_ids is not None and len(self.data.modality_ids) != self.model.num_modalities:
            raise ConfigError("data.modality_ids must list one id per modality")

    def to_dict(self) -> dict[str, Any]:
        """Plain-python representation suitable for YAML/JSON."""
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> RunConfig:
        """Build a RunConfig from nested dicts, rejecting unknown keys.

        Args:
            d: Nested dict with sections mirroring RunConfig. Missing entries take defaults.

        Returns:
            Validated RunConfig.
        """
        config = _build(cls, d or {}, "")
        config.validate()
        return config

    def with_overrides(self, **overrides) -> RunConfig:
        """Validated copy with dotted-key overrides applied, e.g. ``with_overrides(**{"model.num_levels": 2})``."""
        return RunConfig.from_dict(apply_overrides(self.to_dict(), overrides))


def _build(cls, d: dict[str, Any], prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"Section {prefix or '<root>'} must be a mapping, got {type(d).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"Unknown config keys in {prefix or '<root>'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in d.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        elif isinstance(value, dict):
            raise ConfigError(f"{prefix}{name} is a value, not a section")
        elif isinstance(value, list) and name in ("image_size", "pixel_spacing_mm"):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def apply_overrides(d: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """Set dotted keys such as ``data.phantom.noise_sigma`` in a nested dict, creating sections on the way.

    Args:
        d: Nested dict, modified in place.
        overrides: Dotted key -> value.

    Returns:
        d
    """
    for key, value in overrides.items():
        *sections, name = key.split(".")
        node = d
        for section in sections:
            child = node.setdefault(section, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Cannot override {key}: {section} is not a section")
            node = child
        node[name] = value
    return d


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """Load a YAML run configuration.

    Args:
        path: Path to a YAML file. None gives the all-defaults configuration.
        **overrides: Dotted-key overrides applied after loading, nested to any depth, e.g. ``{"train.seed": 3}`` or
            ``{"data.phantom.noise_sigma": 0.05}``.

    Returns:
        Validated RunConfig.
    """
    d: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path) as f:
                d = yaml.safe_load(f) or {}
        except FileNotFoundError:
            raise ConfigError(f"Config file {path} not found") from None
        except yaml.YAMLError as err:
            raise ConfigError(f"Config file {path} is not valid YAML: {err}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"Config file {path} must hold a mapping of sections, got {type(d).__name__}")
    return RunConfig.from_dict(apply_overrides(d, overrides))
