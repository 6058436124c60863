"""
Configuration management for tcs_fedsim
"""
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import pydantic
from pydantic import ConfigDict, Field, ValidationInfo, field_validator

from .exceptions import ConfigurationError
from .types import (
    ConfigScalar,
    DatasetKind,
    Fairness,
    Milestone,
    ModelKind,
    QuantizerKind,
    RunScheme,
    Scheme,
)

logger = logging.getLogger(__name__)

QUANTIZER_KIND_CODES: Dict[str, int] = {"none": 0, "scaled_sign": 1, "fractional": 2}


def ratio_to_count(phi: float, d: int) -> int:
    """Round-half-up of ``phi * d``"""
    return int(math.floor(phi * d + 0.5))


def _env_threads() -> int:
    raw = os.environ.get("TCS_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"TCS_THREADS must be an integer, got {raw!r}", fields=["threads"]) from None


@dataclass
class RuntimeConfig:
    """Process-level knobs, read from the environment by default"""
    threads: int = field(default_factory=_env_threads)
    log_level: str = field(default_factory=lambda: os.environ.get("TCS_LOG_LEVEL", "INFO"))
    record_wall_time: bool = field(
        default_factory=lambda: os.environ.get("TCS_RECORD_WALL_TIME", "false").lower() == "true"
    )

    def __post_init__(self):
        """Validate configuration after initialization"""
        if self.threads < 1:
            raise ConfigurationError("TCS_THREADS must be at least 1", fields=["threads"])
        if self.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ConfigurationError(f"unknown log level {self.log_level!r}", fields=["log_level"])


@dataclass
class CompressorConfig:
    """Sparsification settings shared by every client"""
    scheme: Scheme
    phi_global: float
    phi_local: float = 0.0
    fairness: Fairness = "none"
    phi_min_global: float = 0.0
    phi_min_local: float = 0.0

    def __post_init__(self):
        """Validate compressor configuration"""
        if self.scheme not in ("topk", "randk", "tcs"):
            raise ConfigurationError(f"unknown scheme {self.scheme!r}", fields=["scheme"])
        if not 0.0 < self.phi_global <= 1.0:
            raise ConfigurationError("phi_global must be in (0, 1]", fields=["phi_global"])
        if not 0.0 <= self.phi_local < 1.0:
            raise ConfigurationError("phi_local must be in [0, 1)", fields=["phi_local"])
        if self.scheme == "tcs" and self.phi_local >= self.phi_global:
            raise ConfigurationError("phi_local must be smaller than phi_global for tcs", fields=["phi_local"])
        if self.fairness not in ("none", "plf", "lf"):
            raise ConfigurationError(f"unknown fairness {self.fairness!r}", fields=["fairness"])
        for name in ("phi_min_global", "phi_min_local"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1]", fields=[name])

    def k_global(self, d: int) -> int:
        """K for the global mask (or the whole top-K / rand-K budget), at least 1"""
        return max(1, ratio_to_count(self.phi_global, d))

    def k_local(self, d: int) -> int:
        if self.scheme != "tcs":
            return 0
        return ratio_to_count(self.phi_local, d)

    @property
    def global_floors_enabled(self) -> bool:
        return self.scheme == "tcs" and self.fairness in ("plf", "lf")

    @property
    def local_floors_enabled(self) -> bool:
        return self.scheme == "tcs" and self.fairness == "lf"


@dataclass
class QuantizerSpec:
    """Value quantizer used on the wire"""
    kind: QuantizerKind = "none"
    levels: int = 0

    def __post_init__(self):
        """Validate quantizer specification"""
        if self.kind not in QUANTIZER_KIND_CODES:
            raise ConfigurationError(f"unknown quantizer {self.kind!r}", fields=["quantizer"])
        if self.kind == "none":
            self.levels = 0
        elif self.kind == "scaled_sign":
            self.levels = 1
        elif not 1 <= self.levels <= 0xFFFF:
            raise ConfigurationError("fractional quantization needs 1 <= P <= 65535", fields=["quant_levels"])

    @property
    def index_bits(self) -> int:
        """Bits that identify a level, ceil(log2 P)"""
        if self.kind != "fractional":
            return 0
        return (self.levels - 1).bit_length()

    @property
    def bits_per_value(self) -> int:
        if self.kind == "none":
            return 32
        return self.index_bits + 1

    @property
    def code(self) -> int:
        return QUANTIZER_KIND_CODES[self.kind]


def _required(value: Any, info: ValidationInfo, reason: str) -> Any:
    if value is None:
        raise ValueError(f"{info.field_name} is required when {reason}")
    return value


class ExperimentConfig(pydantic.BaseModel):
    """
    Declarative description of one simulated federated training run.

    Every field is explicit; only ``fairness``, ``quantizer`` and ``momentum`` carry
    defaults. Fields that only matter under a non-default option
    (``phi_min_*``, ``quant_levels``, ``hidden_units``, ``dataset_path``) are required
    exactly when that option is selected.
    """

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    seed: int = Field(ge=0, description="Root seed of every random stream")
    num_clients: int = Field(ge=1, description="N, all of which participate in every round")
    local_steps: int = Field(ge=1, description="H, local SGD steps per round")
    epochs: int = Field(ge=1)
    batch_size: int = Field(ge=1, description="Per-client batch size")

    scheme: RunScheme
    phi_global: Optional[float] = Field(default=None, validate_default=True)
    phi_local: Optional[float] = Field(default=None, validate_default=True)
    fairness: Fairness = "none"
    phi_min_global: Optional[float] = Field(default=None, validate_default=True)
    phi_min_local: Optional[float] = Field(default=None, validate_default=True)

    quantizer: QuantizerKind = "none"
    quant_levels: Optional[int] = Field(default=None, validate_default=True)

    base_lr: float = Field(gt=0, description="Learning rate at the reference batch size")
    reference_batch: int = Field(ge=1)
    warmup_epochs: float = Field(ge=0)
    milestones: List[Tuple[float, float]]
    weight_decay: float = Field(ge=0)
    momentum: float = 0.0

    model: ModelKind
    hidden_units: Optional[int] = Field(default=None, validate_default=True)

    dataset: DatasetKind
    dataset_path: Optional[str] = Field(default=None, validate_default=True)
    num_classes: int = Field(ge=2)
    num_features: int = Field(ge=1)
    num_samples: int = Field(ge=2)
    cluster_spread: float = Field(ge=0)
    test_fraction: float = Field(gt=0, lt=1)

    @field_validator("phi_global")
    @classmethod
    def _check_phi_global(cls, v: Optional[float], info: ValidationInfo) -> Optional[float]:
        if info.data.get("scheme", "dense") == "dense":
            return v
        _required(v, info, "scheme is not dense")
        if not 0.0 < v <= 1.0:
            raise ValueError("phi_global must be in (0, 1]")
        return v

    @field_validator("phi_local")
    @classmethod
    def _check_phi_local(cls, v: Optional[float], info: ValidationInfo) -> Optional[float]:
        if info.data.get("scheme") != "tcs":
            return v
        _required(v, info, "scheme=tcs")
        if not 0.0 <= v < 1.0:
            raise ValueError("phi_local must be in [0, 1)")
        phi_global = info.data.get("phi_global")
        if phi_global is not None and v >= phi_global:
            raise ValueError("phi_local must be smaller than phi_global for scheme=tcs")
        return v

    @field_validator("phi_min_global")
    @classmethod
    def _check_phi_min_global(cls, v: Optional[float], info: ValidationInfo) -> Optional[float]:
        if info.data.get("fairness") in ("plf", "lf"):
            _required(v, info, "fairness is plf or lf")
        if v is not None and not 0.0 <= v <= 1.0:
            raise ValueError("phi_min_global must be in [0, 1]")
        return v

    @field_validator("phi_min_local")
    @classmethod
    def _check_phi_min_local(cls, v: Optional[float], info: ValidationInfo) -> Optional[float]:
        if info.data.get("fairness") == "lf":
            _required(v, info, "fairness=lf")
        if v is not None and not 0.0 <= v <= 1.0:
            raise ValueError("phi_min_local must be in [0, 1]")
        return v

    @field_validator("quant_levels")
    @classmethod
    def _check_quant_levels(cls, v: Optional[int], info: ValidationInfo) -> Optional[int]:
        if info.data.get("quantizer") == "fractional":
            _required(v, info, "quantizer=fractional")
            if not 1 <= v <= 0xFFFF:
                raise ValueError("quant_levels must be in [1, 65535]")
        return v

    @field_validator("milestones")
    @classmethod
    def _check_milestones(cls, v: List[Tuple[float, float]]) -> List[Tuple[float, float]]:
        epochs = [m[0] for m in v]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("milestone epochs must be strictly increasing")
        if any(m[1] <= 0 for m in v):
            raise ValueError("milestone factors must be positive")
        return v

    @field_validator("momentum")
    @classmethod
    def _check_momentum(cls, v: float, info: ValidationInfo) -> float:
        if not 0.0 <= v < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if v > 0 and info.data.get("local_steps", 1) != 1:
            raise ValueError("momentum requires local_steps=1")
        return v

    @field_validator("hidden_units")
    @classmethod
    def _check_hidden_units(cls, v: Optional[int], info: ValidationInfo) -> Optional[int]:
        if info.data.get("model") == "mlp":
            _required(v, info, "model=mlp")
            if v < 1:
                raise ValueError("hidden_units must be positive")
        return v

    @field_validator("dataset_path")
    @classmethod
    def _check_dataset_path(cls, v: Optional[str], info: ValidationInfo) -> Optional[str]:
        if info.data.get("dataset") == "csv":
            _required(v, info, "dataset=csv")
        return v

    @property
    def compressed(self) -> bool:
        return self.scheme != "dense"

    def compressor_config(self) -> Optional[CompressorConfig]:
        """CompressorConfig for compressed schemes, None for dense runs"""
        if self.scheme == "dense":
            return None
        return CompressorConfig(
            scheme=self.scheme,
            phi_global=float(self.phi_global),
            phi_local=float(self.phi_local or 0.0) if self.scheme == "tcs" else 0.0,
            fairness=self.fairness,
            phi_min_global=float(self.phi_min_global or 0.0),
            phi_min_local=float(self.phi_min_local or 0.0),
        )

    def quantizer_spec(self) -> QuantizerSpec:
        return QuantizerSpec(kind=self.quantizer, levels=int(self.quant_levels or 0))

    def milestone_list(self) -> List[Milestone]:
        return [(float(e), float(f)) for e, f in self.milestones]


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_text(text: str) -> Dict[str, Any]:
    """
    Parse a configuration document.

    JSON objects are accepted as is. Otherwise the text is read as flat
    ``key = value`` lines (``key: value`` also works), where each value is a JSON
    literal or a bare word, and ``#`` starts a comment.

    Raises:
        ConfigurationError: If a line is not a key/value pair or a key repeats
    """
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"invalid JSON config: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a JSON object")
        return data

    data: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split(" #", 1)[0].strip()
        if not line or line.startswith("#"):
            continue
        sep = "=" if "=" in line else ":"
        if sep not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, value = line.split(sep, 1)
        key = key.strip()
        if key in data:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}", fields=[key])
        data[key] = _parse_value(value)
    return data


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply ``key=value`` override strings on top of parsed config data"""
    merged = dict(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        merged[key.strip()] = _parse_value(value)
    return merged


def build_experiment_config(data: Dict[str, ConfigScalar]) -> ExperimentConfig:
    """
    Validate raw config data into an ExperimentConfig.

    Raises:
        ConfigurationError: Naming every invalid or missing field
    """
    try:
        return ExperimentConfig(**data)
    except pydantic.ValidationError as e:
        fields = []
        messages = []
        for error in e.errors():
            name = ".".join(str(part) for part in error["loc"]) or "config"
            fields.append(name)
            messages.append(f"{name}: {error['msg']}")
        logger.error(f"Invalid experiment config: {'; '.join(messages)}")
        raise ConfigurationError("invalid config: " + "; ".join(messages), fields=fields) from e


def load_experiment_config(path: Union[str, Path], overrides: Sequence[str] = ()) -> ExperimentConfig:
    """
    Load, override and validate an experiment config file.

    Args:
        path: Config file (JSON or flat key/value text)
        overrides: ``key=value`` strings applied after parsing

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigurationError: If the file is unreadable or any field is invalid
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    return build_experiment_config(apply_overrides(parse_config_text(text), overrides))
