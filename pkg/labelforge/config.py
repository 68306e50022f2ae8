"""
Run configuration.

Values come from, highest precedence first: command-line overrides, ``LLF_*``
environment variables (``LLF_ENGINE__NMS_IOU`` for nested fields), the YAML
config file, and the defaults below. The defaults are the label-engine
values the pipeline was tuned with.
"""

from pathlib import Path
from typing import Any, Literal, Optional, Tuple, Type
import hashlib
import json
import logging
import os

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    YamlConfigSettingsSource,
)

from labelforge.engine.clustering import DEFAULT_EPSILONS
from labelforge.errors import ConfigError

logger = logging.getLogger(__name__)


class EngineSettings(BaseModel):
    """Label engine parameters."""

    nms_iou: float = Field(0.01, gt=0, le=1)
    nms_order: Literal["area", "score"] = "area"
    min_mask_area: int = Field(0, ge=0)
    min_points: int = Field(1, ge=1)
    fusion_iou: float = Field(0.01, gt=0, le=1)
    dbscan_overlap: float = Field(0.5, gt=0, le=1)
    dbscan_epsilons: Tuple[float, ...] = DEFAULT_EPSILONS
    dbscan_min_pts: int = Field(5, ge=1)
    ground_inlier_dist: float = Field(0.2, gt=0)
    ground_max_iters: int = Field(200, ge=1)
    ground_max_tilt_deg: float = Field(10.0, gt=0, le=90)
    ground_score_dist: float = Field(0.05, gt=0)
    seed: int = 0
    refine_strategy: Literal["replace", "filter", "none"] = "replace"
    refine_placement: Literal["after_fusion", "per_camera"] = "after_fusion"

    @field_validator("dbscan_epsilons")
    @classmethod
    def _positive_epsilons(cls, value):
        if not value or any(eps <= 0 for eps in value):
            raise ValueError("DBSCAN epsilons must be a non-empty list of positive radii")
        return tuple(value)

    @model_validator(mode="after")
    def _score_band_inside_inlier_band(self):
        if self.ground_score_dist > self.ground_inlier_dist:
            raise ValueError("ground_score_dist must not exceed ground_inlier_dist")
        return self


class PathSettings(BaseModel):
    clouds: Optional[Path] = None
    masks: Optional[Path] = None
    output: Path = Path("output")


class CalibrationSettings(BaseModel):
    path: Optional[Path] = None
    cameras: Tuple[str, ...] = ("P2",)
    width: int = Field(1241, ge=1)
    height: int = Field(376, ge=1)


class VocabularySettings(BaseModel):
    """Optional zero-shot labeling of pseudo-labels."""

    name: Optional[str] = None
    embeddings: Optional[Path] = None
    manifest: Optional[Path] = None


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="LLF_",
        env_nested_delimiter="__",
        extra="ignore",
    )

    config_file: Optional[Path] = None
    engine: EngineSettings = Field(default_factory=EngineSettings)
    paths: PathSettings = Field(default_factory=PathSettings)
    calibration: CalibrationSettings = Field(default_factory=CalibrationSettings)
    vocabulary: VocabularySettings = Field(default_factory=VocabularySettings)
    threads: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)
    log_level: str = "INFO"
    keep_going: bool = True
    progress: bool = True

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        sources = (init_settings, env_settings, dotenv_settings)
        config_file = init_settings.init_kwargs.get("config_file")
        if config_file:
            sources += (YamlConfigSettingsSource(settings_cls, yaml_file=config_file),)
        return sources


def _check_config_file(path: Path) -> None:
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        content = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file {path} is not valid YAML: {e}") from e
    if content is not None and not isinstance(content, dict):
        raise ConfigError(f"Config file {path} must hold a mapping at the top level")


def load_settings(config_file: Optional[Path] = None, **overrides: Any) -> Settings:
    """
    Build settings from a YAML file, the environment and explicit overrides.

    Overrides use the settings structure, e.g. ``engine={"seed": 3}``; nested
    mappings are merged into the lower-precedence sources, not replacing them.
    """
    if config_file is not None:
        config_file = Path(config_file)
        _check_config_file(config_file)
    try:
        settings = Settings(config_file=config_file, **overrides)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
    logger.debug(f"Loaded settings (config file: {config_file}, threads: {settings.threads})")
    return settings


def config_hash(settings: Settings) -> str:
    """
    SHA-256 over canonical JSON of the fields that change outputs: engine
    parameters, calibration, vocabulary and the input roots.
    """
    relevant = settings.model_dump(mode="json", include={"engine", "calibration", "vocabulary"})
    relevant["inputs"] = {
        "clouds": None if settings.paths.clouds is None else str(settings.paths.clouds),
        "masks": None if settings.paths.masks is None else str(settings.paths.masks),
    }
    canonical = json.dumps(relevant, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
