import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError

from .error_handlers import DataError, MissingInputError
from .schemas import FORMAT_VERSION, check_version

load_dotenv()

logger = logging.getLogger(__name__)


class Settings:
    # Runtime
    WORKERS: int = int(os.getenv("ORGAN_PRIOR_WORKERS", "1"))
    LOG_LEVEL: str = os.getenv("ORGAN_PRIOR_LOG_LEVEL", "INFO")
    SEED: int = int(os.getenv("ORGAN_PRIOR_SEED", "0"))

    # Storage
    DATABASE_URL: str = os.getenv("ORGAN_PRIOR_DATABASE_URL", "sqlite://")
    OUTPUT_DIR: str = os.getenv("ORGAN_PRIOR_OUTPUT_DIR", "./organ_prior_out")

    # Trunk joints usable for canonicalization and features
    TRUNK_WHITELIST: List[str] = os.getenv(
        "ORGAN_PRIOR_TRUNK_WHITELIST",
        "root,pelvis,l_hip,r_hip,spine_01,spine_02,spine_03,spine_04,neck_01,neck_02",
    ).split(",")


settings = Settings()


class PathsConfig(BaseModel):
    cohort: Optional[str] = None
    output: str = settings.OUTPUT_DIR
    units: Optional[str] = None
    whitelist: Optional[str] = None


class IngestionConfig(BaseModel):
    skin_label: str = "skin"
    skeleton_labels: List[str] = Field(default_factory=lambda: ["bone", "skeleton", "spine", "ribs", "pelvis"])
    organ_iso: float = 0.5
    organ_sigma: float = 1.0
    organ_min_voxels: int = 5000
    skin_iso: float = 0.45
    skin_sigma: float = 1.2
    skin_min_voxels: int = 10000
    step: int = 2
    skin_step: int = 2


class CanonicalizationConfig(BaseModel):
    whitelist: List[str] = Field(default_factory=lambda: list(settings.TRUNK_WHITELIST))
    support_size: int = 3
    epsilon: float = 1e-4
    smoothing: bool = False
    smoothing_strength: float = 0.1
    smoothing_iterations: int = 2


class RegistrationConfig(BaseModel):
    enabled: bool = True
    lambda_data: float = 1.0
    lambda_edge: float = 0.5
    lambda_normal: float = 0.1
    lambda_lap: float = 1.0
    stage3_regularizer_gain: float = 4.0
    samples: int = 2048
    stage_iterations: List[int] = Field(default_factory=lambda: [100, 400, 200])
    translation_step: float = 0.2
    # Offset steps are per vertex: the applied step is this value times the vertex count.
    offset_step: float = 0.1
    tolerance: float = 1e-6
    max_halvings: int = 30
    seed: int = 0
    max_template_faces: int = 10000

    def validate_ranges(self) -> None:
        weights = [self.lambda_data, self.lambda_edge, self.lambda_normal, self.lambda_lap]
        if any(w < 0 for w in weights) or self.lambda_data <= 0:
            raise DataError("registration weights must be >= 0 with lambda_data > 0")
        if self.samples < 64:
            raise DataError(f"registration needs at least 64 samples, got {self.samples}")
        if len(self.stage_iterations) != 3:
            raise DataError("registration expects three stage iteration counts")


class PriorConfig(BaseModel):
    n_joints: int = 3
    include_distances: bool = True
    include_angle: bool = True
    k_beta: int = 0
    ridge_lambda: float = 0.0
    iqr_multiplier: float = 1.5
    decomposition_epsilon: float = 1e-8
    reference_case: Optional[str] = None
    frame_joints: Dict[str, str] = Field(default_factory=lambda: {
        "root": "root",
        "left_hip": "l_hip",
        "right_hip": "r_hip",
        "upper_spine": "spine_03",
    })


class InitializationConfig(BaseModel):
    radius: float = 8.0
    delta_skel: float = 1.0
    k_cand: int = 3
    target_mode: str = "centroid"
    landmark: Optional[str] = None
    frame_source: str = "rest"


class GroundingConfig(BaseModel):
    dimension: int = 256
    k: int = 5


class PhantomConfigBlock(BaseModel):
    n: int = 40
    n_test: int = 10
    noise_dc: float = 0.5
    noise_ell: float = 0.02


class PipelineConfig(BaseModel):
    format_version: str = FORMAT_VERSION
    seed: int = settings.SEED
    workers: int = settings.WORKERS
    paths: PathsConfig = Field(default_factory=PathsConfig)
    ingestion: IngestionConfig = Field(default_factory=IngestionConfig)
    canonicalization: CanonicalizationConfig = Field(default_factory=CanonicalizationConfig)
    registration: RegistrationConfig = Field(default_factory=RegistrationConfig)
    prior: PriorConfig = Field(default_factory=PriorConfig)
    initialization: InitializationConfig = Field(default_factory=InitializationConfig)
    grounding: GroundingConfig = Field(default_factory=GroundingConfig)
    phantom: PhantomConfigBlock = Field(default_factory=PhantomConfigBlock)


def _set_dotted(target: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = target
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = value


def load_pipeline_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """Resolve the pipeline configuration: flag overrides > config file > defaults."""
    raw: Dict[str, Any] = {}
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise MissingInputError(f"config file not found: {config_path}", stage="config")
        text = config_path.read_text(encoding="utf-8")
        try:
            if config_path.suffix.lower() in (".yaml", ".yml"):
                raw = yaml.safe_load(text) or {}
            else:
                raw = json.loads(text)
        except (yaml.YAMLError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot parse config file {config_path}: {exc}", stage="config")
        if not isinstance(raw, dict):
            raise DataError(f"config file {config_path} must hold a mapping", stage="config")
        check_version({"format_version": FORMAT_VERSION, **raw}, "config")

    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(raw, dotted, value)

    try:
        config = PipelineConfig.model_validate(raw)
    except ValidationError as exc:
        error = exc.errors()[0]
        raise DataError(f"invalid configuration: {error['msg']} at {'.'.join(str(p) for p in error['loc'])}", stage="config")
    logger.info(f"Resolved configuration (flag > config > default): {config.model_dump_json()}")
    return config
