"""JSON wire documents. Every document carries ``format_version``."""
from typing import Dict, List, Optional, Type, TypeVar

from pydantic import BaseModel, Field, ValidationError, field_validator

from .error_handlers import DataError, SchemaVersionError

FORMAT_VERSION = "1.0"
SUPPORTED_MAJOR = "1"

DocT = TypeVar("DocT", bound="VersionedDoc")


class VersionedDoc(BaseModel):
    format_version: str = FORMAT_VERSION


def check_version(data: dict, kind: str) -> None:
    version = str(data.get("format_version", ""))
    if version.split(".")[0] != SUPPORTED_MAJOR:
        raise SchemaVersionError(f"{kind}: unsupported format_version '{version}' (expected {SUPPORTED_MAJOR}.x)")


def parse_document(model: Type[DocT], data: dict) -> DocT:
    """Validate a loaded JSON document, rejecting unknown major versions."""
    if not isinstance(data, dict):
        raise DataError(f"{model.__name__}: expected a JSON object")
    check_version(data, model.__name__)
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise DataError(f"{model.__name__}: invalid document: {exc.errors()[0]['msg']} at {exc.errors()[0]['loc']}")


def _check_length(value: List[float], n: int, name: str) -> List[float]:
    if len(value) != n:
        raise ValueError(f"{name} must have {n} entries, got {len(value)}")
    return value


# Rig and frames

class JointDoc(BaseModel):
    name: str
    parent: Optional[int] = None
    rest: List[float]
    pose: List[float]
    scale: Optional[float] = None

    @field_validator("rest", "pose")
    @classmethod
    def _matrix(cls, value):
        return _check_length(value, 16, "joint transform")


class RigStateDoc(VersionedDoc):
    joints: List[JointDoc]
    beta: Optional[List[float]] = None


class FrameDoc(VersionedDoc):
    frame_id: str
    origin: List[float]
    rotation: List[float]

    @field_validator("origin")
    @classmethod
    def _origin(cls, value):
        return _check_length(value, 3, "origin")

    @field_validator("rotation")
    @classmethod
    def _rotation(cls, value):
        return _check_length(value, 9, "rotation")


# Templates and descriptors

class TemplateSidecarDoc(VersionedDoc):
    organ: str
    centroid: List[float]
    frame_id: str
    landmarks: Dict[str, List[int]] = Field(default_factory=dict)


class DescriptorDoc(BaseModel):
    case_id: str
    organ: str
    delta_c: List[float]
    rotation: List[float]
    ell: List[float]
    rmse: float
    volume_ratio: float
    kept: bool = True


class DescriptorSetDoc(VersionedDoc):
    organ: str
    epsilon: float
    iqr_multiplier: float
    descriptors: List[DescriptorDoc]


# Priors

class FeatureSpecDoc(BaseModel):
    joints: List[str]
    include_distances: bool = True
    include_angle: bool = True
    k_beta: int = 0


class PriorAssetDoc(VersionedDoc):
    organ: str
    feature_spec: FeatureSpecDoc
    feature_dim: int
    W_pos: List[List[float]]
    b_pos: List[float]
    W_scale: List[List[float]]
    b_scale: List[float]
    sigma2_pos: List[float]
    sigma2_scale: List[float]
    Sigma_dc: List[List[float]]
    R_bar: List[List[float]]
    frame_id: str
    ridge_lambda: float
    n_train: int


class UncertaintyDoc(BaseModel):
    sigma2_pos: List[float]
    sigma2_scale: List[float]
    Sigma_dc: List[List[float]]


class InstantiatedSidecarDoc(VersionedDoc):
    organ: str
    delta_c: List[float]
    ell: List[float]
    scale: List[float]
    frame_id: str
    uncertainty: UncertaintyDoc


# Target initialization

class CandidateDoc(BaseModel):
    index: int
    q: List[float]
    n: List[float]
    r: List[float]
    s_align: float
    s_skel: float
    s: float


class Pose6DofDoc(BaseModel):
    position: List[float]
    rotation: List[List[float]]
    quaternion_xyzw: List[float]


class ControlStateDoc(VersionedDoc):
    organ: str
    mesh_ref: Optional[str] = None
    target: List[float]
    candidates: List[CandidateDoc]
    R_bar: List[List[float]]
    Sigma_dc: List[List[float]]
    sigma2_pos: List[float]
    sigma2_scale: List[float]
    pose6dof: List[Pose6DofDoc]


# Grounding

class SemanticUnitDoc(BaseModel):
    id: Optional[int] = None
    symptom: str
    diagnosis: str = ""
    organ: str
    anatomy: List[str] = Field(default_factory=list)
    basis: str = ""

    class Config:
        from_attributes = True


class ScoredLabel(BaseModel):
    name: str
    score: float


class GroundedTargetDoc(VersionedDoc):
    query: str
    organ: str
    organ_score: float
    region: Optional[str] = None
    region_score: float = 0.0
    task_type: Optional[str] = None
    auxiliary_organs: List[ScoredLabel] = Field(default_factory=list)
    auxiliary_regions: List[ScoredLabel] = Field(default_factory=list)
    retrieved: List[ScoredLabel] = Field(default_factory=list)


class WhitelistDoc(VersionedDoc):
    organs: Dict[str, List[str]]


# Phantom cohorts and evaluation

class OrganTruthDoc(BaseModel):
    delta_c: List[float]
    ell: List[float]
    rotation: List[float]


class CaseTruthDoc(VersionedDoc):
    case_id: str
    organs: Dict[str, OrganTruthDoc]
    targets: Dict[str, List[float]] = Field(default_factory=dict)


class CohortDoc(VersionedDoc):
    seed: int
    cases: List[str]
    train: List[str]
    test: List[str]
    organs: List[str]
    reference_case: str
    landmarks: Dict[str, Dict[str, List[int]]] = Field(default_factory=dict)


class OrganEvalDoc(BaseModel):
    case_id: str
    organ: str
    method: str
    centroid_error_mm: float
    axis_error_mm: List[float]
    scale_error_pct: float
    support_iou: float
    inclusion_rate: Optional[float] = None


class EvalReportDoc(VersionedDoc):
    rows: List[OrganEvalDoc]
    aggregate: Dict[str, Dict[str, float]]
