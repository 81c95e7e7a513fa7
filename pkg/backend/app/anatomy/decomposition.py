"""Anatomical frames and (delta_c, R, ell) decomposition of registered organs."""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from ..error_handlers import (
    CountMismatchError,
    DataError,
    DegenerateFrameError,
    DegenerateSpreadError,
    MissingInputError,
    UnknownLandmarkError,
)
from ..schemas import (
    FORMAT_VERSION,
    DescriptorDoc,
    DescriptorSetDoc,
    FrameDoc,
    TemplateSidecarDoc,
    parse_document,
)
from .alignment import kabsch_align
from .mesh import TriMesh, load_obj, save_obj
from .rig import RigState

logger = logging.getLogger(__name__)

DEFAULT_FRAME_JOINTS = {
    "root": "root",
    "left_hip": "l_hip",
    "right_hip": "r_hip",
    "upper_spine": "spine_03",
}
CUE_TOLERANCE = 1e-9
SPREAD_TOLERANCE = 1e-9
FENCE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class AnatomicalFrame:
    """Body frame; rows of ``rotation`` are the x (left->right), y (up) and z (anterior) axes."""

    origin: np.ndarray
    rotation: np.ndarray
    frame_id: str = "subject"

    @classmethod
    def identity(cls, frame_id: str = "identity") -> "AnatomicalFrame":
        return cls(np.zeros(3), np.eye(3), frame_id)

    @property
    def e_x(self) -> np.ndarray:
        return self.rotation[0]

    @property
    def e_y(self) -> np.ndarray:
        return self.rotation[1]

    @property
    def e_z(self) -> np.ndarray:
        return self.rotation[2]

    def points_to_local(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.origin) @ self.rotation.T

    def points_to_world(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation + self.origin

    def to_doc(self) -> FrameDoc:
        return FrameDoc(
            frame_id=self.frame_id,
            origin=self.origin.tolist(),
            rotation=self.rotation.reshape(-1).tolist(),
        )

    @classmethod
    def from_doc(cls, doc: FrameDoc) -> "AnatomicalFrame":
        return cls(np.asarray(doc.origin), np.asarray(doc.rotation).reshape(3, 3), doc.frame_id)


def build_anatomical_frame(
    rig: RigState,
    joints: Optional[Mapping[str, str]] = None,
    source: str = "rest",
    frame_id: str = "subject",
) -> AnatomicalFrame:
    """Body frame from root, hips and an upper-spine joint of the rest (or posed) rig."""
    names = dict(DEFAULT_FRAME_JOINTS)
    names.update(joints or {})
    if source not in ("rest", "pose"):
        raise DataError(f"frame source must be 'rest' or 'pose', got '{source}'")
    positions = rig.rest_positions if source == "rest" else rig.pose_positions
    try:
        root, left, right, spine = positions(
            [names["root"], names["left_hip"], names["right_hip"], names["upper_spine"]]
        )
    except MissingInputError as exc:
        raise exc.with_stage("frame")

    x = right - left
    if np.linalg.norm(x) < CUE_TOLERANCE:
        raise DegenerateFrameError("hip joints coincide; lateral axis is undefined", stage="frame")
    x = x / np.linalg.norm(x)

    up = spine - root
    y = up - (up @ x) * x
    if np.linalg.norm(y) < CUE_TOLERANCE * max(1.0, np.linalg.norm(up)):
        raise DegenerateFrameError("spine direction is collinear with the hip axis", stage="frame")
    y = y / np.linalg.norm(y)
    z = np.cross(x, y)
    return AnatomicalFrame(np.array(root, dtype=np.float64), np.stack([x, y, z]), frame_id)


def to_local(mesh: TriMesh, frame: AnatomicalFrame) -> TriMesh:
    return mesh.with_vertices(frame.points_to_local(mesh.vertices))


def to_world(mesh: TriMesh, frame: AnatomicalFrame) -> TriMesh:
    return mesh.with_vertices(frame.points_to_world(mesh.vertices))


def save_frame(frame: AnatomicalFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(frame.to_doc().model_dump_json(indent=2), encoding="utf-8")
    return path


def load_frame(path) -> AnatomicalFrame:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"frame file not found: {path}")
    return AnatomicalFrame.from_doc(parse_document(FrameDoc, json.loads(path.read_text(encoding="utf-8"))))


@dataclass(frozen=True)
class ReferenceTemplateAsset:
    organ: str
    mesh: TriMesh
    centroid: np.ndarray
    frame_id: str
    landmarks: Dict[str, List[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not np.allclose(self.centroid, self.mesh.centroid, atol=1e-9, rtol=0):
            raise DataError(f"template '{self.organ}': stored centroid differs from vertex mean")
        n = len(self.mesh.vertices)
        for name, indices in self.landmarks.items():
            if not indices or min(indices) < 0 or max(indices) >= n:
                raise UnknownLandmarkError(f"template '{self.organ}': landmark '{name}' has invalid vertex indices")

    def landmark_points(self, name: str, vertices: Optional[np.ndarray] = None) -> np.ndarray:
        if name not in self.landmarks:
            raise UnknownLandmarkError(
                f"landmark '{name}' is not defined on template '{self.organ}' (known: {sorted(self.landmarks)})"
            )
        source = self.mesh.vertices if vertices is None else vertices
        return np.asarray(source)[self.landmarks[name]]


def build_reference_template(
    organ: str,
    mesh: TriMesh,
    frame: AnatomicalFrame,
    landmarks: Optional[Dict[str, Sequence[int]]] = None,
) -> ReferenceTemplateAsset:
    """Fix a template in the reference case's anatomical frame."""
    local = to_local(mesh, frame)
    return ReferenceTemplateAsset(
        organ=organ,
        mesh=local,
        centroid=local.centroid,
        frame_id=frame.frame_id,
        landmarks={k: [int(i) for i in v] for k, v in (landmarks or {}).items()},
    )


def save_template(asset: ReferenceTemplateAsset, obj_path) -> Path:
    obj_path = save_obj(asset.mesh, obj_path)
    sidecar = TemplateSidecarDoc(
        organ=asset.organ,
        centroid=asset.centroid.tolist(),
        frame_id=asset.frame_id,
        landmarks=asset.landmarks,
    )
    obj_path.with_suffix(".json").write_text(sidecar.model_dump_json(indent=2), encoding="utf-8")
    return obj_path


def load_template(obj_path) -> ReferenceTemplateAsset:
    obj_path = Path(obj_path)
    sidecar_path = obj_path.with_suffix(".json")
    if not sidecar_path.exists():
        raise MissingInputError(f"template sidecar not found: {sidecar_path}")
    doc = parse_document(TemplateSidecarDoc, json.loads(sidecar_path.read_text(encoding="utf-8")))
    return ReferenceTemplateAsset(
        organ=doc.organ,
        mesh=load_obj(obj_path),
        centroid=np.asarray(doc.centroid),
        frame_id=doc.frame_id,
        landmarks=doc.landmarks,
    )


@dataclass
class OrganInstanceDescriptor:
    case_id: str
    organ: str
    delta_c: np.ndarray
    rotation: np.ndarray
    ell: np.ndarray
    rmse: float
    volume_ratio: float
    kept: bool = True

    def to_doc(self) -> DescriptorDoc:
        return DescriptorDoc(
            case_id=self.case_id,
            organ=self.organ,
            delta_c=self.delta_c.tolist(),
            rotation=self.rotation.reshape(-1).tolist(),
            ell=self.ell.tolist(),
            rmse=self.rmse,
            volume_ratio=self.volume_ratio,
            kept=self.kept,
        )

    @classmethod
    def from_doc(cls, doc: DescriptorDoc) -> "OrganInstanceDescriptor":
        return cls(
            case_id=doc.case_id,
            organ=doc.organ,
            delta_c=np.asarray(doc.delta_c),
            rotation=np.asarray(doc.rotation).reshape(3, 3),
            ell=np.asarray(doc.ell),
            rmse=doc.rmse,
            volume_ratio=doc.volume_ratio,
            kept=doc.kept,
        )


def axis_spread(points) -> np.ndarray:
    """Axis-wise population standard deviation (divide by n) about the centroid."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.std(points - points.mean(axis=0), axis=0)


def decompose_instance(
    instance: TriMesh,
    asset: ReferenceTemplateAsset,
    epsilon: float = 1e-8,
    case_id: str = "",
) -> OrganInstanceDescriptor:
    """Centroid displacement, template-to-instance rotation and log axis scale.

    The rotation comes from a vertex-index Kabsch fit of the template onto the
    instance; the displacement is always the difference of vertex means.
    Spreads use the population standard deviation.
    """
    V = instance.vertices
    T = asset.mesh.vertices
    if V.shape != T.shape:
        raise CountMismatchError(
            f"instance has {len(V)} vertices, template '{asset.organ}' has {len(T)}", stage="decompose"
        )

    template_spread = axis_spread(T)
    if np.any(template_spread < SPREAD_TOLERANCE):
        raise DegenerateSpreadError(
            f"template '{asset.organ}' has zero spread along an axis: {template_spread.tolist()}", stage="decompose"
        )

    alignment = kabsch_align(T, V)
    R = alignment.rotation
    delta_c = V.mean(axis=0) - T.mean(axis=0)

    aligned = (V - alignment.translation) @ R
    spread = axis_spread(aligned)
    s = spread / (template_spread + epsilon)
    ell = np.log(s)
    return OrganInstanceDescriptor(
        case_id=case_id,
        organ=asset.organ,
        delta_c=delta_c,
        rotation=R,
        ell=ell,
        rmse=alignment.rmse,
        volume_ratio=float(np.prod(np.exp(ell))),
    )


def quartiles(values) -> tuple:
    """Q1 and Q3 with linear interpolation between order statistics."""
    values = np.asarray(values, dtype=np.float64)
    q1, q3 = np.percentile(values, [25.0, 75.0], method="linear")
    return float(q1), float(q3)


def iqr_keep(values, multiplier: float = 1.5) -> np.ndarray:
    q1, q3 = quartiles(values)
    spread = q3 - q1
    values = np.asarray(values, dtype=np.float64)
    # values on a fence are kept
    slack = FENCE_TOLERANCE * max(1.0, abs(q1), abs(q3))
    return (values >= q1 - multiplier * spread - slack) & (values <= q3 + multiplier * spread + slack)


def iqr_filter(descriptors: Sequence[OrganInstanceDescriptor], multiplier: float = 1.5) -> np.ndarray:
    """Keep mask: both rmse and volume ratio must lie inside their Tukey fences."""
    n = len(descriptors)
    if n < 4:
        logger.warning(f"IQR filtering needs at least 4 samples, got {n}; keeping all")
        return np.ones(n, dtype=bool)
    rmse = [d.rmse for d in descriptors]
    volume = [d.volume_ratio for d in descriptors]
    mask = iqr_keep(rmse, multiplier) & iqr_keep(volume, multiplier)
    if not mask.all():
        dropped = [d.case_id for d, keep in zip(descriptors, mask) if not keep]
        logger.info(f"IQR filter dropped {len(dropped)} of {n} descriptors: {dropped}")
    return mask


def save_descriptors(
    descriptors: Sequence[OrganInstanceDescriptor], organ: str, path, epsilon: float, multiplier: float
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = DescriptorSetDoc(
        format_version=FORMAT_VERSION,
        organ=organ,
        epsilon=epsilon,
        iqr_multiplier=multiplier,
        descriptors=[d.to_doc() for d in descriptors],
    )
    path.write_text(doc.model_dump_json(indent=2), encoding="utf-8")
    return path


def load_descriptors(path) -> List[OrganInstanceDescriptor]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"descriptor file not found: {path} (run 'decompose' first)")
    doc = parse_document(DescriptorSetDoc, json.loads(path.read_text(encoding="utf-8")))
    return [OrganInstanceDescriptor.from_doc(d) for d in doc.descriptors]
