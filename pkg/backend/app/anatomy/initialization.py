"""Actionable target initialization: skin contact candidates and the control-facing state."""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from ..error_handlers import (
    DataError,
    EmptyCandidatesError,
    MissingInputError,
    OrganMismatchError,
    ProjectionMissError,
    ZeroLengthRayError,
)
from ..schemas import CandidateDoc, ControlStateDoc, Pose6DofDoc, parse_document
from .decomposition import AnatomicalFrame
from .instantiation import InstantiatedOrgan
from .mesh import TriMesh
from .priors import OrganPriorAsset
from .raycast import ray_first_hit, segments_mesh_min_distance

logger = logging.getLogger(__name__)

TARGET_MODES = ("centroid", "landmark", "point")
PARALLEL_TOLERANCE = 1e-9


@dataclass(frozen=True)
class TargetSpec:
    mode: str = "centroid"
    landmark: Optional[str] = None
    point: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        if self.mode not in TARGET_MODES:
            raise DataError(f"target mode must be one of {TARGET_MODES}, got '{self.mode}'")
        payloads = {"landmark": self.landmark is not None, "point": self.point is not None}
        expected = {"centroid": set(), "landmark": {"landmark"}, "point": {"point"}}[self.mode]
        present = {k for k, v in payloads.items() if v}
        if present != expected:
            raise DataError(f"target mode '{self.mode}' needs exactly {sorted(expected) or 'no'} payload, got {sorted(present)}")


@dataclass(frozen=True)
class ContactCandidate:
    index: int
    q: np.ndarray
    n: np.ndarray
    r: np.ndarray
    s_align: float
    s_skel: float
    s: float

    def to_doc(self) -> CandidateDoc:
        return CandidateDoc(
            index=self.index,
            q=self.q.tolist(),
            n=self.n.tolist(),
            r=self.r.tolist(),
            s_align=self.s_align,
            s_skel=self.s_skel,
            s=self.s,
        )


@dataclass(frozen=True)
class ProbePose:
    position: np.ndarray
    rotation: np.ndarray

    @property
    def quaternion_xyzw(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_quat()

    def to_doc(self) -> Pose6DofDoc:
        return Pose6DofDoc(
            position=self.position.tolist(),
            rotation=self.rotation.tolist(),
            quaternion_xyzw=self.quaternion_xyzw.tolist(),
        )


@dataclass
class ControlState:
    organ: str
    world_mesh: TriMesh
    target: np.ndarray
    candidates: List[ContactCandidate]
    R_bar: np.ndarray
    Sigma_dc: np.ndarray
    sigma2_pos: np.ndarray
    sigma2_scale: np.ndarray
    poses: List[ProbePose] = field(default_factory=list)
    mesh_ref: Optional[str] = None

    def to_doc(self) -> ControlStateDoc:
        return ControlStateDoc(
            organ=self.organ,
            mesh_ref=self.mesh_ref,
            target=self.target.tolist(),
            candidates=[c.to_doc() for c in self.candidates],
            R_bar=self.R_bar.tolist(),
            Sigma_dc=self.Sigma_dc.tolist(),
            sigma2_pos=self.sigma2_pos.tolist(),
            sigma2_scale=self.sigma2_scale.tolist(),
            pose6dof=[p.to_doc() for p in self.poses],
        )


def resolve_target(organ: InstantiatedOrgan, spec: TargetSpec) -> np.ndarray:
    if spec.mode == "centroid":
        return organ.world_mesh.centroid
    if spec.mode == "landmark":
        return organ.landmark_points(spec.landmark).mean(axis=0)
    return np.asarray(spec.point, dtype=np.float64)


def project_to_surface(p_tar, frame: AnatomicalFrame, skin: TriMesh) -> np.ndarray:
    """First skin hit of the anterior ray from the target."""
    hit = ray_first_hit(p_tar, frame.e_z, skin)
    if hit is None:
        raise ProjectionMissError(
            f"anterior ray from {np.round(p_tar, 3).tolist()} does not hit the skin; the target lies outside the body",
            stage="init-targets",
        )
    return hit.point


def gather_candidates(skin: TriMesh, p_proj, radius: float, frame: AnatomicalFrame) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Forward-facing skin vertices within ``radius``: (indices, points, unit normals)."""
    if radius <= 0:
        raise DataError(f"candidate radius must be positive, got {radius}")
    vertices = skin.vertices
    normals = skin.vertex_normals
    near = np.linalg.norm(vertices - np.asarray(p_proj), axis=1) <= radius
    forward = normals @ frame.e_z > 0
    indices = np.flatnonzero(near & forward)
    if indices.size == 0:
        raise EmptyCandidatesError(
            f"no forward-facing skin vertex within {radius} cm of the projected point; try a larger radius",
            stage="init-targets",
        )
    return indices, vertices[indices], normals[indices]


def clearance_scores(points, p_tar, skeleton: Optional[TriMesh], delta_skel: float) -> np.ndarray:
    """min(1, d / delta_skel) per contact point, d the entry segment's distance to the skeleton."""
    if delta_skel <= 0:
        raise DataError(f"skeletal clearance threshold must be positive, got {delta_skel}")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if skeleton is None or skeleton.is_empty or len(points) == 0:
        return np.ones(len(points))
    distance = segments_mesh_min_distance(points, np.asarray(p_tar, dtype=np.float64)[None, :], skeleton)
    return np.minimum(1.0, distance / delta_skel)


def clearance_score(q, p_tar, skeleton: Optional[TriMesh], delta_skel: float) -> float:
    return float(clearance_scores(q, p_tar, skeleton, delta_skel)[0])


def score_candidate(q, n, p_tar, skeleton: Optional[TriMesh] = None, delta_skel: float = 1.0) -> Tuple[float, float, float]:
    """(s_align, s_skel, s) for one contact point and its outward normal."""
    r = _entry_ray(q, p_tar)
    s_align = float(-np.asarray(n, dtype=np.float64) @ r)
    s_skel = clearance_score(q, p_tar, skeleton, delta_skel)
    return s_align, s_skel, s_align * s_skel


def _entry_ray(q, p_tar) -> np.ndarray:
    d = np.asarray(p_tar, dtype=np.float64) - np.asarray(q, dtype=np.float64)
    length = np.linalg.norm(d)
    if length == 0:
        raise ZeroLengthRayError("contact point coincides with the target", stage="init-targets")
    return d / length


def select_top(candidates: Sequence[ContactCandidate], k_cand: int) -> List[ContactCandidate]:
    """Top ``k_cand`` by descending score, ties by ascending vertex index."""
    if k_cand < 1:
        raise DataError(f"K_cand must be >= 1, got {k_cand}")
    return sorted(candidates, key=lambda c: (-c.s, c.index))[:k_cand]


def probe_pose(candidate: ContactCandidate, frame: AnatomicalFrame) -> ProbePose:
    """Probe axis along -r; roll fixed by projecting e_y onto the plane normal to r."""
    z = -candidate.r
    x = frame.e_y - (frame.e_y @ z) * z
    if np.linalg.norm(x) < PARALLEL_TOLERANCE:
        x = frame.e_x - (frame.e_x @ z) * z
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return ProbePose(position=candidate.q.copy(), rotation=np.column_stack([x, y, z]))


def build_control_state(
    organ: InstantiatedOrgan,
    top: Sequence[ContactCandidate],
    asset: OrganPriorAsset,
    frame: AnatomicalFrame,
    target,
    mesh_ref: Optional[str] = None,
) -> ControlState:
    if organ.organ != asset.organ:
        raise OrganMismatchError(f"instantiated organ '{organ.organ}' does not match prior '{asset.organ}'", stage="init-targets")
    return ControlState(
        organ=organ.organ,
        world_mesh=organ.world_mesh,
        target=np.asarray(target, dtype=np.float64),
        candidates=list(top),
        R_bar=asset.R_bar,
        Sigma_dc=asset.Sigma_dc,
        sigma2_pos=asset.sigma2_pos,
        sigma2_scale=asset.sigma2_scale,
        poses=[probe_pose(c, frame) for c in top],
        mesh_ref=mesh_ref,
    )


def initialize_targets(
    organ: InstantiatedOrgan,
    asset: OrganPriorAsset,
    skin: TriMesh,
    frame: AnatomicalFrame,
    spec: TargetSpec = TargetSpec(),
    skeleton: Optional[TriMesh] = None,
    radius: float = 8.0,
    delta_skel: float = 1.0,
    k_cand: int = 3,
    mesh_ref: Optional[str] = None,
) -> ControlState:
    """Resolve, project, gather, score and rank; returns the control-facing state."""
    p_tar = resolve_target(organ, spec)
    p_proj = project_to_surface(p_tar, frame, skin)
    indices, points, normals = gather_candidates(skin, p_proj, radius, frame)

    keep = ~np.all(points == p_tar, axis=1)
    indices, points, normals = indices[keep], points[keep], normals[keep]
    clearance = clearance_scores(points, p_tar, skeleton, delta_skel)

    candidates = []
    for index, q, n, s_skel in zip(indices.tolist(), points, normals, clearance.tolist()):
        r = _entry_ray(q, p_tar)
        s_align = float(-n @ r)
        candidates.append(ContactCandidate(index, q.copy(), n.copy(), r, s_align, s_skel, s_align * s_skel))

    top = select_top(candidates, k_cand)
    logger.info(
        f"{organ.organ}: {len(candidates)} candidates within {radius} cm, "
        f"best score {top[0].s:.4f}" if top else f"{organ.organ}: no scorable candidates"
    )
    return build_control_state(organ, top, asset, frame, p_tar, mesh_ref)


def save_control_state(state: ControlState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(state.to_doc().model_dump_json(indent=2), encoding="utf-8")
    return path


def load_control_state(path) -> ControlStateDoc:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"control state not found: {path} (run 'init-targets' first)")
    return parse_document(ControlStateDoc, json.loads(path.read_text(encoding="utf-8")))
