"""Rig states, forward kinematics and organ-aware approximate inverse skinning."""
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import sparse

from ..error_handlers import CycleError, DataError, MissingInputError, WhitelistError
from ..schemas import FORMAT_VERSION, RigStateDoc, parse_document
from .mesh import AffineTransform, TriMesh

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-4
DEFAULT_SUPPORT = 3
SCALE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Joint:
    name: str
    parent: Optional[int]
    rest: AffineTransform
    pose: AffineTransform

    @property
    def scale(self) -> float:
        """Uniform scale s_j of the posed global transform."""
        return self.pose.scale

    @property
    def rest_position(self) -> np.ndarray:
        return self.rest.translation

    @property
    def pose_position(self) -> np.ndarray:
        return self.pose.translation


@dataclass(frozen=True)
class RigState:
    joints: List[Joint]
    beta: Optional[np.ndarray] = None
    names: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = {}
        for i, joint in enumerate(self.joints):
            if joint.name in names:
                raise DataError(f"duplicate joint name '{joint.name}'")
            names[joint.name] = i
            if joint.parent is not None and not 0 <= joint.parent < len(self.joints):
                raise DataError(f"joint '{joint.name}' has out-of-range parent {joint.parent}")
            if not joint.scale > 0:
                raise DataError(f"joint '{joint.name}' has a degenerate posed transform (scale {joint.scale})")
        object.__setattr__(self, "names", names)
        _topological_order([j.parent for j in self.joints])

    def __len__(self) -> int:
        return len(self.joints)

    def index(self, name: str) -> int:
        if name not in self.names:
            raise MissingInputError(f"joint '{name}' is not in the rig")
        return self.names[name]

    def joint(self, name: str) -> Joint:
        return self.joints[self.index(name)]

    def rest_positions(self, names: Optional[Sequence[str]] = None) -> np.ndarray:
        chosen = self.joints if names is None else [self.joint(n) for n in names]
        return np.array([j.rest_position for j in chosen]).reshape(-1, 3)

    def pose_positions(self, names: Optional[Sequence[str]] = None) -> np.ndarray:
        chosen = self.joints if names is None else [self.joint(n) for n in names]
        return np.array([j.pose_position for j in chosen]).reshape(-1, 3)

    def with_pose(self, transforms: Sequence[AffineTransform]) -> "RigState":
        joints = [replace(j, pose=t) for j, t in zip(self.joints, transforms)]
        return RigState(joints, self.beta)

    def moved(self, motion: AffineTransform, rest: bool = False) -> "RigState":
        """Apply a world-space motion to the posed (and optionally rest) transforms."""
        joints = [
            replace(j, pose=j.pose.then(motion), rest=j.rest.then(motion) if rest else j.rest)
            for j in self.joints
        ]
        return RigState(joints, self.beta)


def _topological_order(parents: Sequence[Optional[int]]) -> List[int]:
    """Joint indices with every parent before its children; raises on cycles."""
    state = [0] * len(parents)
    order: List[int] = []
    for start in range(len(parents)):
        path = []
        node = start
        while node is not None and state[node] == 0:
            state[node] = 1
            path.append(node)
            node = parents[node]
        if node is not None and state[node] == 1:
            raise CycleError(f"rig parent structure has a cycle through joint {node}")
        for visited in reversed(path):
            state[visited] = 2
            order.append(visited)
    return order


def forward_kinematics(local: Sequence[AffineTransform], parents: Sequence[Optional[int]]) -> List[AffineTransform]:
    """Global transforms; a child's global is its local followed by its parent's global."""
    if len(local) != len(parents):
        raise DataError("forward_kinematics needs one parent entry per local transform")
    global_tf: List[Optional[AffineTransform]] = [None] * len(local)
    for j in _topological_order(parents):
        parent = parents[j]
        global_tf[j] = local[j] if parent is None else local[j].then(global_tf[parent])
    return global_tf


def unposing_transforms(rig: RigState) -> List[AffineTransform]:
    """Per-joint ``(G_pose)^-1 G_rest``: posed world -> joint local -> rest world."""
    return [j.pose.inverse().then(j.rest) for j in rig.joints]


def skinning_weights(vertex, joint_positions, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Normalised inverse-squared-distance weights for one or many vertices."""
    single = np.ndim(vertex) == 1
    vertex = np.atleast_2d(np.asarray(vertex, dtype=np.float64))
    joints = np.atleast_2d(np.asarray(joint_positions, dtype=np.float64))
    d2 = np.sum((vertex[:, None, :] - joints[None, :, :]) ** 2, axis=2)
    with np.errstate(divide="ignore"):
        raw = 1.0 / (d2 + epsilon)
    # a vertex sitting on a joint with epsilon = 0 takes that joint fully
    exact = ~np.isfinite(raw)
    if exact.any():
        raw = np.where(exact.any(axis=1, keepdims=True), exact.astype(np.float64), raw)
    weights = raw / raw.sum(axis=1, keepdims=True)
    return weights[0] if single else weights


@dataclass(frozen=True)
class JointWhitelist:
    names: tuple

    def __post_init__(self):
        if not self.names:
            raise WhitelistError("joint whitelist must not be empty")

    def present_in(self, rig: RigState) -> List[str]:
        present = [n for n in self.names if n in rig.names]
        if not present:
            raise WhitelistError(f"no whitelist joint found in rig (whitelist: {list(self.names)})")
        return present


def organ_support(mesh: TriMesh, rig: RigState, whitelist: JointWhitelist, support_size: int = DEFAULT_SUPPORT) -> List[str]:
    """Whitelisted joints nearest the organ centroid in the posed rig, nearest first."""
    if support_size < 1:
        raise DataError(f"support size must be >= 1, got {support_size}")
    candidates = whitelist.present_in(rig)
    centroid = mesh.centroid
    dist = np.linalg.norm(rig.pose_positions(candidates) - centroid, axis=1)
    ranked = sorted(zip(dist.tolist(), candidates))
    return [name for _, name in ranked[:support_size]]


def uniform_laplacian(n_vertices: int, edges: np.ndarray) -> sparse.csr_matrix:
    """``L = I - D^-1 A`` over the mesh edge graph."""
    i, j = edges[:, 0], edges[:, 1]
    data = np.ones(2 * len(edges))
    adjacency = sparse.coo_matrix((data, (np.r_[i, j], np.r_[j, i])), shape=(n_vertices, n_vertices)).tocsr()
    degree = np.asarray(adjacency.sum(axis=1)).ravel()
    inv_degree = np.divide(1.0, degree, out=np.zeros_like(degree), where=degree > 0)
    return sparse.identity(n_vertices, format="csr") - sparse.diags(inv_degree) @ adjacency


def laplacian_smooth(mesh: TriMesh, strength: float = 0.1, iterations: int = 2) -> TriMesh:
    L = uniform_laplacian(len(mesh.vertices), mesh.edges)
    vertices = np.array(mesh.vertices)
    for _ in range(iterations):
        vertices = vertices - strength * (L @ vertices)
    return mesh.with_vertices(vertices)


def canonicalize_organ(
    mesh: TriMesh,
    rig: RigState,
    whitelist: JointWhitelist,
    support_size: int = DEFAULT_SUPPORT,
    epsilon: float = DEFAULT_EPSILON,
    smoothing: bool = False,
    smoothing_strength: float = 0.1,
    smoothing_iterations: int = 2,
) -> TriMesh:
    """Map a posed organ into the canonical rest-rig space by blended unposing transforms."""
    support = organ_support(mesh, rig, whitelist, support_size)
    idx = [rig.index(n) for n in support]
    deltas = unposing_transforms(rig)
    weights = skinning_weights(mesh.vertices, rig.pose_positions(support), epsilon)

    canonical = np.zeros_like(mesh.vertices)
    for column, joint_idx in enumerate(idx):
        canonical += weights[:, column:column + 1] * deltas[joint_idx].apply(mesh.vertices)
    logger.debug(f"Canonicalized {len(mesh.vertices)} vertices with support {support}")

    result = mesh.with_vertices(canonical)
    if smoothing:
        result = laplacian_smooth(result, smoothing_strength, smoothing_iterations)
    return result


def rig_to_dict(rig: RigState) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "joints": [
            {
                "name": j.name,
                "parent": j.parent,
                "rest": j.rest.matrix.reshape(-1).tolist(),
                "pose": j.pose.matrix.reshape(-1).tolist(),
                "scale": float(j.scale),
            }
            for j in rig.joints
        ],
    }
    if rig.beta is not None:
        doc["beta"] = np.asarray(rig.beta, dtype=np.float64).tolist()
    return doc


def rig_from_dict(doc: dict) -> RigState:
    parsed = parse_document(RigStateDoc, doc)
    joints = []
    for j in parsed.joints:
        joint = Joint(j.name, j.parent, AffineTransform.from_matrix(j.rest), AffineTransform.from_matrix(j.pose))
        if j.scale is not None and not np.isclose(j.scale, joint.scale, rtol=SCALE_TOLERANCE, atol=0.0):
            raise DataError(f"joint '{j.name}': recorded scale {j.scale} does not match its posed transform ({joint.scale})")
        joints.append(joint)
    beta = None if parsed.beta is None else np.asarray(parsed.beta, dtype=np.float64)
    return RigState(joints, beta)


def save_rig(rig: RigState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rig_to_dict(rig), indent=2), encoding="utf-8")
    return path


def load_rig(path) -> RigState:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"rig file not found: {path}")
    return rig_from_dict(json.loads(path.read_text(encoding="utf-8")))
