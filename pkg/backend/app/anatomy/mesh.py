"""Triangle meshes and affine transforms shared by every stage.

All geometry is in centimeters. Points are row vectors and affine transforms
act from the right on augmented rows ``[v 1]``.
"""
import logging
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Tuple

import numpy as np
import trimesh

from ..error_handlers import InvalidMeshError, MissingInputError, SingularTransformError

logger = logging.getLogger(__name__)

NORMAL_TOLERANCE = 1e-6
ORTHONORMAL_TOLERANCE = 1e-6


class TriMesh:
    """Vertex/face surface. Degenerate faces are dropped at construction."""

    def __init__(self, vertices, faces, normals=None, validate: bool = True):
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)

        if validate:
            if not np.all(np.isfinite(vertices)):
                raise InvalidMeshError("mesh has non-finite vertex coordinates")
            if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
                raise InvalidMeshError(
                    f"face index out of range for {len(vertices)} vertices"
                )
            distinct = (
                (faces[:, 0] != faces[:, 1])
                & (faces[:, 1] != faces[:, 2])
                & (faces[:, 0] != faces[:, 2])
            )
            if not np.all(distinct):
                logger.warning(f"Dropping {int((~distinct).sum())} degenerate faces")
                faces = faces[distinct]

        if normals is not None:
            normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
            if normals.shape != vertices.shape:
                raise InvalidMeshError("normal count must equal vertex count")
            if validate and not np.allclose(np.linalg.norm(normals, axis=1), 1.0, atol=NORMAL_TOLERANCE):
                raise InvalidMeshError("mesh normals must be unit length")
            normals.setflags(write=False)

        vertices.setflags(write=False)
        faces.setflags(write=False)
        self.vertices = vertices
        self.faces = faces
        self._normals = normals

    def __len__(self) -> int:
        return len(self.vertices)

    def __repr__(self) -> str:
        return f"TriMesh(vertices={len(self.vertices)}, faces={len(self.faces)})"

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0 or len(self.faces) == 0

    def with_vertices(self, vertices) -> "TriMesh":
        """Same connectivity, new vertex positions."""
        return TriMesh(vertices, self.faces, validate=False)

    @cached_property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    @cached_property
    def face_cross(self) -> np.ndarray:
        tri = self.triangles
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross, axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        cross = self.face_cross
        norm = np.linalg.norm(cross, axis=1, keepdims=True)
        return np.divide(cross, norm, out=np.zeros_like(cross), where=norm > 0)

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals (unit length; zero for isolated vertices)."""
        if self._normals is not None:
            return self._normals
        accum = np.zeros_like(self.vertices)
        # the unnormalised cross product is already area weighted
        for corner in range(3):
            np.add.at(accum, self.faces[:, corner], self.face_cross)
        norm = np.linalg.norm(accum, axis=1, keepdims=True)
        return np.divide(accum, norm, out=np.zeros_like(accum), where=norm > 0)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted per row."""
        all_edges = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(all_edges, axis=1), axis=0)

    @cached_property
    def spatial(self):
        """Cached trimesh-backed ray, containment and closest-point queries."""
        from .raycast import MeshQuery

        return MeshQuery(self)

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    @property
    def bounds(self) -> np.ndarray:
        return np.stack([self.vertices.min(axis=0), self.vertices.max(axis=0)])

    @property
    def area(self) -> float:
        return float(self.face_areas.sum())

    @property
    def volume(self) -> float:
        return float(self.to_trimesh().volume)

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(vertices=np.array(self.vertices), faces=np.array(self.faces), process=False)

    @classmethod
    def from_trimesh(cls, mesh: trimesh.Trimesh) -> "TriMesh":
        return cls(np.asarray(mesh.vertices), np.asarray(mesh.faces))

    def non_manifold_edge_count(self) -> int:
        all_edges = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        _, counts = np.unique(np.sort(all_edges, axis=1), axis=0, return_counts=True)
        return int(np.count_nonzero(counts != 2))

    def transformed(self, transform: "AffineTransform") -> "TriMesh":
        return self.with_vertices(transform.apply(self.vertices))


def concatenate(meshes: Iterable[TriMesh]) -> TriMesh:
    vertices, faces, offset = [], [], 0
    for mesh in meshes:
        vertices.append(mesh.vertices)
        faces.append(mesh.faces + offset)
        offset += len(mesh.vertices)
    if not vertices:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return TriMesh(np.concatenate(vertices), np.concatenate(faces))


class AffineTransform:
    """Row-vector affine map ``v' = v @ linear + translation``.

    As a 4x4 matrix this is ``[[linear, 0], [translation, 1]]`` and composes
    left to right: ``a.then(b)`` applies ``a`` first.
    """

    def __init__(self, linear=None, translation=None):
        self.linear = np.eye(3) if linear is None else np.asarray(linear, dtype=np.float64).reshape(3, 3)
        self.translation = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls()

    @classmethod
    def from_matrix(cls, matrix) -> "AffineTransform":
        matrix = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        return cls(matrix[:3, :3], matrix[3, :3])

    @classmethod
    def from_rotation(cls, rotation, translation=None, scale: float = 1.0) -> "AffineTransform":
        """Build from a column-convention rotation ``R``; the stored linear part is ``(s R)^T``."""
        return cls(scale * np.asarray(rotation, dtype=np.float64).T, translation)

    @property
    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.linear
        out[3, :3] = self.translation
        return out

    @property
    def scale(self) -> float:
        return float(np.cbrt(abs(np.linalg.det(self.linear))))

    @property
    def rotation(self) -> np.ndarray:
        """Column-convention rotation ``R`` with ``linear = (s R)^T``."""
        return (self.linear / self.scale).T

    def is_similarity(self, tol: float = ORTHONORMAL_TOLERANCE) -> bool:
        s = self.scale
        if s <= 0 or np.linalg.det(self.linear) <= 0:
            return False
        r = self.linear / s
        return bool(np.allclose(r.T @ r, np.eye(3), atol=tol))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.linear + self.translation

    def then(self, other: "AffineTransform") -> "AffineTransform":
        return AffineTransform.from_matrix(self.matrix @ other.matrix)

    def inverse(self) -> "AffineTransform":
        det = np.linalg.det(self.linear)
        if not np.isfinite(det) or abs(det) < 1e-12:
            raise SingularTransformError("affine transform is singular and cannot be inverted")
        inv_linear = np.linalg.inv(self.linear)
        return AffineTransform(inv_linear, -self.translation @ inv_linear)

    def __repr__(self) -> str:
        return f"AffineTransform(linear={self.linear.tolist()}, translation={self.translation.tolist()})"


def save_obj(mesh: TriMesh, path) -> Path:
    """Write ASCII OBJ with ``v``/``f`` records only; vertex order is preserved."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_obj(path) -> TriMesh:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"mesh file not found: {path}")
    vertices, faces = [], []
    for line in path.read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vertices.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            # accept "i", "i/j" and "i/j/k" forms; fan-triangulate polygons
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return TriMesh(np.array(vertices).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def sample_surface(mesh: TriMesh, count: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Area-weighted surface samples as (face indices, barycentric weights)."""
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas
    total = areas.sum()
    if total <= 0:
        raise InvalidMeshError("cannot sample a mesh with zero surface area")
    face_idx = rng.choice(len(areas), size=count, p=areas / total)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    return face_idx, bary


def points_from_barycentric(vertices: np.ndarray, faces: np.ndarray, face_idx: np.ndarray, bary: np.ndarray) -> np.ndarray:
    tri = vertices[faces[face_idx]]
    return np.einsum("nk,nkd->nd", bary, tri)


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=None, radii: Optional[Tuple[float, float, float]] = None) -> TriMesh:
    """Icosphere (or axis-aligned ellipsoid when ``radii`` is given)."""
    sphere = trimesh.creation.icosphere(subdivisions=subdivisions, radius=1.0)
    vertices = np.asarray(sphere.vertices, dtype=np.float64)
    scale = np.asarray(radii, dtype=np.float64) if radii is not None else np.full(3, radius)
    vertices = vertices * scale
    if center is not None:
        vertices = vertices + np.asarray(center, dtype=np.float64)
    return TriMesh(vertices, np.asarray(sphere.faces))


def box(extents, center=None) -> TriMesh:
    mesh = trimesh.creation.box(extents=extents)
    vertices = np.asarray(mesh.vertices, dtype=np.float64)
    if center is not None:
        vertices = vertices + np.asarray(center, dtype=np.float64)
    return TriMesh(vertices, np.asarray(mesh.faces))
