"""Ray casting, containment and distance queries against triangle meshes.

Queries go through trimesh's r-tree backed ray intersector and proximity
module; a :class:`MeshQuery` is built once per mesh and cached on it.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from trimesh import proximity
from trimesh.ray.ray_triangle import RayMeshIntersector

from ..error_handlers import EmptyResultError
from .mesh import TriMesh

logger = logging.getLogger(__name__)

# hits closer than this along the ray count as the same hit
TIE_TOLERANCE = 1e-9
DEGENERATE_LENGTH = 1e-18


@dataclass(frozen=True)
class RayHit:
    point: np.ndarray
    face_index: int
    distance: float


class MeshQuery:
    """trimesh view of a :class:`TriMesh` with its spatial indices."""

    def __init__(self, mesh: TriMesh):
        if mesh.is_empty:
            raise EmptyResultError("spatial query against an empty mesh")
        self.mesh = mesh
        self.tm = mesh.to_trimesh()
        self.intersector = RayMeshIntersector(self.tm)
        logger.debug(f"Built spatial index over {len(mesh.faces)} triangles")

    def ray_parameters(self, origins, directions):
        """All forward hits as (ray index, face index, ray parameter, location).

        The parameter is measured in units of each direction's length.
        """
        origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        locations, index_ray, index_tri = self.intersector.intersects_location(
            origins, directions, multiple_hits=True
        )
        if len(index_ray) == 0:
            return index_ray, index_tri, np.zeros(0), locations
        d = directions[index_ray]
        lam = np.einsum("ij,ij->i", locations - origins[index_ray], d) / np.einsum("ij,ij->i", d, d)
        keep = lam >= -TIE_TOLERANCE
        return index_ray[keep], index_tri[keep], np.maximum(lam[keep], 0.0), locations[keep]

    def first_hit(self, origin, direction) -> Optional[RayHit]:
        origin = np.asarray(origin, dtype=np.float64)
        direction = np.asarray(direction, dtype=np.float64)
        _, faces, lam, locations = self.ray_parameters(origin, direction)
        if len(lam) == 0:
            return None
        best = lam.min()
        # ties resolve to the smaller face index
        tied = np.flatnonzero(lam <= best + TIE_TOLERANCE)
        k = tied[np.argmin(faces[tied])]
        return RayHit(point=locations[k], face_index=int(faces[k]), distance=float(lam[k]))

    def closest(self, points):
        """(closest points, distances, face indices) for each query point."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        closest, distance, faces = proximity.closest_point(self.tm, points)
        return np.asarray(closest), np.asarray(distance), np.asarray(faces)

    def contains(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.asarray(self.intersector.contains_points(points), dtype=bool)


def ray_first_hit(origin, direction, mesh: TriMesh) -> Optional[RayHit]:
    """First intersection with minimal non-negative ray parameter, or None."""
    if mesh.is_empty:
        return None
    return mesh.spatial.first_hit(origin, direction)


def point_mesh_distances(points, mesh: TriMesh) -> np.ndarray:
    if mesh.is_empty:
        raise EmptyResultError("distance query against an empty mesh")
    return mesh.spatial.closest(points)[1]


def point_mesh_distance(point, mesh: TriMesh) -> float:
    return float(point_mesh_distances(point, mesh)[0])


def _safe_divide(num, den):
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=np.abs(den) > DEGENERATE_LENGTH)


def segment_distances(p1, q1, p2, q2) -> np.ndarray:
    """Distance between segments [p1, q1] and [p2, q2], broadcast over leading axes."""
    p1, q1, p2, q2 = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64) for x in (p1, q1, p2, q2)))
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = np.sum(d1 * d1, axis=-1)
    e = np.sum(d2 * d2, axis=-1)
    f = np.sum(d2 * r, axis=-1)
    c = np.sum(d1 * r, axis=-1)
    b = np.sum(d1 * d2, axis=-1)

    denom = a * e - b * b
    s = np.clip(_safe_divide(b * f - c * e, denom), 0.0, 1.0)
    t = _safe_divide(b * s + f, e)
    s = np.where(t < 0.0, np.clip(_safe_divide(-c, a), 0.0, 1.0), s)
    s = np.where(t > 1.0, np.clip(_safe_divide(b - c, a), 0.0, 1.0), s)
    t = np.clip(t, 0.0, 1.0)

    # zero-length segments collapse to their start point
    first_point = a <= DEGENERATE_LENGTH
    second_point = e <= DEGENERATE_LENGTH
    s = np.where(second_point, np.clip(_safe_divide(-c, a), 0.0, 1.0), s)
    t = np.where(second_point, 0.0, t)
    t = np.where(first_point, np.clip(_safe_divide(f, e), 0.0, 1.0), t)
    s = np.where(first_point, 0.0, s)

    closest1 = p1 + s[..., None] * d1
    closest2 = p2 + t[..., None] * d2
    return np.linalg.norm(closest1 - closest2, axis=-1)


def segments_mesh_min_distance(starts, ends, mesh: TriMesh) -> np.ndarray:
    """Minimum distance from each segment [starts[i], ends[i]] to the mesh surface.

    A segment crossing the surface has distance 0. Otherwise the minimum is
    reached at an endpoint or against a triangle edge.
    """
    if mesh.is_empty:
        raise EmptyResultError("segment distance query against an empty mesh")
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    ends = np.atleast_2d(np.asarray(ends, dtype=np.float64))
    starts, ends = np.broadcast_arrays(starts, ends)
    query = mesh.spatial

    _, start_distance, _ = query.closest(starts)
    _, end_distance, _ = query.closest(ends)
    best = np.minimum(start_distance, end_distance)

    edge_vertices = mesh.vertices[mesh.edges]
    edge_distance = segment_distances(
        starts[:, None, :], ends[:, None, :], edge_vertices[None, :, 0], edge_vertices[None, :, 1]
    )
    best = np.minimum(best, edge_distance.min(axis=1))

    seg = ends - starts
    moving = np.flatnonzero(np.einsum("ij,ij->i", seg, seg) > DEGENERATE_LENGTH)
    if len(moving):
        rays, _, lam, _ = query.ray_parameters(starts[moving], seg[moving])
        crossing = np.unique(rays[lam <= 1.0 + TIE_TOLERANCE])
        best[moving[crossing]] = 0.0
    return best


def segment_mesh_min_distance(a, b, mesh: TriMesh) -> float:
    """Minimum distance between segment [a, b] and the mesh surface (0 when it crosses)."""
    return float(segments_mesh_min_distance(a, b, mesh)[0])


def contains(points, mesh: TriMesh) -> np.ndarray:
    """Inside test for closed, outward-oriented meshes."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if mesh.is_empty:
        return np.zeros(len(points), dtype=bool)
    return mesh.spatial.contains(points)
