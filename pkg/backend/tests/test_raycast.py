import numpy as np
import pytest

from app.anatomy.mesh import TriMesh, box, icosphere
from app.anatomy.raycast import (
    contains,
    point_mesh_distance,
    point_mesh_distances,
    ray_first_hit,
    segment_distances,
    segment_mesh_min_distance,
    segments_mesh_min_distance,
)
from app.error_handlers import EmptyResultError


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _scan_ray(origin, direction, triangles):
    """Smallest non-negative ray parameter over all triangles, checked one by one."""
    best = np.inf
    for a, b, c in triangles:
        e1, e2 = b - a, c - a
        p = np.cross(direction, e2)
        det = e1 @ p
        if abs(det) < 1e-14:
            continue
        s = origin - a
        u = (s @ p) / det
        q = np.cross(s, e1)
        v = (direction @ q) / det
        lam = (e2 @ q) / det
        if u >= 0.0 and v >= 0.0 and u + v <= 1.0 and lam >= 0.0:
            best = min(best, lam)
    return best


def test_ray_from_cube_center_hits_top_face(unit_cube):
    hit = ray_first_hit([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], unit_cube)
    assert hit is not None
    assert hit.distance == pytest.approx(0.5)
    np.testing.assert_allclose(hit.point, [0.0, 0.0, 0.5], atol=1e-9)


def test_ray_pointing_away_misses(unit_cube):
    assert ray_first_hit([0.0, 0.0, 3.0], [0.0, 0.0, 1.0], unit_cube) is None


def test_first_hit_matches_exhaustive_scan(rng):
    mesh = icosphere(3, radius=2.0)
    for _ in range(200):
        origin = rng.uniform(-3.0, 3.0, size=3)
        direction = _unit(rng.normal(size=3))
        expected = _scan_ray(origin, direction, mesh.triangles)
        hit = ray_first_hit(origin, direction, mesh)
        if not np.isfinite(expected):
            assert hit is None
            continue
        assert hit is not None
        assert hit.distance == pytest.approx(expected, abs=1e-9)
        np.testing.assert_allclose(hit.point, origin + hit.distance * direction, atol=1e-9)
        a, b, c = mesh.triangles[hit.face_index]
        normal = _unit(np.cross(b - a, c - a))
        assert abs((hit.point - a) @ normal) < 1e-6


def test_ray_through_a_shared_edge_reports_the_smaller_face():
    square = TriMesh([[-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0]], [[0, 2, 3], [0, 1, 2]])
    hit = ray_first_hit([0.0, 0.0, 1.0], [0.0, 0.0, -1.0], square)
    assert hit is not None
    assert hit.face_index == 0
    assert hit.distance == pytest.approx(1.0)


def test_segment_piercing_mesh_has_zero_distance(unit_cube):
    assert segment_mesh_min_distance([0, 0, -2], [0, 0, 2], unit_cube) == 0.0


def test_segment_parallel_to_plane():
    plane = TriMesh([[-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0]], [[0, 1, 2], [0, 2, 3]])
    assert segment_mesh_min_distance([-0.5, 0, 1], [0.5, 0, 1], plane) == pytest.approx(1.0)


def test_segment_distance_symmetric_and_monotone(rng, sphere):
    for _ in range(20):
        a = rng.uniform(3.0, 5.0, size=3)
        b = a + rng.normal(size=3)
        d_ab = segment_mesh_min_distance(a, b, sphere)
        assert d_ab == pytest.approx(segment_mesh_min_distance(b, a, sphere), abs=1e-9)
        extended = b + (b - a)
        assert segment_mesh_min_distance(a, extended, sphere) <= d_ab + 1e-9


def test_segment_distance_matches_dense_sampling(rng):
    mesh = box((2.0, 1.0, 1.5))
    dense = np.concatenate([
        tri[0] + u * (tri[1] - tri[0]) + v * (tri[2] - tri[0])
        for tri in mesh.triangles
        for u, v in [(u, v) for u in np.linspace(0, 1, 21) for v in np.linspace(0, 1, 21) if u + v <= 1]
    ]).reshape(-1, 3)
    for _ in range(10):
        a = rng.uniform(2.0, 4.0, size=3) * rng.choice([-1, 1], size=3)
        b = a + rng.normal(size=3)
        t = np.linspace(0.0, 1.0, 201)[:, None]
        segment = a + t * (b - a)
        sampled = np.min(np.linalg.norm(segment[:, None, :] - dense[None, :, :], axis=2))
        exact = segment_mesh_min_distance(a, b, mesh)
        assert exact <= sampled + 1e-9
        assert exact == pytest.approx(sampled, rel=0.02, abs=0.02)


def test_batched_segments_match_single_queries(rng, sphere):
    starts = rng.uniform(-4.0, 4.0, size=(30, 3))
    end = np.array([0.5, 0.0, 0.0])
    batched = segments_mesh_min_distance(starts, end[None, :], sphere)
    single = [segment_mesh_min_distance(s, end, sphere) for s in starts]
    np.testing.assert_allclose(batched, single, atol=1e-9)
    # every segment ends inside the sphere, so the outside starts cross it
    outside = np.linalg.norm(starts, axis=1) > 2.0 + 1e-6
    assert np.all(batched[outside] == 0.0)


def test_segment_to_segment_cases():
    origin, x_axis = np.zeros(3), np.array([1.0, 0.0, 0.0])
    # crossing at right angles one unit apart
    assert segment_distances(origin, x_axis, [0.5, -1.0, 1.0], [0.5, 1.0, 1.0]) == pytest.approx(1.0)
    # parallel and overlapping
    assert segment_distances(origin, x_axis, [0.2, 2.0, 0.0], [0.8, 2.0, 0.0]) == pytest.approx(2.0)
    # collinear with a gap
    assert segment_distances(origin, x_axis, [3.0, 0.0, 0.0], [4.0, 0.0, 0.0]) == pytest.approx(2.0)
    # degenerate second segment
    assert segment_distances(origin, x_axis, [0.5, 0.0, 3.0], [0.5, 0.0, 3.0]) == pytest.approx(3.0)
    # both degenerate
    assert segment_distances(origin, origin, [0.0, 4.0, 0.0], [0.0, 4.0, 0.0]) == pytest.approx(4.0)


def test_segment_distance_on_empty_mesh():
    with pytest.raises(EmptyResultError):
        segment_mesh_min_distance([0, 0, 0], [1, 0, 0], TriMesh(np.zeros((0, 3)), np.zeros((0, 3))))


def test_point_distance_and_containment(unit_cube):
    assert point_mesh_distance([0.0, 0.0, 1.5], unit_cube) == pytest.approx(1.0)
    assert point_mesh_distance([0.1, 0.0, 0.0], unit_cube) == pytest.approx(0.4)
    np.testing.assert_allclose(point_mesh_distances([[0.0, 0.0, 1.5], [0.0, 2.0, 0.0]], unit_cube), [1.0, 1.5])
    inside = contains([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]], unit_cube)
    assert inside.tolist() == [True, False]


def test_containment_matches_the_sphere_radius(rng):
    sphere = icosphere(3, radius=2.0)
    points = rng.uniform(-3.0, 3.0, size=(300, 3))
    radius = np.linalg.norm(points, axis=1)
    # skip the shell where the faceted surface and the sphere disagree
    clear = np.abs(radius - 2.0) > 0.05
    inside = contains(points[clear], sphere)
    assert inside.tolist() == (radius[clear] < 2.0).tolist()
