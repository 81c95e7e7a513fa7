import numpy as np
import pytest

from app.anatomy.volume import VoxelLabelGrid, load_volume, marching_cubes, save_volume
from app.error_handlers import DataError, EmptyResultError


def _block_grid():
    labels = np.zeros((20, 20, 20), dtype=np.int32)
    labels[5:15, 5:15, 5:15] = 1
    return VoxelLabelGrid(labels, spacing_mm=(1.0, 1.0, 1.0), label_names={1: "liver"})


def _ball_grid(radius=20, size=50):
    ijk = np.indices((size, size, size)).transpose(1, 2, 3, 0)
    center = np.array([size / 2.0] * 3)
    labels = (np.linalg.norm(ijk - center, axis=3) <= radius).astype(np.int32)
    return VoxelLabelGrid(labels, label_names={1: "ball"}), center


def test_empty_grid_has_no_surface():
    grid = VoxelLabelGrid(np.zeros((10, 10, 10), dtype=np.int32))
    with pytest.raises(EmptyResultError):
        marching_cubes(grid, 1)


def test_components_below_threshold_are_discarded():
    with pytest.raises(EmptyResultError):
        marching_cubes(_block_grid(), 1, min_voxels=5000)


def test_block_surface_area():
    mesh = marching_cubes(_block_grid(), 1, iso=0.5, sigma=0.0, step=1, min_voxels=1)
    # a 10 mm block is 1 cm on a side
    assert mesh.area == pytest.approx(6.0, rel=0.10)
    assert mesh.faces.max() < len(mesh.vertices)
    assert np.all(mesh.face_areas > 1e-12)


def test_ball_centroid():
    grid, center = _ball_grid()
    mesh = marching_cubes(grid, 1, iso=0.5, sigma=1.0, step=1, min_voxels=5000)
    np.testing.assert_allclose(mesh.centroid, center / 10.0, atol=0.05)


def test_affine_maps_to_world_centimeters():
    affine = np.diag([2.0, 2.0, 2.0, 1.0])
    affine[:3, 3] = [100.0, 0.0, -50.0]
    labels = _block_grid().labels
    grid = VoxelLabelGrid(labels, spacing_mm=(2.0, 2.0, 2.0), affine=affine, label_names={1: "liver"})
    mesh = marching_cubes(grid, 1, sigma=0.0, step=1, min_voxels=1)
    # block centre at voxel index 9.5 -> 119 mm, 19 mm, -31 mm
    np.testing.assert_allclose(mesh.centroid, [11.9, 1.9, -3.1], atol=0.05)


def test_volume_round_trip(tmp_path):
    grid = _block_grid()
    loaded = load_volume(save_volume(grid, tmp_path / "case" / "volume.raw"))
    assert np.array_equal(loaded.labels, grid.labels)
    assert loaded.label_names == {1: "liver"}
    assert loaded.label_id("liver") == 1


def test_invalid_spacing():
    with pytest.raises(DataError):
        VoxelLabelGrid(np.zeros((2, 2, 2)), spacing_mm=(1.0, 0.0, 1.0))
