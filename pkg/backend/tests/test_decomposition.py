import numpy as np
import pytest

from app.anatomy.decomposition import (
    AnatomicalFrame,
    OrganInstanceDescriptor,
    ReferenceTemplateAsset,
    build_anatomical_frame,
    build_reference_template,
    decompose_instance,
    axis_spread,
    iqr_filter,
    iqr_keep,
    load_descriptors,
    load_frame,
    load_template,
    quartiles,
    save_descriptors,
    save_frame,
    save_template,
    to_local,
    to_world,
)
from app.anatomy.alignment import kabsch_align
from app.anatomy.instantiation import instantiate_local
from app.anatomy.mesh import AffineTransform, icosphere
from app.anatomy.phantom import JOINT_PARENTS, build_rig
from app.error_handlers import (
    CountMismatchError,
    DataError,
    DegenerateFrameError,
    DegenerateSpreadError,
    MissingInputError,
    UnknownLandmarkError,
)
from conftest import random_rotation


def _positions(**changes):
    positions = {name: np.zeros(3) for name in JOINT_PARENTS}
    positions.update({
        "l_hip": np.array([-6.0, -5.0, 0.0]),
        "r_hip": np.array([6.0, -5.0, 0.0]),
        "spine_03": np.array([0.0, 30.0, 0.0]),
    })
    positions.update({k: np.asarray(v, dtype=np.float64) for k, v in changes.items()})
    return positions


def _descriptor(case_id, rmse, volume_ratio):
    return OrganInstanceDescriptor(case_id, "liver", np.zeros(3), np.eye(3), np.zeros(3), rmse, volume_ratio)


def test_frame_of_an_upright_rig_is_identity():
    frame = build_anatomical_frame(build_rig(_positions()))
    np.testing.assert_allclose(frame.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(frame.origin, 0.0)


def test_frame_is_orthonormal_on_random_rigs(rng):
    for _ in range(100):
        positions = {name: rng.normal(0.0, 10.0, size=3) for name in JOINT_PARENTS}
        frame = build_anatomical_frame(build_rig(positions))
        R = frame.rotation
        assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-9
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(frame.origin, positions["root"])


def test_frame_follows_a_rigid_motion(rng):
    rig = build_rig(_positions())
    rotation = random_rotation(rng)
    motion = AffineTransform.from_rotation(rotation, rng.normal(size=3))
    moved = build_anatomical_frame(rig.moved(motion), source="pose")
    # axes are rows, so they rotate as row vectors
    np.testing.assert_allclose(moved.rotation, np.eye(3) @ rotation.T, atol=1e-9)


def test_coincident_hips_are_degenerate():
    rig = build_rig(_positions(l_hip=[0.0, -5.0, 0.0], r_hip=[0.0, -5.0, 0.0]))
    with pytest.raises(DegenerateFrameError):
        build_anatomical_frame(rig)


def test_spine_along_hip_axis_is_degenerate():
    rig = build_rig(_positions(spine_03=[10.0, 0.0, 0.0]))
    with pytest.raises(DegenerateFrameError):
        build_anatomical_frame(rig)


def test_missing_frame_joint():
    rig = build_rig(_positions())
    with pytest.raises(MissingInputError):
        build_anatomical_frame(rig, {"root": "pelvis"})


def test_local_world_round_trip(rng, sphere):
    frame = AnatomicalFrame(rng.normal(size=3), random_rotation(rng))
    back = to_world(to_local(sphere, frame), frame)
    np.testing.assert_allclose(back.vertices, sphere.vertices, atol=1e-12)


def test_decomposition_round_trip(rng, ellipsoid_template):
    for _ in range(200):
        delta_c = rng.normal(0.0, 2.0, size=3)
        ell = rng.uniform(-0.2, 0.2, size=3)
        rotation = random_rotation(rng)
        instance = instantiate_local(ellipsoid_template, delta_c, ell, rotation)

        descriptor = decompose_instance(instance, ellipsoid_template)
        np.testing.assert_allclose(descriptor.delta_c, delta_c, atol=1e-6)
        np.testing.assert_allclose(descriptor.ell, ell, atol=1e-6)
        np.testing.assert_allclose(descriptor.rotation, rotation, atol=1e-6)
        assert descriptor.volume_ratio == pytest.approx(np.exp(ell.sum()), rel=1e-6)


def test_displacement_is_the_centroid_difference_not_the_rigid_translation(ellipsoid_template):
    T = ellipsoid_template.mesh.vertices
    # stretch one side only so the centroid moves inside the shape
    bent = T + np.where(T[:, [0]] > 1.0, np.array([0.8, 0.0, 0.0]) * (T[:, [0]] - 1.0), 0.0)
    rotation = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    V = bent @ rotation.T + np.array([4.0, -1.0, 2.0])
    instance = ellipsoid_template.mesh.with_vertices(V)

    descriptor = decompose_instance(instance, ellipsoid_template)
    t_rigid = kabsch_align(T, V).translation
    np.testing.assert_allclose(descriptor.delta_c, V.mean(axis=0) - T.mean(axis=0), atol=1e-12)
    assert np.linalg.norm(descriptor.delta_c - t_rigid) > 0.5


def test_template_against_itself(ellipsoid_template):
    descriptor = decompose_instance(ellipsoid_template.mesh, ellipsoid_template, case_id="ref")
    np.testing.assert_allclose(descriptor.delta_c, 0.0, atol=1e-12)
    np.testing.assert_allclose(descriptor.rotation, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(descriptor.ell, 0.0, atol=1e-6)
    assert descriptor.case_id == "ref"


def test_vertex_count_mismatch(ellipsoid_template):
    with pytest.raises(CountMismatchError):
        decompose_instance(icosphere(1), ellipsoid_template)


def test_flat_template_has_no_spread():
    mesh = icosphere(2, radii=(1.0, 1.0, 1e-12))
    asset = ReferenceTemplateAsset("liver", mesh, mesh.centroid, "reference")
    with pytest.raises(DegenerateSpreadError):
        decompose_instance(mesh, asset)


def test_template_validation(ellipsoid_template):
    mesh = ellipsoid_template.mesh
    with pytest.raises(DataError):
        ReferenceTemplateAsset("liver", mesh, mesh.centroid + 1.0, "reference")
    with pytest.raises(UnknownLandmarkError):
        ReferenceTemplateAsset("liver", mesh, mesh.centroid, "reference", {"tip": [len(mesh.vertices)]})
    with pytest.raises(UnknownLandmarkError):
        ellipsoid_template.landmark_points("hilum")
    assert ellipsoid_template.landmark_points("dome").shape == (3, 3)


def test_quartiles_interpolate_linearly():
    assert quartiles([1.0, 2.0, 3.0, 4.0]) == (1.75, 3.25)


def test_quartiles_of_five_values():
    assert quartiles([5.0, 1.0, 4.0, 2.0, 3.0]) == (2.0, 4.0)
    assert quartiles([1.0, 1.0, 1.0, 1.0, 100.0]) == (1.0, 1.0)


def test_zero_spread_still_rejects_the_outlier():
    assert iqr_keep([1.0, 1.0, 1.0, 1.0, 100.0], 1.5).tolist() == [True, True, True, True, False]
    descriptors = [_descriptor(f"c{i}", rmse, 1.0) for i, rmse in enumerate([1.0, 1.0, 1.0, 1.0, 100.0])]
    assert iqr_filter(descriptors, 1.5).tolist() == [True, True, True, True, False]


def test_volume_ratios_on_the_fences_are_kept():
    assert iqr_keep([0.9, 1.0, 1.0, 1.1], 1.5).all()


def test_spread_uses_the_population_convention():
    np.testing.assert_allclose(axis_spread([[0.0, 0.0, 0.0], [2.0, 4.0, 6.0]]), [1.0, 2.0, 3.0])


def test_iqr_filter_drops_outlier():
    descriptors = [_descriptor(f"c{i}", 0.1 + 0.01 * i, 1.0) for i in range(8)]
    descriptors.append(_descriptor("bad", 5.0, 1.0))
    mask = iqr_filter(descriptors)
    assert mask.tolist() == [True] * 8 + [False]


def test_iqr_filter_keeps_all_below_four_samples():
    descriptors = [_descriptor("a", 0.1, 1.0), _descriptor("b", 0.1, 1.0), _descriptor("c", 9.0, 50.0)]
    assert iqr_filter(descriptors).tolist() == [True, True, True]


def test_iqr_filter_keeps_identical_values():
    descriptors = [_descriptor(f"c{i}", 0.2, 1.0) for i in range(6)]
    assert iqr_filter(descriptors).all()


def test_persistence(tmp_path, rng, ellipsoid_template):
    frame = AnatomicalFrame(rng.normal(size=3), random_rotation(rng), "case_003")
    loaded_frame = load_frame(save_frame(frame, tmp_path / "frames" / "case_003.json"))
    np.testing.assert_allclose(loaded_frame.rotation, frame.rotation)
    assert loaded_frame.frame_id == "case_003"

    asset = build_reference_template("liver", ellipsoid_template.mesh, frame, {"dome": [0, 1, 2]})
    loaded = load_template(save_template(asset, tmp_path / "templates" / "liver.obj"))
    np.testing.assert_allclose(loaded.centroid, asset.centroid)
    assert loaded.landmarks == {"dome": [0, 1, 2]}
    assert loaded.frame_id == "case_003"

    descriptors = [decompose_instance(ellipsoid_template.mesh, ellipsoid_template, case_id="case_000")]
    descriptors[0].kept = False
    path = save_descriptors(descriptors, "liver", tmp_path / "liver.json", epsilon=1e-8, multiplier=1.5)
    (reloaded,) = load_descriptors(path)
    assert reloaded.case_id == "case_000"
    assert reloaded.kept is False


def test_missing_descriptors_point_at_decompose(tmp_path):
    with pytest.raises(MissingInputError, match="decompose"):
        load_descriptors(tmp_path / "absent.json")
