import json

import numpy as np
import pytest

from app.anatomy.mesh import icosphere
from app.anatomy.raycast import point_mesh_distances
from app.anatomy.registration import (
    DeformationState,
    TemplateTopology,
    _StageObjective,
    chamfer_energy,
    chamfer_gradient,
    register_template,
    regularizer_energies,
    write_diagnostics,
)
from app.config import RegistrationConfig
from app.error_handlers import CountMismatchError, DataError, EmptyResultError


def _config(**overrides):
    values = {"samples": 512, "lambda_normal": 0.0, "stage_iterations": [200, 20, 10]}
    values.update(overrides)
    return RegistrationConfig(**values)


def _numeric_gradient(fn, x, h=1e-6):
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        step = np.zeros(x.size)
        step[i] = h
        step = step.reshape(x.shape)
        flat[i] = (fn(x + step) - fn(x - step)) / (2.0 * h)
    return grad


def _relative_error(analytic, numeric):
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)


def test_template_on_itself_is_a_fixed_point():
    template = icosphere(2, radii=(3.0, 2.0, 1.5))
    result = register_template(template, template, _config(stage_iterations=[5, 5, 5]))
    assert chamfer_energy(result.registered.vertices, template.vertices) <= 1e-6
    np.testing.assert_allclose(result.state.translation, 0.0, atol=1e-9)
    assert np.array_equal(result.registered.faces, template.faces)


def test_translation_is_recovered(rng):
    for _ in range(20):
        radii = rng.uniform(1.5, 3.0, size=3)
        template = icosphere(2, radii=tuple(radii))
        shift = rng.normal(size=3)
        shift *= rng.uniform(0.05, 0.3) / np.linalg.norm(shift)
        target = template.with_vertices(template.vertices + shift)

        result = register_template(template, target, _config(seed=int(rng.integers(0, 1000))))
        assert np.linalg.norm(result.state.translation - shift) <= 0.05
        assert result.diagnostics["rmse_to_target"] < 0.1


def test_smooth_bump_is_followed_without_tearing_edges():
    template = icosphere(3, radius=4.0)
    v = template.vertices
    # radial bump of 0.5 cm at the equator fading to zero at the poles
    height = 0.5 * np.cos(np.pi * v[:, 2] / 8.0) ** 2
    target = template.with_vertices(v * (1.0 + height / 4.0)[:, None])
    assert point_mesh_distances(v, target).mean() > 0.1

    result = register_template(template, target, RegistrationConfig(seed=4))
    registered = result.registered
    assert point_mesh_distances(registered.vertices, target).mean() <= 0.1
    assert point_mesh_distances(target.vertices, registered).mean() <= 0.1

    edges = template.edges
    before = np.linalg.norm(v[edges[:, 0]] - v[edges[:, 1]], axis=1)
    after = np.linalg.norm(registered.vertices[edges[:, 0]] - registered.vertices[edges[:, 1]], axis=1)
    assert np.mean(np.abs(after - before) / before) <= 0.15


def test_data_term_is_unchanged_when_both_shapes_move_together(rng):
    template = icosphere(2, radii=(2.0, 1.5, 1.0))
    target = icosphere(2, center=(0.3, 0.0, -0.2), radii=(2.2, 1.4, 1.1))
    offsets = rng.normal(0.0, 0.02, size=template.vertices.shape)
    shift = np.array([5.0, -3.0, 2.0])
    weights = {"data": 1.0, "edge": 0.5, "normal": 0.1, "lap": 1.0}
    state = DeformationState(offsets, np.array([0.1, 0.0, 0.05]))

    here = _StageObjective(TemplateTopology(template), target, weights, samples=256, seed=2)
    moved = _StageObjective(
        TemplateTopology(template.with_vertices(template.vertices + shift)),
        target.with_vertices(target.vertices + shift),
        weights,
        samples=256,
        seed=2,
    )
    total, terms = here.evaluate(state, with_grad=False)
    moved_total, moved_terms = moved.evaluate(state, with_grad=False)
    for name in terms:
        assert moved_terms[name] == pytest.approx(terms[name], abs=1e-9)
    assert moved_total == pytest.approx(total, abs=1e-9)


def test_energy_never_increases_within_a_stage():
    template = icosphere(2, radii=(3.0, 2.0, 1.5))
    target = icosphere(2, center=(0.2, -0.1, 0.1), radii=(3.3, 1.8, 1.6))
    result = register_template(template, target, _config())
    stages = result.diagnostics["stages"]
    assert [s["stage"] for s in stages] == [1, 2, 3]
    assert [s["seed"] for s in stages] == [0, 1, 2]
    for stage in stages:
        history = np.array(stage["energy_history"])
        assert np.all(np.diff(history) <= 1e-12)
    # the refine stage runs with the strengthened regularizers
    assert stages[2]["weights"]["lap"] == pytest.approx(4.0 * stages[1]["weights"]["lap"])
    assert stages[2]["weights"]["edge"] == pytest.approx(4.0 * stages[1]["weights"]["edge"])
    # stage one moves the translation only
    assert stages[0]["terms"]["lap"] == 0.0


def test_chamfer_gradient_matches_finite_differences(rng):
    x = rng.normal(size=(30, 3))
    y = rng.normal(size=(40, 3))
    energy, grad = chamfer_gradient(x, y)
    assert energy == pytest.approx(chamfer_energy(x, y))
    numeric = _numeric_gradient(lambda p: chamfer_energy(p, y), x)
    assert _relative_error(grad, numeric) <= 1e-4


def test_edge_term_gradient(rng):
    template = icosphere(1)
    topology = TemplateTopology(template)
    vertices = template.vertices + rng.normal(0.0, 0.05, size=template.vertices.shape)
    _, grad = topology.edge_term(vertices)
    numeric = _numeric_gradient(lambda v: topology.edge_term(v)[0], vertices)
    assert _relative_error(grad, numeric) <= 1e-4


def test_normal_term_gradient(rng):
    template = icosphere(1)
    topology = TemplateTopology(template)
    vertices = template.vertices + rng.normal(0.0, 0.05, size=template.vertices.shape)
    _, grad = topology.normal_term(vertices)
    numeric = _numeric_gradient(lambda v: topology.normal_term(v)[0], vertices)
    assert _relative_error(grad, numeric) <= 1e-4


def test_laplacian_term_gradient(rng):
    topology = TemplateTopology(icosphere(1))
    offsets = rng.normal(0.0, 0.1, size=topology.template.vertices.shape)
    _, grad = topology.laplacian_term(offsets)
    numeric = _numeric_gradient(lambda o: topology.laplacian_term(o)[0], offsets)
    assert _relative_error(grad, numeric) <= 1e-4


def test_translation_gradient_of_stage_objective(rng):
    template = icosphere(1, radii=(2.0, 1.5, 1.0))
    target = icosphere(2, center=(0.3, 0.0, -0.2), radii=(2.2, 1.4, 1.1))
    weights = {"data": 1.0, "edge": 0.5, "normal": 0.1, "lap": 1.0}
    objective = _StageObjective(TemplateTopology(template), target, weights, samples=256, seed=3)
    offsets = rng.normal(0.0, 0.02, size=template.vertices.shape)
    state = DeformationState(offsets, np.array([0.05, -0.02, 0.01]))
    _, _, g_t, g_offsets = objective.evaluate(state)

    def total_at(t):
        return objective.evaluate(DeformationState(offsets, t), with_grad=False)[0]

    assert _relative_error(g_t, _numeric_gradient(total_at, state.translation)) <= 1e-4

    def total_with_offsets(o):
        return objective.evaluate(DeformationState(o, state.translation), with_grad=False)[0]

    assert _relative_error(g_offsets, _numeric_gradient(total_with_offsets, offsets)) <= 1e-4


def test_energy_only_and_translation_only_evaluations_agree(rng):
    template = icosphere(2, radii=(2.0, 1.5, 1.0))
    target = icosphere(2, center=(0.3, 0.0, -0.2), radii=(2.2, 1.4, 1.1))
    weights = {"data": 1.0, "edge": 0.5, "normal": 0.1, "lap": 1.0}
    objective = _StageObjective(TemplateTopology(template), target, weights, samples=512, seed=5)
    state = DeformationState(rng.normal(0.0, 0.02, size=template.vertices.shape), np.array([0.1, 0.0, -0.05]))

    total, terms, g_t, g_offsets = objective.evaluate(state)
    energy_only, energy_terms = objective.evaluate(state, with_grad=False)
    assert energy_only == total
    assert energy_terms == terms

    fixed_total, _, fixed_g_t, fixed_offsets = objective.evaluate(state, offsets_free=False)
    assert fixed_total == total
    assert fixed_offsets is None
    np.testing.assert_allclose(fixed_g_t, g_t, atol=1e-12)


def test_regularizers_under_pure_translation():
    template = icosphere(2)
    e_edge, e_normal, e_lap = regularizer_energies(template, template.vertices + np.array([1.0, -2.0, 0.5]))
    _, own_normal, _ = regularizer_energies(template, template.vertices)
    assert e_edge == pytest.approx(0.0, abs=1e-12)
    assert e_lap == pytest.approx(0.0, abs=1e-12)
    assert e_normal == pytest.approx(own_normal, abs=1e-12)
    assert own_normal > 0.0


def test_regularizers_reject_vertex_count_mismatch():
    template = icosphere(1)
    with pytest.raises(CountMismatchError):
        regularizer_energies(template, template.vertices[:-1])


def test_invalid_configuration():
    template = icosphere(1)
    with pytest.raises(DataError):
        register_template(template, template, _config(samples=10))
    with pytest.raises(DataError):
        register_template(template, template, _config(lambda_data=0.0))


def test_chamfer_on_empty_set():
    with pytest.raises(EmptyResultError):
        chamfer_energy(np.zeros((0, 3)), np.zeros((4, 3)))


def test_diagnostics_are_one_line_per_stage(tmp_path):
    template = icosphere(1)
    result = register_template(template, template, _config(stage_iterations=[2, 2, 2]))
    path = write_diagnostics(result.diagnostics, tmp_path / "liver.diagnostics.jsonl")
    lines = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
    assert [line["name"] for line in lines] == ["translation", "joint", "refine"]
    assert all("rmse_to_target" in line for line in lines)
