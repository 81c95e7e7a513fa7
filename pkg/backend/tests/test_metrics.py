import json

import numpy as np
import pandas as pd
import pytest

from app.anatomy.mesh import TriMesh, box, icosphere
from app.anatomy.metrics import (
    EvalReport,
    centroid_error,
    evaluate_organ,
    scale_error,
    support_iou,
    target_inclusion_rate,
)
from app.error_handlers import DataError, EmptyResultError


def test_centroid_error_in_millimeters(unit_cube):
    moved = box((1.0, 1.0, 1.0), center=(3.0, 4.0, 0.0))
    euclidean, per_axis = centroid_error(moved, unit_cube)
    assert euclidean == pytest.approx(50.0)
    np.testing.assert_allclose(per_axis, [30.0, 40.0, 0.0], atol=1e-9)


def test_centroid_error_of_an_empty_mesh(unit_cube):
    empty = TriMesh(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(EmptyResultError):
        centroid_error(empty, unit_cube)


def test_scale_error(unit_cube):
    assert scale_error(box((1.2, 1.2, 1.2)), unit_cube) == pytest.approx(20.0)
    assert scale_error(box((1.2, 1.0, 1.0)), unit_cube) == pytest.approx(20.0 / 3.0)
    assert scale_error(unit_cube, unit_cube) == 0.0


def test_scale_error_needs_a_solid_truth(unit_cube):
    flat = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    with pytest.raises(DataError):
        scale_error(unit_cube, flat)


def test_support_iou(unit_cube):
    shifted = box((1.0, 1.0, 1.0), center=(0.5, 0.0, 0.0))
    assert support_iou(shifted, unit_cube) == pytest.approx(1.0 / 3.0)
    assert support_iou(unit_cube, unit_cube) == pytest.approx(1.0)
    assert support_iou(box((1.0, 1.0, 1.0), center=(5.0, 0.0, 0.0)), unit_cube) == 0.0


def test_inclusion_rate(unit_cube):
    points = [
        [0.0, 0.0, 0.0],   # inside
        [0.0, 0.0, 1.2],   # 0.7 cm above the top face
        [0.0, 0.0, 3.0],   # 2.5 cm away
        [1.4, 0.0, 0.0],   # 0.9 cm beside
    ]
    assert target_inclusion_rate(points, unit_cube, margin_mm=10.0) == pytest.approx(0.75)
    assert target_inclusion_rate(points, unit_cube, margin_mm=0.0) == pytest.approx(0.25)
    assert target_inclusion_rate(np.zeros((0, 3)), unit_cube) == 0.0
    with pytest.raises(DataError):
        target_inclusion_rate(points, unit_cube, margin_mm=-1.0)


def test_evaluate_organ_tests_targets_against_the_prediction(unit_cube):
    prediction = box((1.0, 1.0, 1.0), center=(0.5, 0.0, 0.0))
    row = evaluate_organ("case_001", "liver", "prior", prediction, unit_cube, targets=[[3.0, 0.0, 0.0]])
    assert row.centroid_error_mm == pytest.approx(5.0)
    assert row.support_iou == pytest.approx(1.0 / 3.0)
    # 2 cm from the shifted box, 2.5 cm from the truth
    assert row.inclusion_rate == 0.0
    no_targets = evaluate_organ("case_001", "liver", "prior", prediction, unit_cube)
    assert no_targets.inclusion_rate is None


def _report(unit_cube):
    rows = []
    for i, method in enumerate(("prior", "prior", "baseline", "baseline")):
        shift = 0.1 * (i + 1)
        for organ in ("liver", "spleen"):
            prediction = box((1.0, 1.0, 1.0), center=(shift, 0.0, 0.0))
            rows.append(evaluate_organ(f"case_{i:03d}", organ, method, prediction, unit_cube, targets=[[0.0, 0.0, 0.0]]))
    return EvalReport(rows)


def test_report_aggregates_per_method_and_organ(unit_cube):
    report = _report(unit_cube)
    frame = report.to_frame()
    assert len(frame) == 8
    assert {"axis_error_x_mm", "axis_error_y_mm", "axis_error_z_mm"} <= set(frame.columns)

    aggregate = report.aggregate()
    assert aggregate.loc[("prior", "liver"), "centroid_error_mm"] == pytest.approx(1.5)
    assert aggregate.loc[("baseline", "all"), "centroid_error_mm"] == pytest.approx(3.5)
    assert report.mean("prior") == pytest.approx(1.5)
    assert report.mean("baseline", "inclusion_rate") == pytest.approx(1.0)


def test_report_files(tmp_path, unit_cube):
    json_path, csv_path = _report(unit_cube).save(tmp_path / "eval")
    doc = json.loads(json_path.read_text(encoding="utf-8"))
    assert doc["format_version"] == "1.0"
    assert len(doc["rows"]) == 8
    assert doc["aggregate"]["prior/all"]["centroid_error_mm"] == pytest.approx(1.5)
    table = pd.read_csv(csv_path)
    assert list(table["method"].unique()) == ["prior", "baseline"]


def test_empty_report():
    report = EvalReport()
    assert report.aggregate().empty
    assert report.to_doc().rows == []


def _reordered(mesh, rng):
    order = rng.permutation(len(mesh.vertices))
    inverse = np.empty_like(order)
    inverse[order] = np.arange(len(order))
    return TriMesh(mesh.vertices[order], inverse[mesh.faces])


def test_support_iou_is_symmetric_and_translation_invariant(rng):
    for _ in range(20):
        a = box(rng.uniform(0.5, 2.0, size=3), center=rng.normal(0.0, 0.5, size=3))
        b = box(rng.uniform(0.5, 2.0, size=3), center=rng.normal(0.0, 0.5, size=3))
        shift = rng.normal(0.0, 10.0, size=3)
        iou = support_iou(a, b)
        assert support_iou(b, a) == pytest.approx(iou, abs=1e-12)
        moved = support_iou(a.with_vertices(a.vertices + shift), b.with_vertices(b.vertices + shift))
        assert moved == pytest.approx(iou, abs=1e-9)


def test_metrics_ignore_vertex_order(rng):
    truth = icosphere(2, radii=(3.0, 2.0, 1.5))
    predicted = icosphere(2, center=(0.4, -0.2, 0.1), radii=(3.2, 1.9, 1.5))
    targets = rng.uniform(-3.5, 3.5, size=(20, 3))
    before = evaluate_organ("c", "liver", "prior", predicted, truth, targets)
    after = evaluate_organ("c", "liver", "prior", _reordered(predicted, rng), _reordered(truth, rng), targets)
    assert after.centroid_error_mm == pytest.approx(before.centroid_error_mm, abs=1e-9)
    np.testing.assert_allclose(after.axis_error_mm, before.axis_error_mm, atol=1e-9)
    assert after.scale_error_pct == pytest.approx(before.scale_error_pct, abs=1e-9)
    assert after.support_iou == pytest.approx(before.support_iou, abs=1e-12)
    assert after.inclusion_rate == before.inclusion_rate
