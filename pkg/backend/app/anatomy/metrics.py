"""Localization metrics and the evaluation report."""
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from ..error_handlers import DataError, EmptyResultError
from ..schemas import EvalReportDoc, OrganEvalDoc
from .mesh import TriMesh
from .raycast import contains, point_mesh_distances

logger = logging.getLogger(__name__)

MM_PER_CM = 10.0


def _require(mesh: TriMesh, role: str) -> None:
    if len(mesh.vertices) == 0:
        raise EmptyResultError(f"{role} mesh is empty")


def centroid_error(predicted: TriMesh, truth: TriMesh) -> Tuple[float, np.ndarray]:
    """Euclidean and per-axis absolute centroid differences, in millimeters."""
    _require(predicted, "predicted")
    _require(truth, "truth")
    diff = (predicted.centroid - truth.centroid) * MM_PER_CM
    return float(np.linalg.norm(diff)), np.abs(diff)


def scale_error(predicted: TriMesh, truth: TriMesh) -> float:
    """Mean relative error of bounding-box extents, in percent."""
    pred_extent = np.ptp(predicted.vertices, axis=0)
    true_extent = np.ptp(truth.vertices, axis=0)
    if np.any(true_extent <= 0):
        raise DataError(f"truth bounding box has a zero extent: {true_extent.tolist()}")
    return float(np.mean(np.abs(pred_extent - true_extent) / true_extent) * 100.0)


def support_iou(predicted: TriMesh, truth: TriMesh) -> float:
    """IoU of the axis-aligned bounding boxes."""
    a_min, a_max = predicted.bounds
    b_min, b_max = truth.bounds
    overlap = np.clip(np.minimum(a_max, b_max) - np.maximum(a_min, b_min), 0.0, None)
    intersection = float(np.prod(overlap))
    union = float(np.prod(a_max - a_min) + np.prod(b_max - b_min) - intersection)
    if union <= 0:
        return 1.0 if np.allclose(a_min, b_min) and np.allclose(a_max, b_max) else 0.0
    return intersection / union


def target_inclusion_rate(points, mesh: TriMesh, margin_mm: float = 10.0) -> float:
    """Fraction of points inside the mesh or within ``margin_mm`` of its surface."""
    if margin_mm < 0:
        raise DataError(f"inclusion margin must be >= 0, got {margin_mm}")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(points) == 0:
        return 0.0
    inside = contains(points, mesh)
    margin_cm = margin_mm / MM_PER_CM
    hits = inside | (point_mesh_distances(points, mesh) <= margin_cm)
    return float(np.mean(hits))


@dataclass
class OrganEvaluation:
    case_id: str
    organ: str
    method: str
    centroid_error_mm: float
    axis_error_mm: List[float]
    scale_error_pct: float
    support_iou: float
    inclusion_rate: Optional[float] = None


def evaluate_organ(
    case_id: str,
    organ: str,
    method: str,
    predicted: TriMesh,
    truth: TriMesh,
    targets=None,
    margin_mm: float = 10.0,
) -> OrganEvaluation:
    """Metrics of one predicted organ; ``targets`` are true target points tested against the prediction."""
    euclidean, per_axis = centroid_error(predicted, truth)
    inclusion = None
    if targets is not None and len(targets):
        inclusion = target_inclusion_rate(targets, predicted, margin_mm)
    return OrganEvaluation(
        case_id=case_id,
        organ=organ,
        method=method,
        centroid_error_mm=euclidean,
        axis_error_mm=per_axis.tolist(),
        scale_error_pct=scale_error(predicted, truth),
        support_iou=support_iou(predicted, truth),
        inclusion_rate=inclusion,
    )


@dataclass
class EvalReport:
    rows: List[OrganEvaluation] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        records = []
        for row in self.rows:
            record = asdict(row)
            ex, ey, ez = record.pop("axis_error_mm")
            record.update(axis_error_x_mm=ex, axis_error_y_mm=ey, axis_error_z_mm=ez)
            records.append(record)
        columns = [
            "case_id", "organ", "method", "centroid_error_mm", "axis_error_x_mm", "axis_error_y_mm",
            "axis_error_z_mm", "scale_error_pct", "support_iou", "inclusion_rate",
        ]
        return pd.DataFrame.from_records(records, columns=columns)

    def aggregate(self) -> pd.DataFrame:
        """Mean of every metric per (method, organ) and per method over all organs."""
        frame = self.to_frame()
        if frame.empty:
            return frame
        metrics = frame.drop(columns=["case_id"])
        per_organ = metrics.groupby(["method", "organ"], sort=True).mean(numeric_only=True)
        overall = metrics.drop(columns=["organ"]).groupby("method", sort=True).mean(numeric_only=True)
        overall.index = pd.MultiIndex.from_tuples([(m, "all") for m in overall.index], names=["method", "organ"])
        return pd.concat([per_organ, overall])

    def mean(self, method: str, metric: str = "centroid_error_mm") -> float:
        frame = self.to_frame()
        return float(frame.loc[frame["method"] == method, metric].mean())

    def to_doc(self) -> EvalReportDoc:
        aggregate = {}
        for (method, organ), values in self.aggregate().iterrows():
            aggregate[f"{method}/{organ}"] = {k: float(v) for k, v in values.items() if pd.notna(v)}
        return EvalReportDoc(rows=[OrganEvalDoc(**asdict(r)) for r in self.rows], aggregate=aggregate)

    def save(self, directory) -> Tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        json_path = directory / "report.json"
        csv_path = directory / "report.csv"
        json_path.write_text(self.to_doc().model_dump_json(indent=2), encoding="utf-8")
        self.to_frame().to_csv(csv_path, index=False, float_format="%.6f")
        logger.info(f"Wrote evaluation report ({len(self.rows)} rows) to {directory}")
        return json_path, csv_path
