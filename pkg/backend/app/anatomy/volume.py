"""Label volumes and isosurface extraction.

Volumes are stored as a raw little-endian integer array plus a JSON header
``{dims, spacing_mm, affine, label_names}``. The affine maps (i, j, k) voxel
indices to world millimeters; meshes come out in centimeters.
"""
import json
import logging
from pathlib import Path
from typing import Dict, Optional

import numpy as np
from scipy import ndimage
from skimage import measure

from ..error_handlers import DataError, EmptyResultError, MissingInputError
from .mesh import TriMesh

logger = logging.getLogger(__name__)

MM_PER_CM = 10.0
MIN_TRIANGLE_AREA = 1e-12


class VoxelLabelGrid:
    def __init__(self, labels, spacing_mm=(1.0, 1.0, 1.0), affine=None, label_names: Optional[Dict[int, str]] = None):
        labels = np.asarray(labels)
        if labels.ndim != 3:
            raise DataError(f"label volume must be 3D, got shape {labels.shape}")
        spacing = np.asarray(spacing_mm, dtype=np.float64).reshape(3)
        if np.any(spacing <= 0):
            raise DataError(f"voxel spacing must be strictly positive, got {spacing.tolist()}")
        if affine is None:
            affine = np.diag([*spacing, 1.0])
        affine = np.asarray(affine, dtype=np.float64).reshape(4, 4)
        if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
            raise DataError("grid-to-world affine is not invertible")

        self.labels = labels.astype(np.int32, copy=False)
        self.spacing_mm = spacing
        self.affine = affine
        self.label_names = dict(label_names or {})

    @property
    def dims(self):
        return tuple(int(d) for d in self.labels.shape)

    def label_id(self, name: str) -> int:
        for value, label_name in self.label_names.items():
            if label_name == name:
                return int(value)
        raise EmptyResultError(f"label '{name}' is not present in the volume header")

    def index_to_world_cm(self, ijk: np.ndarray) -> np.ndarray:
        homogeneous = np.c_[ijk, np.ones(len(ijk))]
        world_mm = homogeneous @ self.affine.T
        return world_mm[:, :3] / MM_PER_CM


def save_volume(grid: VoxelLabelGrid, raw_path) -> Path:
    raw_path = Path(raw_path)
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    grid.labels.astype("<i4").tofile(raw_path)
    header = {
        "format_version": "1.0",
        "dims": list(grid.dims),
        "dtype": "<i4",
        "spacing_mm": grid.spacing_mm.tolist(),
        "affine": grid.affine.reshape(-1).tolist(),
        "label_names": {str(k): v for k, v in sorted(grid.label_names.items())},
    }
    raw_path.with_suffix(".json").write_text(json.dumps(header, indent=2), encoding="utf-8")
    return raw_path


def load_volume(raw_path) -> VoxelLabelGrid:
    raw_path = Path(raw_path)
    header_path = raw_path.with_suffix(".json")
    if not raw_path.exists() or not header_path.exists():
        raise MissingInputError(f"label volume or header missing: {raw_path}")
    header = json.loads(header_path.read_text(encoding="utf-8"))
    dims = tuple(int(d) for d in header["dims"])
    data = np.fromfile(raw_path, dtype=np.dtype(header.get("dtype", "<i4")))
    if data.size != int(np.prod(dims)):
        raise DataError(f"label volume has {data.size} voxels, header declares {dims}")
    # the raw layout is C-order over (i, j, k)
    labels = data.reshape(dims)
    affine = np.asarray(header["affine"], dtype=np.float64).reshape(4, 4)
    names = {int(k): v for k, v in header.get("label_names", {}).items()}
    return VoxelLabelGrid(labels, header["spacing_mm"], affine, names)


def marching_cubes(
    grid: VoxelLabelGrid,
    label: int,
    iso: float = 0.5,
    sigma: float = 1.0,
    step: int = 1,
    min_voxels: int = 5000,
) -> TriMesh:
    """Smoothed isosurface of one label, in world centimeters.

    Connected components smaller than ``min_voxels`` are discarded; all
    remaining components are kept.
    """
    if step < 1:
        raise DataError(f"marching cubes step must be >= 1, got {step}")
    mask = grid.labels == label
    if not mask.any():
        raise EmptyResultError(f"label {label} is absent from the volume")

    components, count = ndimage.label(mask)
    sizes = ndimage.sum_labels(mask, components, index=np.arange(1, count + 1))
    keep_ids = np.flatnonzero(sizes >= min_voxels) + 1
    if keep_ids.size == 0:
        raise EmptyResultError(
            f"label {label}: all {count} components are below min_voxels={min_voxels}"
        )
    mask = np.isin(components, keep_ids)
    logger.info(f"Label {label}: kept {keep_ids.size}/{count} components ({int(mask.sum())} voxels)")

    # pad so the smoothed field closes at the volume border
    pad = int(np.ceil(4.0 * sigma)) + 2
    field = np.pad(mask.astype(np.float32), pad)
    if sigma > 0:
        field = ndimage.gaussian_filter(field, sigma=sigma)
    if field.max() <= iso:
        raise EmptyResultError(f"label {label}: smoothed field never reaches iso level {iso}")

    verts, faces, _, _ = measure.marching_cubes(field, level=iso, step_size=step, allow_degenerate=False)
    verts = verts.astype(np.float64) - pad
    world = grid.index_to_world_cm(verts)

    # skimage orients faces toward decreasing values in index space; flip when the affine mirrors
    faces = faces.astype(np.int64)
    if np.linalg.det(grid.affine[:3, :3]) < 0:
        faces = faces[:, ::-1]
    mesh = TriMesh(world, faces)

    keep = mesh.face_areas > MIN_TRIANGLE_AREA
    if not np.all(keep):
        mesh = TriMesh(mesh.vertices, mesh.faces[keep])

    bad_edges = mesh.non_manifold_edge_count()
    if bad_edges:
        logger.warning(f"Label {label}: surface has {bad_edges} non-manifold or boundary edges")
    return mesh
