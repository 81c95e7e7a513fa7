import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..error_handlers import NonPositiveScaleError, OrganMismatchError, UnknownLandmarkError
from ..schemas import InstantiatedSidecarDoc, UncertaintyDoc
from .decomposition import AnatomicalFrame, ReferenceTemplateAsset, to_world
from .mesh import TriMesh, save_obj
from .priors import OrganPriorAsset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InstantiatedOrgan:
    organ: str
    local_mesh: TriMesh
    world_mesh: TriMesh
    delta_c: np.ndarray
    ell: np.ndarray
    scale: np.ndarray
    sigma2_pos: np.ndarray
    sigma2_scale: np.ndarray
    Sigma_dc: np.ndarray
    frame_id: str
    landmarks: dict

    def landmark_points(self, name: str) -> np.ndarray:
        if name not in self.landmarks:
            raise UnknownLandmarkError(
                f"landmark '{name}' is not defined for {self.organ} (known: {sorted(self.landmarks)})"
            )
        return self.world_mesh.vertices[self.landmarks[name]]


def instantiate_local(template: ReferenceTemplateAsset, delta_c, ell, R_bar) -> TriMesh:
    """Center, scale per axis, rotate, re-center and displace the template."""
    scale = np.exp(np.asarray(ell, dtype=np.float64))
    if np.any(~np.isfinite(scale)) or np.any(scale <= 0):
        raise NonPositiveScaleError(f"predicted scale must be positive and finite, got {scale.tolist()}")
    c_bar = template.centroid
    V = ((template.mesh.vertices - c_bar) * scale) @ np.asarray(R_bar).T + c_bar + np.asarray(delta_c)
    return template.mesh.with_vertices(V)


def instantiate_organ(
    template: ReferenceTemplateAsset,
    asset: OrganPriorAsset,
    features,
    frame: AnatomicalFrame,
) -> InstantiatedOrgan:
    """Predict, place in the subject's local frame and map to world."""
    if template.organ != asset.organ:
        raise OrganMismatchError(f"template is '{template.organ}' but prior is '{asset.organ}'", stage="instantiate")
    prediction = asset.predict(features)
    local = instantiate_local(template, prediction.delta_c, prediction.ell, asset.R_bar)
    return InstantiatedOrgan(
        organ=asset.organ,
        local_mesh=local,
        world_mesh=to_world(local, frame),
        delta_c=prediction.delta_c,
        ell=prediction.ell,
        scale=prediction.scale,
        sigma2_pos=asset.sigma2_pos,
        sigma2_scale=asset.sigma2_scale,
        Sigma_dc=asset.Sigma_dc,
        frame_id=frame.frame_id,
        landmarks=dict(template.landmarks),
    )


def export_instantiated(organ: InstantiatedOrgan, obj_path) -> Path:
    """World mesh as OBJ plus a JSON sidecar with the prediction and its uncertainty."""
    obj_path = save_obj(organ.world_mesh, obj_path)
    sidecar = InstantiatedSidecarDoc(
        organ=organ.organ,
        delta_c=organ.delta_c.tolist(),
        ell=organ.ell.tolist(),
        scale=organ.scale.tolist(),
        frame_id=organ.frame_id,
        uncertainty=UncertaintyDoc(
            sigma2_pos=organ.sigma2_pos.tolist(),
            sigma2_scale=organ.sigma2_scale.tolist(),
            Sigma_dc=organ.Sigma_dc.tolist(),
        ),
    )
    obj_path.with_suffix(".json").write_text(sidecar.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Exported instantiated {organ.organ} to {obj_path}")
    return obj_path
