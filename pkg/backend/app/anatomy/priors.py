"""Skeleton-conditioned organ priors: joint subsets, geometric features, regressors."""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Mapping, Sequence, Tuple

import numpy as np
from sklearn.linear_model import LinearRegression, Ridge

from ..error_handlers import (
    DataError,
    DimensionMismatchError,
    MissingInputError,
    SingularFitError,
    WhitelistError,
)
from ..schemas import FeatureSpecDoc, PriorAssetDoc, parse_document
from .alignment import project_to_rotation
from .decomposition import AnatomicalFrame
from .rig import RigState

logger = logging.getLogger(__name__)

ORTHONORMAL_TOLERANCE = 1e-9


@dataclass(frozen=True)
class SkeletalFeatureSpec:
    joints: Tuple[str, ...]
    include_distances: bool = True
    include_angle: bool = True
    k_beta: int = 0

    def __post_init__(self):
        if len(self.joints) < 1:
            raise DataError("feature spec needs at least one joint")
        if self.k_beta < 0:
            raise DataError(f"k_beta must be >= 0, got {self.k_beta}")

    @property
    def uses_angle(self) -> bool:
        return self.include_angle and len(self.joints) >= 3

    @property
    def dimension(self) -> int:
        n = len(self.joints)
        dim = 3 * (n - 1)
        if self.include_distances:
            dim += n * (n - 1) // 2
        if self.uses_angle:
            dim += 1
        return dim + self.k_beta

    def to_doc(self) -> FeatureSpecDoc:
        return FeatureSpecDoc(
            joints=list(self.joints),
            include_distances=self.include_distances,
            include_angle=self.include_angle,
            k_beta=self.k_beta,
        )

    @classmethod
    def from_doc(cls, doc: FeatureSpecDoc) -> "SkeletalFeatureSpec":
        return cls(tuple(doc.joints), doc.include_distances, doc.include_angle, doc.k_beta)


def select_organ_joints(joint_positions: Mapping[str, Sequence[float]], centroid, n: int = 3) -> List[str]:
    """The ``n`` joints nearest the organ centroid, nearest first, ties by name."""
    if n < 1:
        raise DataError(f"joint count must be >= 1, got {n}")
    if len(joint_positions) < n:
        raise WhitelistError(f"need {n} whitelist joints, only {len(joint_positions)} available")
    centroid = np.asarray(centroid, dtype=np.float64)
    ranked = sorted(
        (float(np.linalg.norm(np.asarray(pos, dtype=np.float64) - centroid)), name)
        for name, pos in joint_positions.items()
    )
    return [name for _, name in ranked[:n]]


def extract_features(joints, spec: SkeletalFeatureSpec, beta=None) -> np.ndarray:
    """Offsets to the first joint, pairwise distances, the angle cosine at the first joint and beta."""
    joints = np.asarray(joints, dtype=np.float64).reshape(-1, 3)
    n = len(joints)
    if n != len(spec.joints):
        raise DimensionMismatchError(f"feature spec expects {len(spec.joints)} joints, got {n}")
    if spec.include_angle and n < 3:
        logger.warning(f"Angle feature needs 3 joints, spec has {n}; omitting it")

    parts = [(joints[1:] - joints[0]).reshape(-1)]
    if spec.include_distances:
        i, j = np.triu_indices(n, k=1)
        parts.append(np.linalg.norm(joints[i] - joints[j], axis=1))
    if spec.uses_angle:
        a = joints[1] - joints[0]
        b = joints[2] - joints[0]
        norm = np.linalg.norm(a) * np.linalg.norm(b)
        # zero-length limb: cosine defined as 0
        parts.append(np.array([a @ b / norm if norm > 0 else 0.0]))
    if spec.k_beta:
        beta = np.zeros(0) if beta is None else np.asarray(beta, dtype=np.float64).reshape(-1)
        if len(beta) < spec.k_beta:
            raise DimensionMismatchError(f"feature spec needs {spec.k_beta} shape coefficients, rig has {len(beta)}")
        parts.append(beta[: spec.k_beta])
    return np.concatenate(parts)


def rig_features(rig: RigState, frame: AnatomicalFrame, spec: SkeletalFeatureSpec) -> np.ndarray:
    """Features of the spec's joints taken from the rest rig, expressed in ``frame``."""
    local = frame.points_to_local(rig.rest_positions(list(spec.joints)))
    return extract_features(local, spec, rig.beta)


@dataclass(frozen=True)
class PriorPrediction:
    delta_c: np.ndarray
    ell: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.ell)


@dataclass(frozen=True)
class OrganPriorAsset:
    organ: str
    spec: SkeletalFeatureSpec
    W_pos: np.ndarray
    b_pos: np.ndarray
    W_scale: np.ndarray
    b_scale: np.ndarray
    sigma2_pos: np.ndarray
    sigma2_scale: np.ndarray
    Sigma_dc: np.ndarray
    R_bar: np.ndarray
    frame_id: str
    ridge_lambda: float = 0.0
    n_train: int = 0

    @property
    def feature_dim(self) -> int:
        return self.W_pos.shape[1]

    def predict(self, features) -> PriorPrediction:
        x = np.asarray(features, dtype=np.float64).reshape(-1)
        if len(x) != self.feature_dim:
            raise DimensionMismatchError(
                f"prior '{self.organ}' expects {self.feature_dim} features, got {len(x)}", stage="predict"
            )
        return PriorPrediction(self.W_pos @ x + self.b_pos, self.W_scale @ x + self.b_scale)

    def to_doc(self) -> PriorAssetDoc:
        return PriorAssetDoc(
            organ=self.organ,
            feature_spec=self.spec.to_doc(),
            feature_dim=self.feature_dim,
            W_pos=self.W_pos.tolist(),
            b_pos=self.b_pos.tolist(),
            W_scale=self.W_scale.tolist(),
            b_scale=self.b_scale.tolist(),
            sigma2_pos=self.sigma2_pos.tolist(),
            sigma2_scale=self.sigma2_scale.tolist(),
            Sigma_dc=self.Sigma_dc.tolist(),
            R_bar=self.R_bar.tolist(),
            frame_id=self.frame_id,
            ridge_lambda=self.ridge_lambda,
            n_train=self.n_train,
        )

    @classmethod
    def from_doc(cls, doc: PriorAssetDoc) -> "OrganPriorAsset":
        spec = SkeletalFeatureSpec.from_doc(doc.feature_spec)
        W_pos = np.asarray(doc.W_pos, dtype=np.float64).reshape(3, -1)
        W_scale = np.asarray(doc.W_scale, dtype=np.float64).reshape(3, -1)
        if W_pos.shape[1] != spec.dimension or W_scale.shape[1] != spec.dimension or doc.feature_dim != spec.dimension:
            raise DimensionMismatchError(f"prior '{doc.organ}': regressor width does not match its feature spec")
        R_bar = np.asarray(doc.R_bar, dtype=np.float64).reshape(3, 3)
        if not np.allclose(R_bar.T @ R_bar, np.eye(3), atol=ORTHONORMAL_TOLERANCE) or np.linalg.det(R_bar) <= 0:
            raise DataError(f"prior '{doc.organ}': mean orientation is not a proper rotation")
        return cls(
            organ=doc.organ,
            spec=spec,
            W_pos=W_pos,
            b_pos=np.asarray(doc.b_pos, dtype=np.float64),
            W_scale=W_scale,
            b_scale=np.asarray(doc.b_scale, dtype=np.float64),
            sigma2_pos=np.asarray(doc.sigma2_pos, dtype=np.float64),
            sigma2_scale=np.asarray(doc.sigma2_scale, dtype=np.float64),
            Sigma_dc=np.asarray(doc.Sigma_dc, dtype=np.float64).reshape(3, 3),
            R_bar=R_bar,
            frame_id=doc.frame_id,
            ridge_lambda=doc.ridge_lambda,
            n_train=doc.n_train,
        )


def chordal_mean(rotations) -> np.ndarray:
    """Closest proper rotation to the arithmetic mean of rotation matrices."""
    rotations = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    return project_to_rotation(rotations.mean(axis=0))


def _fit_regressor(X: np.ndarray, y: np.ndarray, ridge_lambda: float):
    if ridge_lambda > 0:
        model = Ridge(alpha=ridge_lambda, fit_intercept=True)
    else:
        centered = X - X.mean(axis=0)
        rank = np.linalg.matrix_rank(centered)
        if rank < X.shape[1]:
            raise SingularFitError(
                f"design matrix has rank {rank} < {X.shape[1]} features; "
                f"use a ridge penalty (prior.ridge_lambda > 0)",
                stage="fit-priors",
            )
        model = LinearRegression(fit_intercept=True)
    model.fit(X, y)
    return np.asarray(model.coef_, dtype=np.float64).reshape(3, -1), np.asarray(model.intercept_, dtype=np.float64).reshape(3)


def _check_training(features, delta_c, ell, rotations):
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatchError("features must be a 2D array")
    delta_c = np.asarray(delta_c, dtype=np.float64).reshape(-1, 3)
    ell = np.asarray(ell, dtype=np.float64).reshape(-1, 3)
    rotations = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    n = len(X)
    if not (len(delta_c) == len(ell) == len(rotations) == n):
        raise DimensionMismatchError("features, delta_c, ell and rotations must have one row per record")
    if n < 2:
        raise DataError(f"prior fitting needs at least 2 records, got {n}", stage="fit-priors")
    return X, delta_c, ell, rotations


def fit_priors(
    organ: str,
    spec: SkeletalFeatureSpec,
    features,
    delta_c,
    ell,
    rotations,
    ridge_lambda: float = 0.0,
    frame_id: str = "reference",
) -> OrganPriorAsset:
    """Fit placement and log-scale regressors plus their residual statistics."""
    if ridge_lambda < 0:
        raise DataError(f"ridge lambda must be >= 0, got {ridge_lambda}")
    X, delta_c, ell, rotations = _check_training(features, delta_c, ell, rotations)
    if X.shape[1] != spec.dimension:
        raise DimensionMismatchError(f"features have width {X.shape[1]}, spec expects {spec.dimension}")

    W_pos, b_pos = _fit_regressor(X, delta_c, ridge_lambda)
    W_scale, b_scale = _fit_regressor(X, ell, ridge_lambda)

    residual_pos = delta_c - (X @ W_pos.T + b_pos)
    residual_scale = ell - (X @ W_scale.T + b_scale)
    asset = OrganPriorAsset(
        organ=organ,
        spec=spec,
        W_pos=W_pos,
        b_pos=b_pos,
        W_scale=W_scale,
        b_scale=b_scale,
        sigma2_pos=np.var(residual_pos, axis=0),
        sigma2_scale=np.var(residual_scale, axis=0),
        Sigma_dc=np.cov(delta_c.T, bias=True).reshape(3, 3),
        R_bar=chordal_mean(rotations),
        frame_id=frame_id,
        ridge_lambda=float(ridge_lambda),
        n_train=len(X),
    )
    logger.info(
        f"Fitted prior for {organ} on {len(X)} records ({spec.dimension} features, lambda={ridge_lambda}): "
        f"residual RMS pos {np.sqrt(asset.sigma2_pos.sum()):.4f} cm"
    )
    return asset


def fit_baseline(
    organ: str,
    spec: SkeletalFeatureSpec,
    features,
    delta_c,
    ell,
    rotations,
    frame_id: str = "reference",
) -> OrganPriorAsset:
    """Feature-free predictor: the training mean of delta_c and ell for every subject."""
    X, delta_c, ell, rotations = _check_training(features, delta_c, ell, rotations)
    zeros = np.zeros((3, X.shape[1]))
    return OrganPriorAsset(
        organ=organ,
        spec=spec,
        W_pos=zeros,
        b_pos=delta_c.mean(axis=0),
        W_scale=zeros.copy(),
        b_scale=ell.mean(axis=0),
        sigma2_pos=np.var(delta_c, axis=0),
        sigma2_scale=np.var(ell, axis=0),
        Sigma_dc=np.cov(delta_c.T, bias=True).reshape(3, 3),
        R_bar=chordal_mean(rotations),
        frame_id=frame_id,
        n_train=len(X),
    )


def save_prior(asset: OrganPriorAsset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(asset.to_doc().model_dump_json(indent=2), encoding="utf-8")
    return path


def load_prior(path) -> OrganPriorAsset:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"prior asset not found: {path} (run 'fit-priors' first)")
    return OrganPriorAsset.from_doc(parse_document(PriorAssetDoc, json.loads(path.read_text(encoding="utf-8"))))


def spec_from_reference(
    rig: RigState,
    whitelist: Sequence[str],
    frame: AnatomicalFrame,
    organ_centroid_local,
    n_joints: int = 3,
    include_distances: bool = True,
    include_angle: bool = True,
    k_beta: int = 0,
) -> SkeletalFeatureSpec:
    """Freeze the joint subset on the reference case, measured in its local frame."""
    present = [name for name in whitelist if name in rig.names]
    local = frame.points_to_local(rig.rest_positions(present))
    joints = select_organ_joints(dict(zip(present, local)), organ_centroid_local, n_joints)
    return SkeletalFeatureSpec(tuple(joints), include_distances, include_angle, k_beta)


def design_matrix(rigs: Sequence[RigState], frames: Sequence[AnatomicalFrame], spec: SkeletalFeatureSpec) -> np.ndarray:
    rows = [rig_features(rig, frame, spec) for rig, frame in zip(rigs, frames)]
    return np.vstack(rows) if rows else np.zeros((0, spec.dimension))


def predict_many(asset: OrganPriorAsset, features) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise predictions for a feature matrix."""
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    preds = [asset.predict(x) for x in X]
    return np.array([p.delta_c for p in preds]), np.array([p.ell for p in preds])

