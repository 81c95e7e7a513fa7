from dataclasses import dataclass

import numpy as np
from scipy.linalg import svd

from ..error_handlers import CountMismatchError, DegenerateAlignmentError

RANK_TOLERANCE = 1e-10


@dataclass(frozen=True)
class RigidAlignment:
    rotation: np.ndarray
    translation: np.ndarray
    rmse: float

    def apply(self, points) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation


def kabsch_align(source, target) -> RigidAlignment:
    """Least-squares rigid map with ``source @ R.T + t ~= target`` and det(R) = +1."""
    P = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    Q = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if P.shape != Q.shape:
        raise CountMismatchError(f"kabsch_align needs equal point counts, got {len(P)} and {len(Q)}")
    if len(P) < 3:
        raise DegenerateAlignmentError(f"kabsch_align needs at least 3 points, got {len(P)}")

    p_bar = P.mean(axis=0)
    q_bar = Q.mean(axis=0)
    Pc = P - p_bar
    Qc = Q - q_bar

    spread = svd(Pc, compute_uv=False)
    if spread[0] <= 0 or spread[1] <= RANK_TOLERANCE * spread[0]:
        raise DegenerateAlignmentError("source points are collinear or coincident; rotation is undetermined")

    H = Pc.T @ Qc
    U, _, Vt = svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = q_bar - p_bar @ R.T

    residual = P @ R.T + t - Q
    rmse = float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))
    return RigidAlignment(rotation=R, translation=t, rmse=rmse)


def project_to_rotation(matrix) -> np.ndarray:
    """Closest proper rotation in the Frobenius sense."""
    U, _, Vt = svd(np.asarray(matrix, dtype=np.float64))
    d = np.sign(np.linalg.det(U @ Vt))
    if d == 0:
        d = 1.0
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def geodesic_angle(r1, r2) -> float:
    """Rotation angle of ``r1^T r2`` in radians."""
    cos = (np.trace(np.asarray(r1).T @ np.asarray(r2)) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))
