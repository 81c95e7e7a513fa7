"""Fixed-topology template registration in canonical space.

The deformed template is ``V = T + offsets + translation``. The energy is a
Chamfer data term on area-weighted surface samples plus edge-length, normal
consistency and Laplacian regularizers, minimized by gradient descent with
backtracking in three stages: translation only, joint, then joint with
strengthened regularizers.
"""
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from ..config import RegistrationConfig
from ..error_handlers import CountMismatchError, DivergenceError, EmptyResultError
from .mesh import TriMesh, sample_surface
from .rig import uniform_laplacian

logger = logging.getLogger(__name__)

STAGE_NAMES = ("translation", "joint", "refine")


@dataclass
class DeformationState:
    offsets: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def zeros(cls, n_vertices: int) -> "DeformationState":
        return cls(np.zeros((n_vertices, 3)), np.zeros(3))

    def deformed(self, template_vertices: np.ndarray) -> np.ndarray:
        return template_vertices + self.offsets + self.translation


def _scatter_matrix(rows: np.ndarray, cols: np.ndarray, values: np.ndarray, shape: Tuple[int, int]) -> sparse.csr_matrix:
    """``M @ x`` adds ``values * x[cols]`` into ``rows``; duplicate entries are summed."""
    return sparse.coo_matrix((values, (rows, cols)), shape=shape).tocsr()


def _nearest_pairs(x: np.ndarray, y: np.ndarray, target_tree: Optional[cKDTree]):
    tree = target_tree if target_tree is not None else cKDTree(y)
    d_xy, nn_xy = tree.query(x)
    d_yx, nn_yx = cKDTree(x).query(y)
    return d_xy, nn_xy, d_yx, nn_yx


def chamfer_energy(deformed_samples, target_samples, target_tree: Optional[cKDTree] = None) -> float:
    """Symmetric sum of mean squared nearest-neighbour distances."""
    x = np.asarray(deformed_samples, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(target_samples, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0 or len(y) == 0:
        raise EmptyResultError("chamfer_energy needs non-empty point sets")
    d_xy, _, d_yx, _ = _nearest_pairs(x, y, target_tree)
    return float(np.mean(d_xy**2) + np.mean(d_yx**2))


def chamfer_gradient(deformed_samples, target_samples, target_tree: Optional[cKDTree] = None) -> Tuple[float, np.ndarray]:
    """Chamfer energy and its gradient with respect to the deformed samples."""
    x = np.asarray(deformed_samples, dtype=np.float64)
    y = np.asarray(target_samples, dtype=np.float64)
    d_xy, nn_xy, d_yx, nn_yx = _nearest_pairs(x, y, target_tree)

    grad = 2.0 / len(x) * (x - y[nn_xy])
    pull = 2.0 / len(y) * (x[nn_yx] - y)
    for k in range(3):
        grad[:, k] += np.bincount(nn_yx, weights=pull[:, k], minlength=len(x))
    return float(np.mean(d_xy**2) + np.mean(d_yx**2)), grad


class TemplateTopology:
    """Connectivity-derived quantities of a template, fixed for a whole registration.

    Each term returns ``(energy, gradient)``; the gradient is ``None`` when
    ``with_grad`` is false.
    """

    def __init__(self, template: TriMesh):
        self.template = template
        self.faces = template.faces
        self.edges = template.edges
        rest = template.vertices
        self.rest_lengths = np.linalg.norm(rest[self.edges[:, 0]] - rest[self.edges[:, 1]], axis=1)

    @property
    def n_vertices(self) -> int:
        return len(self.template.vertices)

    @cached_property
    def face_pairs(self) -> np.ndarray:
        """Pairs of faces sharing an interior (two-face) edge."""
        f = self.faces
        n_faces = len(f)
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        owners = np.tile(np.arange(n_faces), 3)
        keys = np.sort(directed, axis=1)
        order = np.lexsort((keys[:, 1], keys[:, 0]))
        keys, owners = keys[order], owners[order]
        same = np.all(keys[1:] == keys[:-1], axis=1)
        # edges shared by more than two faces are non-manifold and contribute no pair
        first = np.flatnonzero(same)
        before = np.r_[False, same[:-1]]
        after = np.r_[same[1:], False]
        interior = first[~before[first] & ~after[first]]
        return np.stack([owners[interior], owners[interior + 1]], axis=1).reshape(-1, 2)

    @cached_property
    def laplacian(self):
        return uniform_laplacian(self.n_vertices, self.edges)

    @cached_property
    def edge_incidence(self) -> sparse.csr_matrix:
        """(V, E): +1 at each edge's first vertex, -1 at its second."""
        n_edges = len(self.edges)
        cols = np.tile(np.arange(n_edges), 2)
        values = np.r_[np.ones(n_edges), -np.ones(n_edges)]
        return _scatter_matrix(self.edges.T.ravel(), cols, values, (self.n_vertices, n_edges))

    @cached_property
    def corner_scatter(self) -> Tuple[sparse.csr_matrix, ...]:
        """Three (V, F) matrices moving per-face values onto each face corner."""
        n_faces = len(self.faces)
        cols = np.arange(n_faces)
        ones = np.ones(n_faces)
        return tuple(_scatter_matrix(self.faces[:, k], cols, ones, (self.n_vertices, n_faces)) for k in range(3))

    @cached_property
    def pair_scatter(self) -> Tuple[sparse.csr_matrix, sparse.csr_matrix]:
        """(F, P) matrices moving per-pair values onto the first and second face."""
        pairs = self.face_pairs
        cols = np.arange(len(pairs))
        ones = np.ones(len(pairs))
        shape = (len(self.faces), len(pairs))
        return _scatter_matrix(pairs[:, 0], cols, ones, shape), _scatter_matrix(pairs[:, 1], cols, ones, shape)

    def edge_term(self, vertices: np.ndarray, with_grad: bool = True) -> Tuple[float, Optional[np.ndarray]]:
        if len(self.edges) == 0:
            return 0.0, (np.zeros_like(vertices) if with_grad else None)
        d = vertices[self.edges[:, 0]] - vertices[self.edges[:, 1]]
        length = np.linalg.norm(d, axis=1)
        diff = length - self.rest_lengths
        energy = float(np.mean(diff**2))
        if not with_grad:
            return energy, None
        unit = np.divide(d, length[:, None], out=np.zeros_like(d), where=length[:, None] > 0)
        g = (2.0 / len(self.edges)) * diff[:, None] * unit
        return energy, np.asarray(self.edge_incidence @ g)

    def normal_term(self, vertices: np.ndarray, with_grad: bool = True) -> Tuple[float, Optional[np.ndarray]]:
        pairs = self.face_pairs
        if len(pairs) == 0:
            return 0.0, (np.zeros_like(vertices) if with_grad else None)
        tri = vertices[self.faces]
        e1 = tri[:, 1] - tri[:, 0]
        e2 = tri[:, 2] - tri[:, 0]
        cross = np.cross(e1, e2)
        norm = np.linalg.norm(cross, axis=1)
        safe = np.where(norm > 0, norm, 1.0)
        normals = cross / safe[:, None]

        a, b = pairs[:, 0], pairs[:, 1]
        cos = np.einsum("ij,ij->i", normals[a], normals[b])
        energy = float(np.mean(1.0 - cos))
        if not with_grad:
            return energy, None

        # d(1 - na.nb)/d(cross_a) = -(I - na na^T) nb / |cross_a|
        scale = -1.0 / len(pairs)
        n_a, n_b = normals[a], normals[b]
        proj_a = (n_b - cos[:, None] * n_a) * (scale / safe[a])[:, None]
        proj_b = (n_a - cos[:, None] * n_b) * (scale / safe[b])[:, None]
        to_a, to_b = self.pair_scatter
        g_cross = to_a @ proj_a + to_b @ proj_b

        g_e1 = np.cross(e2, g_cross)
        g_e2 = np.cross(g_cross, e1)
        c0, c1, c2 = self.corner_scatter
        return energy, np.asarray(c1 @ g_e1 + c2 @ g_e2 - c0 @ (g_e1 + g_e2))

    def laplacian_term(self, offsets: np.ndarray, with_grad: bool = True) -> Tuple[float, Optional[np.ndarray]]:
        L = self.laplacian
        lap = L @ offsets
        n = len(offsets)
        energy = float(np.sum(lap**2) / n)
        if not with_grad:
            return energy, None
        return energy, np.asarray((2.0 / n) * (L.T @ lap))


def regularizer_energies(template: TriMesh, deformed_vertices) -> Tuple[float, float, float]:
    """(E_edge, E_normal, E_lap) of a deformed template against its rest shape."""
    deformed_vertices = np.asarray(deformed_vertices, dtype=np.float64)
    if deformed_vertices.shape != template.vertices.shape:
        raise CountMismatchError(
            f"deformed vertex count {len(deformed_vertices)} != template vertex count {len(template.vertices)}"
        )
    topology = TemplateTopology(template)
    e_edge, _ = topology.edge_term(deformed_vertices, with_grad=False)
    e_normal, _ = topology.normal_term(deformed_vertices, with_grad=False)
    e_lap, _ = topology.laplacian_term(deformed_vertices - template.vertices, with_grad=False)
    return e_edge, e_normal, e_lap


@dataclass
class RegistrationResult:
    registered: TriMesh
    state: DeformationState
    diagnostics: Dict


class _StageObjective:
    """Total energy of one stage, with samples fixed for the whole stage.

    Template samples are a fixed barycentric combination of the vertices, so
    ``samples = B @ V`` and the vertex gradient is ``B.T @ g_samples``.
    """

    def __init__(self, topology: TemplateTopology, target: TriMesh, weights: Dict[str, float], samples: int, seed: int):
        template = topology.template
        self.topology = topology
        self.weights = weights
        face_idx, bary = sample_surface(template, samples, seed)
        rows = np.repeat(np.arange(samples), 3)
        self.sample_matrix = _scatter_matrix(rows, template.faces[face_idx].ravel(), bary.ravel(),
                                             (samples, topology.n_vertices))
        self.sample_matrix_t = self.sample_matrix.T.tocsr()
        target_faces, target_bary = sample_surface(target, samples, seed)
        target_rows = target.faces[target_faces].ravel()
        target_matrix = _scatter_matrix(rows, target_rows, target_bary.ravel(), (samples, len(target.vertices)))
        self.target_samples = np.asarray(target_matrix @ target.vertices)
        self.target_tree = cKDTree(self.target_samples)

    def samples(self, vertices: np.ndarray) -> np.ndarray:
        return np.asarray(self.sample_matrix @ vertices)

    def evaluate(self, state: DeformationState, with_grad: bool = True, offsets_free: bool = True):
        """Total energy and terms; with ``with_grad`` also (g_translation, g_offsets).

        With ``offsets_free`` false only the translation gradient is needed, and
        the regularizers, being translation invariant, add nothing to it.
        """
        vertices = state.deformed(self.topology.template.vertices)
        samples = self.samples(vertices)
        reg_grad = with_grad and offsets_free

        terms = {}
        if with_grad:
            terms["data"], g_samples = chamfer_gradient(samples, self.target_samples, self.target_tree)
            g_vertices = self.weights["data"] * np.asarray(self.sample_matrix_t @ g_samples)
        else:
            terms["data"] = chamfer_energy(samples, self.target_samples, self.target_tree)

        g_translation = g_vertices.sum(axis=0) if with_grad else None
        for name, term in (("edge", self.topology.edge_term), ("normal", self.topology.normal_term)):
            terms[name] = 0.0
            if self.weights[name] > 0:
                terms[name], grad = term(vertices, with_grad=reg_grad)
                if reg_grad:
                    g_vertices += self.weights[name] * grad

        terms["lap"] = 0.0
        if self.weights["lap"] > 0:
            terms["lap"], grad = self.topology.laplacian_term(state.offsets, with_grad=reg_grad)
            if reg_grad:
                g_vertices += self.weights["lap"] * grad

        total = sum(self.weights[k] * v for k, v in terms.items())
        if not with_grad:
            return total, terms
        return total, terms, g_translation, (g_vertices if offsets_free else None)




def _run_stage(
    objective: _StageObjective,
    state: DeformationState,
    stage_index: int,
    iterations: int,
    optimize_offsets: bool,
    config: RegistrationConfig,
) -> Tuple[DeformationState, Dict]:
    n_vertices = len(state.offsets)
    base = 1.0
    scale = base
    total, terms, g_t, g_v = objective.evaluate(state, offsets_free=optimize_offsets)
    if not np.isfinite(total):
        raise DivergenceError(f"non-finite energy at the start of stage {stage_index + 1}", stage_index, stage="register")

    history = [total]
    start_total = total
    accepted = 0
    for _ in range(iterations):
        accepted_step = False
        for _ in range(config.max_halvings + 1):
            trial = DeformationState(
                state.offsets - (scale * config.offset_step * n_vertices * g_v if optimize_offsets else 0.0),
                state.translation - scale * config.translation_step * g_t,
            )
            trial_total, _ = objective.evaluate(trial, with_grad=False)
            if np.isfinite(trial_total) and trial_total <= total:
                accepted_step = True
                break
            scale *= 0.5
        if not accepted_step:
            if not np.isfinite(trial_total):
                raise DivergenceError(
                    f"energy became non-finite in stage {stage_index + 1} after {config.max_halvings} halvings",
                    stage_index,
                    stage="register",
                )
            break

        improvement = total - trial_total
        state = trial
        total, terms, g_t, g_v = objective.evaluate(state, offsets_free=optimize_offsets)
        history.append(total)
        accepted += 1
        scale = min(base, scale * 2.0)
        if improvement <= config.tolerance * max(1.0, abs(total)):
            break

    record = {
        "stage": stage_index + 1,
        "name": STAGE_NAMES[stage_index],
        "iterations": accepted,
        "energy_start": start_total,
        "energy_final": total,
        "terms": terms,
        "weights": objective.weights,
        "energy_history": history,
    }
    logger.info(
        f"Registration stage {stage_index + 1} ({STAGE_NAMES[stage_index]}): "
        f"{accepted} steps, energy {start_total:.6g} -> {total:.6g}"
    )
    return state, record


def register_template(template: TriMesh, target: TriMesh, config: Optional[RegistrationConfig] = None) -> RegistrationResult:
    """Deform ``template`` onto ``target``; the result keeps the template's face list."""
    config = config or RegistrationConfig()
    config.validate_ranges()
    if template.is_empty or target.is_empty:
        raise EmptyResultError("registration needs non-empty template and target meshes", stage="register")
    if len(template.faces) > config.max_template_faces:
        logger.warning(
            f"Template has {len(template.faces)} faces, above the recommended {config.max_template_faces}"
        )

    topology = TemplateTopology(template)
    state = DeformationState.zeros(len(template.vertices))
    records: List[Dict] = []
    for stage_index, iterations in enumerate(config.stage_iterations):
        gain = config.stage3_regularizer_gain if stage_index == 2 else 1.0
        weights = {
            "data": config.lambda_data,
            "edge": config.lambda_edge * gain,
            "normal": config.lambda_normal,
            "lap": config.lambda_lap * gain,
        }
        objective = _StageObjective(topology, target, weights, config.samples, config.seed + stage_index)
        state, record = _run_stage(objective, state, stage_index, iterations, stage_index > 0, config)
        record["seed"] = config.seed + stage_index
        records.append(record)

    vertices = state.deformed(template.vertices)
    registered = TriMesh(vertices, template.faces, validate=False)

    final = records[-1]
    samples = objective.samples(vertices)
    distances, _ = objective.target_tree.query(samples)
    diagnostics = {
        "seed": config.seed,
        "stages": records,
        "final_energies": final["terms"],
        "final_total": final["energy_final"],
        "iterations": [r["iterations"] for r in records],
        "rmse_to_target": float(np.sqrt(np.mean(distances**2))),
        "translation": state.translation.tolist(),
        "offset_rms": float(np.sqrt(np.mean(np.sum(state.offsets**2, axis=1)))),
    }
    return RegistrationResult(registered, state, diagnostics)


def write_diagnostics(diagnostics: Dict, path) -> Path:
    """One JSON line per stage."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for record in diagnostics["stages"]:
        line = dict(record)
        line["rmse_to_target"] = diagnostics["rmse_to_target"]
        lines.append(json.dumps(line, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
