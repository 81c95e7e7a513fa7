"""Synthetic cohorts with a known linear placement law.

Every case has an axis-aligned trunk rig, an ellipsoidal torso skin, a
box skeleton and ellipsoidal organs sharing the template connectivity. Organ
placement and log scale follow ``W (x - x_nominal) + noise`` where ``x`` are
the skeletal features of the frozen joint subset. The first case is the
nominal, noise-free subject and serves as the reference case.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from ..config import PipelineConfig, settings
from ..error_handlers import DataError
from ..schemas import CaseTruthDoc, CohortDoc, OrganTruthDoc
from .decomposition import (
    AnatomicalFrame,
    ReferenceTemplateAsset,
    build_anatomical_frame,
    save_template,
    to_world,
)
from .instantiation import instantiate_local
from .mesh import AffineTransform, TriMesh, box, concatenate, icosphere, save_obj
from .priors import SkeletalFeatureSpec, rig_features, spec_from_reference
from .rig import Joint, RigState, save_rig

logger = logging.getLogger(__name__)

SKIN_SUBDIVISIONS = 4
ORGAN_SUBDIVISIONS = 3
LANDMARK_SIZE = 4

# parent index of each joint, in rig order
JOINT_PARENTS: Dict[str, Optional[str]] = {
    "root": None,
    "l_hip": "root",
    "r_hip": "root",
    "spine_01": "root",
    "spine_02": "spine_01",
    "spine_03": "spine_02",
    "neck_01": "spine_03",
    "l_shoulder": "spine_03",
    "r_shoulder": "spine_03",
}

# nominal centroid and radii in the anatomical frame, cm
ORGAN_SHAPES: Dict[str, Tuple[Tuple[float, float, float], Tuple[float, float, float]]] = {
    "liver": ((5.0, 14.0, 3.0), (7.0, 5.0, 5.0)),
    "right_kidney": ((5.0, 8.0, -4.0), (2.5, 5.0, 2.5)),
    "left_kidney": ((-5.0, 9.0, -4.0), (2.5, 5.0, 2.5)),
    "spleen": ((-8.0, 14.0, -1.0), (3.0, 5.0, 3.5)),
}

# landmark name -> direction whose extreme template vertices define it
ORGAN_LANDMARKS: Dict[str, Dict[str, Tuple[float, float, float]]] = {
    "liver": {"dome": (0, 1, 0), "porta_hepatis": (-1, -1, 0), "gallbladder_fossa": (0, -1, 1)},
    "right_kidney": {"upper_pole": (0, 1, 0), "lower_pole": (0, -1, 0), "renal_hilum": (-1, 0, 0)},
    "left_kidney": {"upper_pole": (0, 1, 0), "lower_pole": (0, -1, 0), "renal_hilum": (1, 0, 0)},
    "spleen": {"upper_pole": (0, 1, 0), "lower_pole": (0, -1, 0), "hilum": (1, 0, 0)},
}


@dataclass
class PhantomConfig:
    n_cases: int = 40
    seed: int = 0
    noise_dc: float = 0.5
    noise_ell: float = 0.02
    organs: Tuple[str, ...] = tuple(ORGAN_SHAPES)
    segment_range: Tuple[float, float] = (8.0, 12.0)
    pelvis_range: Tuple[float, float] = (10.0, 14.0)
    hip_drop_range: Tuple[float, float] = (4.0, 6.0)
    neck_range: Tuple[float, float] = (6.0, 10.0)
    shoulder_range: Tuple[float, float] = (26.0, 34.0)
    lateral_jitter: float = 0.5
    law_pos_scale: float = 0.5
    law_scale_scale: float = 0.02
    pose_jitter_deg: float = 0.0
    n_test: int = 10
    whitelist: Tuple[str, ...] = tuple(settings.TRUNK_WHITELIST)
    n_joints: int = 3
    include_distances: bool = True
    include_angle: bool = True

    def __post_init__(self):
        if self.n_cases < 2:
            raise DataError(f"phantom cohort needs at least 2 cases, got {self.n_cases}")
        if self.noise_dc < 0 or self.noise_ell < 0:
            raise DataError("phantom noise standard deviations must be >= 0")
        if not 0 <= self.n_test < self.n_cases:
            raise DataError(f"test split of {self.n_test} does not fit a cohort of {self.n_cases}")
        unknown = [o for o in self.organs if o not in ORGAN_SHAPES]
        if unknown:
            raise DataError(f"phantom has no shape for organs {unknown}")

    @classmethod
    def from_pipeline(cls, config: PipelineConfig, **overrides) -> "PhantomConfig":
        values = dict(
            n_cases=config.phantom.n,
            seed=config.seed,
            noise_dc=config.phantom.noise_dc,
            noise_ell=config.phantom.noise_ell,
            n_test=config.phantom.n_test,
            whitelist=tuple(config.canonicalization.whitelist),
            n_joints=config.prior.n_joints,
            include_distances=config.prior.include_distances,
            include_angle=config.prior.include_angle,
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass(frozen=True)
class PlacementLaw:
    organ: str
    spec: SkeletalFeatureSpec
    x_nominal: np.ndarray
    W_pos: np.ndarray
    W_scale: np.ndarray

    def evaluate(self, features) -> Tuple[np.ndarray, np.ndarray]:
        dx = np.asarray(features, dtype=np.float64) - self.x_nominal
        return self.W_pos @ dx, self.W_scale @ dx


@dataclass
class PhantomCase:
    case_id: str
    rig: RigState
    frame: AnatomicalFrame
    skin: TriMesh
    skeleton: TriMesh
    organs: Dict[str, TriMesh]
    truth: Dict[str, Dict[str, np.ndarray]]
    features: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class PhantomCohort:
    config: PhantomConfig
    cases: List[PhantomCase]
    templates: Dict[str, ReferenceTemplateAsset]
    laws: Dict[str, PlacementLaw]

    @property
    def reference_case(self) -> str:
        return self.cases[0].case_id

    @property
    def train_ids(self) -> List[str]:
        return [c.case_id for c in self.cases[: len(self.cases) - self.config.n_test]]

    @property
    def test_ids(self) -> List[str]:
        return [c.case_id for c in self.cases[len(self.cases) - self.config.n_test:]]


def build_rig(positions: Dict[str, np.ndarray], pose: Optional[AffineTransform] = None) -> RigState:
    """Rig with identity joint orientations; the posed rig is the rest rig moved by ``pose``."""
    names = list(JOINT_PARENTS)
    joints = []
    for name in names:
        parent = JOINT_PARENTS[name]
        rest = AffineTransform(np.eye(3), positions[name])
        posed = rest if pose is None else rest.then(pose)
        joints.append(Joint(name, None if parent is None else names.index(parent), rest, posed))
    return RigState(joints)


def _skeleton_positions(segments, pelvis, hip_drop, neck, shoulders, jitter) -> Dict[str, np.ndarray]:
    positions = {
        "root": np.zeros(3),
        "l_hip": np.array([-pelvis / 2.0, -hip_drop, 0.0]),
        "r_hip": np.array([pelvis / 2.0, -hip_drop, 0.0]),
    }
    previous = positions["root"]
    for name, length, (jx, jz) in zip(("spine_01", "spine_02", "spine_03"), segments, jitter[:3]):
        previous = previous + np.array([jx, length, jz])
        positions[name] = previous
    jx, jz = jitter[3]
    positions["neck_01"] = positions["spine_03"] + np.array([jx, neck, jz])
    positions["l_shoulder"] = positions["spine_03"] + np.array([-shoulders / 2.0, 0.0, 0.0])
    positions["r_shoulder"] = positions["spine_03"] + np.array([shoulders / 2.0, 0.0, 0.0])
    return positions


def _nominal_positions(config: PhantomConfig) -> Dict[str, np.ndarray]:
    def mid(bounds):
        return 0.5 * (bounds[0] + bounds[1])

    return _skeleton_positions(
        [mid(config.segment_range)] * 3,
        mid(config.pelvis_range),
        mid(config.hip_drop_range),
        mid(config.neck_range),
        mid(config.shoulder_range),
        np.zeros((4, 2)),
    )


def _skin(positions: Dict[str, np.ndarray], nominal: Dict[str, np.ndarray]) -> TriMesh:
    height = positions["spine_03"][1] / nominal["spine_03"][1]
    width = (positions["r_hip"][0] - positions["l_hip"][0]) / (nominal["r_hip"][0] - nominal["l_hip"][0])
    center = (0.0, 12.0 * height, 0.0)
    return icosphere(SKIN_SUBDIVISIONS, center=center, radii=(19.0 * width, 28.0 * height, 14.0))


def _skeleton(positions: Dict[str, np.ndarray]) -> TriMesh:
    parts = []
    chain = ["root", "spine_01", "spine_02", "spine_03", "neck_01"]
    for a, b in zip(chain[:-1], chain[1:]):
        length = float(np.linalg.norm(positions[b] - positions[a]))
        parts.append(box((3.0, 0.8 * length, 3.0), center=0.5 * (positions[a] + positions[b])))
    hips = 0.5 * (positions["l_hip"] + positions["r_hip"])
    width = float(positions["r_hip"][0] - positions["l_hip"][0])
    parts.append(box((width + 3.0, 3.0, 4.0), center=hips))
    return concatenate(parts)


def template_landmarks(organ: str, mesh: TriMesh) -> Dict[str, List[int]]:
    """Landmarks as the template vertices furthest along fixed directions."""
    centered = mesh.vertices - mesh.centroid
    landmarks = {}
    for name, direction in ORGAN_LANDMARKS.get(organ, {}).items():
        d = np.asarray(direction, dtype=np.float64)
        order = np.argsort(-(centered @ (d / np.linalg.norm(d))), kind="stable")
        landmarks[name] = sorted(int(i) for i in order[:LANDMARK_SIZE])
    return landmarks


def nominal_templates(organs: Sequence[str]) -> Dict[str, ReferenceTemplateAsset]:
    """Organ templates in the nominal subject's anatomical frame."""
    templates = {}
    for organ in organs:
        center, radii = ORGAN_SHAPES[organ]
        mesh = icosphere(ORGAN_SUBDIVISIONS, center=center, radii=radii)
        templates[organ] = ReferenceTemplateAsset(
            organ=organ,
            mesh=mesh,
            centroid=mesh.centroid,
            frame_id="nominal",
            landmarks=template_landmarks(organ, mesh),
        )
    return templates


def generate_phantom_cohort(config: PhantomConfig) -> PhantomCohort:
    """Deterministic cohort for ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    nominal = _nominal_positions(config)
    nominal_rig = build_rig(nominal)
    nominal_frame = build_anatomical_frame(nominal_rig, frame_id="nominal")
    templates = nominal_templates(config.organs)

    laws = {}
    for organ in config.organs:
        spec = spec_from_reference(
            nominal_rig,
            config.whitelist,
            nominal_frame,
            templates[organ].centroid,
            config.n_joints,
            config.include_distances,
            config.include_angle,
        )
        dim = spec.dimension
        laws[organ] = PlacementLaw(
            organ=organ,
            spec=spec,
            x_nominal=rig_features(nominal_rig, nominal_frame, spec),
            W_pos=rng.normal(0.0, config.law_pos_scale, size=(3, dim)),
            W_scale=rng.normal(0.0, config.law_scale_scale, size=(3, dim)),
        )

    cases = []
    for i in range(config.n_cases):
        case_id = f"case_{i:03d}"
        if i == 0:
            positions = nominal
        else:
            positions = _skeleton_positions(
                rng.uniform(*config.segment_range, size=3),
                rng.uniform(*config.pelvis_range),
                rng.uniform(*config.hip_drop_range),
                rng.uniform(*config.neck_range),
                rng.uniform(*config.shoulder_range),
                rng.uniform(-config.lateral_jitter, config.lateral_jitter, size=(4, 2)),
            )

        pose = None
        if config.pose_jitter_deg > 0 and i > 0:
            axis = rng.normal(size=3)
            angle = np.deg2rad(rng.uniform(-config.pose_jitter_deg, config.pose_jitter_deg))
            rotation = Rotation.from_rotvec(angle * axis / np.linalg.norm(axis)).as_matrix()
            pose = AffineTransform.from_rotation(rotation, rng.normal(0.0, 1.0, size=3))

        rig = build_rig(positions, pose)
        frame = build_anatomical_frame(rig, frame_id=case_id)

        organs, truth, features = {}, {}, {}
        for organ in config.organs:
            law = laws[organ]
            x = rig_features(rig, frame, law.spec)
            delta_c, ell = law.evaluate(x)
            if i > 0:
                delta_c = delta_c + rng.normal(0.0, config.noise_dc, size=3)
                ell = ell + rng.normal(0.0, config.noise_ell, size=3)
            local = instantiate_local(templates[organ], delta_c, ell, np.eye(3))
            world = to_world(local, frame)
            organs[organ] = world if pose is None else world.transformed(pose)
            truth[organ] = {"delta_c": delta_c, "ell": ell, "rotation": np.eye(3)}
            features[organ] = x

        skin = _skin(positions, nominal)
        skeleton = _skeleton(positions)
        if pose is not None:
            skin = skin.transformed(pose)
            skeleton = skeleton.transformed(pose)
        cases.append(PhantomCase(case_id, rig, frame, skin, skeleton, organs, truth, features))

    logger.info(f"Generated phantom cohort: {config.n_cases} cases, organs {list(config.organs)}, seed {config.seed}")
    return PhantomCohort(config, cases, templates, laws)


def write_phantom_cohort(cohort: PhantomCohort, root) -> Path:
    """Write ``cohort.json``, per-case directories and nominal templates under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for case in cohort.cases:
        case_dir = root / case.case_id
        save_rig(case.rig, case_dir / "rig.json")
        save_obj(case.skin, case_dir / "skin.obj")
        save_obj(case.skeleton, case_dir / "skeleton.obj")
        for organ, mesh in case.organs.items():
            save_obj(mesh, case_dir / "organs" / f"{organ}.obj")
        truth = CaseTruthDoc(
            case_id=case.case_id,
            organs={
                organ: OrganTruthDoc(
                    delta_c=values["delta_c"].tolist(),
                    ell=values["ell"].tolist(),
                    rotation=values["rotation"].reshape(-1).tolist(),
                )
                for organ, values in case.truth.items()
            },
            targets={
                organ: case.frame.points_to_world(cohort.templates[organ].centroid + values["delta_c"]).reshape(-1).tolist()
                for organ, values in case.truth.items()
            },
        )
        (case_dir / "truth.json").write_text(truth.model_dump_json(indent=2), encoding="utf-8")

    for organ, template in cohort.templates.items():
        save_template(template, root / "templates" / f"{organ}.obj")

    doc = CohortDoc(
        seed=cohort.config.seed,
        cases=[c.case_id for c in cohort.cases],
        train=cohort.train_ids,
        test=cohort.test_ids,
        organs=list(cohort.config.organs),
        reference_case=cohort.reference_case,
        landmarks={organ: t.landmarks for organ, t in cohort.templates.items()},
    )
    (root / "cohort.json").write_text(doc.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Wrote phantom cohort to {root}")
    return root
