import numpy as np
import pytest

from app.anatomy.decomposition import ReferenceTemplateAsset
from app.anatomy.mesh import AffineTransform, box, icosphere
from app.anatomy.phantom import PhantomConfig, _nominal_positions, build_rig
from app.anatomy.rig import Joint, RigState


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_cube():
    return box((1.0, 1.0, 1.0))


@pytest.fixture
def sphere():
    return icosphere(2, radius=2.0)


@pytest.fixture
def ellipsoid_template():
    mesh = icosphere(2, center=(1.0, 2.0, 3.0), radii=(3.0, 2.0, 1.5))
    return ReferenceTemplateAsset(
        organ="liver",
        mesh=mesh,
        centroid=mesh.centroid,
        frame_id="reference",
        landmarks={"dome": [0, 1, 2]},
    )


@pytest.fixture
def nominal_rig():
    return build_rig(_nominal_positions(PhantomConfig()))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_rig(rng, n_joints=6):
    """Chain-and-branch rig with random similarity transforms for rest and pose."""
    joints = []
    for i in range(n_joints):
        parent = None if i == 0 else int(rng.integers(0, i))
        rest = AffineTransform.from_rotation(random_rotation(rng), rng.normal(0.0, 10.0, size=3))
        pose = AffineTransform.from_rotation(
            random_rotation(rng), rng.normal(0.0, 10.0, size=3), scale=float(rng.uniform(0.8, 1.2))
        )
        joints.append(Joint(f"j{i}", parent, rest, pose))
    return RigState(joints)
