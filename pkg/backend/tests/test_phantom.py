import json

import numpy as np
import pytest

from app.anatomy.decomposition import load_template
from app.anatomy.mesh import load_obj
from app.anatomy.phantom import PhantomConfig, generate_phantom_cohort, write_phantom_cohort
from app.anatomy.priors import fit_baseline, fit_priors
from app.anatomy.rig import JointWhitelist, canonicalize_organ, load_rig
from app.config import PipelineConfig
from app.error_handlers import DataError

MM_PER_CM = 10.0


def _held_out_errors(cohort):
    """Mean held-out centroid error in mm for the fitted prior and the mean-shape baseline."""
    train = [c for c in cohort.cases if c.case_id in cohort.train_ids]
    test = [c for c in cohort.cases if c.case_id in cohort.test_ids]
    prior_errors, baseline_errors = [], []
    for organ, law in cohort.laws.items():
        X = np.array([c.features[organ] for c in train])
        dc = np.array([c.truth[organ]["delta_c"] for c in train])
        ell = np.array([c.truth[organ]["ell"] for c in train])
        rotations = np.array([c.truth[organ]["rotation"] for c in train])
        prior = fit_priors(organ, law.spec, X, dc, ell, rotations)
        baseline = fit_baseline(organ, law.spec, X, dc, ell, rotations)
        for case in test:
            truth = case.truth[organ]["delta_c"]
            prior_errors.append(np.linalg.norm(prior.predict(case.features[organ]).delta_c - truth))
            baseline_errors.append(np.linalg.norm(baseline.predict(case.features[organ]).delta_c - truth))
    return MM_PER_CM * float(np.mean(prior_errors)), MM_PER_CM * float(np.mean(baseline_errors))


def test_generation_is_deterministic():
    a = generate_phantom_cohort(PhantomConfig(n_cases=5, n_test=1, seed=7))
    b = generate_phantom_cohort(PhantomConfig(n_cases=5, n_test=1, seed=7))
    c = generate_phantom_cohort(PhantomConfig(n_cases=5, n_test=1, seed=8))
    for case_a, case_b in zip(a.cases, b.cases):
        for organ in a.config.organs:
            assert np.array_equal(case_a.organs[organ].vertices, case_b.organs[organ].vertices)
    assert not np.array_equal(a.cases[1].organs["liver"].vertices, c.cases[1].organs["liver"].vertices)


def test_reference_case_is_nominal_and_noise_free():
    cohort = generate_phantom_cohort(PhantomConfig(n_cases=4, n_test=1))
    reference = cohort.cases[0]
    assert cohort.reference_case == "case_000"
    for organ, template in cohort.templates.items():
        np.testing.assert_allclose(reference.truth[organ]["delta_c"], 0.0, atol=1e-12)
        np.testing.assert_allclose(reference.truth[organ]["ell"], 0.0, atol=1e-12)
        np.testing.assert_allclose(reference.organs[organ].vertices, template.mesh.vertices, atol=1e-9)


def test_split_puts_test_cases_last():
    cohort = generate_phantom_cohort(PhantomConfig(n_cases=6, n_test=2))
    assert cohort.train_ids == ["case_000", "case_001", "case_002", "case_003"]
    assert cohort.test_ids == ["case_004", "case_005"]


def test_invalid_configuration():
    with pytest.raises(DataError):
        PhantomConfig(n_cases=1)
    with pytest.raises(DataError):
        PhantomConfig(n_cases=5, n_test=5)
    with pytest.raises(DataError):
        PhantomConfig(noise_dc=-1.0)
    with pytest.raises(DataError):
        PhantomConfig(organs=("heart",))


def test_pipeline_overrides():
    config = PhantomConfig.from_pipeline(PipelineConfig(seed=3), pose_jitter_deg=10.0, n_test=None)
    assert config.seed == 3
    assert config.pose_jitter_deg == 10.0
    assert config.n_test == 10


def test_posed_organs_canonicalize_back_to_rest():
    cohort = generate_phantom_cohort(PhantomConfig(n_cases=3, n_test=1, pose_jitter_deg=15.0))
    whitelist = JointWhitelist(tuple(cohort.config.whitelist))
    case = cohort.cases[2]
    for organ, posed in case.organs.items():
        rest = case.frame.points_to_world(
            cohort.templates[organ].centroid + case.truth[organ]["delta_c"]
        )
        canonical = canonicalize_organ(posed, case.rig, whitelist)
        np.testing.assert_allclose(canonical.centroid, rest, atol=1e-9)


def test_skeleton_conditioned_prior_beats_the_baseline():
    cohort = generate_phantom_cohort(PhantomConfig(n_cases=40, n_test=10, seed=0))
    prior_mm, baseline_mm = _held_out_errors(cohort)
    assert prior_mm <= 17.0
    assert prior_mm < baseline_mm


def test_written_cohort_layout(tmp_path):
    cohort = generate_phantom_cohort(PhantomConfig(n_cases=3, n_test=1, seed=2))
    root = write_phantom_cohort(cohort, tmp_path / "phantom")

    doc = json.loads((root / "cohort.json").read_text(encoding="utf-8"))
    assert doc["cases"] == ["case_000", "case_001", "case_002"]
    assert doc["test"] == ["case_002"]
    assert doc["reference_case"] == "case_000"

    case = cohort.cases[1]
    case_dir = root / "case_001"
    assert load_rig(case_dir / "rig.json").names == case.rig.names
    liver = load_obj(case_dir / "organs" / "liver.obj")
    assert np.array_equal(liver.vertices, case.organs["liver"].vertices)
    assert (case_dir / "skin.obj").exists() and (case_dir / "skeleton.obj").exists()

    truth = json.loads((case_dir / "truth.json").read_text(encoding="utf-8"))
    np.testing.assert_allclose(truth["organs"]["liver"]["delta_c"], case.truth["liver"]["delta_c"])
    np.testing.assert_allclose(truth["targets"]["liver"], case.organs["liver"].centroid, atol=1e-9)

    template = load_template(root / "templates" / "liver.obj")
    assert template.landmarks == cohort.templates["liver"].landmarks
