"""Offline stages: ingest, canonicalize, register, decompose, fit-priors."""
import logging
from typing import Dict, List

import click
import numpy as np

from ..anatomy.decomposition import (
    build_reference_template,
    decompose_instance,
    iqr_filter,
    load_descriptors,
    save_descriptors,
    save_frame,
    save_template,
    to_local,
    to_world,
)
from ..anatomy.mesh import concatenate, save_obj
from ..anatomy.priors import design_matrix, fit_baseline, fit_priors, save_prior, spec_from_reference
from ..anatomy.registration import register_template, write_diagnostics
from ..anatomy.rig import JointWhitelist, canonicalize_organ
from ..anatomy.volume import load_volume, marching_cubes
from ..error_handlers import EmptyResultError
from .common import Workspace, open_workspace, run_parallel, stage_command, workspace_options

logger = logging.getLogger(__name__)


def ingest_case(ws: Workspace, case: str) -> Dict[str, int]:
    """Split one label volume into skin, merged skeleton and organ surfaces."""
    cfg = ws.config.ingestion
    grid = load_volume(ws.volume_path(case))
    case_dir = ws.case_dir(case)
    bones, counts = [], {}
    for label, name in sorted(grid.label_names.items()):
        if label == 0 or name == "background":
            continue
        if name == cfg.skin_label:
            mesh = marching_cubes(grid, label, cfg.skin_iso, cfg.skin_sigma, cfg.skin_step, cfg.skin_min_voxels)
            save_obj(mesh, case_dir / "skin.obj")
        elif name in cfg.skeleton_labels:
            mesh = marching_cubes(grid, label, cfg.organ_iso, cfg.organ_sigma, cfg.step, cfg.organ_min_voxels)
            bones.append(mesh)
        else:
            mesh = marching_cubes(grid, label, cfg.organ_iso, cfg.organ_sigma, cfg.step, cfg.organ_min_voxels)
            save_obj(mesh, ws.organ_path(case, name))
        counts[name] = len(mesh.faces)
    if bones:
        save_obj(concatenate(bones), case_dir / "skeleton.obj")
    if cfg.skin_label not in counts:
        raise EmptyResultError(f"{case}: volume has no '{cfg.skin_label}' label", stage="ingest")
    logger.info(f"Ingested {case}: {counts}")
    return counts


def canonicalize_case(ws: Workspace, case: str, organs: List[str]) -> int:
    cfg = ws.config.canonicalization
    rig = ws.rig(case)
    whitelist = JointWhitelist(tuple(cfg.whitelist))
    for organ in organs:
        canonical = canonicalize_organ(
            ws.organ(case, organ),
            rig,
            whitelist,
            support_size=cfg.support_size,
            epsilon=cfg.epsilon,
            smoothing=cfg.smoothing,
            smoothing_strength=cfg.smoothing_strength,
            smoothing_iterations=cfg.smoothing_iterations,
        )
        save_obj(canonical, ws.canonical_path(case, organ))
    logger.info(f"Canonicalized {len(organs)} organs of {case}")
    return len(organs)


def register_case(ws: Workspace, case: str, organs: List[str]) -> Dict[str, float]:
    """Register each organ template, placed in the case frame, onto the canonical organ."""
    frame = ws.frame(case)
    residuals = {}
    for organ in organs:
        template = ws.registration_template(organ)
        start = to_world(template.mesh, frame)
        result = register_template(start, ws.canonical(case, organ), ws.config.registration)
        save_obj(result.registered, ws.registered_path(case, organ))
        write_diagnostics(result.diagnostics, ws.diagnostics_path(case, organ))
        residuals[organ] = result.diagnostics["rmse_to_target"]
    logger.info(f"Registered {case}: " + ", ".join(f"{o} rmse {r:.4f}" for o, r in residuals.items()))
    return residuals


def decompose_organ(ws: Workspace, organ: str) -> int:
    """Fix the reference-local template, then decompose every case against it."""
    cfg = ws.config.prior
    reference = ws.manifest.reference_case
    reference_mesh = ws.registered(reference, organ)

    landmarks = ws.manifest.landmarks.get(organ, {})
    if ws.registration_template_path(organ).exists():
        source = ws.registration_template(organ)
        if len(source.mesh.vertices) == len(reference_mesh.vertices):
            landmarks = source.landmarks
    template = build_reference_template(organ, reference_mesh, ws.frame(reference), landmarks)
    save_template(template, ws.template_path(organ))

    descriptors = [
        decompose_instance(
            to_local(ws.registered(case, organ), ws.frame(case)), template, cfg.decomposition_epsilon, case
        )
        for case in ws.cases
    ]
    train = [d for d in descriptors if d.case_id in ws.manifest.train]
    for descriptor, keep in zip(train, iqr_filter(train, cfg.iqr_multiplier)):
        descriptor.kept = bool(keep)
    save_descriptors(descriptors, organ, ws.descriptor_path(organ), cfg.decomposition_epsilon, cfg.iqr_multiplier)
    logger.info(f"Decomposed {organ}: {len(descriptors)} cases, {sum(d.kept for d in train)}/{len(train)} training kept")
    return len(descriptors)


def fit_organ(ws: Workspace, organ: str) -> Dict[str, float]:
    cfg = ws.config.prior
    descriptors = load_descriptors(ws.descriptor_path(organ))
    template = ws.reference_template(organ)
    reference = ws.manifest.reference_case
    reference_frame = ws.frame(reference)
    spec = spec_from_reference(
        ws.rig(reference),
        ws.config.canonicalization.whitelist,
        reference_frame,
        template.centroid,
        cfg.n_joints,
        cfg.include_distances,
        cfg.include_angle,
        cfg.k_beta,
    )

    train = [d for d in descriptors if d.case_id in ws.manifest.train and d.kept]
    cases = [d.case_id for d in train]
    X = design_matrix([ws.rig(c) for c in cases], [ws.frame(c) for c in cases], spec)
    delta_c = np.array([d.delta_c for d in train])
    ell = np.array([d.ell for d in train])
    rotations = np.array([d.rotation for d in train])

    prior = fit_priors(organ, spec, X, delta_c, ell, rotations, cfg.ridge_lambda, frame_id=reference_frame.frame_id)
    baseline = fit_baseline(organ, spec, X, delta_c, ell, rotations, frame_id=reference_frame.frame_id)
    save_prior(prior, ws.prior_path(organ))
    save_prior(baseline, ws.baseline_path(organ))
    return {"n_train": len(train), "residual_rms_cm": float(np.sqrt(prior.sigma2_pos.sum()))}


@click.command("ingest")
@workspace_options
@click.option("--case", "cases", multiple=True, help="Restrict to these cases.")
@click.pass_context
@stage_command("ingest")
def ingest(ctx, cohort, out, cases):
    """Extract skin, skeleton and organ surfaces from label volumes."""
    ws = open_workspace(ctx, cohort, out)
    chosen = [c for c in ws.select_cases(cases, ws.cases) if ws.volume_path(c).exists()]
    if not chosen:
        logger.info("No label volumes found; using meshes already in the cohort")
        return
    run_parallel(ingest_case, [(ws, c) for c in chosen], ws.config.workers)
    click.echo(f"ingested {len(chosen)} case(s)")


@click.command("canonicalize")
@workspace_options
@click.option("--case", "cases", multiple=True)
@click.option("--organ", "organs", multiple=True)
@click.option("--smoothing/--no-smoothing", default=None, help="Laplacian smoothing after unposing.")
@click.pass_context
@stage_command("canonicalize")
def canonicalize(ctx, cohort, out, cases, organs, smoothing):
    """Unpose every organ into the rest-rig space."""
    ws = open_workspace(ctx, cohort, out, **{"canonicalization.smoothing": smoothing})
    organs = ws.select_organs(organs)
    chosen = ws.select_cases(cases, ws.cases)
    run_parallel(canonicalize_case, [(ws, c, organs) for c in chosen], ws.config.workers)
    click.echo(f"canonicalized {len(chosen)} case(s) x {len(organs)} organ(s)")


@click.command("register")
@workspace_options
@click.option("--case", "cases", multiple=True)
@click.option("--organ", "organs", multiple=True)
@click.option("--samples", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.pass_context
@stage_command("register")
def register(ctx, cohort, out, cases, organs, samples, seed):
    """Deform organ templates onto the canonical organs (dense correspondence)."""
    ws = open_workspace(ctx, cohort, out, **{"registration.samples": samples, "registration.seed": seed})
    if not ws.config.registration.enabled:
        logger.info("Registration disabled; canonical meshes are used as registered meshes")
        return
    organs = ws.select_organs(organs)
    chosen = ws.select_cases(cases, ws.cases)
    run_parallel(register_case, [(ws, c, organs) for c in chosen], ws.config.workers)
    click.echo(f"registered {len(chosen)} case(s) x {len(organs)} organ(s)")


@click.command("decompose")
@workspace_options
@click.option("--organ", "organs", multiple=True)
@click.pass_context
@stage_command("decompose")
def decompose(ctx, cohort, out, organs):
    """Reference templates plus (delta_c, R, ell) descriptors with IQR screening."""
    ws = open_workspace(ctx, cohort, out)
    for case in ws.cases:
        save_frame(ws.frame(case), ws.frame_path(case))
    organs = ws.select_organs(organs)
    run_parallel(decompose_organ, [(ws, o) for o in organs], ws.config.workers)
    click.echo(f"decomposed {len(organs)} organ(s) over {len(ws.cases)} case(s)")


@click.command("fit-priors")
@workspace_options
@click.option("--organ", "organs", multiple=True)
@click.option("--ridge-lambda", type=float, default=None)
@click.option("--n-joints", type=int, default=None)
@click.pass_context
@stage_command("fit-priors")
def fit_priors_command(ctx, cohort, out, organs, ridge_lambda, n_joints):
    """Fit skeleton-conditioned placement and scale priors, plus the feature-free baseline."""
    ws = open_workspace(ctx, cohort, out, **{"prior.ridge_lambda": ridge_lambda, "prior.n_joints": n_joints})
    organs = ws.select_organs(organs)
    summaries = run_parallel(fit_organ, [(ws, o) for o in organs], ws.config.workers)
    for organ, summary in zip(organs, summaries):
        click.echo(f"{organ}: n_train={summary['n_train']} residual_rms={summary['residual_rms_cm']:.4f} cm")
