"""Phantom cohorts, evaluation and the full offline chain."""
import logging
from typing import List

import click
import numpy as np

from ..anatomy.metrics import EvalReport, OrganEvaluation, evaluate_organ
from ..anatomy.phantom import PhantomConfig, generate_phantom_cohort, write_phantom_cohort
from .common import Workspace, open_workspace, resolve_config, run_parallel, stage_command, workspace_options
from .offline import canonicalize, decompose, fit_priors_command, ingest, register
from .online import init_targets, instantiate, instantiate_for

logger = logging.getLogger(__name__)

METHODS = ("prior", "baseline")


def evaluate_case(ws: Workspace, case: str, organs: List[str]) -> List[OrganEvaluation]:
    """Prior and baseline predictions against the canonical organs of one held-out case."""
    truth_doc = ws.truth(case)
    rows = []
    for organ in organs:
        truth = ws.canonical(case, organ)
        if truth_doc is not None and organ in truth_doc.targets:
            targets = np.array([truth_doc.targets[organ]])
        else:
            targets = truth.centroid[None, :]
        for method in METHODS:
            path = ws.prior_path(organ) if method == "prior" else ws.baseline_path(organ)
            predicted = instantiate_for(ws, case, organ, prior_path=path, world_source="rest").world_mesh
            rows.append(evaluate_organ(case, organ, method, predicted, truth, targets))
    return rows


@click.command("phantom")
@click.option("--out", "out", type=click.Path(file_okay=False), required=True, help="Cohort root to write.")
@click.option("--n", "n_cases", type=int, default=None, help="Number of cases (phantom.n).")
@click.option("--n-test", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--noise-dc", type=float, default=None, help="Centroid noise sigma, cm.")
@click.option("--noise-ell", type=float, default=None, help="Log-scale noise sigma.")
@click.option("--pose-jitter", type=float, default=None, help="Max global pose rotation, degrees.")
@click.pass_context
@stage_command("phantom")
def phantom(ctx, out, n_cases, n_test, seed, noise_dc, noise_ell, pose_jitter):
    """Write a synthetic cohort with a known placement law."""
    config = resolve_config(ctx, {
        "phantom.n": n_cases,
        "phantom.n_test": n_test,
        "seed": seed,
        "phantom.noise_dc": noise_dc,
        "phantom.noise_ell": noise_ell,
        "paths.cohort": out,
    })
    cohort = generate_phantom_cohort(PhantomConfig.from_pipeline(config, pose_jitter_deg=pose_jitter))
    write_phantom_cohort(cohort, out)
    click.echo(f"phantom cohort: {len(cohort.cases)} cases ({len(cohort.train_ids)} train / {len(cohort.test_ids)} test) -> {out}")


@click.command("eval")
@workspace_options
@click.option("--organ", "organs", multiple=True)
@click.pass_context
@stage_command("eval")
def evaluate(ctx, cohort, out, organs):
    """Score prior and baseline predictions on the test split."""
    ws = open_workspace(ctx, cohort, out)
    cases = ws.manifest.test
    if not cases:
        logger.warning("Cohort has no test split; evaluating every case")
        cases = ws.cases
    organs = ws.select_organs(organs)
    chunks = run_parallel(evaluate_case, [(ws, c, organs) for c in cases], ws.config.workers)
    report = EvalReport([row for chunk in chunks for row in chunk])
    report.save(ws.eval_dir)
    for method in METHODS:
        click.echo(f"{method}: mean centroid error {report.mean(method):.2f} mm, "
                   f"mean IoU {report.mean(method, 'support_iou'):.3f}")


@click.command("run-all")
@workspace_options
@click.pass_context
@stage_command("run-all")
def run_all(ctx, cohort, out):
    """ingest -> canonicalize -> register -> decompose -> fit-priors -> instantiate -> init-targets -> eval."""
    for command in (ingest, canonicalize, register, decompose, fit_priors_command, instantiate, init_targets, evaluate):
        logger.info(f"run-all: {command.name}")
        ctx.invoke(command, cohort=cohort, out=out)
