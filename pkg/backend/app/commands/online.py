"""Online stages: instantiate, init-targets, ground and the chained ``online`` command."""
import logging
from pathlib import Path
from typing import Optional, Tuple

import click
from sqlalchemy.orm import sessionmaker

from ..anatomy.grounding import GroundedTarget, HashingEmbedder, UnitStore, aggregate_targets, retrieve
from ..anatomy.initialization import ControlState, TargetSpec, initialize_targets, save_control_state
from ..anatomy.instantiation import InstantiatedOrgan, export_instantiated, instantiate_organ
from ..anatomy.priors import load_prior, rig_features
from ..config import PipelineConfig, settings
from ..database import get_db, init_db, make_engine
from ..error_handlers import MissingInputError
from ..seed_units import load_organ_whitelist, load_units_jsonl, seed_units
from .common import Workspace, open_workspace, resolve_config, run_parallel, stage_command, workspace_options

logger = logging.getLogger(__name__)


def instantiate_for(ws: Workspace, case: str, organ: str, prior_path: Optional[Path] = None,
                    world_source: Optional[str] = None) -> InstantiatedOrgan:
    """Predict one organ for one subject; features always come from the rest frame."""
    prior = load_prior(prior_path or ws.prior_path(organ))
    template = ws.reference_template(organ)
    rig = ws.rig(case)
    features = rig_features(rig, ws.frame(case, "rest"), prior.spec)
    frame = ws.frame(case, world_source or ws.config.initialization.frame_source)
    return instantiate_organ(template, prior, features, frame)


def target_spec(config: PipelineConfig, point: Optional[Tuple[float, float, float]] = None) -> TargetSpec:
    cfg = config.initialization
    if point is not None:
        return TargetSpec(mode="point", point=tuple(point))
    if cfg.target_mode == "landmark":
        return TargetSpec(mode="landmark", landmark=cfg.landmark)
    return TargetSpec(mode=cfg.target_mode)


def instantiate_case(ws: Workspace, case: str, organ: str) -> str:
    organ_instance = instantiate_for(ws, case, organ)
    return str(export_instantiated(organ_instance, ws.instantiated_path(case, organ)))


def init_targets_case(ws: Workspace, case: str, organ: str, spec: TargetSpec) -> ControlState:
    cfg = ws.config.initialization
    organ_instance = instantiate_for(ws, case, organ)
    mesh_path = ws.instantiated_path(case, organ)
    state = initialize_targets(
        organ_instance,
        load_prior(ws.prior_path(organ)),
        ws.skin(case),
        ws.frame(case, cfg.frame_source),
        spec=spec,
        skeleton=ws.skeleton(case),
        radius=cfg.radius,
        delta_skel=cfg.delta_skel,
        k_cand=cfg.k_cand,
        mesh_ref=str(mesh_path) if mesh_path.exists() else None,
    )
    save_control_state(state, ws.control_path(case, organ))
    return state


def ground_query(config: PipelineConfig, query: str, k: int, units_path: Optional[str]) -> GroundedTarget:
    """Load units into the store, build the exact index and ground one query."""
    engine = make_engine(settings.DATABASE_URL)
    init_db(engine)
    session_factory = sessionmaker(autocommit=False, autoflush=False, bind=engine)
    whitelist = load_organ_whitelist(config.paths.whitelist)
    with get_db(session_factory) as db:
        store = UnitStore(db)
        if units_path:
            store.clear()
            seed_units(db, load_units_jsonl(units_path), whitelist)
        elif store.count() == 0:
            seed_units(db, whitelist=whitelist)
        index = store.build_index(HashingEmbedder(config.grounding.dimension), whitelist)
    target = aggregate_targets(retrieve(index, query, k), query)
    logger.info(f"Grounded '{query}' -> {target.organ} ({target.organ_score:.4f}), region {target.region}")
    return target


def _cases_for_online(ws: Workspace, cases) -> list:
    return ws.select_cases(cases, ws.manifest.test or ws.cases)


@click.command("instantiate")
@workspace_options
@click.option("--case", "cases", multiple=True, help="Subjects (default: the test split).")
@click.option("--organ", "organs", multiple=True)
@click.option("--frame-source", type=click.Choice(["rest", "pose"]), default=None)
@click.pass_context
@stage_command("instantiate")
def instantiate(ctx, cohort, out, cases, organs, frame_source):
    """Instantiate organ hypotheses from the fitted priors."""
    ws = open_workspace(ctx, cohort, out, **{"initialization.frame_source": frame_source})
    organs = ws.select_organs(organs)
    items = [(ws, c, o) for c in _cases_for_online(ws, cases) for o in organs]
    paths = run_parallel(instantiate_case, items, ws.config.workers)
    click.echo(f"instantiated {len(paths)} organ(s)")


@click.command("init-targets")
@workspace_options
@click.option("--case", "cases", multiple=True, help="Subjects (default: the test split).")
@click.option("--organ", "organs", multiple=True)
@click.option("--target", "target_mode", type=click.Choice(["centroid", "landmark", "point"]), default=None)
@click.option("--landmark", default=None)
@click.option("--point", type=float, nargs=3, default=None, help="World target point, cm.")
@click.option("--radius", type=float, default=None, help="Candidate radius, cm.")
@click.option("--k-cand", type=int, default=None)
@click.pass_context
@stage_command("init-targets")
def init_targets(ctx, cohort, out, cases, organs, target_mode, landmark, point, radius, k_cand):
    """Rank skin contact candidates and write the control-facing state."""
    if point is not None and target_mode not in (None, "point"):
        raise click.UsageError("--point only applies to --target point")
    if target_mode == "point" and point is None:
        raise click.UsageError("--target point needs --point X Y Z")
    ws = open_workspace(ctx, cohort, out, **{
        "initialization.target_mode": target_mode,
        "initialization.landmark": landmark,
        "initialization.radius": radius,
        "initialization.k_cand": k_cand,
    })
    spec = target_spec(ws.config, point)
    organs = ws.select_organs(organs)
    items = [(ws, c, o, spec) for c in _cases_for_online(ws, cases) for o in organs]
    states = run_parallel(init_targets_case, items, ws.config.workers)
    for (_, case, organ, _), state in zip(items, states):
        best = state.candidates[0].s if state.candidates else float("nan")
        click.echo(f"{case}/{organ}: {len(state.candidates)} candidate(s), best score {best:.4f}")


@click.command("ground")
@click.option("--query", required=True, help="Free-text clinical query.")
@click.option("--k", type=int, default=None, help="Retrieved units (grounding.k).")
@click.option("--units", "units_path", type=click.Path(dir_okay=False), default=None,
              help="Semantic units as JSON Lines (paths.units); the starter corpus otherwise.")
@click.option("--whitelist", "whitelist_path", type=click.Path(dir_okay=False), default=None,
              help="Organ to anatomy whitelist as JSON (paths.whitelist).")
@click.option("--output", "output_path", type=click.Path(dir_okay=False), default=None)
@click.pass_context
@stage_command("ground")
def ground(ctx, query, k, units_path, output_path, whitelist_path):
    """Ground a text query into an organ and anatomy target."""
    config = resolve_config(ctx, {"grounding.k": k, "paths.units": units_path, "paths.whitelist": whitelist_path})
    target = ground_query(config, query, config.grounding.k, config.paths.units)
    text = target.to_doc().model_dump_json(indent=2)
    if output_path:
        Path(output_path).parent.mkdir(parents=True, exist_ok=True)
        Path(output_path).write_text(text, encoding="utf-8")
    click.echo(text)


@click.command("online")
@workspace_options
@click.option("--case", "case", required=True, help="Subject to plan for.")
@click.option("--query", required=True)
@click.option("--k", type=int, default=None)
@click.option("--units", "units_path", type=click.Path(dir_okay=False), default=None)
@click.pass_context
@stage_command("online")
def online(ctx, cohort, out, case, query, k, units_path):
    """ground -> instantiate -> init-targets for one subject."""
    ws = open_workspace(ctx, cohort, out, **{"grounding.k": k, "paths.units": units_path})
    ws.select_cases([case], [])
    target = ground_query(ws.config, query, ws.config.grounding.k, ws.config.paths.units)
    if target.organ not in ws.organs:
        raise MissingInputError(
            f"grounded organ '{target.organ}' has no prior in this cohort (organs: {ws.organs})", stage="online"
        )
    grounded_path = ws.out / "control" / case / "grounded.json"
    grounded_path.parent.mkdir(parents=True, exist_ok=True)
    grounded_path.write_text(target.to_doc().model_dump_json(indent=2), encoding="utf-8")

    instantiate_case(ws, case, target.organ)
    template = ws.reference_template(target.organ)
    if target.region in template.landmarks:
        spec = TargetSpec(mode="landmark", landmark=target.region)
    else:
        spec = TargetSpec()
    state = init_targets_case(ws, case, target.organ, spec)
    click.echo(
        f"{case}: {target.organ} ({spec.landmark or 'centroid'}), "
        f"{len(state.candidates)} candidate(s) -> {ws.control_path(case, target.organ)}"
    )
