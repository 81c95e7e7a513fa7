"""Shared plumbing for stage commands: config resolution, workspace layout, error mapping."""
import functools
import json
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import click
from joblib import Parallel, delayed

from ..config import PipelineConfig, load_pipeline_config
from ..error_handlers import ErrorHandler, MissingInputError
from ..schemas import CaseTruthDoc, CohortDoc, parse_document
from ..anatomy.decomposition import AnatomicalFrame, build_anatomical_frame, load_template
from ..anatomy.mesh import TriMesh, load_obj
from ..anatomy.rig import RigState, load_rig

logger = logging.getLogger(__name__)


def resolve_config(ctx: click.Context, overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """Flag overrides on top of the ``--config`` file given to the command group."""
    path = (ctx.obj or {}).get("config_path")
    return load_pipeline_config(path, overrides)


def stage_command(stage: str) -> Callable:
    """Run the command body, turning engine failures into the matching exit code."""

    def decorator(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except (click.exceptions.Exit, click.ClickException, click.Abort):
                raise
            except Exception as exc:
                click.get_current_context().exit(ErrorHandler.handle(exc, stage))

        return wrapper

    return decorator


def run_parallel(fn: Callable, items: Sequence, workers: int) -> List:
    """Per-item work on a bounded pool; the call is a barrier and keeps input order."""
    if not items:
        return []
    return Parallel(n_jobs=max(1, workers))(delayed(fn)(*item) for item in items)


class Workspace:
    """Cohort inputs and the ``out/`` tree of stage artefacts."""

    def __init__(self, config: PipelineConfig):
        if not config.paths.cohort:
            raise MissingInputError("no cohort directory given (use --cohort or paths.cohort)", stage="config")
        self.config = config
        self.cohort = Path(config.paths.cohort)
        if not self.cohort.is_dir():
            raise MissingInputError(f"cohort directory not found: {self.cohort}", stage="config")
        self.out = Path(config.paths.output)
        self.manifest = self._load_manifest()
        self._frames: Dict[str, AnatomicalFrame] = {}

    def _load_manifest(self) -> CohortDoc:
        path = self.cohort / "cohort.json"
        if path.exists():
            doc = parse_document(CohortDoc, json.loads(path.read_text(encoding="utf-8")))
        else:
            cases = sorted(p.name for p in self.cohort.iterdir() if (p / "rig.json").exists())
            if not cases:
                raise MissingInputError(f"no case directories with rig.json under {self.cohort}")
            organs = sorted({
                obj.stem for case in cases for obj in (self.cohort / case / "organs").glob("*.obj")
            })
            doc = CohortDoc(seed=self.config.seed, cases=cases, train=cases, test=[], organs=organs, reference_case=cases[0])
        if self.config.prior.reference_case:
            doc.reference_case = self.config.prior.reference_case
        if doc.reference_case not in doc.cases:
            raise MissingInputError(f"reference case '{doc.reference_case}' is not part of the cohort")
        return doc

    @property
    def cases(self) -> List[str]:
        return list(self.manifest.cases)

    @property
    def organs(self) -> List[str]:
        return list(self.manifest.organs)

    # cohort inputs

    def case_dir(self, case: str) -> Path:
        return self.cohort / case

    def volume_path(self, case: str) -> Path:
        return self.case_dir(case) / "volume.raw"

    def organ_path(self, case: str, organ: str) -> Path:
        return self.case_dir(case) / "organs" / f"{organ}.obj"

    def rig(self, case: str) -> RigState:
        return load_rig(self.case_dir(case) / "rig.json")

    def skin(self, case: str) -> TriMesh:
        return load_obj(self.case_dir(case) / "skin.obj")

    def skeleton(self, case: str) -> Optional[TriMesh]:
        path = self.case_dir(case) / "skeleton.obj"
        return load_obj(path) if path.exists() else None

    def truth(self, case: str) -> Optional[CaseTruthDoc]:
        path = self.case_dir(case) / "truth.json"
        if not path.exists():
            return None
        return parse_document(CaseTruthDoc, json.loads(path.read_text(encoding="utf-8")))

    def registration_template_path(self, organ: str) -> Path:
        return self.cohort / "templates" / f"{organ}.obj"

    def frame(self, case: str, source: str = "rest") -> AnatomicalFrame:
        key = f"{case}:{source}"
        if key not in self._frames:
            self._frames[key] = build_anatomical_frame(
                self.rig(case), self.config.prior.frame_joints, source=source, frame_id=case
            )
        return self._frames[key]

    def organ(self, case: str, organ: str) -> TriMesh:
        path = self.organ_path(case, organ)
        if not path.exists():
            raise MissingInputError(f"organ mesh not found: {path} (run 'ingest' first)")
        return load_obj(path)

    # stage outputs

    def canonical_path(self, case: str, organ: str) -> Path:
        return self.out / "canonical" / case / f"{organ}.obj"

    def registered_path(self, case: str, organ: str) -> Path:
        return self.out / "registered" / case / f"{organ}.obj"

    def diagnostics_path(self, case: str, organ: str) -> Path:
        return self.out / "registered" / case / f"{organ}.diagnostics.jsonl"

    def frame_path(self, case: str) -> Path:
        return self.out / "frames" / f"{case}.json"

    def template_path(self, organ: str) -> Path:
        return self.out / "templates" / f"{organ}.obj"

    def descriptor_path(self, organ: str) -> Path:
        return self.out / "descriptors" / f"{organ}.json"

    def prior_path(self, organ: str) -> Path:
        return self.out / "priors" / f"{organ}.json"

    def baseline_path(self, organ: str) -> Path:
        return self.out / "priors" / "baseline" / f"{organ}.json"

    def instantiated_path(self, case: str, organ: str) -> Path:
        return self.out / "instantiated" / case / f"{organ}.obj"

    def control_path(self, case: str, organ: str) -> Path:
        return self.out / "control" / case / f"{organ}.json"

    @property
    def eval_dir(self) -> Path:
        return self.out / "eval"

    # stage-aware loaders

    def canonical(self, case: str, organ: str) -> TriMesh:
        path = self.canonical_path(case, organ)
        if not path.exists():
            raise MissingInputError(f"canonical mesh not found: {path} (run 'canonicalize' first)")
        return load_obj(path)

    def registered(self, case: str, organ: str) -> TriMesh:
        """Registered organ, or the canonical one when registration is disabled."""
        if not self.config.registration.enabled:
            return self.canonical(case, organ)
        path = self.registered_path(case, organ)
        if not path.exists():
            raise MissingInputError(f"registered mesh not found: {path} (run 'register' first)")
        return load_obj(path)

    def reference_template(self, organ: str):
        path = self.template_path(organ)
        if not path.exists():
            raise MissingInputError(f"reference template not found: {path} (run 'decompose' first)")
        return load_template(path)

    def registration_template(self, organ: str):
        path = self.registration_template_path(organ)
        if not path.exists():
            raise MissingInputError(
                f"registration template not found: {path} (provide templates/{organ}.obj or disable registration)"
            )
        return load_template(path)

    def select_cases(self, cases: Sequence[str], default: Sequence[str]) -> List[str]:
        chosen = list(cases) or list(default)
        unknown = [c for c in chosen if c not in self.manifest.cases]
        if unknown:
            raise MissingInputError(f"unknown case(s) {unknown}")
        return chosen

    def select_organs(self, organs: Sequence[str]) -> List[str]:
        chosen = list(organs) or self.organs
        unknown = [o for o in chosen if o not in self.manifest.organs]
        if unknown:
            raise MissingInputError(f"unknown organ(s) {unknown} (cohort organs: {self.organs})")
        return chosen


def workspace_options(fn):
    """``--cohort`` and ``--out`` for every command that works on a cohort."""
    fn = click.option("--out", "out", type=click.Path(file_okay=False), default=None,
                      help="Output root (paths.output).")(fn)
    fn = click.option("--cohort", "cohort", type=click.Path(file_okay=False), default=None,
                      help="Cohort root (paths.cohort).")(fn)
    return fn


def open_workspace(ctx: click.Context, cohort: Optional[str], out: Optional[str], **overrides) -> Workspace:
    overrides.update({"paths.cohort": cohort, "paths.output": out})
    return Workspace(resolve_config(ctx, overrides))
