import logging
import sys

import click

from .commands.evaluation import evaluate, phantom, run_all
from .commands.offline import canonicalize, decompose, fit_priors_command, ingest, register
from .commands.online import ground, init_targets, instantiate, online
from .config import settings


def configure_logging(level: str = None) -> None:
    logging.basicConfig(
        level=getattr(logging, (level or settings.LOG_LEVEL).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


@click.group(name="organ-prior")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Pipeline configuration (YAML or JSON).")
@click.option("--log-level", default=None, help="Overrides ORGAN_PRIOR_LOG_LEVEL.")
@click.pass_context
def cli(ctx, config_path, log_level):
    """Skeleton-conditioned anatomical priors: offline fitting and online target initialization."""
    configure_logging(log_level)
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path


# Offline chain
cli.add_command(ingest)
cli.add_command(canonicalize)
cli.add_command(register)
cli.add_command(decompose)
cli.add_command(fit_priors_command)

# Online chain
cli.add_command(instantiate)
cli.add_command(init_targets)
cli.add_command(ground)
cli.add_command(online)

# Evaluation
cli.add_command(phantom)
cli.add_command(evaluate)
cli.add_command(run_all)


def main() -> None:
    cli(obj={})


if __name__ == "__main__":
    main()
