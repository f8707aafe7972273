"""
Options shared by every pipeline verb and the stage runner behind them.
"""
import logging
from pathlib import Path
from typing import Optional

import typer

from app.core.config import settings
from app.core.exceptions import LabError
from app.core.logging_config import configure_logging
from app.schemas.experiment import ExperimentPlan
from app.services.experiment import Experiment, load_plan

logger = logging.getLogger(__name__)

ConfigOption = typer.Option(None, "--config", "-c", help="Experiment YAML file (default: CONFIG_PATH setting)", exists=False)
SeedOption = typer.Option(None, "--seed", help="Override the experiment seed")
OutOption = typer.Option(None, "--out", help="Override the output directory")
ForceOption = typer.Option(False, "--force", help="Re-run even when the stage is up to date")


def fail(error: Exception) -> typer.Exit:
    """
    Log `error` and build the matching typer exit.
    """
    if isinstance(error, LabError):
        logger.error(f"{type(error).__name__}: {error}")
        return typer.Exit(code=error.exit_code)
    logger.exception(f"Unexpected error: {error}")
    return typer.Exit(code=1)


def plan_from(config: Optional[Path], seed: Optional[int], out: Optional[Path]) -> ExperimentPlan:
    if config is None and settings.CONFIG_PATH:
        config = Path(settings.CONFIG_PATH)
    return load_plan(config, seed=seed, out=out)


def run_stages(stages, config: Optional[Path], seed: Optional[int], out: Optional[Path], force: bool) -> None:
    configure_logging()
    try:
        plan = plan_from(config, seed, out)
        Experiment(plan, force=force).run(stages)
    except Exception as e:
        raise fail(e) from e
