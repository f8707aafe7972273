from pathlib import Path
from typing import Optional

from rich.console import Console
from rich.table import Table

from app.cli.commands.options import ConfigOption, ForceOption, OutOption, fail, plan_from
from app.core.logging_config import configure_logging
from app.services.sweep import run_sweep


def sweep(config: Optional[Path] = ConfigOption, out: Optional[Path] = OutOption, force: bool = ForceOption):
    """
    Run the pipeline for every `sweep.seeds` seed and check the directional trends.
    """
    configure_logging()
    try:
        plan = plan_from(config, None, out)
        verdict = run_sweep(plan, force=force)
    except Exception as e:
        raise fail(e) from e
    table = Table(title=f"Trends over seeds {plan.sweep.seeds}")
    table.add_column("criterion")
    table.add_column("holding", justify="right")
    table.add_column("passed")
    for row in verdict.itertuples(index=False):
        table.add_row(row.criterion, f"{row.seeds_holding}/{row.seeds_measured}", "yes" if row.passed else "no")
    Console().print(table)
