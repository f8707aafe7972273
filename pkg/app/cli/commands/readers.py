import logging
from pathlib import Path
from typing import Optional

import typer
from rich.console import Console
from rich.table import Table

from app.cli.commands.options import fail
from app.core.logging_config import configure_logging
from app.services.manifest import write_json
from app.services.metrics import aggregate_reader_scores, load_reader_responses

logger = logging.getLogger(__name__)

QUESTIONS = {
    1: "captures critical information",
    2: "factually correct",
    3: "coherent",
}


def readers(
    responses: Path = typer.Argument(..., help="CSV with columns reader_id, example_id, question, score"),
    out: Optional[Path] = typer.Option(None, "--out", help="Write the per-question means as JSON"),
):
    """
    Per-question means of a reader study.
    """
    configure_logging()
    try:
        means = aggregate_reader_scores(load_reader_responses(responses))
    except Exception as e:
        raise fail(e) from e
    table = Table(title="Reader study")
    table.add_column("question")
    table.add_column("mean score", justify="right")
    for question, mean in means.items():
        table.add_row(f"{question} ({QUESTIONS[question]})", f"{mean:.2f}")
    Console().print(table)
    if out is not None:
        write_json(out, {str(q): m for q, m in means.items()})
