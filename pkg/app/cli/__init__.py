import typer

from app.cli.commands import pipeline, readers, reports, sweep
from app.core.config import settings

cli = typer.Typer(name=settings.PROJECT_NAME, help=settings.PROJECT_DESCRIPTION, add_completion=False, no_args_is_help=True)

cli.command("synth")(pipeline.synth)
cli.command("pretrain")(pipeline.pretrain)
cli.command("adapt")(pipeline.adapt)
cli.command("generate")(pipeline.generate)
cli.command("eval")(pipeline.evaluate)
cli.command("run")(pipeline.run)
cli.command("ood")(reports.ood)
cli.command("shots")(reports.shots)
cli.command("params")(reports.params)
cli.command("readers")(readers.readers)
cli.command("sweep")(sweep.sweep)
