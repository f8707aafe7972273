"""
Verbs of the main pipeline: corpus, pretraining, adaptation, generation, scoring.
"""
from pathlib import Path
from typing import Optional

from app.cli.commands.options import ConfigOption, ForceOption, OutOption, SeedOption, run_stages
from app.services.experiment import STAGES


def synth(config: Optional[Path] = ConfigOption, seed: Optional[int] = SeedOption,
          out: Optional[Path] = OutOption, force: bool = ForceOption):
    """
    Generate the task corpus (with splits) and the pretraining corpora.
    """
    run_stages(["synth"], config, seed, out, force)


def pretrain(config: Optional[Path] = ConfigOption, seed: Optional[int] = SeedOption,
             out: Optional[Path] = OutOption, force: bool = ForceOption):
    """
    Build the vocabulary and pretrain one base model per domain.
    """
    run_stages(["pretrain"], config, seed, out, force)


def adapt(config: Optional[Path] = ConfigOption, seed: Optional[int] = SeedOption,
          out: Optional[Path] = OutOption, force: bool = ForceOption):
    """
    Tune prefix, LoRA and full fine-tuning cells on every base.
    """
    run_stages(["adapt"], config, seed, out, force)


def generate(config: Optional[Path] = ConfigOption, seed: Optional[int] = SeedOption,
             out: Optional[Path] = OutOption, force: bool = ForceOption):
    """
    Write one generated impression per test report for every base and method.
    """
    run_stages(["generate"], config, seed, out, force)


def evaluate(config: Optional[Path] = ConfigOption, seed: Optional[int] = SeedOption,
             out: Optional[Path] = OutOption, force: bool = ForceOption):
    """
    Score every generated hypothesis file.
    """
    run_stages(["eval"], config, seed, out, force)


def run(config: Optional[Path] = ConfigOption, seed: Optional[int] = SeedOption,
        out: Optional[Path] = OutOption, force: bool = ForceOption):
    """
    Every stage in order.
    """
    run_stages(STAGES, config, seed, out, force)
