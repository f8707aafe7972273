from pathlib import Path
from typing import Optional

from app.cli.commands.options import ConfigOption, ForceOption, OutOption, SeedOption, run_stages


def ood(config: Optional[Path] = ConfigOption, seed: Optional[int] = SeedOption,
        out: Optional[Path] = OutOption, force: bool = ForceOption):
    """
    Out-of-distribution table: one row per train/test stratum preset.
    """
    run_stages(["ood"], config, seed, out, force)


def shots(config: Optional[Path] = ConfigOption, seed: Optional[int] = SeedOption,
          out: Optional[Path] = OutOption, force: bool = ForceOption):
    """
    Metric means for 0, 1, 2 and 4 in-context examples per base.
    """
    run_stages(["shots"], config, seed, out, force)


def params(config: Optional[Path] = ConfigOption, seed: Optional[int] = SeedOption,
           out: Optional[Path] = OutOption, force: bool = ForceOption):
    """
    Tunable-parameter table per architecture shape and method.
    """
    run_stages(["params"], config, seed, out, force)
