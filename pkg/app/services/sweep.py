"""
Multi-seed trend check.

The pipeline runs once per seed into `<output_dir>/seed_<n>/`; each seed's eval,
shots and ood tables are then compared along four directions. A direction
passes when it holds on at least `sweep.required` seeds.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from app.schemas.corpus import Domain
from app.schemas.experiment import ExperimentPlan
from app.services.experiment import Experiment, read_table, write_table
from app.services.manifest import config_hash, write_manifest

logger = logging.getLogger(__name__)

SWEEP_STAGES = ("synth", "pretrain", "adapt", "generate", "eval", "ood", "shots")
TREND_METRIC = "rouge_l"
ZERO_SHOT_METHODS = ("null", "instruction")
IN_DISTRIBUTION = "CT head -> CT head"
SHIFTED_ANATOMY = ("CT head -> CT other", "CT head -> MR other")
ALL_TO_IN_DISTRIBUTION = "All -> CT head"
CRITERIA = ("adaptation_ordering", "few_shot_monotonic", "domain_pretraining", "ood_degradation")


def _score(frame: pd.DataFrame, **keys: object) -> Optional[float]:
    rows = frame
    for column, value in keys.items():
        rows = rows[rows[column] == value]
    if rows.empty:
        return None
    return float(rows[TREND_METRIC].iloc[0])


def _row(criterion: str, holds: Optional[bool], detail: str) -> Dict[str, object]:
    return {"criterion": criterion, "holds": holds, "detail": detail}


def inversions(values: Sequence[float]) -> int:
    """Number of adjacent decreases."""
    return sum(1 for a, b in zip(values, values[1:]) if b < a)


def trend_checks(
    summary: pd.DataFrame,
    shots: pd.DataFrame,
    ood: pd.DataFrame,
    base: str = Domain.CLINICAL.value,
    reference_base: str = Domain.GENERAL.value,
) -> List[Dict[str, object]]:
    """
    One row per direction for a single seed, compared on ROUGE-L.

    `holds` is None when a system the comparison needs is missing from the tables.
    """
    rows = []

    lora = _score(summary, base=base, method="lora")
    prefix = _score(summary, base=base, method="prefix_tuning")
    prompts = [s for s in (_score(summary, base=base, method=m) for m in ZERO_SHOT_METHODS) if s is not None]
    if lora is None or prefix is None or not prompts:
        rows.append(_row("adaptation_ordering", None, "needs lora, prefix_tuning and a zero-shot prompt"))
    else:
        best_prompt = max(prompts)
        rows.append(
            _row(
                "adaptation_ordering",
                lora >= prefix >= best_prompt,
                f"lora {lora:.2f} >= prefix {prefix:.2f} >= prompt {best_prompt:.2f}",
            )
        )

    curve = shots[shots["base"] == base].sort_values("k")
    if len(curve) < 2:
        rows.append(_row("few_shot_monotonic", None, "needs at least two shot counts"))
    else:
        values = curve[TREND_METRIC].tolist()
        n = inversions(values)
        listed = ", ".join(f"k={k} {v:.2f}" for k, v in zip(curve["k"], values))
        rows.append(_row("few_shot_monotonic", n <= 1, f"{listed} ({n} inversions)"))

    reference = _score(summary, base=reference_base, method="lora")
    if lora is None or reference is None:
        rows.append(_row("domain_pretraining", None, f"needs lora on the {base} and {reference_base} bases"))
    else:
        rows.append(_row("domain_pretraining", lora > reference, f"{base} {lora:.2f} > {reference_base} {reference:.2f}"))

    in_distribution = _score(ood, setting=IN_DISTRIBUTION)
    all_train = _score(ood, setting=ALL_TO_IN_DISTRIBUTION)
    shifted = {}
    for setting in SHIFTED_ANATOMY:
        score = _score(ood, setting=setting)
        if score is not None:
            shifted[setting] = score
    if in_distribution is None or all_train is None or not shifted:
        rows.append(_row("ood_degradation", None, "needs in-distribution, shifted-anatomy and all-train settings"))
    else:
        holds = all(in_distribution > v for v in shifted.values()) and all_train > in_distribution
        listed = ", ".join(f"{s} {v:.2f}" for s, v in shifted.items())
        detail = f"{IN_DISTRIBUTION} {in_distribution:.2f} vs {listed}; {ALL_TO_IN_DISTRIBUTION} {all_train:.2f}"
        rows.append(_row("ood_degradation", holds, detail))
    return rows


def seed_plan(plan: ExperimentPlan, seed: int) -> ExperimentPlan:
    return plan.model_copy(update={"seed": seed, "output_dir": str(Path(plan.output_dir) / f"seed_{seed}")})


def run_sweep(plan: ExperimentPlan, force: bool = False) -> pd.DataFrame:
    """
    Run every sweep seed and write `sweep/trends` (per seed) and `sweep/verdict`.
    Returns the verdict frame.
    """
    seeds = plan.sweep.seeds
    per_seed: List[Dict[str, object]] = []
    for seed in seeds:
        runner = Experiment(seed_plan(plan, seed), force=force)
        runner.run(SWEEP_STAGES)
        checks = trend_checks(
            read_table(runner.stage_dir("eval"), "summary", "eval"),
            read_table(runner.stage_dir("shots"), "shots", "shots"),
            read_table(runner.stage_dir("ood"), "ood", "ood"),
        )
        for check in checks:
            logger.info(
                f"Seed {seed} {check['criterion']}: {check['holds']} ({check['detail']})",
                extra={"stage": "sweep", "run": f"seed_{seed}"},
            )
        per_seed.extend({"run_seed": seed, **check} for check in checks)

    verdict = []
    for criterion in CRITERIA:
        outcomes = [r["holds"] for r in per_seed if r["criterion"] == criterion]
        holding = sum(1 for o in outcomes if o is True)
        verdict.append(
            {
                "criterion": criterion,
                "seeds_holding": holding,
                "seeds_measured": sum(1 for o in outcomes if o is not None),
                "required": plan.sweep.required,
                "passed": holding >= plan.sweep.required,
            }
        )

    directory = Path(plan.output_dir) / "sweep"
    sweep_hash = config_hash({"plan": plan, "seeds": seeds})
    stamp = {"config_hash": sweep_hash, "seed": " ".join(str(s) for s in seeds)}
    write_table(directory, "trends", "Directional trends per seed", pd.DataFrame(per_seed), stamp)
    frame = pd.DataFrame(verdict)
    title = f"Trends holding on at least {plan.sweep.required} of {len(seeds)} seeds"
    write_table(directory, "verdict", title, frame, stamp)
    write_manifest(directory, "sweep", sweep_hash, plan.seed, seeds=seeds, verdict=verdict)
    return frame
