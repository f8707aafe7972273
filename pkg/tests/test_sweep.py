import pandas as pd
import pytest
import yaml
from typer.testing import CliRunner

from app.cli import cli
from app.core.exceptions import ConfigError
from app.services import sweep
from app.services.experiment import Experiment, load_plan, read_table, write_table
from app.services.manifest import read_manifest

from tests.conftest import TINY_PLAN


def _tables(
    clinical=(30.0, 25.0, 20.0, 18.0),
    general_lora=26.0,
    shots=(20.0, 21.0, 22.0, 23.0),
    ood=(24.0, 19.0, 18.0, 27.0),
):
    lora, prefix, null, instruction = clinical
    summary = pd.DataFrame(
        [
            {"base": "clinical", "method": "null", "rouge_l": null},
            {"base": "clinical", "method": "instruction", "rouge_l": instruction},
            {"base": "clinical", "method": "prefix_tuning", "rouge_l": prefix},
            {"base": "clinical", "method": "lora", "rouge_l": lora},
            {"base": "general", "method": "lora", "rouge_l": general_lora},
        ]
    )
    shot_rows = pd.DataFrame(
        [{"base": "clinical", "k": k, "rouge_l": v} for k, v in zip((0, 1, 2, 4), shots)]
        + [{"base": "general", "k": k, "rouge_l": 5.0 - k} for k in (0, 1, 2, 4)]
    )
    settings = ("CT head -> CT head", "CT head -> CT other", "CT head -> MR other", "All -> CT head")
    ood_rows = pd.DataFrame([{"setting": s, "rouge_l": v} for s, v in zip(settings, ood)])
    return summary, shot_rows, ood_rows


def _holds(rows):
    return {r["criterion"]: r["holds"] for r in rows}


def test_inversions():
    assert sweep.inversions([1.0, 2.0, 3.0]) == 0
    assert sweep.inversions([3.0, 2.0, 1.0]) == 2
    assert sweep.inversions([1.0, 3.0, 2.0, 4.0]) == 1
    assert sweep.inversions([2.0, 2.0]) == 0


def test_all_trends_hold():
    rows = sweep.trend_checks(*_tables())
    assert [r["criterion"] for r in rows] == list(sweep.CRITERIA)
    assert _holds(rows) == dict.fromkeys(sweep.CRITERIA, True)
    assert "(0 inversions)" in rows[1]["detail"]


def test_each_trend_can_fail():
    assert _holds(sweep.trend_checks(*_tables(clinical=(24.0, 25.0, 20.0, 18.0))))["adaptation_ordering"] is False
    assert _holds(sweep.trend_checks(*_tables(clinical=(30.0, 19.0, 20.0, 18.0))))["adaptation_ordering"] is False
    assert _holds(sweep.trend_checks(*_tables(shots=(22.0, 20.0, 21.0, 19.0))))["few_shot_monotonic"] is False
    assert _holds(sweep.trend_checks(*_tables(general_lora=30.0)))["domain_pretraining"] is False
    assert _holds(sweep.trend_checks(*_tables(ood=(24.0, 25.0, 18.0, 27.0))))["ood_degradation"] is False
    assert _holds(sweep.trend_checks(*_tables(ood=(24.0, 19.0, 18.0, 23.0))))["ood_degradation"] is False


def test_one_few_shot_inversion_is_tolerated():
    rows = sweep.trend_checks(*_tables(shots=(21.87, 19.2, 20.32, 20.9)))
    assert _holds(rows)["few_shot_monotonic"] is True


def test_missing_systems_are_not_measured():
    summary, shots, ood = _tables()
    rows = sweep.trend_checks(
        summary[summary["base"] == "clinical"],
        shots[shots["k"] == 0],
        ood[ood["setting"] != "All -> CT head"],
    )
    assert _holds(rows) == {
        "adaptation_ordering": True,
        "few_shot_monotonic": None,
        "domain_pretraining": None,
        "ood_degradation": None,
    }


@pytest.fixture
def sweep_plan_file(tmp_path):
    path = tmp_path / "sweep.yaml"
    plan = {**TINY_PLAN, "output_dir": str(tmp_path / "runs"), "sweep": {"seeds": [0, 1, 2], "required": 2}}
    path.write_text(yaml.safe_dump(plan), encoding="utf-8")
    return path


@pytest.fixture
def fake_pipeline(mocker):
    # seed 2 loses few-shot monotonicity; seeds 1 and 2 lose the domain effect
    def fake_run(self, stages):
        assert tuple(stages) == sweep.SWEEP_STAGES
        seed = self.plan.seed
        summary, shots, ood = _tables(
            general_lora=35.0 if seed in (1, 2) else 26.0,
            shots=(23.0, 22.0, 21.0, 20.0) if seed == 2 else (20.0, 21.0, 22.0, 23.0),
        )
        write_table(self.stage_dir("eval"), "summary", "Summary", summary, self.stamp("eval"))
        write_table(self.stage_dir("shots"), "shots", "Shots", shots, self.stamp("shots"))
        write_table(self.stage_dir("ood"), "ood", "OOD", ood, self.stamp("ood"))

    return mocker.patch.object(Experiment, "run", fake_run)


def test_run_sweep_counts_seeds(sweep_plan_file, fake_pipeline):
    plan = load_plan(sweep_plan_file)
    verdict = sweep.run_sweep(plan).set_index("criterion")
    assert verdict.loc["adaptation_ordering", "seeds_holding"] == 3
    assert verdict.loc["few_shot_monotonic", "seeds_holding"] == 2
    assert verdict.loc["domain_pretraining", "seeds_holding"] == 1
    assert list(verdict["passed"]) == [True, True, False, True]

    directory = load_plan(sweep_plan_file).output_dir
    trends = read_table(f"{directory}/sweep", "trends", "sweep")
    assert len(trends) == 3 * len(sweep.CRITERIA)
    assert sorted(set(trends["run_seed"])) == [0, 1, 2]
    assert read_manifest(f"{directory}/sweep", "sweep")["seeds"] == [0, 1, 2]
    assert read_table(f"{directory}/seed_1/eval", "summary", "eval")["method"].tolist()[0] == "null"


def test_sweep_verb(sweep_plan_file, fake_pipeline, tmp_path):
    result = CliRunner().invoke(cli, ["sweep", "--config", str(sweep_plan_file), "--out", str(tmp_path / "out")])
    assert result.exit_code == 0, result.output
    assert "few_shot_monotonic" in result.output
    assert (tmp_path / "out" / "sweep" / "verdict.csv").exists()
    assert (tmp_path / "out" / "seed_0" / "eval" / "summary.csv").exists()


def test_sweep_needs_enough_seeds(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({**TINY_PLAN, "sweep": {"seeds": [0, 1], "required": 3}}), encoding="utf-8")
    with pytest.raises(ConfigError, match="required"):
        load_plan(path)
