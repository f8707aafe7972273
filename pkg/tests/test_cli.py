import json

import pandas as pd
import yaml
from typer.testing import CliRunner

from app.cli import cli
from app.core.config import settings

from tests.conftest import TINY_PLAN

runner = CliRunner()

PIPELINE = ("synth", "pretrain", "adapt", "generate", "eval")


def invoke(*args):
    return runner.invoke(cli, [str(a) for a in args])


def test_params_table(plan_file, tmp_path):
    result = invoke("params", "--config", plan_file, "--out", tmp_path / "out")
    assert result.exit_code == 0, result.output
    table = pd.read_csv(tmp_path / "out" / "params" / "params.csv")
    assert 884_736 in table["tunable"].tolist()
    assert (tmp_path / "out" / "params" / "params.md").read_text().startswith("# Tunable parameters")


def test_missing_artifact_exit_code(plan_file, tmp_path):
    result = invoke("eval", "--config", plan_file, "--out", tmp_path / "empty")
    assert result.exit_code == 3


def test_bad_config_exit_code(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({**TINY_PLAN, "tokenizer": {"vocab_size": 7}}), encoding="utf-8")
    assert invoke("synth", "--config", path).exit_code == 2
    assert invoke("synth", "--config", tmp_path / "absent.yaml").exit_code == 2


def test_readers(tmp_path):
    path = tmp_path / "responses.csv"
    pd.DataFrame(
        [
            {"reader_id": "r1", "example_id": "e1", "question": 1, "score": 10},
            {"reader_id": "r2", "example_id": "e1", "question": 1, "score": 5},
            {"reader_id": "r1", "example_id": "e1", "question": 2, "score": 0},
        ]
    ).to_csv(path, index=False)
    result = invoke("readers", path, "--out", tmp_path / "means.json")
    assert result.exit_code == 0, result.output
    assert json.loads((tmp_path / "means.json").read_text()) == {"1": 7.5, "2": 0.0}


def test_readers_rejects_invalid_scores(tmp_path):
    path = tmp_path / "responses.csv"
    pd.DataFrame([{"reader_id": "r1", "example_id": "e1", "question": 1, "score": 3}]).to_csv(path, index=False)
    assert invoke("readers", path).exit_code == 1


def test_pipeline_is_reproducible(plan_file, tmp_path):
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        for verb in PIPELINE:
            result = invoke(verb, "--config", plan_file, "--out", out)
            assert result.exit_code == 0, f"{verb}: {result.output}"
        outputs.append(out)
    first, second = outputs
    assert (first / "eval" / "summary.csv").read_bytes() == (second / "eval" / "summary.csv").read_bytes()
    assert (first / "generate" / "clinical" / "lora" / "hypotheses.jsonl").read_bytes() == (
        second / "generate" / "clinical" / "lora" / "hypotheses.jsonl"
    ).read_bytes()


def test_config_path_setting_is_the_config_default(plan_file, tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "CONFIG_PATH", str(tmp_path / "absent.yaml"))
    assert invoke("params", "--out", tmp_path / "out").exit_code == 2

    monkeypatch.setattr(settings, "CONFIG_PATH", str(plan_file))
    result = invoke("params", "--out", tmp_path / "out")
    assert result.exit_code == 0, result.output
    assert set(pd.read_csv(tmp_path / "out" / "params" / "params.csv")["seed"]) == {TINY_PLAN["seed"]}
