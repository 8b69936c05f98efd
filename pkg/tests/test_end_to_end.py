"""End-to-end runs through the command line (slow: fine-tunes the miniature model)"""

import json
import math
import os
import re

import pytest
from click.testing import CliRunner

from fvworkbench.__main__ import cli
from fvworkbench.config import RunConfig
from fvworkbench.store import ReportStore
from fvworkbench.workbench import Workbench

from .conftest import TEST_TRAINING_STEPS, slow

TOY_TOML = "configs/toy.toml"

# a small open post-trained checkpoint, e.g. Qwen/Qwen2.5-0.5B-Instruct
AT_SCALE_MODEL = os.environ.get("FVWORKBENCH_AT_SCALE_MODEL")


def accuracy_by_task(records, regime, label):
    """task_id -> accuracy of the reports in regime with the given label"""
    return {
        r["task_id"]: r["accuracy"]
        for r in records
        if r["setting"]["regime"] == regime and r["setting"]["label"] == label
    }


def mean_lift(records, regime, label):
    baseline = accuracy_by_task(records, regime, "")
    steered = accuracy_by_task(records, regime, label)
    tasks = sorted(set(baseline) & set(steered))
    assert tasks, f"no {label} reports in {regime}"
    return math.fsum(steered[t] - baseline[t] for t in tasks) / len(tasks)


def load(path):
    return json.loads(path.read_text(encoding="utf-8"))


@slow
def test_toy_run(tmp_path):
    """Test the toy run completes, keeps the protocol budgets and the vectors lift accuracy"""
    config = tmp_path / "toy.toml"
    text = open(TOY_TOML, encoding="utf-8").read().replace(
        'output_root = "../fvworkbench_runs/toy"', f'output_root = "{tmp_path / "run"}"'
    )
    config.write_text(f"miniature_training_steps = {TEST_TRAINING_STEPS}\n" + text)

    runner = CliRunner()
    result = runner.invoke(cli, ["run", "--config", str(config), "--max-queries", "30"])
    assert result.exit_code == 0, result.output
    assert "Index page:" in result.output

    run_dir = tmp_path / "run"
    index_pages = list((run_dir / "analysis").glob("*/index.html"))
    assert len(index_pages) == 1
    assert (index_pages[0].parent / "accuracy.csv").is_file()

    # protocol budgets, read back from the artifacts
    model_dir = run_dir / "miniature-tuned"
    summaries = sorted(model_dir.glob("train/*/*.summary.json"))
    assert summaries
    for path in summaries:
        assert load(path)["prompt_count"] == 100
    for path in model_dir.glob("train/*/*.cie.json"):
        assert load(path)["prompts_used"] == 25
    assert load(model_dir / "heads" / "demo.json")["size"] == 4

    records = ReportStore(model_dir / "reports.jsonl", "", force=True).records()
    for r in records:
        for entry in r["setting"]["fv_plan"]:
            if r["setting"]["label"] in ("demo", "instruction"):
                assert entry["layer"] == 1
        if r["setting_key"] == "zero_shot|no_fv":
            assert r["n_queries"] == 18

    assert mean_lift(records, "shuffled_10_shot", "demo") >= 0.10
    assert mean_lift(records, "zero_shot", "instruction:mean") > 0

    # the steering target got the source model's vectors
    steered = ReportStore(run_dir / "miniature" / "reports.jsonl", "", force=True).records()
    assert steered
    assert {r["source_model_id"] for r in steered} == {"miniature-tuned"}

    # a second run reuses every completed cell
    again = runner.invoke(cli, ["run", "--config", str(config), "--max-queries", "30"])
    assert again.exit_code == 0, again.output
    reused = re.search(r"reused (\d+) completed cells", again.output)
    assert reused and int(reused.group(1)) > 0


@pytest.mark.skipif(
    not (AT_SCALE_MODEL and os.environ.get("OPENAI_API_KEY")),
    reason="set FVWORKBENCH_AT_SCALE_MODEL and OPENAI_API_KEY to run the at-scale check",
)
def test_at_scale_instruction_vector(tmp_path):
    """Test the instruction vector of a post-trained checkpoint lifts zero-shot accuracy"""
    config = RunConfig(
        model_ids=[AT_SCALE_MODEL],
        task_paths=["bundled"],
        regimes=["zero_shot"],
        baseline_methods=["other_task"],
        output_root=str(tmp_path),
        max_eval_queries=100,
    ).with_overrides(generator={"kind": "openai", "model": os.environ.get("FVWORKBENCH_GENERATOR_MODEL", "gpt-4o-mini")})
    workbench = Workbench(config)
    workbench.generate_instructions()
    workbench.train()
    workbench.select_heads()
    workbench.evaluate()

    records = workbench.store(AT_SCALE_MODEL).records()
    baseline = accuracy_by_task(records, "zero_shot", "")
    steered = accuracy_by_task(records, "zero_shot", "instruction:mean")
    tasks = sorted(set(baseline) & set(steered))
    assert len(tasks) >= 3
    assert mean_lift(records, "zero_shot", "instruction:mean") > 0
