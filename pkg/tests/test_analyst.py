"""Test head overlap, similarity curves, causal score tables and the static report"""

import shutil

import numpy as np
import pandas as pd
import pytest

from fvworkbench.analyst import (
    Pairing,
    SimilarityCurve,
    average_curves,
    cie_tables,
    condition_agreement,
    cosine,
    emit_tables_and_plots,
    head_overlap,
    per_task_scores,
    shared_head_similarity,
)
from fvworkbench.errors import ArtifactMismatchError, CompletenessError, HeadSelectionError
from fvworkbench.fv_engine import (
    ActivationForm,
    ActivationSummary,
    CieCondition,
    CieTensor,
    HeadProvenance,
    HeadSet,
)
from fvworkbench.heads import HeadId, all_heads

from .conftest import GOLDEN_DIR, UPDATE_GOLDENS

HEADS = all_heads(3, 2)

REPORTS = [
    {
        "model_id": "m",
        "task_id": task_id,
        "setting_key": key,
        "accuracy": accuracy,
        "sem": 0.01,
        "n_queries": 10,
        "per_layer_curve": {"0": 0.1, "1": 0.4} if key.endswith("demo") else None,
    }
    for task_id, key, accuracy in [
        ("t1", "zero_shot|no_fv", 0.1),
        ("t2", "zero_shot|no_fv", 0.3),
        ("t1", "zero_shot|m:t1:demo/demo@1|demo", 0.5),
        ("t2", "zero_shot|m:t2:demo/demo@1|demo", 0.7),
    ]
]


def summary(form, values, model_id="m"):
    return ActivationSummary("t", form, {h: np.asarray(values[h], dtype=np.float64) for h in values}, 5, model_id)


def test_head_overlap_partition():
    """Test the three partitions cover both sets without overlap"""
    demo = HeadSet([HeadId(0, 0), HeadId(1, 0), HeadId(2, 1)], HeadProvenance.DEMO)
    instruction = HeadSet([HeadId(2, 1), HeadId(0, 1), HeadId(1, 1)], HeadProvenance.INSTRUCTION)
    overlap = head_overlap(demo, instruction, "m")
    assert overlap.shared.heads == [HeadId(2, 1)]
    assert overlap.demo_only.heads == [HeadId(0, 0), HeadId(1, 0)]
    assert overlap.instruction_only.heads == [HeadId(0, 1), HeadId(1, 1)]
    assert overlap.mean_layer == {"demo_only": 0.5, "instruction_only": 0.5, "shared": 2.0}
    assert overlap.shared.provenance == HeadProvenance.SHARED_ANALYSIS
    assert overlap.asdict()["shared"]["heads"] == ["2.1"]

    disjoint = head_overlap(HeadSet([HeadId(0, 0)]), HeadSet([HeadId(0, 1)]))
    assert disjoint.mean_layer["shared"] is None

    with pytest.raises(HeadSelectionError):
        head_overlap(demo, HeadSet([HeadId(0, 0)]))


def test_cosine():
    """Test cosine similarity including zero vectors"""
    assert cosine(np.array([1.0, 0.0]), np.array([2.0, 0.0])) == pytest.approx(1.0)
    assert cosine(np.array([1.0, 0.0]), np.array([0.0, 3.0])) == pytest.approx(0.0)
    assert cosine(np.array([1.0, 1.0]), np.array([-1.0, -1.0])) == pytest.approx(-1.0)
    assert cosine(np.zeros(2), np.ones(2)) == 0.0


def test_shared_head_similarity():
    """Test per-layer mean cosine over the shared heads for every pairing"""
    base = {h: [1.0, 0.0] for h in HEADS}
    other = dict(base)
    other[HeadId(1, 0)] = [0.0, 1.0]
    summaries = {
        ActivationForm.DEMO: summary(ActivationForm.DEMO, base),
        ActivationForm.INSTRUCTION_SHORT: summary(ActivationForm.INSTRUCTION_SHORT, other),
        ActivationForm.INSTRUCTION_LONG: summary(ActivationForm.INSTRUCTION_LONG, base),
    }
    shared = HeadSet([HeadId(1, 0), HeadId(1, 1), HeadId(2, 0)])
    curves = {c.pairing: c for c in shared_head_similarity(summaries, shared)}
    assert set(curves) == set(Pairing)
    assert curves[Pairing.DEMO_VS_SHORT].points == [(1, pytest.approx(0.5)), (2, pytest.approx(1.0))]
    assert curves[Pairing.DEMO_VS_LONG].points == [(1, pytest.approx(1.0)), (2, pytest.approx(1.0))]
    assert curves[Pairing.DEMO_VS_SHORT].model_id == "m"


def test_shared_head_similarity_errors():
    """Test mixed models and missing forms are refused"""
    base = {h: [1.0, 0.0] for h in HEADS}
    shared = HeadSet([HeadId(0, 0)])
    with pytest.raises(ArtifactMismatchError):
        shared_head_similarity(
            {
                ActivationForm.DEMO: summary(ActivationForm.DEMO, base, "a"),
                ActivationForm.INSTRUCTION_SHORT: summary(ActivationForm.INSTRUCTION_SHORT, base, "b"),
            },
            shared,
        )
    with pytest.raises(CompletenessError):
        shared_head_similarity({ActivationForm.DEMO: summary(ActivationForm.DEMO, base)}, shared)


def test_average_curves():
    """Test curves of the same model and pairing are averaged layer by layer"""
    curves = [
        SimilarityCurve("m", Pairing.DEMO_VS_LONG, [(0, 0.2), (1, 0.4)]),
        SimilarityCurve("m", Pairing.DEMO_VS_LONG, [(1, 0.8)]),
        SimilarityCurve("m", Pairing.SHORT_VS_LONG, [(0, 1.0)]),
    ]
    averaged = average_curves(curves)
    assert [(c.pairing, c.points) for c in averaged] == [
        (Pairing.DEMO_VS_LONG, [(0, pytest.approx(0.2)), (1, pytest.approx(0.6))]),
        (Pairing.SHORT_VS_LONG, [(0, pytest.approx(1.0))]),
    ]


def test_condition_agreement():
    """Test pairwise intersection sizes of per-condition head sets"""
    sets = {
        "equiprobable": HeadSet([HeadId(0, 0), HeadId(0, 1)]),
        "real_text": HeadSet([HeadId(0, 1), HeadId(1, 1)]),
        "other_task": HeadSet([HeadId(0, 0), HeadId(0, 1)]),
    }
    assert condition_agreement(sets) == {
        ("equiprobable", "other_task"): 2,
        ("equiprobable", "real_text"): 1,
        ("other_task", "real_text"): 1,
    }


def test_cie_tables():
    """Test both readings of the causal score tables"""
    records = [
        CieTensor("t1", ActivationForm.DEMO, CieCondition.SHUFFLED_DEMO, {h: float(h.layer) for h in HEADS}, 5),
        CieTensor("t2", ActivationForm.DEMO, CieCondition.SHUFFLED_DEMO, {h: float(h.head) for h in HEADS}, 5),
        CieTensor("t3", ActivationForm.DEMO, CieCondition.SHUFFLED_DEMO, {h: 9.0 for h in HEADS}, 5, eligible=False),
    ]
    scores = {"demo": per_task_scores(records)}
    assert set(scores["demo"]) == {"t1", "t2"}

    head_sets = {"demo": HeadSet([HeadId(2, 1), HeadId(2, 0)])}
    top, per_head = cie_tables(scores, head_sets)
    row = top.iloc[0]
    assert row["head_set"] == "demo"
    assert row["n_tasks"] == 2
    # t1 mean over the set is 2.0, t2 is 0.5
    assert row["mean_cie"] == pytest.approx(1.25)
    assert row["sem"] == pytest.approx(np.std([2.0, 0.5], ddof=1) / np.sqrt(2))
    assert list(per_head["head"]) == ["2.0", "2.1"]
    assert list(per_head["cie_demo"]) == pytest.approx([1.0, 1.5])


def emit_fixture_report(out_dir):
    """Write the report of the fixed fixture inputs the golden tables come from"""
    overlap = head_overlap(HeadSet([HeadId(0, 0), HeadId(1, 0)]), HeadSet([HeadId(1, 0), HeadId(2, 0)]), "m")
    similarity = [SimilarityCurve("m", Pairing.DEMO_VS_SHORT, [(1, 0.5)])]
    extra = {"optimal_layers": pd.DataFrame([{"model_id": "m", "optimal_layer": 1}])}
    return emit_tables_and_plots(
        out_dir,
        "abcdef0123456789",
        REPORTS,
        [overlap],
        similarity,
        agreement={"m": {("a", "b"): 3}},
        extra_tables=extra,
    )


def test_emit_tables_and_plots(tmp_path):
    """Test the report directory holds every table, figure and the index page"""
    written = emit_fixture_report(tmp_path)
    out = tmp_path / "abcdef012345"
    assert written[-1] == out / "index.html"
    names = {p.name for p in written}
    for name in (
        "accuracy.csv",
        "accuracy_summary.csv",
        "accuracy.svg",
        "layer_curves.csv",
        "head_overlap.csv",
        "shared_head_similarity.svg",
        "condition_agreement.csv",
        "optimal_layers.csv",
    ):
        assert name in names
        assert (out / name).is_file()

    summary_table = pd.read_csv(out / "accuracy_summary.csv")
    assert len(summary_table) == 2
    curves = pd.read_csv(out / "layer_curves.csv")
    assert len(curves) == 4
    index = (out / "index.html").read_text()
    assert "accuracy.csv" in index
    assert "abcdef0123456789" in index


GOLDEN_TABLES = [
    "accuracy.csv",
    "accuracy_summary.csv",
    "condition_agreement.csv",
    "head_overlap.csv",
    "layer_curves.csv",
    "optimal_layers.csv",
    "shared_head_similarity.csv",
]


@pytest.mark.parametrize("name", GOLDEN_TABLES)
def test_emit_tables_match_goldens(tmp_path, name):
    """Test each table of the fixture report is byte-identical to its committed golden"""
    emit_fixture_report(tmp_path)
    table = tmp_path / "abcdef012345" / name
    golden = GOLDEN_DIR / "analysis" / name
    if UPDATE_GOLDENS:
        shutil.copyfile(table, golden)
    assert table.read_bytes() == golden.read_bytes()


def test_emit_tables_and_plots_deterministic(tmp_path):
    """Test the same inputs give byte-identical files"""
    first = emit_tables_and_plots(tmp_path / "a", "0123456789abcdef", REPORTS)
    second = emit_tables_and_plots(tmp_path / "b", "0123456789abcdef", REPORTS)
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()


def test_emit_tables_and_plots_empty(tmp_path):
    """Test an empty run still produces the report skeleton"""
    written = emit_tables_and_plots(tmp_path, "feedfacefeedface")
    assert written[-1].name == "index.html"
    assert pd.read_csv(tmp_path / "feedfacefeed" / "accuracy.csv").empty
