"""Test mean activations, causal scores, head selection and function vectors"""

import numpy as np
import pytest

from fvworkbench.errors import (
    AggregationError,
    CompletenessError,
    HeadSelectionError,
    PromptPreconditionError,
    TaskIneligible,
)
from fvworkbench.fv_engine import (
    ActivationForm,
    ActivationSource,
    ActivationSummary,
    CieCondition,
    CieTensor,
    FunctionVector,
    HeadProvenance,
    HeadSet,
    SelectionMode,
    aggregate_cie,
    build_fv,
    collect_successful_prompts,
    compute_cie,
    compute_cie_tensor,
    compute_mean_activations,
    is_eligible,
    select_heads,
)
from fvworkbench.heads import HeadId, all_heads
from fvworkbench.task_corpus import demo_prompts, render_demo_prompt, split

from .conftest import FakeGateway, small_task
from .oracles import cie_two_pass, running_mean


def demo_candidates(n: int = 40):
    task = small_task(n)
    spec = split(task, seed=0)
    return list(demo_prompts(task, spec, spec.indices_train, k=3, seed=0))


def cie_tensor(task_id, scores, form=ActivationForm.DEMO, condition=CieCondition.SHUFFLED_DEMO, eligible=True):
    return CieTensor(task_id, form, condition, scores, prompts_used=5, eligible=eligible)


def test_collect_successful_prompts():
    """Test candidates are taken in order until the budget is met"""
    gateway = FakeGateway()
    candidates = demo_candidates()
    prompts, attempts = collect_successful_prompts(candidates, gateway, budget=3, task_id="small")
    assert len(prompts) == 3
    assert all(p.query_index % 2 == 0 for p in prompts)
    assert attempts == candidates.index(prompts[-1]) + 1


def test_collect_successful_prompts_ineligible():
    """Test running out of candidates marks the task ineligible"""
    candidates = demo_candidates()
    with pytest.raises(TaskIneligible) as excinfo:
        collect_successful_prompts(candidates, FakeGateway(), budget=len(candidates), task_id="small")
    assert excinfo.value.required == len(candidates)
    assert excinfo.value.found < len(candidates)

    with pytest.raises(TaskIneligible):
        collect_successful_prompts(candidates, FakeGateway(), budget=5, max_attempts=2)


def test_compute_mean_activations_closed_form():
    """Test per-head means over successful prompts"""
    gateway = FakeGateway()
    prompts, _ = collect_successful_prompts(demo_candidates(), gateway, budget=4)
    summary = compute_mean_activations(prompts, gateway, "small", ActivationForm.DEMO, required=4, seed=7)
    assert summary.prompt_count == 4
    assert summary.model_id == "fake"
    assert summary.seed == 7
    assert set(summary.means) == set(gateway.profile.heads())
    np.testing.assert_allclose(summary.means[HeadId(2, 5)], np.full(6, 26.0))
    assert summary.d_model == 6


def test_compute_mean_activations_matches_streaming_mean(miniature, toy_tasks):
    """Test means on the miniature model agree with a streaming mean of captures"""
    task = toy_tasks["toy_alpha"]
    spec = split(task, seed=0)
    candidates = list(demo_prompts(task, spec, spec.indices_train[:12], k=4, seed=1))
    prompts = [p for p in candidates if miniature.is_success(p)]
    if not prompts:
        pytest.skip("untrained model answers none of the prompts")
    summary = compute_mean_activations(prompts, miniature, task.task_id)
    captures = [miniature.capture_head_outputs(p) for p in prompts]
    for head in miniature.profile.heads():
        np.testing.assert_allclose(summary.means[head], running_mean(c.vector(head) for c in captures), atol=1e-10)


def test_compute_mean_activations_preconditions():
    """Test failed prompts and short prompt lists are rejected"""
    gateway = FakeGateway()
    candidates = demo_candidates()
    failing = [p for p in candidates if p.query_index % 2 == 1][:2]
    with pytest.raises(PromptPreconditionError):
        compute_mean_activations(failing, gateway, "small")
    with pytest.raises(TaskIneligible):
        compute_mean_activations([], gateway, "small")
    passing = [p for p in candidates if p.query_index % 2 == 0][:2]
    with pytest.raises(TaskIneligible):
        compute_mean_activations(passing, gateway, "small", required=3)


def test_compute_cie_matches_two_pass(miniature, toy_tasks):
    """Test batched causal scores agree with a one-prompt-at-a-time computation"""
    task = toy_tasks["toy_beta"]
    spec = split(task, seed=0)
    clean = list(demo_prompts(task, spec, spec.indices_train[:4], k=4, seed=0))
    shuffled = list(demo_prompts(task, spec, spec.indices_train[4:8], k=4, shuffle_labels=True, seed=0))

    # means need not come from successful prompts for the arithmetic to be checked
    captures = [miniature.capture_head_outputs(p) for p in clean]
    summary = ActivationSummary(
        task.task_id,
        ActivationForm.DEMO,
        {h: running_mean(c.vector(h) for c in captures) for h in miniature.profile.heads()},
        len(clean),
        miniature.model_id,
    )
    tensor = compute_cie_tensor(shuffled, summary, miniature, CieCondition.SHUFFLED_DEMO, seed=2)
    assert tensor.prompts_used == 4
    assert tensor.condition == CieCondition.SHUFFLED_DEMO
    assert tensor.form == ActivationForm.DEMO
    assert set(tensor.scores) == set(miniature.profile.heads())
    for head in miniature.profile.heads():
        assert tensor.scores[head] == pytest.approx(cie_two_pass(miniature, shuffled, summary, head), abs=1e-10)
    assert compute_cie(HeadId(1, 1), shuffled[0], summary, miniature) == pytest.approx(
        cie_two_pass(miniature, shuffled[:1], summary, HeadId(1, 1)), abs=1e-10
    )


def test_compute_cie_errors(fake_gateway):
    """Test missing prompts or means"""
    summary = ActivationSummary("small", ActivationForm.DEMO, {HeadId(0, 0): np.zeros(6)}, 1)
    prompt = render_demo_prompt(small_task(5), [1], 0)
    with pytest.raises(PromptPreconditionError):
        compute_cie_tensor([], summary, fake_gateway, CieCondition.SHUFFLED_DEMO)
    with pytest.raises(CompletenessError):
        compute_cie_tensor([prompt], summary, fake_gateway, CieCondition.SHUFFLED_DEMO, heads=[HeadId(0, 1)])
    with pytest.raises(CompletenessError):
        compute_cie(HeadId(3, 3), prompt, summary, fake_gateway)


def test_aggregate_cie_equal_task_weights():
    """Test each task is reduced over its cells before tasks are averaged"""
    heads = [HeadId(0, 0), HeadId(0, 1)]
    records = [
        cie_tensor("a", {heads[0]: 1.0, heads[1]: 0.0}, ActivationForm.INSTRUCTION_SHORT, CieCondition.EQUIPROBABLE),
        cie_tensor("a", {heads[0]: 3.0, heads[1]: 0.0}, ActivationForm.INSTRUCTION_LONG, CieCondition.EQUIPROBABLE),
        cie_tensor("a", {heads[0]: 2.0, heads[1]: 0.0}, ActivationForm.INSTRUCTION_SHORT, CieCondition.REAL_TEXT),
        cie_tensor("b", {heads[0]: 0.0, heads[1]: 4.0}, ActivationForm.INSTRUCTION_SHORT, CieCondition.EQUIPROBABLE),
    ]
    aggregate = aggregate_cie(records)
    assert aggregate[heads[0]] == pytest.approx(1.0)
    assert aggregate[heads[1]] == pytest.approx(2.0)


def test_aggregate_cie_eligibility():
    """Test ineligible tasks are left out"""
    head = HeadId(0, 0)
    records = [cie_tensor("a", {head: 1.0}), cie_tensor("b", {head: 5.0}, eligible=False)]
    assert aggregate_cie(records) == {head: 1.0}
    assert aggregate_cie(records, eligibility={"a": False, "b": True}) == {head: 5.0}
    with pytest.raises(AggregationError):
        aggregate_cie(records, eligibility={})
    with pytest.raises(AggregationError):
        aggregate_cie([cie_tensor("a", {head: 1.0}), cie_tensor("b", {HeadId(0, 1): 1.0})])


def test_aggregate_cie_drops_ineligible_cells():
    """Test an instruction length below chance drops its own cells, not the task"""
    head = HeadId(0, 0)
    records = [
        cie_tensor("a", {head: 1.0}, ActivationForm.INSTRUCTION_SHORT, CieCondition.EQUIPROBABLE, eligible=False),
        cie_tensor("a", {head: 3.0}, ActivationForm.INSTRUCTION_LONG, CieCondition.EQUIPROBABLE),
        cie_tensor("b", {head: 5.0}, ActivationForm.INSTRUCTION_SHORT, CieCondition.EQUIPROBABLE),
        cie_tensor("c", {head: 100.0}, ActivationForm.INSTRUCTION_SHORT, CieCondition.EQUIPROBABLE, eligible=False),
    ]
    assert aggregate_cie(records) == {head: pytest.approx(4.0)}
    # a mapping decides for whole tasks
    assert aggregate_cie(records, eligibility={"a": True, "c": True}) == {head: pytest.approx(51.0)}


def test_aggregate_cie_order_independent():
    """Test the aggregate does not depend on record order"""
    rng = np.random.default_rng(0)
    heads = all_heads(2, 3)
    records = [cie_tensor(f"t{i}", {h: float(rng.normal()) for h in heads}) for i in range(5)]
    assert aggregate_cie(records) == aggregate_cie(list(reversed(records)))


def test_select_heads_modes():
    """Test top, least-important and bottom selection with tie-breaking"""
    scores = {
        HeadId(0, 0): 0.5,
        HeadId(0, 1): -0.3,
        HeadId(1, 0): 0.5,
        HeadId(1, 1): 0.01,
        HeadId(2, 0): -0.9,
    }
    top = select_heads(scores, 3, provenance=HeadProvenance.DEMO)
    assert top.heads == [HeadId(0, 0), HeadId(1, 0), HeadId(1, 1)]
    assert top.provenance == HeadProvenance.DEMO
    assert top.size == 3

    least = select_heads(scores, 2, SelectionMode.LEAST_IMPORTANT_ABS)
    assert least.heads == [HeadId(1, 1), HeadId(0, 1)]
    assert least.provenance == HeadProvenance.LEAST_IMPORTANT

    bottom = select_heads(scores, 3, SelectionMode.BOTTOM)
    assert bottom.heads == [HeadId(2, 0), HeadId(0, 1), HeadId(1, 1)]
    assert bottom.provenance == HeadProvenance.BOTTOM

    assert len(select_heads(scores, 0)) == 0
    with pytest.raises(HeadSelectionError):
        select_heads(scores, 6)


def test_select_heads_default_budget():
    """Test the default twenty heads on a model with enough heads"""
    profile = FakeGateway().profile
    scores = {h: float(i) for i, h in enumerate(profile.heads())}
    head_set = select_heads(scores, 20)
    assert len(head_set) == 20
    assert head_set.heads[0] == profile.heads()[-1]


def test_head_set_validation():
    """Test head sets refuse duplicates and inconsistent sizes"""
    with pytest.raises(HeadSelectionError):
        HeadSet([HeadId(0, 0), HeadId(0, 0)])
    with pytest.raises(HeadSelectionError):
        HeadSet([HeadId(0, 0)], size=2)
    head_set = HeadSet([(1, 2), (0, 3)], HeadProvenance.INSTRUCTION)
    assert head_set.heads == [HeadId(1, 2), HeadId(0, 3)]
    assert HeadSet.fromdict(head_set.asdict()).heads == head_set.heads


def test_build_fv_sum_and_provenance():
    """Test the vector is the sum of the head means and records where it came from"""
    means = {h: np.full(4, float(h.layer * 10 + h.head)) for h in all_heads(2, 2)}
    summary = ActivationSummary("t", ActivationForm.INSTRUCTION_LONG, means, 20, "m")
    head_set = HeadSet([HeadId(1, 1), HeadId(0, 1)], HeadProvenance.DEMO)
    fv = build_fv(head_set, summary, n_layers=2)
    np.testing.assert_allclose(fv.vector, np.full(4, 12.0))
    assert fv.activation_source == ActivationSource.INSTRUCTION
    assert fv.activation_form == ActivationForm.INSTRUCTION_LONG
    assert fv.model_id == "m"
    assert fv.is_heterogeneous
    assert not build_fv(HeadSet([HeadId(0, 0)], HeadProvenance.INSTRUCTION), summary).is_heterogeneous

    restored = FunctionVector.fromdict(fv.asdict())
    np.testing.assert_array_equal(restored.vector, fv.vector)
    assert restored.head_set.heads == fv.head_set.heads
    assert restored.n_layers == 2

    with pytest.raises(CompletenessError):
        build_fv(HeadSet([HeadId(5, 5)]), summary)


def test_build_fv_linear_over_partitions():
    """Test the vector of a head set is the sum of the vectors of any partition of it"""
    rng = np.random.default_rng(0)
    heads = all_heads(2, 4)
    means = {h: rng.normal(size=8) for h in heads}
    summary = ActivationSummary("t", ActivationForm.DEMO, means, 10, "m")
    full = build_fv(HeadSet(heads), summary).vector
    for _ in range(100):
        mask = rng.random(len(heads)) < 0.5
        left = HeadSet([h for h, m in zip(heads, mask) if m])
        right = HeadSet([h for h, m in zip(heads, mask) if not m])
        parts = build_fv(left, summary).vector + build_fv(right, summary).vector
        np.testing.assert_allclose(parts, full, rtol=0, atol=1e-12)


def test_build_fv_empty_head_set():
    """Test an empty head set gives the zero vector"""
    means = {HeadId(0, 0): np.ones(3)}
    fv = build_fv(HeadSet([]), ActivationSummary("t", ActivationForm.DEMO, means, 1))
    np.testing.assert_array_equal(fv.vector, np.zeros(3))


def test_summary_and_tensor_asdict():
    """Test summaries and causal score tensors survive conversion to dicts"""
    means = {h: np.arange(3, dtype=np.float64) + h.head for h in all_heads(1, 2)}
    summary = ActivationSummary("t", ActivationForm.DEMO, means, 3, "m", "hash", 4)
    restored = ActivationSummary.fromdict(summary.asdict())
    assert restored.prompt_hash == "hash"
    for head in means:
        np.testing.assert_array_equal(restored.means[head], means[head])

    tensor = cie_tensor("t", {HeadId(0, 0): 0.25, HeadId(0, 1): -0.5})
    assert CieTensor.fromdict(tensor.asdict()) == tensor


def test_is_eligible():
    """Test a task must beat chance"""
    assert is_eligible(0.6, 0.5)
    assert not is_eligible(0.5, 0.5)
