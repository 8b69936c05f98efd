"""Test the model gateway on the untrained miniature model"""

import json

import numpy as np
import pytest
import torch
from transformer_lens.utils import get_act_name

from fvworkbench.errors import (
    ContextLengthError,
    InterventionPlanError,
    TokenizationError,
    VocabularyError,
)
from fvworkbench.heads import HeadId
from fvworkbench.model_gateway import InterventionPlan
from fvworkbench.task_corpus import render_demo_prompt, render_instruction_prompt

from .conftest import GOLDEN_DIR, UPDATE_GOLDENS
from .oracles import straight_line_log_probs

SCORED_TEXT = "Q: k01\nA: v02\n\nQ: k03\nA: v04"


@pytest.fixture(scope="module")
def prompt(toy_tasks):
    return render_demo_prompt(toy_tasks["toy_alpha"], [1, 2, 3], 0)


def test_profile(miniature):
    """Test the profile of the miniature model"""
    profile = miniature.profile
    assert profile.n_layers == 2
    assert profile.n_heads_per_layer == 4
    assert profile.d_model == 32
    assert profile.total_heads == 8
    assert profile.heads()[0] == HeadId(0, 0)
    assert profile.has_head(HeadId(1, 3))
    assert not profile.has_head(HeadId(2, 0))
    assert set(range(4)) <= profile.added_vocabulary_ids


def test_tokenize_prepends_bos(miniature):
    """Test tokenize starts with BOS and text_ids does not"""
    ids = miniature.text_ids("k01 v02")
    assert len(ids) == 2
    assert miniature.tokenize("k01 v02") == [miniature.bos_id] + ids
    assert miniature.decode(ids) == "k01 v02"


def test_prompt_tokens_continuation(miniature, prompt):
    """Test the target's first token follows the prompt tokens"""
    tokens = miniature.prompt_tokens(prompt)
    full = miniature.tokenize(prompt.rendered_text + prompt.target)
    assert full[: len(tokens)] == tokens
    assert miniature.first_token_of(prompt.target, prompt) == full[len(tokens)]
    assert miniature.decode([full[len(tokens)]]) == prompt.target


def test_first_token_of_empty_target(miniature, prompt):
    """Test an empty target has no first token"""
    with pytest.raises(TokenizationError):
        miniature.first_token_of("", prompt)


def test_score_sequence(miniature):
    """Test per-token log-probabilities match the model's logits"""
    ids = miniature.text_ids("Q: k01\nA: v02")
    scores = miniature.score_sequence(ids)
    assert len(scores) == len(ids)
    assert all(s <= 0 for s in scores)

    tokens = [miniature.bos_id] + ids
    with torch.no_grad():
        logits = miniature.model(torch.tensor([tokens]))[0].double()
    expected = torch.log_softmax(logits, dim=-1)[range(len(ids)), ids].numpy()
    np.testing.assert_allclose(scores, expected, atol=1e-10)

    assert miniature.score_sequence([miniature.bos_id] + ids) == scores
    text_ids, total = miniature.score_text("Q: k01\nA: v02")
    assert text_ids == ids
    assert total == pytest.approx(sum(scores))


def test_score_sequence_straight_line(miniature):
    """Test per-token log-probabilities against a forward pass recomputed from the weights"""
    ids = miniature.text_ids(SCORED_TEXT)
    scores = miniature.score_sequence(ids)
    log_probs = straight_line_log_probs(miniature.model, [miniature.bos_id] + ids)
    np.testing.assert_allclose(scores, log_probs[range(len(ids)), ids], atol=1e-9)


def test_score_sequence_golden(miniature):
    """Test the seeded miniature model scores the fixed text as committed"""
    ids = miniature.text_ids(SCORED_TEXT)
    scores = miniature.score_sequence(ids)
    path = GOLDEN_DIR / "miniature_score_sequence.json"
    if UPDATE_GOLDENS:
        log_probs = straight_line_log_probs(miniature.model, [miniature.bos_id] + ids)
        np.testing.assert_allclose(scores, log_probs[range(len(ids)), ids], atol=1e-9)
        path.write_text(json.dumps({"text": SCORED_TEXT, "ids": ids, "scores": list(scores)}, indent=2) + "\n")
    if not path.is_file():
        pytest.skip("no committed golden scores; run `doit update_goldens`")
    golden = json.loads(path.read_text())
    assert golden["ids"] == ids
    np.testing.assert_allclose(scores, golden["scores"], atol=1e-9)


def test_score_sequence_errors(miniature):
    """Test scoring empty sequences or unknown ids"""
    with pytest.raises(TokenizationError):
        miniature.score_sequence([])
    with pytest.raises(VocabularyError):
        miniature.score_sequence([miniature.profile.vocab_size + 5])


def test_context_length(miniature, toy_tasks):
    """Test prompts longer than the context raise ContextLengthError"""
    prompt = render_instruction_prompt("k00 " * 300, "k01", "v01")
    with pytest.raises(ContextLengthError) as excinfo:
        miniature.prompt_tokens(prompt)
    assert excinfo.value.n_ctx == 256


def test_head_outputs_sum_to_attention_output(miniature, prompt):
    """Test captured head outputs plus b_O reproduce each layer's attention output"""
    capture = miniature.capture_head_outputs(prompt)
    tokens = torch.tensor([miniature.prompt_tokens(prompt)])
    with torch.no_grad():
        _, cache = miniature.model.run_with_cache(tokens)
    for layer in range(miniature.profile.n_layers):
        total = sum(capture.vector(HeadId(layer, h)) for h in range(miniature.profile.n_heads_per_layer))
        total = total + miniature.model.blocks[layer].attn.b_O.detach().double().numpy()
        expected = cache[get_act_name("attn_out", layer)][0, -1].double().numpy()
        np.testing.assert_allclose(total, expected, atol=1e-10)

    np.testing.assert_allclose(capture.distribution.sum(), 1.0)
    np.testing.assert_allclose(capture.distribution, miniature.run_with_interventions(prompt), atol=1e-12)


def test_patch_with_own_output_is_identity(miniature, prompt):
    """Test patching a head with its own clean output changes nothing"""
    capture = miniature.capture_head_outputs(prompt)
    head = HeadId(1, 2)
    plan = InterventionPlan(head_patches=[(head, capture.vector(head))])
    np.testing.assert_allclose(
        miniature.run_with_interventions(prompt, plan), capture.distribution, atol=1e-10
    )


def test_patch_with_own_output_is_identity_fp32(miniature_fp32, prompt):
    """Test the self-patch identity also holds in 32-bit"""
    capture = miniature_fp32.capture_head_outputs(prompt)
    plan = InterventionPlan(head_patches=[(head, capture.vector(head)) for head in (HeadId(0, 1), HeadId(1, 3))])
    np.testing.assert_allclose(
        miniature_fp32.run_with_interventions(prompt, plan), capture.distribution, atol=1e-5
    )


def test_patch_changes_distribution(miniature, prompt):
    """Test patching a head with a different vector changes the output"""
    plan = InterventionPlan(head_patches=[(HeadId(0, 1), np.full(32, 5.0))])
    clean = miniature.run_with_interventions(prompt)
    patched = miniature.run_with_interventions(prompt, plan)
    assert not np.allclose(clean, patched)


def test_addition_shifts_hidden_state(miniature, prompt):
    """Test a residual addition after layer l shifts that layer's final hidden state by exactly v"""
    rng = np.random.default_rng(0)
    vector = rng.normal(size=32)
    plan = InterventionPlan(additions=[(0, vector)])
    clean = miniature.inspect_hidden_state(prompt, 0)
    steered = miniature.inspect_hidden_state(prompt, 0, plan)
    np.testing.assert_allclose(steered - clean, vector, atol=1e-10)

    # earlier positions are untouched
    np.testing.assert_allclose(
        miniature.inspect_hidden_state(prompt, 0, plan, position=0),
        miniature.inspect_hidden_state(prompt, 0, position=0),
    )


def test_additions_at_same_layer_sum(miniature, prompt):
    """Test two additions at one layer act like their sum"""
    a = np.linspace(-1, 1, 32)
    b = np.linspace(2, 0, 32)
    both = InterventionPlan(additions=[(1, a), (1, b)])
    summed = InterventionPlan(additions=[(1, a + b)])
    np.testing.assert_allclose(
        miniature.run_with_interventions(prompt, both),
        miniature.run_with_interventions(prompt, summed),
        atol=1e-12,
    )


def test_zero_addition_is_identity(miniature, prompt):
    """Test adding a zero vector changes nothing"""
    plan = InterventionPlan(additions=[(0, np.zeros(32))])
    np.testing.assert_allclose(
        miniature.run_with_interventions(prompt, plan), miniature.run_with_interventions(prompt)
    )


def test_batch_distributions_match_single(miniature, toy_tasks):
    """Test batched distributions equal one-at-a-time distributions, in input order"""
    task = toy_tasks["toy_beta"]
    prompts = [
        render_demo_prompt(task, [1, 2], 0),
        render_demo_prompt(task, [4], 3),
        render_demo_prompt(task, [5, 6], 7),
    ]
    plan = InterventionPlan(additions=[(0, np.full(32, 0.5))])
    batched = miniature.batch_distributions(prompts, plan, batch_size=2)
    for prompt, dist in zip(prompts, batched):
        np.testing.assert_allclose(dist, miniature.run_with_interventions(prompt, plan), atol=1e-10)


def test_predict_and_is_success(miniature, prompt):
    """Test is_success compares the argmax with the target's first token"""
    predicted = miniature.predict(prompt)
    assert predicted == int(np.argmax(miniature.run_with_interventions(prompt)))
    assert miniature.is_success(prompt) == (predicted == miniature.first_token_of(prompt.target, prompt))


@pytest.mark.parametrize(
    "plan",
    [
        InterventionPlan(additions=[(2, np.zeros(32))]),
        InterventionPlan(additions=[(-1, np.zeros(32))]),
        InterventionPlan(additions=[(0, np.zeros(31))]),
        InterventionPlan(head_patches=[(HeadId(0, 4), np.zeros(32))]),
        InterventionPlan(head_patches=[(HeadId(0, 0), np.zeros(32)), (HeadId(0, 0), np.ones(32))]),
        InterventionPlan(head_patches=[(HeadId(1, 0), np.zeros(16))]),
    ],
)
def test_invalid_plans(miniature, prompt, plan):
    """Test plans that do not fit the model are rejected"""
    with pytest.raises(InterventionPlanError):
        miniature.run_with_interventions(prompt, plan)


def test_hidden_state_requires_debug(miniature_fp32, prompt):
    """Test the hidden-state inspection is only available in debug gateways"""
    with pytest.raises(RuntimeError):
        miniature_fp32.inspect_hidden_state(prompt, 0)
