"""Test the miniature model, its toy vocabulary and the toy tasks"""

import numpy as np
import pytest

from fvworkbench.constants import MINIATURE_MODEL_ID, MINIATURE_TUNED_MODEL_ID
from fvworkbench.evaluator import EvalSetting, Regime, evaluate
from fvworkbench.miniature import (
    SPECIAL_TOKENS,
    TOY_KEYS,
    TOY_TASK_IDS,
    TOY_VALUES,
    build_miniature,
    build_toy_tokenizer,
    is_miniature_id,
    miniature_gateway,
    toy_instructions,
    toy_tasks,
    train_miniature,
)

from .conftest import slow


def test_toy_tokenizer_specials():
    """Test the special tokens take ids 0-3"""
    tokenizer = build_toy_tokenizer()
    assert tokenizer.convert_tokens_to_ids(SPECIAL_TOKENS) == [0, 1, 2, 3]
    assert tokenizer.bos_token_id == 0
    assert tokenizer.pad_token_id == 2


def test_toy_tokenizer_words():
    """Test every toy key and value is a single known token"""
    tokenizer = build_toy_tokenizer()
    unk = tokenizer.unk_token_id
    for word in TOY_KEYS + TOY_VALUES:
        ids = tokenizer.encode(word, add_special_tokens=False)
        assert len(ids) == 1
        assert ids[0] != unk
    assert tokenizer.encode("Q: k00\nA:", add_special_tokens=False) == tokenizer.encode(
        "Q : k00 A :", add_special_tokens=False
    )


def test_toy_tasks():
    """Test the toy tasks are deterministic and map every key"""
    tasks = toy_tasks()
    assert list(tasks) == TOY_TASK_IDS
    for task in tasks.values():
        assert len(task) == 60
        assert [x for x, _ in task.pairs] == TOY_KEYS
        assert {y for _, y in task.pairs} <= set(TOY_VALUES)
    assert toy_tasks() == tasks
    assert tasks["toy_alpha"].pairs != tasks["toy_beta"].pairs


def test_toy_instructions():
    """Test the recorded toy instructions cover both regimes of every toy task"""
    instructions = toy_instructions()
    assert set(instructions) == {(task_id, regime) for task_id in TOY_TASK_IDS for regime in ("short", "long")}
    assert all(texts for texts in instructions.values())


def test_is_miniature_id():
    """Test miniature ids are recognized"""
    assert is_miniature_id(MINIATURE_MODEL_ID)
    assert is_miniature_id(MINIATURE_TUNED_MODEL_ID)
    assert not is_miniature_id("gpt2")
    with pytest.raises(ValueError):
        miniature_gateway("gpt2")


def test_miniature_profile(miniature):
    """Test the miniature gateway reports its shape"""
    profile = miniature.profile
    assert profile.model_id == MINIATURE_MODEL_ID
    assert profile.n_layers == 2
    assert profile.n_heads_per_layer == 4
    assert profile.total_heads == 8
    assert profile.d_model == 32
    assert profile.n_ctx == 256
    assert profile.added_vocabulary_ids == frozenset({0, 1, 2, 3})


def test_build_miniature_seeded():
    """Test the same seed gives the same weights and another seed does not"""
    vocab_size = len(build_toy_tokenizer())
    a = build_miniature(vocab_size, seed=0)
    b = build_miniature(vocab_size, seed=0)
    c = build_miniature(vocab_size, seed=1)
    assert a.cfg.d_vocab == vocab_size
    np.testing.assert_array_equal(a.W_E.detach().numpy(), b.W_E.detach().numpy())
    assert not np.array_equal(a.W_E.detach().numpy(), c.W_E.detach().numpy())


def test_train_miniature_loss_decreases():
    """Test a short fine-tuning run lowers the loss"""
    tokenizer = build_toy_tokenizer()
    model = build_miniature(len(tokenizer), seed=0, dtype="float32")
    losses = train_miniature(model, tokenizer, steps=60, batch_size=16)
    assert len(losses) == 60
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    assert not model.training


@slow
def test_tuned_model_reads_demonstrations(miniature, miniature_tuned, toy_tasks):
    """Test fine-tuning makes the toy tasks answerable from demonstrations"""
    task = toy_tasks["toy_alpha"]
    setting = EvalSetting(Regime.CLEAN_10_SHOT)
    untrained = evaluate(task, setting, miniature, max_queries=18)
    tuned = evaluate(task, setting, miniature_tuned, max_queries=18)
    assert tuned.accuracy > untrained.accuracy
