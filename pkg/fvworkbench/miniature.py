"""The miniature transformer used as a numeric test substrate.

A seeded 2-layer, 4-head transformer (d_model 32) with a word-level toy
vocabulary built from the bundled data. The untrained model ("miniature")
backs the numeric checks; "miniature-tuned" is the same initialization
fine-tuned on three synthetic key-value tasks so that task presentation
matters, which gives an end-to-end toy version of the full pipeline.
"""

import json
import logging
import pathlib
import typing as t

import numpy as np
import torch
from tokenizers import Tokenizer
from tokenizers.models import WordLevel
from tokenizers.pre_tokenizers import Whitespace
from tqdm import tqdm
from transformer_lens import HookedTransformer, HookedTransformerConfig
from transformers import PreTrainedTokenizerFast

from .constants import (
    MINIATURE_D_MODEL,
    MINIATURE_HEADS,
    MINIATURE_LAYERS,
    MINIATURE_MODEL_ID,
    MINIATURE_N_CTX,
    MINIATURE_TRAINING_STEPS,
    MINIATURE_TUNED_MODEL_ID,
)
from .debug import progress_disabled
from .model_gateway import TORCH_DTYPES, ModelGateway
from .task_corpus import (
    TaskDataset,
    TaskCategory,
    render_demo_prompt,
    render_instruction_prompt,
)
from .task_data import load_bundled_tasks, toy_corpus_path, toy_instruction_fixture_path

__all__ = [
    "SPECIAL_TOKENS",
    "TOY_KEYS",
    "TOY_TASK_IDS",
    "TOY_VALUES",
    "build_miniature",
    "build_toy_tokenizer",
    "is_miniature_id",
    "miniature_gateway",
    "toy_instructions",
    "toy_tasks",
    "train_miniature",
]

SPECIAL_TOKENS = ["<bos>", "<eos>", "<pad>", "<unk>"]

TOY_KEYS = [f"k{i:02d}" for i in range(60)]
TOY_VALUES = [f"v{i:02d}" for i in range(20)]
TOY_TASK_IDS = ["toy_alpha", "toy_beta", "toy_gamma"]
TOY_TASK_SEED = 1729

D_MLP = 256


def is_miniature_id(model_id: str) -> bool:
    return model_id in (MINIATURE_MODEL_ID, MINIATURE_TUNED_MODEL_ID)


def toy_tasks() -> t.Dict[str, TaskDataset]:
    """Three key-value tasks over the same keys and values with different mappings"""
    tasks = {}
    for i, task_id in enumerate(TOY_TASK_IDS):
        rng = np.random.default_rng([TOY_TASK_SEED, i])
        values = rng.integers(0, len(TOY_VALUES), size=len(TOY_KEYS))
        pairs = tuple((key, TOY_VALUES[v]) for key, v in zip(TOY_KEYS, values))
        tasks[task_id] = TaskDataset(task_id, pairs, TaskCategory.OPEN_GENERATION)
    return tasks


def toy_instructions() -> t.Dict[t.Tuple[str, str], t.List[str]]:
    """Instructions recorded for the toy tasks, keyed by (task_id, regime)"""
    from .instruction_forge import parse_generation

    data = json.loads(toy_instruction_fixture_path().read_text(encoding="utf-8"))
    instructions: t.Dict[t.Tuple[str, str], t.List[str]] = {}
    for record in data["records"]:
        texts, _ = parse_generation(record["response"])
        instructions.setdefault((record["task_id"], record["regime"]), []).extend(texts)
    return instructions


def _vocabulary_texts() -> t.Iterator[str]:
    yield "Q: A:"
    for task in list(load_bundled_tasks().values()) + list(toy_tasks().values()):
        for x, y in task.pairs:
            yield x
            yield y
    data = json.loads(toy_instruction_fixture_path().read_text(encoding="utf-8"))
    for record in data["records"]:
        yield record["response"]
    yield from toy_corpus_path().read_text(encoding="utf-8").splitlines()


def build_toy_tokenizer() -> PreTrainedTokenizerFast:
    """Word-level tokenizer over every word in the bundled data

    The four special tokens take ids 0-3 and form the added vocabulary.
    """
    pre_tokenizer = Whitespace()
    words = set()
    for text in _vocabulary_texts():
        words.update(word for word, _ in pre_tokenizer.pre_tokenize_str(text))
    words.difference_update(SPECIAL_TOKENS)
    vocab = {token: i for i, token in enumerate(SPECIAL_TOKENS + sorted(words))}

    backend = Tokenizer(WordLevel(vocab=vocab, unk_token="<unk>"))
    backend.pre_tokenizer = pre_tokenizer
    return PreTrainedTokenizerFast(
        tokenizer_object=backend,
        bos_token="<bos>",
        eos_token="<eos>",
        pad_token="<pad>",
        unk_token="<unk>",
    )


def build_miniature(
    vocab_size: int,
    seed: int = 0,
    dtype: str = "float64",
    device: t.Optional[str] = None,
) -> HookedTransformer:
    """Seeded random 2-layer transformer"""
    cfg = HookedTransformerConfig(
        n_layers=MINIATURE_LAYERS,
        d_model=MINIATURE_D_MODEL,
        n_heads=MINIATURE_HEADS,
        d_head=MINIATURE_D_MODEL // MINIATURE_HEADS,
        d_mlp=D_MLP,
        d_vocab=vocab_size,
        n_ctx=MINIATURE_N_CTX,
        act_fn="gelu",
        normalization_type="LN",
        seed=seed,
        device=device or "cpu",
        dtype=TORCH_DTYPES[dtype],
    )
    return HookedTransformer(cfg)


def _training_example(
    tokenizer,
    tasks: t.List[TaskDataset],
    instructions: t.Dict[t.Tuple[str, str], t.List[str]],
    rng: np.random.Generator,
    max_shots: int,
) -> t.Tuple[t.List[int], int]:
    task = tasks[rng.integers(len(tasks))]
    query = int(rng.integers(len(task)))
    if rng.random() < 0.5:
        k = int(rng.integers(1, max_shots + 1))
        others = [i for i in range(len(task)) if i != query]
        context = [int(i) for i in rng.choice(others, size=k, replace=False)]
        prompt = render_demo_prompt(task, context, query)
    else:
        regime = "short" if rng.random() < 0.5 else "long"
        texts = instructions[(task.task_id, regime)]
        instruction = texts[rng.integers(len(texts))]
        prompt = render_instruction_prompt(instruction, task.pairs[query][0], task.pairs[query][1])
    tokens = [tokenizer.bos_token_id] + tokenizer.encode(prompt.rendered_text, add_special_tokens=False)
    target = tokenizer.encode(prompt.target, add_special_tokens=False)[0]
    return tokens, target


def train_miniature(
    model: HookedTransformer,
    tokenizer,
    steps: int = MINIATURE_TRAINING_STEPS,
    seed: int = 0,
    batch_size: int = 32,
    lr: float = 3e-3,
    max_shots: int = 10,
) -> t.List[float]:
    """Fine-tune the miniature model on demonstration and instruction prompts of the toy tasks

    Returns:
        the training loss at every step
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, TOY_TASK_SEED])
    tasks = list(toy_tasks().values())
    instructions = toy_instructions()
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    device = model.cfg.device
    losses = []

    model.train()
    for _ in tqdm(range(steps), desc="train miniature", disable=progress_disabled()):
        examples = [
            _training_example(tokenizer, tasks, instructions, rng, max_shots)
            for _ in range(batch_size)
        ]
        width = max(len(tokens) for tokens, _ in examples)
        # right padding leaves every example's final position unaffected
        batch = torch.full(
            (batch_size, width), tokenizer.pad_token_id, dtype=torch.long, device=device
        )
        for row, (tokens, _) in enumerate(examples):
            batch[row, : len(tokens)] = torch.tensor(tokens, dtype=torch.long)
        last = torch.tensor([len(tokens) - 1 for tokens, _ in examples], device=device)
        targets = torch.tensor([target for _, target in examples], device=device)

        logits = model(batch)
        final = logits[torch.arange(batch_size, device=device), last]
        loss = torch.nn.functional.cross_entropy(final, targets)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
    model.eval()
    logging.debug(f"miniature training: first loss {losses[0]:.4f}, last loss {losses[-1]:.4f}")
    return losses


def miniature_gateway(
    model_id: str = MINIATURE_MODEL_ID,
    seed: int = 0,
    dtype: str = "float64",
    device: t.Optional[str] = None,
    debug: t.Optional[bool] = None,
    training_steps: int = MINIATURE_TRAINING_STEPS,
    checkpoint_dir: t.Optional[t.Union[str, pathlib.Path]] = None,
) -> ModelGateway:
    """Gateway over the miniature model

    Args:
        model_id: "miniature" (seeded random weights) or "miniature-tuned"
        seed: weight initialization and training seed; the pair shares it
        dtype: "float32" or "float64"
        device: torch device, default cpu
        debug: enable the hidden-state inspection
        training_steps: fine-tuning steps for "miniature-tuned"
        checkpoint_dir: if given, the tuned weights are cached here and reused

    Returns:
        ModelGateway
    """
    if not is_miniature_id(model_id):
        raise ValueError(f"not a miniature model id: {model_id}")
    tokenizer = build_toy_tokenizer()
    model = build_miniature(len(tokenizer), seed=seed, dtype=dtype, device=device)

    if model_id == MINIATURE_TUNED_MODEL_ID:
        checkpoint = None
        if checkpoint_dir is not None:
            checkpoint = pathlib.Path(checkpoint_dir) / f"{model_id}.seed{seed}.steps{training_steps}.{dtype}.pt"
        if checkpoint is not None and checkpoint.is_file():
            logging.info(f"loading miniature checkpoint {checkpoint}")
            model.load_state_dict(torch.load(checkpoint, map_location=model.cfg.device))
        else:
            train_miniature(model, tokenizer, steps=training_steps, seed=seed)
            if checkpoint is not None:
                checkpoint.parent.mkdir(parents=True, exist_ok=True)
                torch.save(model.state_dict(), checkpoint)
                logging.info(f"saved miniature checkpoint {checkpoint}")

    return ModelGateway(model, tokenizer, model_id, debug=debug)
