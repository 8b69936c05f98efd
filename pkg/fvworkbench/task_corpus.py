"""Word-pair task datasets, train/test splits and prompt rendering.

Prompts follow the query templates used throughout:

    Q: <x1>
    A: <y1>

    Q: <xq>
    A:

for demonstrations and

    <instruction>
    Q: <xq>
    A:

for instructions. Line separators are exactly "\\n" inside a Q/A block and
"\\n\\n" between blocks.
"""

import hashlib
import json
import logging
import pathlib
import typing as t
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .constants import (
    ANSWER_CUE,
    BLOCK_SEPARATOR,
    DEFAULT_SHOTS,
    OPEN_GENERATION_CHANCE,
    PAIR_SEPARATOR,
    QUERY_PREFIX,
    TRAIN_FRACTION,
)
from .errors import (
    InsufficientDataError,
    PromptOverlapError,
    PromptPreconditionError,
    TaskFormatError,
)

__all__ = [
    "PromptForm",
    "PromptInstance",
    "SplitSpec",
    "TaskCategory",
    "TaskDataset",
    "demo_prompts",
    "derive_seed",
    "load_task",
    "load_tasks",
    "prompt_set_hash",
    "render_demo_prompt",
    "render_instruction_prompt",
    "render_zero_shot_prompt",
    "sample_context",
    "split",
    "task_from_dict",
]


class TaskCategory(Enum):
    OPEN_GENERATION = "open_generation"
    CLASSIFICATION = "classification"


class PromptForm(Enum):
    DEMO_K_SHOT = "demo_k_shot"
    DEMO_SHUFFLED = "demo_shuffled"
    INSTRUCTION = "instruction"
    ZERO_SHOT = "zero_shot"
    BASELINE_INSTRUCTION = "baseline_instruction"


@dataclass(frozen=True)
class TaskDataset:
    """A supervised word-pair dataset for one task"""

    task_id: str
    pairs: t.Tuple[t.Tuple[str, str], ...]
    category: TaskCategory = TaskCategory.OPEN_GENERATION
    label_set: t.Optional[t.FrozenSet[str]] = None

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def chance(self) -> float:
        """Accuracy a model must beat for the task to count as performed"""
        if self.category == TaskCategory.CLASSIFICATION and self.label_set:
            return 1.0 / len(self.label_set)
        return OPEN_GENERATION_CHANCE


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint train/test index lists for a dataset"""

    seed: int
    train_fraction: float
    indices_train: t.Tuple[int, ...]
    indices_test: t.Tuple[int, ...]


@dataclass(frozen=True)
class PromptInstance:
    """A fully rendered prompt with its query, target answer and provenance"""

    rendered_text: str
    query_input: str
    target: str
    form: PromptForm
    k: int = 0
    source_spec_id: t.Optional[str] = None
    context_indices: t.Tuple[int, ...] = field(default_factory=tuple)
    query_index: t.Optional[int] = None

    def asdict(self) -> t.Dict[str, t.Any]:
        return {
            "rendered_text": self.rendered_text,
            "query_input": self.query_input,
            "target": self.target,
            "form": self.form.value,
            "k": self.k,
            "source_spec_id": self.source_spec_id,
            "context_indices": list(self.context_indices),
            "query_index": self.query_index,
        }

    @classmethod
    def fromdict(cls, data: t.Dict[str, t.Any]) -> "PromptInstance":
        return cls(
            rendered_text=data["rendered_text"],
            query_input=data["query_input"],
            target=data["target"],
            form=PromptForm(data["form"]),
            k=data.get("k", 0),
            source_spec_id=data.get("source_spec_id"),
            context_indices=tuple(data.get("context_indices") or ()),
            query_index=data.get("query_index"),
        )


def task_from_dict(data: t.Any, source: str = "<dict>") -> TaskDataset:
    """Validate a task record and build a TaskDataset

    Args:
        data: decoded task JSON object
        source: where the record came from, used in error messages

    Returns:
        TaskDataset
    """
    if not isinstance(data, dict):
        raise TaskFormatError(f"{source}: task file must contain a JSON object")
    task_id = data.get("task_id")
    if not isinstance(task_id, str) or not task_id:
        raise TaskFormatError(f"{source}: missing or empty 'task_id'")
    raw_pairs = data.get("pairs")
    if not isinstance(raw_pairs, list) or not raw_pairs:
        raise TaskFormatError(f"{source}: task {task_id} has no pairs")

    pairs = []
    for i, record in enumerate(raw_pairs):
        if (
            not isinstance(record, (list, tuple))
            or len(record) != 2
            or not all(isinstance(v, str) and v for v in record)
        ):
            raise TaskFormatError(
                f"{source}: task {task_id} pair {i} is not a [input, output] pair of non-empty strings: {record!r}"
            )
        pairs.append((record[0], record[1]))

    inputs = [x for x, _ in pairs]
    if duplicates := sorted({x for x in inputs if inputs.count(x) > 1}):
        logging.warning(f"{source}: task {task_id} has duplicate inputs: {duplicates}")

    labels = data.get("labels")
    if labels is None:
        return TaskDataset(task_id, tuple(pairs), TaskCategory.OPEN_GENERATION)

    if not isinstance(labels, list) or not all(isinstance(v, str) for v in labels):
        raise TaskFormatError(f"{source}: task {task_id} 'labels' must be a list of strings")
    label_set = frozenset(labels)
    for i, (_, y) in enumerate(pairs):
        if y not in label_set:
            raise TaskFormatError(
                f"{source}: task {task_id} pair {i} output {y!r} is not in the label set"
            )
    return TaskDataset(task_id, tuple(pairs), TaskCategory.CLASSIFICATION, label_set)


def load_task(path: t.Union[str, pathlib.Path]) -> TaskDataset:
    """Load a task from a JSON task file

    Args:
        path: path to file with {"task_id": str, "pairs": [[input, output], ...], "labels": [...]}

    Returns:
        TaskDataset; category is classification when labels are given
    """
    path = pathlib.Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"task file does not exist: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise TaskFormatError(f"{path}: not valid JSON: {e}") from e
    return task_from_dict(data, str(path))


def load_tasks(paths: t.Iterable[t.Union[str, pathlib.Path]]) -> t.Dict[str, TaskDataset]:
    """Load several task files (directories are expanded to their *.json files)

    Returns:
        dict of task_id to TaskDataset, in the order the files were given
    """
    tasks: t.Dict[str, TaskDataset] = {}
    for path in paths:
        path = pathlib.Path(path)
        files = sorted(path.glob("*.json")) if path.is_dir() else [path]
        for filename in files:
            task = load_task(filename)
            if task.task_id in tasks:
                raise TaskFormatError(f"{filename}: duplicate task_id {task.task_id}")
            tasks[task.task_id] = task
    return tasks


def derive_seed(*parts: int) -> int:
    """Derive a child seed from a run seed and any number of integer coordinates"""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def split(
    dataset: TaskDataset, seed: int, train_fraction: float = TRAIN_FRACTION
) -> SplitSpec:
    """Split a dataset into train and test indices

    Args:
        dataset: the task dataset
        seed: split seed; the same (dataset, seed) always gives the same split
        train_fraction: fraction of pairs assigned to train

    Returns:
        SplitSpec with sorted, disjoint index lists covering the dataset
    """
    n = len(dataset)
    if n < 2:
        raise InsufficientDataError(
            f"task {dataset.task_id} has {n} pairs; at least 2 are needed to split"
        )
    n_train = min(max(int(np.floor(train_fraction * n + 0.5)), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    return SplitSpec(
        seed=seed,
        train_fraction=train_fraction,
        indices_train=tuple(sorted(int(i) for i in order[:n_train])),
        indices_test=tuple(sorted(int(i) for i in order[n_train:])),
    )


def _render_blocks(pairs: t.Sequence[t.Tuple[str, str]], query_input: str) -> str:
    blocks = [f"{QUERY_PREFIX}{x}{PAIR_SEPARATOR}{ANSWER_CUE}{y}" for x, y in pairs]
    blocks.append(f"{QUERY_PREFIX}{query_input}{PAIR_SEPARATOR}{ANSWER_CUE}")
    return BLOCK_SEPARATOR.join(blocks)


def render_demo_prompt(
    dataset: TaskDataset,
    context_indices: t.Sequence[int],
    query_index: int,
    shuffle_labels: bool = False,
    seed: int = 0,
) -> PromptInstance:
    """Render a K-shot demonstration prompt

    Args:
        dataset: the task dataset
        context_indices: indices of the in-context pairs, in prompt order
        query_index: index of the query pair
        shuffle_labels: if True, permute the in-context labels uniformly at random
        seed: seed for the label permutation

    Returns:
        PromptInstance whose target is the query's true output
    """
    context_indices = [int(i) for i in context_indices]
    if query_index in context_indices:
        raise PromptOverlapError(
            f"task {dataset.task_id}: query index {query_index} is also an in-context example"
        )
    out_of_range = [i for i in [*context_indices, query_index] if not 0 <= i < len(dataset)]
    if out_of_range:
        raise PromptPreconditionError(
            f"task {dataset.task_id}: indices {out_of_range} are outside 0..{len(dataset) - 1}"
        )
    inputs =[dataset.pairs[i][0] for i in context_indices]
    labels = [dataset.pairs[i][1] for i in context_indices]
    if shuffle_labels and len(labels) > 1:
        permutation = np.random.default_rng(seed).permutation(len(labels))
        labels = [labels[i] for i in permutation]

    query_input, target = dataset.pairs[query_index]
    k = len(context_indices)
    if k == 0:
        form = PromptForm.ZERO_SHOT
    else:
        form = PromptForm.DEMO_SHUFFLED if shuffle_labels else PromptForm.DEMO_K_SHOT
    return PromptInstance(
        rendered_text=_render_blocks(list(zip(inputs, labels)), query_input),
        query_input=query_input,
        target=target,
        form=form,
        k=k,
        context_indices=tuple(context_indices),
        query_index=query_index,
    )


def render_instruction_prompt(
    instruction_text: str,
    query_input: str,
    target: str = "",
    source_spec_id: t.Optional[str] = None,
    form: PromptForm = PromptForm.INSTRUCTION,
    query_index: t.Optional[int] = None,
) -> PromptInstance:
    """Render an instruction prompt: the instruction line followed by the query block

    Args:
        instruction_text: the task specification (an instruction or an uninformative baseline)
        query_input: x of the query pair
        target: y of the query pair
        source_spec_id: id of the instruction or baseline used
        form: PromptForm.INSTRUCTION or PromptForm.BASELINE_INSTRUCTION

    Returns:
        PromptInstance
    """
    if not instruction_text:
        raise PromptPreconditionError("instruction text must not be empty")
    return PromptInstance(
        rendered_text=f"{instruction_text}{PAIR_SEPARATOR}{_render_blocks([], query_input)}",
        query_input=query_input,
        target=target,
        form=form,
        k=0,
        source_spec_id=source_spec_id,
        query_index=query_index,
    )


def render_zero_shot_prompt(
    query_input: str, target: str = "", query_index: t.Optional[int] = None
) -> PromptInstance:
    """Render a bare query with no task specification"""
    return PromptInstance(
        rendered_text=_render_blocks([], query_input),
        query_input=query_input,
        target=target,
        form=PromptForm.ZERO_SHOT,
        query_index=query_index,
    )


def sample_context(
    dataset: TaskDataset, split_spec: SplitSpec, query_index: int, k: int, seed: int
) -> t.List[int]:
    """Draw k in-context indices from the train split, excluding the query

    Context indices are resampled for every query under (seed, query_index).
    """
    pool = [i for i in split_spec.indices_train if i != query_index]
    if len(pool) < k:
        raise InsufficientDataError(
            f"task {dataset.task_id}: {len(pool)} train pairs available for a {k}-shot prompt"
        )
    rng = np.random.default_rng(derive_seed(seed, query_index))
    return [int(i) for i in rng.choice(pool, size=k, replace=False)]


def demo_prompts(
    dataset: TaskDataset,
    split_spec: SplitSpec,
    query_indices: t.Iterable[int],
    k: int = DEFAULT_SHOTS,
    shuffle_labels: bool = False,
    seed: int = 0,
) -> t.Iterator[PromptInstance]:
    """Yield one k-shot prompt per query index; contexts come from the train split"""
    for query_index in query_indices:
        context = sample_context(dataset, split_spec, query_index, k, seed)
        yield render_demo_prompt(
            dataset,
            context,
            query_index,
            shuffle_labels=shuffle_labels,
            seed=derive_seed(seed, query_index, 1),
        )


def prompt_set_hash(prompts: t.Iterable[PromptInstance]) -> str:
    """SHA-256 hex digest over rendered texts and targets, in order"""
    digest = hashlib.sha256()
    for prompt in prompts:
        digest.update(prompt.rendered_text.encode("utf-8"))
        digest.update(b"\x00")
        digest.update(prompt.target.encode("utf-8"))
        digest.update(b"\x01")
    return digest.hexdigest()
