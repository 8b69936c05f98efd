"""Generate candidate instructions for a task and select the best ones.

Candidates come from an external text-generation endpoint that is shown a
demonstration of the task and asked for a batch of instructions. Every
exchange can be recorded to a fixture file and replayed offline.
"""

import functools
import json
import logging
import os
import pathlib
import re
import time
import typing as t
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import openai
from tqdm import tqdm

from .constants import (
    ANSWER_CUE,
    BLOCK_SEPARATOR,
    DEFAULT_SHOTS,
    GENERATION_ROUNDS,
    INSTRUCTIONS_PER_ROUND,
    MIN_SUCCESSES,
    PAIR_SEPARATOR,
    QUERY_PREFIX,
    SHORT_INSTRUCTION_MAX_TOKENS,
    TOP_INSTRUCTIONS,
)
from .debug import progress_disabled
from .errors import (
    ConfigError,
    GeneratorTransportError,
    InsufficientDataError,
    PromptPreconditionError,
    TaskSkipped,
)
from .task_corpus import SplitSpec, TaskDataset, render_instruction_prompt, split

__all__ = [
    "FixtureGenerator",
    "GenerationRequest",
    "InstructionGenerator",
    "InstructionSet",
    "LengthRegime",
    "OpenAIGenerator",
    "RecordingGenerator",
    "TopInstructions",
    "build_meta_prompt",
    "generate_instructions",
    "parse_generation",
    "retry_on_exception",
    "select_top_instructions",
]

GENERATOR_URL_ENV = "FVWORKBENCH_GENERATOR_URL"
GENERATOR_API_KEY_ENV = "FVWORKBENCH_GENERATOR_API_KEY"

_NUMBERING = re.compile(r"^\s*(?:\(?\d+[.):]|[-*•])\s*")


class LengthRegime(Enum):
    SHORT = "short"
    LONG = "long"


@dataclass
class InstructionSet:
    """Deduplicated candidate instructions for one task and length regime"""

    task_id: str
    length_regime: LengthRegime
    instructions: t.List[t.Tuple[str, str]]
    generation_metadata: t.Dict[str, t.Any] = field(default_factory=dict)

    def text(self, spec_id: str) -> str:
        return dict(self.instructions)[spec_id]

    def asdict(self) -> t.Dict[str, t.Any]:
        return {
            "task_id": self.task_id,
            "regime": self.length_regime.value,
            "instructions": [{"id": i, "text": text} for i, text in self.instructions],
            "generation_metadata": self.generation_metadata,
        }

    @classmethod
    def fromdict(cls, data: t.Dict[str, t.Any]) -> "InstructionSet":
        return cls(
            task_id=data["task_id"],
            length_regime=LengthRegime(data["regime"]),
            instructions=[(item["id"], item["text"]) for item in data["instructions"]],
            generation_metadata=data.get("generation_metadata", {}),
        )


@dataclass
class TopInstructions:
    """The J best instructions of a set, ranked by train-split accuracy"""

    task_id: str
    regime: LengthRegime
    ranked: t.List[t.Tuple[str, float]]
    J: int
    success_counts: t.Dict[str, int] = field(default_factory=dict)

    @property
    def spec_ids(self) -> t.List[str]:
        return [spec_id for spec_id, _ in self.ranked]

    def asdict(self) -> t.Dict[str, t.Any]:
        return {
            "task_id": self.task_id,
            "regime": self.regime.value,
            "J": self.J,
            "ranked": [{"id": i, "train_accuracy": acc} for i, acc in self.ranked],
            "success_counts": self.success_counts,
        }

    @classmethod
    def fromdict(cls, data: t.Dict[str, t.Any]) -> "TopInstructions":
        return cls(
            task_id=data["task_id"],
            regime=LengthRegime(data["regime"]),
            ranked=[(item["id"], item["train_accuracy"]) for item in data["ranked"]],
            J=data["J"],
            success_counts=data.get("success_counts", {}),
        )


@dataclass(frozen=True)
class GenerationRequest:
    task_id: str
    regime: LengthRegime
    round: int
    prompt: str


class InstructionGenerator(t.Protocol):
    model_id: str

    def generate(self, request: GenerationRequest) -> str:
        ...


def retry_on_exception(exceptions, tries: int, delay: float = 1.0):
    """Retry the decorated function up to tries times on exceptions, doubling the delay each time"""

    def decorator(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            wait = delay
            for attempt in range(tries - 1):
                try:
                    return fn(*args, **kwargs)
                except exceptions as e:
                    logging.warning(f"{fn.__name__} failed (attempt {attempt + 1}/{tries}): {e}")
                    time.sleep(wait)
                    wait *= 2
            return fn(*args, **kwargs)

        return wrapper

    return decorator


class OpenAIGenerator:
    """Instruction generator backed by an OpenAI-compatible chat endpoint

    Args:
        model: model name served by the endpoint
        base_url: endpoint URL; defaults to $FVWORKBENCH_GENERATOR_URL
        api_key: defaults to $FVWORKBENCH_GENERATOR_API_KEY, then $OPENAI_API_KEY
        temperature: sampling temperature
        tries: attempts per request before giving up
    """

    _transient = (
        openai.APIConnectionError,
        openai.APITimeoutError,
        openai.RateLimitError,
        openai.InternalServerError,
    )

    def __init__(
        self,
        model: str,
        base_url: t.Optional[str] = None,
        api_key: t.Optional[str] = None,
        temperature: float = 1.0,
        tries: int = 5,
    ):
        self.model_id = model
        self.base_url = base_url or os.environ.get(GENERATOR_URL_ENV)
        api_key = api_key or os.environ.get(GENERATOR_API_KEY_ENV) or os.environ.get("OPENAI_API_KEY")
        if not api_key:
            raise ConfigError(
                f"no API key for the generator; set {GENERATOR_API_KEY_ENV} or OPENAI_API_KEY"
            )
        self.temperature = temperature
        self.client = openai.OpenAI(base_url=self.base_url, api_key=api_key)
        self._complete = retry_on_exception(self._transient, tries)(self._complete_once)

    @property
    def endpoint(self) -> str:
        return self.base_url or "https://api.openai.com/v1"

    def _complete_once(self, prompt: str) -> str:
        response = self.client.chat.completions.create(
            model=self.model_id,
            messages=[{"role": "user", "content": prompt}],
            temperature=self.temperature,
        )
        return response.choices[0].message.content or ""

    def generate(self, request: GenerationRequest) -> str:
        try:
            return self._complete(request.prompt)
        except self._transient as e:
            raise GeneratorTransportError(
                f"generator endpoint {self.endpoint} failed for {request.task_id} round {request.round}: {e}"
            ) from e


class FixtureGenerator:
    """Replays responses recorded in a fixture file

    Responses are looked up by (task_id, regime); round r gets the r-th
    recorded response, cycling when fewer were recorded.
    """

    def __init__(self, path: t.Union[str, pathlib.Path]):
        self.path = pathlib.Path(path)
        if not self.path.is_file():
            raise ConfigError(f"generator fixture does not exist: {self.path}")
        data = json.loads(self.path.read_text(encoding="utf-8"))
        self.model_id = data.get("generator_model", f"fixture:{self.path.name}")
        self._responses: t.Dict[t.Tuple[str, str], t.List[str]] = {}
        for record in sorted(data["records"], key=lambda r: r.get("round", 0)):
            self._responses.setdefault((record["task_id"], record["regime"]), []).append(
                record["response"]
            )

    def generate(self, request: GenerationRequest) -> str:
        responses = self._responses.get((request.task_id, request.regime.value))
        if not responses:
            raise ConfigError(
                f"{self.path} has no recorded response for {request.task_id} ({request.regime.value})"
            )
        return responses[request.round % len(responses)]


class RecordingGenerator:
    """Wraps a generator and records every exchange to a fixture file"""

    def __init__(self, inner: InstructionGenerator, path: t.Union[str, pathlib.Path]):
        self.inner = inner
        self.model_id = inner.model_id
        self.path = pathlib.Path(path)
        self.records: t.List[t.Dict[str, t.Any]] = []

    def generate(self, request: GenerationRequest) -> str:
        response = self.inner.generate(request)
        self.records.append(
            {
                "task_id": request.task_id,
                "regime": request.regime.value,
                "round": request.round,
                "request": request.prompt,
                "response": response,
            }
        )
        return response

    def save(self):
        """Write the fixture; records of earlier sessions in the same file are kept"""
        records = []
        if self.path.is_file():
            records = json.loads(self.path.read_text(encoding="utf-8"))["records"]
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(
            json.dumps({"generator_model": self.model_id, "records": records + self.records}, indent=2),
            encoding="utf-8",
        )
        self.records = []


def build_meta_prompt(
    demonstration: t.Sequence[t.Tuple[str, str]],
    regime: LengthRegime,
    count: int = INSTRUCTIONS_PER_ROUND,
) -> str:
    """Request sent to the generator: a demonstration of the task and the ask for instructions"""
    examples = BLOCK_SEPARATOR.join(
        f"{QUERY_PREFIX}{x}{PAIR_SEPARATOR}{ANSWER_CUE}{y}" for x, y in demonstration
    )
    if regime == LengthRegime.SHORT:
        length = "Keep every instruction short: a few words, at most one brief sentence."
    else:
        length = "Instructions may be as long and detailed as you find useful."
    return (
        "Below are examples of a task. Each example shows an input after "
        f"'{QUERY_PREFIX.strip()}' and the correct output after '{ANSWER_CUE.strip()}'.\n\n"
        f"{examples}\n\n"
        f"Write {count} different instructions, each telling someone how to perform "
        f"this task on a new input. {length} "
        f"Write one instruction per line, numbered 1 to {count}, and nothing else."
    )


def parse_generation(text: str) -> t.Tuple[t.List[str], int]:
    """Split a generator response into instructions

    Returns:
        (instructions in order, number of non-blank lines that held no instruction)
    """
    instructions = []
    unparseable = 0
    for line in text.splitlines():
        if not line.strip():
            continue
        candidate = _NUMBERING.sub("", line).strip().strip('"').strip()
        if not any(c.isalnum() for c in candidate):
            unparseable += 1
            continue
        instructions.append(candidate)
    return instructions, unparseable


def generate_instructions(
    task: TaskDataset,
    generator: InstructionGenerator,
    regime: LengthRegime,
    rounds: int = GENERATION_ROUNDS,
    gateway=None,
    k: int = DEFAULT_SHOTS,
    seed: int = 0,
    instructions_per_round: int = INSTRUCTIONS_PER_ROUND,
    max_short_tokens: int = SHORT_INSTRUCTION_MAX_TOKENS,
) -> InstructionSet:
    """Collect instructions for a task over several generation rounds

    Args:
        task: the task to describe
        generator: endpoint that answers generation requests
        regime: short or long instructions
        rounds: number of requests; each asks for instructions_per_round instructions
        gateway: subject model gateway; its tokenizer enforces the short-regime length limit
        k: number of demonstration pairs shown in each request
        seed: seed for choosing the demonstration pairs of each round
        instructions_per_round: instructions requested per round
        max_short_tokens: token limit for the short regime

    Returns:
        InstructionSet with exact duplicates removed, in order of first appearance
    """
    if len(task) < k:
        raise InsufficientDataError(
            f"task {task.task_id} has {len(task)} pairs; {k} are needed for the generator demonstration"
        )
    if regime == LengthRegime.SHORT and gateway is None:
        raise PromptPreconditionError("the short regime needs the subject model gateway to count tokens")

    seen: t.Dict[str, None] = {}
    unparseable = 0
    for round_ in tqdm(
        range(rounds), desc=f"generate {task.task_id} ({regime.value})", disable=progress_disabled()
    ):
        rng = np.random.default_rng([seed, round_])
        demonstration = [task.pairs[int(i)] for i in rng.choice(len(task), size=k, replace=False)]
        request = GenerationRequest(
            task.task_id, regime, round_, build_meta_prompt(demonstration, regime, instructions_per_round)
        )
        texts, bad = parse_generation(generator.generate(request))
        unparseable += bad
        for text in texts:
            seen.setdefault(text, None)

    if unparseable:
        logging.warning(f"{task.task_id} ({regime.value}): skipped {unparseable} unparseable generations")

    texts = list(seen)
    too_long = 0
    if regime == LengthRegime.SHORT:
        kept = [text for text in texts if len(gateway.text_ids(text)) <= max_short_tokens]
        too_long = len(texts) - len(kept)
        if too_long:
            logging.warning(
                f"{task.task_id}: dropped {too_long} short instructions longer than {max_short_tokens} tokens"
            )
        texts = kept

    return InstructionSet(
        task_id=task.task_id,
        length_regime=regime,
        instructions=[(f"{task.task_id}.{regime.value}.{i:03d}", text) for i, text in enumerate(texts)],
        generation_metadata={
            "generator_model": generator.model_id,
            "rounds": rounds,
            "seed": seed,
            "unparseable": unparseable,
            "filtered_too_long": too_long,
        },
    )


def select_top_instructions(
    task: TaskDataset,
    instruction_set: InstructionSet,
    gateway,
    J: int = TOP_INSTRUCTIONS,
    min_successes: int = MIN_SUCCESSES,
    split_spec: t.Optional[SplitSpec] = None,
    seed: int = 0,
) -> TopInstructions:
    """Rank instructions by zero-shot first-token accuracy on the train split

    Args:
        task: the task
        instruction_set: candidate instructions
        gateway: subject model gateway
        J: number of instructions to keep
        min_successes: successful train prompts each kept instruction needs
        split_spec: train/test split; computed from seed when omitted
        seed: split seed

    Returns:
        TopInstructions; ties in accuracy are broken by spec_id

    Raises:
        TaskSkipped: fewer than J instructions reach min_successes
    """
    split_spec = split_spec or split(task, seed)
    counts: t.Dict[str, int] = {}
    accuracies: t.Dict[str, float] = {}
    n_train = len(split_spec.indices_train)
    for spec_id, text in tqdm(
        instruction_set.instructions, desc=f"select {task.task_id}", disable=progress_disabled()
    ):
        prompts = [
            render_instruction_prompt(text, task.pairs[i][0], task.pairs[i][1], spec_id, query_index=i)
            for i in split_spec.indices_train
        ]
        distributions = gateway.batch_distributions(prompts)
        counts[spec_id] = sum(
            int(np.argmax(dist)) == gateway.first_token_of(p.target, p)
            for p, dist in zip(prompts, distributions)
        )
        accuracies[spec_id] = counts[spec_id] / n_train

    ranked = sorted(accuracies.items(), key=lambda item: (-item[1], item[0]))
    qualifying = [(spec_id, acc) for spec_id, acc in ranked if counts[spec_id] >= min_successes]
    if len(qualifying) < J:
        raise TaskSkipped(
            task.task_id,
            counts,
            f"task {task.task_id} ({instruction_set.length_regime.value}): "
            f"{len(qualifying)} instructions reach {min_successes} successes, {J} required",
        )
    return TopInstructions(
        task_id=task.task_id,
        regime=instruction_set.length_regime,
        ranked=qualifying[:J],
        J=J,
        success_counts=counts,
    )
