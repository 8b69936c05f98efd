"""Mean head activations, causal indirect effects, head selection and function vectors.

All statistics are accumulated in 64-bit floating point regardless of the
model's precision, and every reduction runs in a fixed (sorted) order.
"""

import logging
import math
import typing as t
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from tqdm import tqdm

from .debug import progress_disabled
from .errors import (
    AggregationError,
    CompletenessError,
    HeadSelectionError,
    PromptPreconditionError,
    TaskIneligible,
)
from .heads import HeadId, head_factory, head_to_str, sort_heads
from .model_gateway import InterventionPlan
from .task_corpus import PromptInstance, prompt_set_hash

__all__ = [
    "ActivationForm",
    "ActivationSource",
    "ActivationSummary",
    "CieCondition",
    "CieTensor",
    "FunctionVector",
    "HeadProvenance",
    "HeadSet",
    "SelectionMode",
    "aggregate_cie",
    "build_fv",
    "collect_successful_prompts",
    "compute_cie",
    "compute_cie_tensor",
    "compute_mean_activations",
    "is_eligible",
    "select_heads",
]


class ActivationForm(Enum):
    DEMO = "demo"
    INSTRUCTION_SHORT = "instruction_short"
    INSTRUCTION_LONG = "instruction_long"

    @property
    def source(self) -> "ActivationSource":
        return ActivationSource.DEMO if self == ActivationForm.DEMO else ActivationSource.INSTRUCTION


class ActivationSource(Enum):
    DEMO = "demo"
    INSTRUCTION = "instruction"


class CieCondition(Enum):
    SHUFFLED_DEMO = "shuffled_demo"
    EQUIPROBABLE = "equiprobable"
    REAL_TEXT = "real_text"
    OTHER_TASK = "other_task"


class HeadProvenance(Enum):
    DEMO = "demo"
    INSTRUCTION = "instruction"
    SHARED_ANALYSIS = "shared_analysis"
    LEAST_IMPORTANT = "least_important"
    BOTTOM = "bottom"
    CUSTOM = "custom"


class SelectionMode(Enum):
    TOP = "top"
    LEAST_IMPORTANT_ABS = "least_important_abs"
    BOTTOM = "bottom"


def _heads_to_json(values: t.Mapping[HeadId, t.Any], convert) -> t.Dict[str, t.Any]:
    return {head_to_str(head): convert(values[head]) for head in sort_heads(values)}


@dataclass
class ActivationSummary:
    """Mean final-token output of every head over successful prompts"""

    task_id: str
    form: ActivationForm
    means: t.Dict[HeadId, np.ndarray]
    prompt_count: int
    model_id: str = ""
    prompt_hash: str = ""
    seed: int = 0

    @property
    def d_model(self) -> int:
        return len(next(iter(self.means.values())))

    def asdict(self) -> t.Dict[str, t.Any]:
        return {
            "task_id": self.task_id,
            "form": self.form.value,
            "prompt_count": self.prompt_count,
            "model_id": self.model_id,
            "prompt_hash": self.prompt_hash,
            "seed": self.seed,
            "means": _heads_to_json(self.means, lambda v: [float(x) for x in v]),
        }

    @classmethod
    def fromdict(cls, data: t.Dict[str, t.Any]) -> "ActivationSummary":
        return cls(
            task_id=data["task_id"],
            form=ActivationForm(data["form"]),
            means={head_factory(k): np.array(v, dtype=np.float64) for k, v in data["means"].items()},
            prompt_count=data["prompt_count"],
            model_id=data.get("model_id", ""),
            prompt_hash=data.get("prompt_hash", ""),
            seed=data.get("seed", 0),
        )


@dataclass
class CieTensor:
    """Per-head causal indirect effect averaged over the prompts of one condition"""

    task_id: str
    form: ActivationForm
    condition: CieCondition
    scores: t.Dict[HeadId, float]
    prompts_used: int
    model_id: str = ""
    prompt_hash: str = ""
    eligible: bool = True
    seed: int = 0

    def asdict(self) -> t.Dict[str, t.Any]:
        return {
            "task_id": self.task_id,
            "form": self.form.value,
            "condition": self.condition.value,
            "prompts_used": self.prompts_used,
            "model_id": self.model_id,
            "prompt_hash": self.prompt_hash,
            "eligible": self.eligible,
            "seed": self.seed,
            "scores": _heads_to_json(self.scores, float),
        }

    @classmethod
    def fromdict(cls, data: t.Dict[str, t.Any]) -> "CieTensor":
        return cls(
            task_id=data["task_id"],
            form=ActivationForm(data["form"]),
            condition=CieCondition(data["condition"]),
            scores={head_factory(k): float(v) for k, v in data["scores"].items()},
            prompts_used=data["prompts_used"],
            model_id=data.get("model_id", ""),
            prompt_hash=data.get("prompt_hash", ""),
            eligible=data.get("eligible", True),
            seed=data.get("seed", 0),
        )


@dataclass
class HeadSet:
    """An ordered set of heads and where it came from"""

    heads: t.List[HeadId]
    provenance: HeadProvenance = HeadProvenance.CUSTOM
    size: int = -1

    def __post_init__(self):
        self.heads = [HeadId(*head) for head in self.heads]
        if len(set(self.heads)) != len(self.heads):
            raise HeadSelectionError("head set contains duplicate heads")
        if self.size < 0:
            self.size = len(self.heads)
        elif self.size != len(self.heads):
            raise HeadSelectionError(f"head set has {len(self.heads)} heads, size says {self.size}")

    def __iter__(self):
        return iter(self.heads)

    def __len__(self) -> int:
        return len(self.heads)

    def asdict(self) -> t.Dict[str, t.Any]:
        return {
            "heads": [head_to_str(h) for h in self.heads],
            "size": self.size,
            "provenance": self.provenance.value,
        }

    @classmethod
    def fromdict(cls, data: t.Dict[str, t.Any]) -> "HeadSet":
        return cls(
            heads=[head_factory(h) for h in data["heads"]],
            provenance=HeadProvenance(data["provenance"]),
            size=data["size"],
        )


@dataclass
class FunctionVector:
    """Sum of the mean activations of a head set, with its provenance"""

    vector: np.ndarray
    head_set: HeadSet
    activation_source: ActivationSource
    task_id: str
    model_id: str
    activation_form: t.Optional[ActivationForm] = None
    n_layers: t.Optional[int] = None
    metadata: t.Dict[str, t.Any] = field(default_factory=dict)

    @property
    def d_model(self) -> int:
        return len(self.vector)

    @property
    def is_heterogeneous(self) -> bool:
        """True when the heads were selected for the other presentation"""
        return self.head_set.provenance.value in ("demo", "instruction") and (
            self.head_set.provenance.value != self.activation_source.value
        )

    def asdict(self) -> t.Dict[str, t.Any]:
        return {
            "vector": [float(x) for x in self.vector],
            "head_set": self.head_set.asdict(),
            "activation_source": self.activation_source.value,
            "activation_form": self.activation_form.value if self.activation_form else None,
            "task_id": self.task_id,
            "model_id": self.model_id,
            "n_layers": self.n_layers,
            "metadata": self.metadata,
        }

    @classmethod
    def fromdict(cls, data: t.Dict[str, t.Any]) -> "FunctionVector":
        form = data.get("activation_form")
        return cls(
            vector=np.array(data["vector"], dtype=np.float64),
            head_set=HeadSet.fromdict(data["head_set"]),
            activation_source=ActivationSource(data["activation_source"]),
            task_id=data["task_id"],
            model_id=data["model_id"],
            activation_form=ActivationForm(form) if form else None,
            n_layers=data.get("n_layers"),
            metadata=data.get("metadata", {}),
        )


def collect_successful_prompts(
    candidates: t.Iterable[PromptInstance],
    gateway,
    budget: int,
    task_id: str = "",
    max_attempts: t.Optional[int] = None,
) -> t.Tuple[t.List[PromptInstance], int]:
    """Take candidates in order until budget of them are answered correctly

    Returns:
        (successful prompts, number of candidates tried)

    Raises:
        TaskIneligible: candidates ran out before budget successes
    """
    successful: t.List[PromptInstance] = []
    attempts = 0
    for prompt in candidates:
        if max_attempts is not None and attempts >= max_attempts:
            break
        attempts += 1
        if gateway.is_success(prompt):
            successful.append(prompt)
            if len(successful) == budget:
                return successful, attempts
    raise TaskIneligible(task_id, len(successful), budget)


def compute_mean_activations(
    prompts: t.Sequence[PromptInstance],
    gateway,
    task_id: str = "",
    form: ActivationForm = ActivationForm.DEMO,
    required: t.Optional[int] = None,
    seed: int = 0,
) -> ActivationSummary:
    """Per-head mean of final-token outputs over successful prompts

    Args:
        prompts: prompts the model answers correctly
        gateway: model gateway
        task_id: task the prompts belong to
        form: presentation form of the prompts
        required: prompt budget; fewer prompts mark the task ineligible
        seed: seed recorded with the summary

    Raises:
        TaskIneligible: fewer than required prompts
        PromptPreconditionError: a prompt is not answered correctly
    """
    if required is not None and len(prompts) < required:
        raise TaskIneligible(task_id, len(prompts), required)
    if not prompts:
        raise TaskIneligible(task_id, 0, required or 1)

    heads = gateway.profile.heads()
    totals = np.zeros((len(heads), gateway.profile.d_model), dtype=np.float64)
    for prompt in tqdm(prompts, desc=f"activations {task_id} {form.value}", disable=progress_disabled()):
        capture = gateway.capture_head_outputs(prompt)
        if int(np.argmax(capture.distribution)) != gateway.first_token_of(prompt.target, prompt):
            raise PromptPreconditionError(
                f"task {task_id}: prompt for {prompt.query_input!r} is not answered correctly"
            )
        for i, head in enumerate(heads):
            totals[i] += capture.vector(head)

    means = {head: totals[i] / len(prompts) for i, head in enumerate(heads)}
    return ActivationSummary(
        task_id=task_id,
        form=form,
        means=means,
        prompt_count=len(prompts),
        model_id=gateway.model_id,
        prompt_hash=prompt_set_hash(prompts),
        seed=seed,
    )


def compute_cie(
    head: HeadId,
    baseline_prompt: PromptInstance,
    summary: ActivationSummary,
    gateway,
) -> float:
    """Probability of the target's first token with the head patched to its mean, minus without"""
    head = HeadId(*head)
    if head not in summary.means:
        raise CompletenessError(f"summary for {summary.task_id} has no mean for head {head_to_str(head)}")
    target = gateway.first_token_of(baseline_prompt.target, baseline_prompt)
    clean = gateway.run_with_interventions(baseline_prompt)
    patched = gateway.run_with_interventions(
        baseline_prompt, InterventionPlan(head_patches=[(head, summary.means[head])])
    )
    return float(patched[target]) - float(clean[target])


def compute_cie_tensor(
    prompts: t.Sequence[PromptInstance],
    summary: ActivationSummary,
    gateway,
    condition: CieCondition,
    form: t.Optional[ActivationForm] = None,
    heads: t.Optional[t.Sequence[HeadId]] = None,
    eligible: bool = True,
    seed: int = 0,
) -> CieTensor:
    """CIE of every head, averaged over the uninformative prompts of one condition

    Args:
        prompts: uninformative prompts carrying the true targets
        summary: task-conditioned means to patch in
        gateway: model gateway
        condition: which kind of uninformative prompt these are
        form: presentation form the tensor belongs to; defaults to the summary's
        heads: heads to score; all heads by default
        eligible: eligibility flag recorded with the tensor
        seed: seed recorded with the tensor
    """
    if not prompts:
        raise PromptPreconditionError("no prompts to compute causal effects on")
    heads = sort_heads(heads if heads is not None else gateway.profile.heads())
    targets = [gateway.first_token_of(p.target, p) for p in prompts]
    clean = gateway.batch_distributions(prompts)
    clean_probs = [float(dist[target]) for dist, target in zip(clean, targets)]

    scores: t.Dict[HeadId, float] = {}
    for head in tqdm(heads, desc=f"cie {summary.task_id} {condition.value}", disable=progress_disabled()):
        if head not in summary.means:
            raise CompletenessError(f"summary for {summary.task_id} has no mean for head {head_to_str(head)}")
        plan = InterventionPlan(head_patches=[(head, summary.means[head])])
        patched = gateway.batch_distributions(prompts, plan)
        effects = [float(dist[target]) - p for dist, target, p in zip(patched, targets, clean_probs)]
        scores[head] = math.fsum(effects) / len(effects)

    return CieTensor(
        task_id=summary.task_id,
        form=form or summary.form,
        condition=condition,
        scores=scores,
        prompts_used=len(prompts),
        model_id=gateway.model_id,
        prompt_hash=prompt_set_hash(prompts),
        eligible=eligible,
        seed=seed,
    )


def aggregate_cie(
    records: t.Iterable[CieTensor],
    eligibility: t.Optional[t.Mapping[str, bool]] = None,
) -> t.Dict[HeadId, float]:
    """Mean CIE per head over eligible tasks

    Each task is first reduced to the mean over its eligible condition cells
    (one cell for demonstrations; lengths x baselines for instructions), then
    tasks are weighted equally. Without an eligibility mapping a cell counts
    when its own flag is set, so an instruction length below chance drops only
    that length's cells; a task with no eligible cell is left out. A mapping
    decides for whole tasks.

    Args:
        records: causal score tensors of one presentation family
        eligibility: task_id -> eligible; defaults to each tensor's own flag
    """
    by_task: t.Dict[str, t.List[CieTensor]] = {}
    for record in records:
        if eligibility is not None:
            if not eligibility.get(record.task_id, False):
                continue
        elif not record.eligible:
            continue
        by_task.setdefault(record.task_id, []).append(record)

    tasks = sorted(by_task)
    if not tasks:
        raise AggregationError("no eligible task to aggregate causal scores over")

    heads = sort_heads(by_task[tasks[0]][0].scores)
    per_task: t.Dict[str, t.Dict[HeadId, float]] = {}
    for task_id in tasks:
        cells = sorted(by_task[task_id], key=lambda r: (r.form.value, r.condition.value))
        for cell in cells:
            if set(cell.scores) != set(heads):
                raise AggregationError(
                    f"task {task_id} {cell.form.value}/{cell.condition.value} scores a different set of heads"
                )
        per_task[task_id] = {
            head: math.fsum(cell.scores[head] for cell in cells) / len(cells) for head in heads
        }
    logging.debug(f"aggregated causal scores over {len(tasks)} tasks: {tasks}")
    return {head: math.fsum(per_task[task_id][head] for task_id in tasks) / len(tasks) for head in heads}


_SELECTION_KEYS = {
    SelectionMode.TOP: lambda head, score: (-score, head.layer, head.head),
    SelectionMode.LEAST_IMPORTANT_ABS: lambda head, score: (abs(score), head.layer, head.head),
    SelectionMode.BOTTOM: lambda head, score: (score, head.layer, head.head),
}

_DEFAULT_PROVENANCE = {
    SelectionMode.TOP: HeadProvenance.CUSTOM,
    SelectionMode.LEAST_IMPORTANT_ABS: HeadProvenance.LEAST_IMPORTANT,
    SelectionMode.BOTTOM: HeadProvenance.BOTTOM,
}


def select_heads(
    aggregate: t.Mapping[HeadId, float],
    k: int,
    mode: SelectionMode = SelectionMode.TOP,
    provenance: t.Optional[HeadProvenance] = None,
) -> HeadSet:
    """Pick k heads from aggregated scores

    top takes the largest scores, least_important_abs the smallest absolute
    scores and bottom the most negative scores (the smallest positive ones
    when fewer are negative). Ties go to the lower (layer, head).
    """
    if not 0 <= k <= len(aggregate):
        raise HeadSelectionError(f"cannot select {k} heads out of {len(aggregate)}")
    key = _SELECTION_KEYS[mode]
    ranked = sorted((HeadId(*head) for head in aggregate), key=lambda h: key(h, aggregate[h]))
    return HeadSet(ranked[:k], provenance or _DEFAULT_PROVENANCE[mode], k)


def build_fv(
    head_set: HeadSet,
    summary: ActivationSummary,
    model_id: t.Optional[str] = None,
    n_layers: t.Optional[int] = None,
) -> FunctionVector:
    """Sum the summary's means over the head set, in head-set order

    Pairing a head set selected for one presentation with the summary of the
    other gives a heterogeneous function vector.
    """
    missing = [head_to_str(h) for h in head_set if h not in summary.means]
    if missing:
        raise CompletenessError(f"summary for {summary.task_id} lacks means for heads {missing}")
    vector = np.zeros(summary.d_model, dtype=np.float64)
    for head in head_set:
        vector = vector + summary.means[head]
    return FunctionVector(
        vector=vector,
        head_set=head_set,
        activation_source=summary.form.source,
        task_id=summary.task_id,
        model_id=model_id if model_id is not None else summary.model_id,
        activation_form=summary.form,
        n_layers=n_layers,
    )


def is_eligible(accuracy: float, chance: float) -> bool:
    """A task contributes to head localization only above chance"""
    return accuracy > chance
