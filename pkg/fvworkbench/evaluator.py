"""Evaluate function vectors as residual-stream interventions.

Accuracy is the fraction of test queries whose argmax next token is the
target's first token. Function vectors are added to the hidden state at the
final token, immediately after the chosen layer. The default layer is
round-to-nearest(L/3): 9 for a 28-layer model, 11 for a 32-layer model.
"""

import logging
import math
import typing as t
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from tqdm import tqdm

from .constants import DEFAULT_SHOTS
from .debug import progress_disabled
from .errors import CompatibilityError, InterventionPlanError, PromptPreconditionError
from .fv_engine import FunctionVector
from .model_gateway import InterventionPlan
from .task_corpus import (
    PromptInstance,
    SplitSpec,
    TaskDataset,
    demo_prompts,
    prompt_set_hash,
    render_instruction_prompt,
    render_zero_shot_prompt,
    split,
)

__all__ = [
    "EvalReport",
    "EvalSetting",
    "Regime",
    "average_reports",
    "default_intervention_layer",
    "evaluate",
    "evaluate_joint",
    "joint_layer_range",
    "optimal_layer",
    "steer_cross_model",
    "summarize_reports",
    "summary_key",
    "sweep_joint_layers",
    "sweep_layers",
]


class Regime(Enum):
    ZERO_SHOT = "zero_shot"
    SHUFFLED_10_SHOT = "shuffled_10_shot"
    INSTRUCTED_ZERO_SHOT = "instructed_zero_shot"
    CLEAN_10_SHOT = "clean_10_shot"


@dataclass
class EvalSetting:
    """Prompt regime plus the function vectors to add and where"""

    regime: Regime
    fv_plan: t.List[t.Tuple[FunctionVector, int]] = field(default_factory=list)
    baseline_only: bool = False
    shots: int = DEFAULT_SHOTS
    label: str = ""

    def plan(self) -> InterventionPlan:
        if self.baseline_only:
            return InterventionPlan()
        return InterventionPlan(additions=[(layer, fv.vector) for fv, layer in self.fv_plan])

    def describe(self) -> str:
        """Stable text key for the setting"""
        parts = [self.regime.value]
        if self.regime in (Regime.SHUFFLED_10_SHOT, Regime.CLEAN_10_SHOT):
            parts.append(f"k{self.shots}")
        if self.baseline_only or not self.fv_plan:
            parts.append("no_fv")
        for fv, layer in self.fv_plan if not self.baseline_only else []:
            form = fv.activation_form.value if fv.activation_form else fv.activation_source.value
            parts.append(f"{fv.model_id}:{fv.task_id}:{fv.head_set.provenance.value}/{form}@{layer}")
        if self.label:
            parts.append(self.label)
        return "|".join(parts)

    def asdict(self) -> t.Dict[str, t.Any]:
        return {
            "regime": self.regime.value,
            "shots": self.shots,
            "baseline_only": self.baseline_only,
            "label": self.label,
            "fv_plan": [
                {
                    "task_id": fv.task_id,
                    "model_id": fv.model_id,
                    "activation_source": fv.activation_source.value,
                    "activation_form": fv.activation_form.value if fv.activation_form else None,
                    "head_provenance": fv.head_set.provenance.value,
                    "layer": layer,
                }
                for fv, layer in self.fv_plan
            ],
        }


@dataclass
class EvalReport:
    """Accuracy of one model on one task under one setting"""

    model_id: str
    task_id: str
    setting: EvalSetting
    accuracy: float
    n_queries: int
    sem: float
    per_layer_curve: t.Optional[t.Dict[int, float]] = None
    source_model_id: t.Optional[str] = None
    query_hash: str = ""

    @property
    def key(self) -> str:
        return f"{self.model_id}|{self.task_id}|{self.setting.describe()}"

    def asdict(self) -> t.Dict[str, t.Any]:
        return {
            "model_id": self.model_id,
            "task_id": self.task_id,
            "setting": self.setting.asdict(),
            "setting_key": self.setting.describe(),
            "accuracy": self.accuracy,
            "n_queries": self.n_queries,
            "sem": self.sem,
            "per_layer_curve": (
                {str(layer): acc for layer, acc in sorted(self.per_layer_curve.items())}
                if self.per_layer_curve is not None
                else None
            ),
            "source_model_id": self.source_model_id,
            "query_hash": self.query_hash,
        }


def default_intervention_layer(n_layers: int) -> int:
    """round-to-nearest(L/3), halves rounding up"""
    return int(math.floor(n_layers / 3 + 0.5))


def joint_layer_range(n_layers: int) -> t.List[int]:
    """Layers from floor(L/4) to ceil(L/2), both included"""
    return [layer for layer in range(n_layers // 4, math.ceil(n_layers / 2) + 1) if layer < n_layers]


def _sem(values: t.Sequence[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def _check_compatible(fv: FunctionVector, gateway, allow_cross_model: bool):
    profile = gateway.profile
    if fv.d_model != profile.d_model:
        raise CompatibilityError(
            f"function vector from {fv.model_id} has d_model {fv.d_model}; {profile.model_id} has {profile.d_model}"
        )
    if fv.n_layers is not None and fv.n_layers != profile.n_layers:
        raise CompatibilityError(
            f"function vector from {fv.model_id} has {fv.n_layers} layers; {profile.model_id} has {profile.n_layers}"
        )
    if not allow_cross_model and fv.model_id and fv.model_id != profile.model_id:
        raise CompatibilityError(
            f"function vector was extracted from {fv.model_id}, not {profile.model_id}; use steer for cross-model runs"
        )


def _query_prompts(
    task: TaskDataset,
    setting: EvalSetting,
    split_spec: SplitSpec,
    queries: t.Sequence[int],
    seed: int,
    instructions: t.Optional[t.Sequence[str]],
) -> t.List[t.List[PromptInstance]]:
    """One list of prompts per query; several only for the instructed regime"""
    if setting.regime == Regime.ZERO_SHOT:
        return [[render_zero_shot_prompt(*task.pairs[i], query_index=i)] for i in queries]
    if setting.regime in (Regime.SHUFFLED_10_SHOT, Regime.CLEAN_10_SHOT):
        prompts = demo_prompts(
            task,
            split_spec,
            queries,
            k=setting.shots,
            shuffle_labels=setting.regime == Regime.SHUFFLED_10_SHOT,
            seed=seed,
        )
        return [[p] for p in prompts]
    if not instructions:
        raise PromptPreconditionError(f"the {setting.regime.value} regime needs instructions")
    return [
        [render_instruction_prompt(text, *task.pairs[i], query_index=i) for text in instructions]
        for i in queries
    ]


def evaluate(
    task: TaskDataset,
    setting: EvalSetting,
    gateway,
    seed: int = 0,
    split_spec: t.Optional[SplitSpec] = None,
    instructions: t.Optional[t.Sequence[str]] = None,
    max_queries: t.Optional[int] = None,
    sweep_range: t.Optional[t.Sequence[int]] = None,
    allow_cross_model: bool = False,
) -> EvalReport:
    """Accuracy on the task's test queries under setting

    Args:
        task: the task
        setting: regime and function vector plan
        gateway: model to evaluate
        seed: seed for the split and for in-context example sampling
        split_spec: train/test split; computed from seed when omitted
        instructions: instruction texts for the instructed regime; accuracy is
            averaged over them
        max_queries: evaluate only the first max_queries test queries
        sweep_range: if given, also evaluate the first function vector at every
            layer of the range and fill per_layer_curve
        allow_cross_model: accept function vectors extracted from another model

    Returns:
        EvalReport; sem is the standard error across queries
    """
    for fv, _ in setting.fv_plan:
        _check_compatible(fv, gateway, allow_cross_model)
    split_spec = split_spec or split(task, seed)
    queries = list(split_spec.indices_test)
    if max_queries is not None:
        queries = queries[:max_queries]

    grouped = _query_prompts(task, setting, split_spec, queries, seed, instructions)
    flat = [p for group in grouped for p in group]
    targets = [gateway.first_token_of(p.target, p) for p in flat]

    def score(plan: InterventionPlan) -> t.List[float]:
        distributions = gateway.batch_distributions(flat, plan)
        correct = [float(int(np.argmax(d)) == target) for d, target in zip(distributions, targets)]
        per_query, start = [], 0
        for group in grouped:
            per_query.append(math.fsum(correct[start : start + len(group)]) / len(group))
            start += len(group)
        return per_query

    per_query = score(setting.plan())
    curve = None
    if sweep_range is not None:
        if not setting.fv_plan:
            raise PromptPreconditionError("a layer sweep needs a function vector")
        fv = setting.fv_plan[0][0]
        curve = {}
        for layer in tqdm(list(sweep_range), desc=f"sweep {task.task_id}", disable=progress_disabled()):
            if not 0 <= layer < gateway.profile.n_layers:
                raise InterventionPlanError(f"sweep layer {layer} outside [0, {gateway.profile.n_layers})")
            scores = score(InterventionPlan(additions=[(layer, fv.vector)]))
            curve[layer] = math.fsum(scores) / len(scores)

    source_models = sorted({fv.model_id for fv, _ in setting.fv_plan} - {gateway.model_id})
    return EvalReport(
        model_id=gateway.model_id,
        task_id=task.task_id,
        setting=setting,
        accuracy=math.fsum(per_query) / len(per_query) if per_query else 0.0,
        n_queries=len(per_query),
        sem=_sem(per_query),
        per_layer_curve=curve,
        source_model_id=",".join(source_models) or None,
        query_hash=prompt_set_hash(flat),
    )


def evaluate_joint(
    task: TaskDataset,
    fv_a: FunctionVector,
    fv_b: FunctionVector,
    layers: t.Tuple[int, int],
    setting: EvalSetting,
    gateway,
    seed: int = 0,
    **kwargs,
) -> EvalReport:
    """Evaluate with both function vectors added, fv_a after layers[0] and fv_b after layers[1]

    Passing the same vector twice gives the doubling control.
    """
    if fv_a.d_model != fv_b.d_model:
        raise CompatibilityError(f"function vectors differ in d_model: {fv_a.d_model} and {fv_b.d_model}")
    joint = EvalSetting(
        regime=setting.regime,
        fv_plan=[(fv_a, layers[0]), (fv_b, layers[1])],
        shots=setting.shots,
        label=setting.label,
    )
    return evaluate(task, joint, gateway, seed=seed, **kwargs)


def steer_cross_model(
    task: TaskDataset,
    fv: FunctionVector,
    gateway,
    setting: EvalSetting,
    layer: t.Optional[int] = None,
    seed: int = 0,
    **kwargs,
) -> EvalReport:
    """Apply a function vector extracted from one model to another of the same shape"""
    _check_compatible(fv, gateway, allow_cross_model=True)
    layer = default_intervention_layer(gateway.profile.n_layers) if layer is None else layer
    steered = EvalSetting(
        regime=setting.regime, fv_plan=[(fv, layer)], shots=setting.shots, label=setting.label or "steer"
    )
    report = evaluate(task, steered, gateway, seed=seed, allow_cross_model=True, **kwargs)
    report.source_model_id = fv.model_id
    return report


def sweep_layers(
    task: TaskDataset,
    fv: FunctionVector,
    setting: EvalSetting,
    gateway,
    layer_range: t.Optional[t.Sequence[int]] = None,
    seed: int = 0,
    **kwargs,
) -> t.Dict[int, float]:
    """Accuracy with fv added after each layer of layer_range (every layer by default)"""
    layer_range = range(gateway.profile.n_layers) if layer_range is None else layer_range
    swept = EvalSetting(regime=setting.regime, fv_plan=[(fv, 0)], shots=setting.shots, label=setting.label)
    return evaluate(task, swept, gateway, seed=seed, sweep_range=layer_range, **kwargs).per_layer_curve


def sweep_joint_layers(
    task: TaskDataset,
    fv_a: FunctionVector,
    fv_b: FunctionVector,
    setting: EvalSetting,
    gateway,
    layer_range: t.Optional[t.Sequence[int]] = None,
    seed: int = 0,
    **kwargs,
) -> t.Tuple[t.Dict[t.Tuple[int, int], float], t.Tuple[int, int]]:
    """Joint accuracy for every layer pair of layer_range

    Returns:
        (accuracy per (layer_a, layer_b), best pair); ties go to the shallower pair
    """
    layer_range = joint_layer_range(gateway.profile.n_layers) if layer_range is None else list(layer_range)
    grid = {}
    for layer_a in layer_range:
        for layer_b in layer_range:
            report = evaluate_joint(task, fv_a, fv_b, (layer_a, layer_b), setting, gateway, seed=seed, **kwargs)
            grid[(layer_a, layer_b)] = report.accuracy
    best = min(grid, key=lambda pair: (-grid[pair], pair))
    logging.info(f"{task.task_id}: best joint layers {best} with accuracy {grid[best]:.3f}")
    return grid, best


def optimal_layer(curves: t.Sequence[t.Mapping[int, float]]) -> int:
    """Layer with the highest accuracy averaged over curves; ties go to the shallower layer"""
    if not curves:
        raise ValueError("no curves to choose a layer from")
    layers = sorted(set.intersection(*(set(curve) for curve in curves)))
    if not layers:
        raise ValueError("curves share no layer")
    mean = {layer: math.fsum(curve[layer] for curve in curves) / len(curves) for layer in layers}
    return min(layers, key=lambda layer: (-mean[layer], layer))


def average_reports(reports: t.Sequence[EvalReport], label: str) -> EvalReport:
    """Mean of reports for the same task, e.g. short- and long-instruction function vectors"""
    if not reports:
        raise ValueError("no reports to average")
    first = reports[0]
    setting = EvalSetting(
        regime=first.setting.regime,
        fv_plan=[entry for report in reports for entry in report.setting.fv_plan],
        baseline_only=first.setting.baseline_only,
        shots=first.setting.shots,
        label=label,
    )
    return EvalReport(
        model_id=first.model_id,
        task_id=first.task_id,
        setting=setting,
        accuracy=math.fsum(r.accuracy for r in reports) / len(reports),
        n_queries=first.n_queries,
        sem=math.sqrt(math.fsum(r.sem**2 for r in reports)) / len(reports),
        source_model_id=first.source_model_id,
        query_hash=first.query_hash,
    )


def summary_key(setting_key: str, task_id: str) -> str:
    """Setting key with the report's own task replaced by "*" in each function vector part

    Every task evaluates its own function vectors, so the same setting on two
    tasks differs only in those parts.
    """
    parts = []
    for part in setting_key.split("|"):
        fields = part.rsplit(":", 2)
        if len(fields) == 3 and fields[1] == task_id and "@" in fields[2]:
            part = f"{fields[0]}:*:{fields[2]}"
        parts.append(part)
    return "|".join(parts)


def summarize_reports(reports: t.Iterable[t.Mapping[str, t.Any]]) -> t.List[t.Dict[str, t.Any]]:
    """Mean accuracy over tasks and its SEM across tasks, per (model, setting)

    Args:
        reports: EvalReport dicts as stored in the report store

    Returns:
        one row per (model_id, summary_key), sorted
    """
    groups: t.Dict[t.Tuple[str, str], t.Dict[str, float]] = {}
    for report in reports:
        key = (report["model_id"], summary_key(report["setting_key"], report["task_id"]))
        groups.setdefault(key, {})[report["task_id"]] = report["accuracy"]
    rows = []
    for (model_id, setting_key), by_task in sorted(groups.items()):
        accuracies = [by_task[task_id] for task_id in sorted(by_task)]
        rows.append(
            {
                "model_id": model_id,
                "setting_key": setting_key,
                "n_tasks": len(accuracies),
                "mean_accuracy": math.fsum(accuracies) / len(accuracies),
                "sem_across_tasks": _sem(accuracies),
            }
        )
    return rows
