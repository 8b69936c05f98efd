"""Pipeline orchestration behind the command line.

Each command walks (model x task x condition) cells. A cell whose artifact
already exists is loaded instead of recomputed, so interrupted runs resume
where they stopped. Failures are isolated per task: the task is recorded as
skipped with its reason and the command carries on with the next one.

Artifact layout under <output_root>/<model slug>/:

    instructions/<task>.<regime>.json        candidate instructions
    instructions/<task>.<regime>.top.json    the selected top instructions
    cache/corpus.jsonl                       scored corpus prefixes
    baselines/<task>.<regime>.json           uninformative baselines
    train/<task>/<form>.summary.json         mean head activations
    train/<task>/<form>.<condition>.cie.json causal indirect effects
    heads/<name>.json                        selected head sets
    fv/<task>.<heads>.<form>.json            function vectors
    reports.jsonl                            evaluation reports
    skipped.json                             tasks skipped by any command
"""

import itertools
import logging
import math
import pathlib
import typing as t
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import analyst
from .baseline_factory import (
    BaselineMethod,
    BaselineSpec,
    ScoredText,
    build_corpus_cache,
    corpus_hash,
    load_corpus_cache,
    read_corpus,
    sample_equiprobable,
    sample_other_task,
    sample_real_text,
    save_corpus_cache,
    score_instruction_pool,
)
from .config import BUNDLED_TASKS, TOY_CORPUS, TOY_TASKS, RunConfig
from .errors import CompatibilityError, ConfigError, InsufficientDataError, TaskSkipped, WorkbenchError
from .evaluator import (
    EvalReport,
    EvalSetting,
    Regime,
    average_reports,
    evaluate,
    optimal_layer,
    steer_cross_model,
    sweep_joint_layers,
)
from .fv_engine import (
    ActivationForm,
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
    compute_cie_tensor,
    compute_mean_activations,
    is_eligible,
    select_heads,
)
from .heads import head_to_str
from .instruction_forge import (
    FixtureGenerator,
    InstructionSet,
    LengthRegime,
    OpenAIGenerator,
    RecordingGenerator,
    TopInstructions,
    generate_instructions,
    select_top_instructions,
)
from .miniature import is_miniature_id, toy_tasks
from .model_gateway import ModelGateway, load_gateway
from .store import (
    ArtifactKind,
    ReportStore,
    load_artifact,
    model_slug,
    write_artifact,
)
from .task_corpus import (
    PromptForm,
    PromptInstance,
    SplitSpec,
    TaskDataset,
    demo_prompts,
    derive_seed,
    load_tasks,
    render_instruction_prompt,
    split,
)
from .task_data import load_bundled_tasks, toy_corpus_path, toy_instruction_fixture_path

__all__ = ["CommandResult", "Workbench"]

REGIME_FORMS = {
    LengthRegime.SHORT: ActivationForm.INSTRUCTION_SHORT,
    LengthRegime.LONG: ActivationForm.INSTRUCTION_LONG,
}

# head set name -> (family whose scores select it, selection mode)
HEAD_SETS = {
    "demo": ("demo", SelectionMode.TOP),
    "instruction": ("instruction", SelectionMode.TOP),
    "demo_least_important": ("demo", SelectionMode.LEAST_IMPORTANT_ABS),
    "demo_bottom": ("demo", SelectionMode.BOTTOM),
    "instruction_least_important": ("instruction", SelectionMode.LEAST_IMPORTANT_ABS),
    "instruction_bottom": ("instruction", SelectionMode.BOTTOM),
}

_FAMILY_PROVENANCE = {"demo": HeadProvenance.DEMO, "instruction": HeadProvenance.INSTRUCTION}

# evaluated function vector families: name -> (head set, activation forms averaged over)
FV_FAMILIES = {
    "demo": ("demo", ["demo"]),
    "instruction": ("instruction", ["instruction_short", "instruction_long"]),
    "heterogeneous_demo_heads": ("demo", ["instruction_short", "instruction_long"]),
    "heterogeneous_instruction_heads": ("instruction", ["demo"]),
    "demo_least_important": ("demo_least_important", ["demo"]),
    "demo_bottom": ("demo_bottom", ["demo"]),
    "instruction_least_important": ("instruction_least_important", ["instruction_short", "instruction_long"]),
    "instruction_bottom": ("instruction_bottom", ["instruction_short", "instruction_long"]),
}



def demo_attempt_limit(budget: int, accuracy: float, slack: int = 10) -> int:
    """Candidates to try for budget successes at the measured accuracy

    A task the model never answers still gets slack * budget tries, since
    fresh contexts can succeed where the measured pass did not.
    """
    if accuracy <= 0:
        return slack * budget
    return max(slack * budget, math.ceil(slack * budget / accuracy))


@dataclass
class CommandResult:
    """What a command did"""

    written: t.List[pathlib.Path] = field(default_factory=list)
    reused: int = 0
    skipped: t.Dict[str, str] = field(default_factory=dict)

    def merge(self, other: "CommandResult") -> "CommandResult":
        self.written.extend(other.written)
        self.reused += other.reused
        self.skipped.update(other.skipped)
        return self


class Workbench:
    """Runs the pipeline commands for one RunConfig

    Args:
        config: the run configuration
        force: accept artifacts written under a different config hash
        gateway_factory: model_id -> gateway; defaults to loading the model named by the id
    """

    def __init__(
        self,
        config: RunConfig,
        force: bool = False,
        gateway_factory: t.Optional[t.Callable[[str], t.Any]] = None,
    ):
        self.config = config
        self.force = force
        self.config_hash = config.config_hash()
        self.root = config.resolve(config.output_root)
        self._gateway_factory = gateway_factory or self._load_gateway
        self._gateways: t.Dict[str, t.Any] = {}
        self._tasks: t.Optional[t.Dict[str, TaskDataset]] = None
        self._stores: t.Dict[str, ReportStore] = {}
        self._pools: t.Dict[str, t.Dict[str, t.List[ScoredText]]] = {}

    # resources

    def _load_gateway(self, model_id: str) -> ModelGateway:
        miniature_kwargs = {}
        if is_miniature_id(model_id):
            miniature_kwargs = {
                "seed": self.config.seed,
                "training_steps": self.config.miniature_training_steps,
                "checkpoint_dir": self.root / "checkpoints",
            }
        return load_gateway(model_id, device=self.config.device, dtype=self.config.dtype, **miniature_kwargs)

    def gateway(self, model_id: str):
        if model_id not in self._gateways:
            logging.info(f"loading model {model_id}")
            gateway = self._gateway_factory(model_id)
            self.config.check_heads(gateway.profile.total_heads, model_id)
            self._gateways[model_id] = gateway
        return self._gateways[model_id]

    def tasks(self) -> t.Dict[str, TaskDataset]:
        if self._tasks is None:
            tasks: t.Dict[str, TaskDataset] = {}
            for path in self.config.task_paths:
                if path == BUNDLED_TASKS:
                    loaded = load_bundled_tasks()
                elif path == TOY_TASKS:
                    loaded = toy_tasks()
                else:
                    loaded = load_tasks([self.config.resolve(path)])
                for task_id, task in loaded.items():
                    if task_id in tasks:
                        raise ConfigError(f"task {task_id} is listed twice")
                    tasks[task_id] = task
            self._tasks = tasks
        return self._tasks

    def split(self, task: TaskDataset) -> SplitSpec:
        return split(task, self.config.seed, self.config.budgets.train_fraction)

    def chance(self, task: TaskDataset) -> float:
        if task.label_set:
            return task.chance
        return self.config.budgets.open_generation_chance

    def store(self, model_id: str) -> ReportStore:
        if model_id not in self._stores:
            self._stores[model_id] = ReportStore(
                self.model_dir(model_id) / "reports.jsonl", self.config_hash, force=self.force
            )
        return self._stores[model_id]

    # paths

    def model_dir(self, model_id: str) -> pathlib.Path:
        return self.root / model_slug(model_id)

    def instructions_path(self, model_id: str, task_id: str, regime: LengthRegime, top: bool = False) -> pathlib.Path:
        suffix = ".top.json" if top else ".json"
        return self.model_dir(model_id) / "instructions" / f"{task_id}.{regime.value}{suffix}"

    def cache_path(self, model_id: str) -> pathlib.Path:
        return self.model_dir(model_id) / "cache" / "corpus.jsonl"

    def baselines_path(self, model_id: str, task_id: str, regime: LengthRegime) -> pathlib.Path:
        return self.model_dir(model_id) / "baselines" / f"{task_id}.{regime.value}.json"

    def summary_path(self, model_id: str, task_id: str, form: ActivationForm) -> pathlib.Path:
        return self.model_dir(model_id) / "train" / task_id / f"{form.value}.summary.json"

    def cie_path(self, model_id: str, task_id: str, form: ActivationForm, condition: CieCondition) -> pathlib.Path:
        return self.model_dir(model_id) / "train" / task_id / f"{form.value}.{condition.value}.cie.json"

    def heads_path(self, model_id: str, name: str) -> pathlib.Path:
        return self.model_dir(model_id) / "heads" / f"{name}.json"

    def fv_path(self, model_id: str, task_id: str, heads: str, form: str) -> pathlib.Path:
        return self.model_dir(model_id) / "fv" / f"{task_id}.{heads}.{form}.json"

    def analysis_dir(self) -> pathlib.Path:
        return self.root / "analysis"

    # artifact helpers

    def _write(
        self, path: pathlib.Path, kind: ArtifactKind, payload: t.Dict[str, t.Any], model_id: str
    ) -> pathlib.Path:
        write_artifact(path, kind, payload, self.config_hash, model_id)
        return path

    def _load(self, path: pathlib.Path, kind: ArtifactKind, model_id: str) -> t.Dict[str, t.Any]:
        return load_artifact(path, kind, self.config_hash, model_id, self.force)

    def _record_skip(self, result: CommandResult, model_id: str, task_id: str, reason: str):
        key = f"{model_id}/{task_id}"
        logging.warning(f"skipping {key}: {reason}")
        result.skipped[key] = reason
        path = self.model_dir(model_id) / "skipped.json"
        skipped = {}
        if path.is_file():
            skipped = load_artifact(path, ArtifactKind.SKIPPED, force=True).get("skipped", {})
        skipped[task_id] = reason
        self._write(path, ArtifactKind.SKIPPED, {"skipped": dict(sorted(skipped.items()))}, model_id)

    def _regimes(self) -> t.List[LengthRegime]:
        return [LengthRegime(r) for r in self.config.instruction_regimes]

    def load_instruction_set(self, model_id: str, task_id: str, regime: LengthRegime) -> InstructionSet:
        path = self.instructions_path(model_id, task_id, regime)
        if not path.is_file():
            raise ConfigError(f"no instructions at {path}; run generate-instructions first")
        return InstructionSet.fromdict(self._load(path, ArtifactKind.INSTRUCTIONS, model_id))

    def load_summary(self, model_id: str, task_id: str, form: ActivationForm) -> t.Optional[ActivationSummary]:
        path = self.summary_path(model_id, task_id, form)
        if not path.is_file():
            return None
        return ActivationSummary.fromdict(self._load(path, ArtifactKind.ACTIVATIONS, model_id))

    def load_cie(self, model_id: str) -> t.List[CieTensor]:
        tensors = []
        for path in sorted((self.model_dir(model_id) / "train").glob("*/*.cie.json")):
            tensors.append(CieTensor.fromdict(self._load(path, ArtifactKind.CIE, model_id)))
        return tensors

    def load_head_set(self, model_id: str, name: str) -> t.Optional[HeadSet]:
        path = self.heads_path(model_id, name)
        if not path.is_file():
            return None
        return HeadSet.fromdict(self._load(path, ArtifactKind.HEADS, model_id))

    def load_fv(self, model_id: str, task_id: str, heads: str, form: str) -> t.Optional[FunctionVector]:
        path = self.fv_path(model_id, task_id, heads, form)
        if not path.is_file():
            return None
        return FunctionVector.fromdict(self._load(path, ArtifactKind.FUNCTION_VECTOR, model_id))

    def top_instruction_texts(self, model_id: str, task_id: str, regime: LengthRegime) -> t.Optional[t.List[str]]:
        path = self.instructions_path(model_id, task_id, regime, top=True)
        if not path.is_file():
            return None
        top = TopInstructions.fromdict(self._load(path, ArtifactKind.TOP_INSTRUCTIONS, model_id))
        instruction_set = self.load_instruction_set(model_id, task_id, regime)
        return [instruction_set.text(spec_id) for spec_id in top.spec_ids]

    # generate-instructions

    def make_generator(self):
        settings = self.config.generator
        if settings.kind == "fixture":
            if settings.fixture_path:
                generator = FixtureGenerator(self.config.resolve(settings.fixture_path))
            else:
                generator = FixtureGenerator(toy_instruction_fixture_path())
        else:
            generator = OpenAIGenerator(settings.model, temperature=settings.temperature)
        if settings.record_path:
            generator = RecordingGenerator(generator, self.config.resolve(settings.record_path))
        return generator

    def generate_instructions(self, rounds: t.Optional[int] = None) -> CommandResult:
        """Write one instruction file per (model, task, regime)"""
        result = CommandResult()
        rounds = rounds or self.config.budgets.generation_rounds
        generator = self.make_generator()
        try:
            for model_id in self.config.model_ids:
                gateway = self.gateway(model_id)
                for task_id, task in self.tasks().items():
                    for regime in self._regimes():
                        path = self.instructions_path(model_id, task_id, regime)
                        if path.is_file():
                            self._load(path, ArtifactKind.INSTRUCTIONS, model_id)
                            result.reused += 1
                            continue
                        instruction_set = generate_instructions(
                            task,
                            generator,
                            regime,
                            rounds=rounds,
                            gateway=gateway,
                            k=self.config.budgets.shots,
                            seed=self.config.seed,
                            instructions_per_round=self.config.budgets.instructions_per_round,
                            max_short_tokens=self.config.budgets.short_instruction_max_tokens,
                        )
                        result.written.append(
                            self._write(path, ArtifactKind.INSTRUCTIONS, instruction_set.asdict(), model_id)
                        )
                        n = len(instruction_set.instructions)
                        logging.info(f"{model_id} {task_id} ({regime.value}): {n} instructions")
        finally:
            if isinstance(generator, RecordingGenerator):
                generator.save()
        return result

    # build-cache

    def corpus_source(self) -> str:
        if self.config.corpus == TOY_CORPUS:
            return str(toy_corpus_path())
        if self.config.corpus.startswith("hf:"):
            return self.config.corpus
        return str(self.config.resolve(self.config.corpus))

    def build_cache(self) -> CommandResult:
        """Score corpus prefixes for every model"""
        result = CommandResult()
        source = self.corpus_source()
        for model_id in self.config.model_ids:
            path = self.cache_path(model_id)
            if path.is_file():
                load_corpus_cache(path, model_id)
                result.reused += 1
                continue
            cache = build_corpus_cache(
                self.gateway(model_id),
                read_corpus(source, self.config.seed),
                target=self.config.budgets.corpus_cache_target,
                max_tokens=self.config.budgets.corpus_max_tokens,
                source=self.config.corpus,
                source_hash=corpus_hash(source),
            )
            save_corpus_cache(path, cache, self.config_hash)
            result.written.append(path)
            logging.info(f"{model_id}: cached {len(cache)} corpus prefixes")
        return result

    # train

    def _demo_candidates(
        self, task: TaskDataset, split_spec: SplitSpec, shuffle: bool, stream: int
    ) -> t.Iterator[PromptInstance]:
        """Demonstration prompts over train queries, reshuffled pass after pass"""
        if not split_spec.indices_train:
            raise InsufficientDataError(f"task {task.task_id} has no train queries")
        seed = derive_seed(self.config.seed, stream)
        for n in itertools.count():
            order = np.random.default_rng(derive_seed(seed, n)).permutation(list(split_spec.indices_train))
            yield from demo_prompts(
                task,
                split_spec,
                [int(i) for i in order],
                k=self.config.budgets.shots,
                shuffle_labels=shuffle,
                seed=derive_seed(seed, n, 1),
            )

    def _demo_accuracy(self, gateway, task: TaskDataset, split_spec: SplitSpec) -> float:
        """Clean demonstration accuracy over one seeded pass of the train queries"""
        queries = len(split_spec.indices_train)
        prompts = itertools.islice(self._demo_candidates(task, split_spec, shuffle=False, stream=3), queries)
        return sum(1 for prompt in prompts if gateway.is_success(prompt)) / queries

    def _train_demo(self, gateway, task: TaskDataset, split_spec: SplitSpec, result: CommandResult):
        model_id = gateway.model_id
        budgets = self.config.budgets
        form = ActivationForm.DEMO
        summary_path = self.summary_path(model_id, task.task_id, form)
        if summary_path.is_file():
            data = self._load(summary_path, ArtifactKind.ACTIVATIONS, model_id)
            summary, eligible = ActivationSummary.fromdict(data), data["eligible"]
            result.reused += 1
        else:
            accuracy = self._demo_accuracy(gateway, task, split_spec)
            eligible = is_eligible(accuracy, self.chance(task))
            prompts, attempts = collect_successful_prompts(
                self._demo_candidates(task, split_spec, shuffle=False, stream=1),
                gateway,
                budgets.activation_prompts,
                task.task_id,
                max_attempts=demo_attempt_limit(budgets.activation_prompts, accuracy),
            )
            summary = compute_mean_activations(
                prompts, gateway, task.task_id, form, budgets.activation_prompts, self.config.seed
            )
            if not eligible:
                logging.info(f"{model_id}/{task.task_id}: demo accuracy {accuracy:.3f} is not above chance")
            payload = summary.asdict()
            payload.update(
                {"eligible": eligible, "accuracy": accuracy, "chance": self.chance(task), "attempts": attempts}
            )
            result.written.append(self._write(summary_path, ArtifactKind.ACTIVATIONS, payload, model_id))

        condition = CieCondition.SHUFFLED_DEMO
        cie_path = self.cie_path(model_id, task.task_id, form, condition)
        if cie_path.is_file():
            result.reused += 1
            return
        shuffled = self._demo_candidates(task, split_spec, shuffle=True, stream=2)
        prompts = list(itertools.islice(shuffled, budgets.cie_prompts))
        tensor = compute_cie_tensor(prompts, summary, gateway, condition, eligible=eligible, seed=self.config.seed)
        result.written.append(self._write(cie_path, ArtifactKind.CIE, tensor.asdict(), model_id))

    def _top_instructions(
        self, gateway, task: TaskDataset, split_spec: SplitSpec, regime: LengthRegime, result: CommandResult
    ) -> t.Tuple[InstructionSet, TopInstructions]:
        model_id = gateway.model_id
        instruction_set = self.load_instruction_set(model_id, task.task_id, regime)
        path = self.instructions_path(model_id, task.task_id, regime, top=True)
        if path.is_file():
            result.reused += 1
            return instruction_set, TopInstructions.fromdict(self._load(path, ArtifactKind.TOP_INSTRUCTIONS, model_id))
        top = select_top_instructions(
            task,
            instruction_set,
            gateway,
            J=self.config.budgets.top_instructions,
            min_successes=self.config.budgets.min_successes,
            split_spec=split_spec,
        )
        result.written.append(self._write(path, ArtifactKind.TOP_INSTRUCTIONS, top.asdict(), model_id))
        return instruction_set, top

    def _instruction_pool(self, model_id: str, gateway) -> t.Dict[str, t.List[ScoredText]]:
        """Scored instructions of every task and regime, for other-task baselines"""
        if model_id not in self._pools:
            sets = []
            for task_id in self.tasks():
                for regime in self._regimes():
                    path = self.instructions_path(model_id, task_id, regime)
                    if path.is_file():
                        sets.append(InstructionSet.fromdict(self._load(path, ArtifactKind.INSTRUCTIONS, model_id)))
            self._pools[model_id] = score_instruction_pool(sets, gateway)
        return self._pools[model_id]

    def _baselines(
        self,
        gateway,
        task: TaskDataset,
        regime: LengthRegime,
        instruction_set: InstructionSet,
        top: TopInstructions,
        result: CommandResult,
    ) -> t.Dict[str, t.Dict[str, t.List[BaselineSpec]]]:
        """Baselines per method and top instruction, created on first use"""
        model_id = gateway.model_id
        budgets = self.config.budgets
        path = self.baselines_path(model_id, task.task_id, regime)
        if path.is_file():
            data = self._load(path, ArtifactKind.BASELINES, model_id)["baselines"]
            result.reused += 1
            return {
                method: {spec_id: [BaselineSpec.fromdict(b) for b in specs] for spec_id, specs in by_spec.items()}
                for method, by_spec in data.items()
            }

        cache = None
        baselines: t.Dict[str, t.Dict[str, t.List[BaselineSpec]]] = {}
        for method in self.config.baseline_methods:
            method = BaselineMethod(method)
            by_spec = baselines.setdefault(method.value, {})
            for rank, spec_id in enumerate(top.spec_ids):
                text = instruction_set.text(spec_id)
                if method == BaselineMethod.EQUIPROBABLE:
                    by_spec[spec_id] = [
                        sample_equiprobable(
                            text,
                            gateway,
                            budgets.equiprobable_t0,
                            budgets.equiprobable_dt,
                            seed=derive_seed(self.config.seed, 3, _regime_index(regime), rank, n),
                            source_spec_id=spec_id,
                            index=n,
                        )
                        for n in range(budgets.baselines_per_instruction)
                    ]
                elif method == BaselineMethod.REAL_TEXT:
                    if cache is None:
                        cache_path = self.cache_path(model_id)
                        if not cache_path.is_file():
                            raise ConfigError(f"no corpus cache at {cache_path}; run build-cache first")
                        cache = load_corpus_cache(cache_path, model_id)
                    by_spec[spec_id] = sample_real_text(
                        text, cache, gateway, budgets.baselines_per_instruction, budgets.baseline_candidates, spec_id
                    )
                else:
                    by_spec[spec_id] = sample_other_task(
                        text,
                        task.task_id,
                        self._instruction_pool(model_id, gateway),
                        gateway,
                        budgets.baselines_per_instruction,
                        budgets.baseline_candidates,
                        spec_id,
                    )
        payload = {
            "task_id": task.task_id,
            "regime": regime.value,
            "baselines": {
                method: {spec_id: [b.asdict() for b in specs] for spec_id, specs in by_spec.items()}
                for method, by_spec in baselines.items()
            },
        }
        result.written.append(self._write(path, ArtifactKind.BASELINES, payload, model_id))
        return baselines

    def _train_instruction(
        self, gateway, task: TaskDataset, split_spec: SplitSpec, regime: LengthRegime, result: CommandResult
    ):
        model_id = gateway.model_id
        budgets = self.config.budgets
        form = REGIME_FORMS[regime]
        instruction_set, top = self._top_instructions(gateway, task, split_spec, regime, result)
        train = list(split_spec.indices_train)

        summary_path = self.summary_path(model_id, task.task_id, form)
        if summary_path.is_file():
            data = self._load(summary_path, ArtifactKind.ACTIVATIONS, model_id)
            summary, eligible = ActivationSummary.fromdict(data), data["eligible"]
            result.reused += 1
        else:
            prompts = []
            for rank, spec_id in enumerate(top.spec_ids):
                rng = np.random.default_rng(derive_seed(self.config.seed, 4, _regime_index(regime), rank))
                order = rng.permutation(train)
                candidates = (
                    render_instruction_prompt(
                        instruction_set.text(spec_id), *task.pairs[int(i)], source_spec_id=spec_id, query_index=int(i)
                    )
                    for i in order
                )
                successful, _ = collect_successful_prompts(
                    candidates, gateway, budgets.prompts_per_instruction, task.task_id
                )
                prompts.extend(successful)
            summary = compute_mean_activations(
                prompts,
                gateway,
                task.task_id,
                form,
                budgets.prompts_per_instruction * budgets.top_instructions,
                self.config.seed,
            )
            accuracy = math.fsum(acc for _, acc in top.ranked) / len(top.ranked)
            eligible = is_eligible(accuracy, self.chance(task))
            payload = summary.asdict()
            payload.update({"eligible": eligible, "accuracy": accuracy, "chance": self.chance(task)})
            result.written.append(self._write(summary_path, ArtifactKind.ACTIVATIONS, payload, model_id))

        baselines = None
        for method in self.config.baseline_methods:
            condition = CieCondition(method)
            cie_path = self.cie_path(model_id, task.task_id, form, condition)
            if cie_path.is_file():
                result.reused += 1
                continue
            if baselines is None:
                baselines = self._baselines(gateway, task, regime, instruction_set, top, result)
            order = np.random.default_rng(derive_seed(self.config.seed, 5, _regime_index(regime))).permutation(train)
            prompts = []
            for spec_id in top.spec_ids:
                for baseline in baselines[method][spec_id][: budgets.cie_prompts_per_instruction]:
                    query = int(order[len(prompts) % len(order)])
                    prompts.append(
                        render_instruction_prompt(
                            baseline.text,
                            *task.pairs[query],
                            source_spec_id=baseline.baseline_id,
                            form=PromptForm.BASELINE_INSTRUCTION,
                            query_index=query,
                        )
                    )
            tensor = compute_cie_tensor(prompts, summary, gateway, condition, eligible=eligible, seed=self.config.seed)
            result.written.append(self._write(cie_path, ArtifactKind.CIE, tensor.asdict(), model_id))

    def train(self) -> CommandResult:
        """Mean activations and causal scores for every (model, task, form, condition)"""
        result = CommandResult()
        for model_id in self.config.model_ids:
            gateway = self.gateway(model_id)
            for task_id, task in self.tasks().items():
                split_spec = self.split(task)
                try:
                    self._train_demo(gateway, task, split_spec, result)
                except ConfigError:
                    raise
                except WorkbenchError as e:
                    self._record_skip(result, model_id, task_id, f"demo: {e}")
                for regime in self._regimes():
                    try:
                        self._train_instruction(gateway, task, split_spec, regime, result)
                    except ConfigError:
                        raise
                    except TaskSkipped as e:
                        self._record_skip(
                            result, model_id, task_id, f"{regime.value}: {e} (success counts {e.success_counts})"
                        )
                    except WorkbenchError as e:
                        self._record_skip(result, model_id, task_id, f"{regime.value}: {e}")
        return result

    # select-heads

    def _family_records(self, model_id: str) -> t.Dict[str, t.List[CieTensor]]:
        families: t.Dict[str, t.List[CieTensor]] = {"demo": [], "instruction": []}
        for tensor in self.load_cie(model_id):
            families[tensor.form.source.value].append(tensor)
        return families

    def select_heads(self) -> CommandResult:
        """Head sets from aggregated causal scores, then function vectors for every task"""
        result = CommandResult()
        k = self.config.budgets.top_heads
        for model_id in self.config.model_ids:
            gateway = self.gateway(model_id)
            families = self._family_records(model_id)
            aggregates = {}
            for family, records in families.items():
                try:
                    aggregates[family] = aggregate_cie(records)
                except WorkbenchError as e:
                    self._record_skip(result, model_id, f"heads:{family}", str(e))
                    continue
                payload = {
                    "family": family,
                    "scores": {head_to_str(h): s for h, s in sorted(aggregates[family].items())},
                }
                path = self.heads_path(model_id, f"aggregate.{family}")
                result.written.append(self._write(path, ArtifactKind.HEADS, payload, model_id))

            for name, (family, mode) in HEAD_SETS.items():
                if family not in aggregates:
                    continue
                provenance = _FAMILY_PROVENANCE[family] if mode == SelectionMode.TOP else None
                head_set = select_heads(aggregates[family], k, mode, provenance)
                path = self.heads_path(model_id, name)
                result.written.append(self._write(path, ArtifactKind.HEADS, head_set.asdict(), model_id))

            # one top set per instruction cell, for the agreement table
            for form in REGIME_FORMS.values():
                for method in self.config.baseline_methods:
                    cells = [r for r in families["instruction"] if r.form == form and r.condition.value == method]
                    if not cells:
                        continue
                    try:
                        head_set = select_heads(aggregate_cie(cells), k, SelectionMode.TOP, HeadProvenance.INSTRUCTION)
                    except WorkbenchError as e:
                        logging.warning(f"{model_id}: no head set for {form.value}/{method}: {e}")
                        continue
                    path = self.heads_path(model_id, f"condition.{form.value}.{method}")
                    result.written.append(self._write(path, ArtifactKind.HEADS, head_set.asdict(), model_id))

            result.merge(self._build_fvs(model_id, gateway.profile.n_layers))
        return result

    def _build_fvs(self, model_id: str, n_layers: int) -> CommandResult:
        """One function vector per task for every (head set, form) pair evaluate uses"""
        result = CommandResult()
        pairs = sorted({(heads, form) for heads, forms in FV_FAMILIES.values() for form in forms})
        head_sets = {name: self.load_head_set(model_id, name) for name in HEAD_SETS}
        for task_id in self.tasks():
            summaries = {form: self.load_summary(model_id, task_id, form) for form in ActivationForm}
            for heads, form in pairs:
                head_set, summary = head_sets[heads], summaries[ActivationForm(form)]
                if head_set is None or summary is None:
                    continue
                fv = build_fv(head_set, summary, model_id, n_layers)
                path = self.fv_path(model_id, task_id, heads, form)
                result.written.append(self._write(path, ArtifactKind.FUNCTION_VECTOR, fv.asdict(), model_id))
        return result

    # evaluate

    def _family_fvs(self, model_id: str, task_id: str, family: str) -> t.List[FunctionVector]:
        heads, forms = FV_FAMILIES[family]
        fvs = [self.load_fv(model_id, task_id, heads, form) for form in forms]
        return [fv for fv in fvs if fv is not None]

    def _put(self, store: ReportStore, report: EvalReport, result: CommandResult):
        if store.put(report.key, report.asdict(), report.model_id):
            logging.info(f"{report.key}: accuracy {report.accuracy:.3f} (sem {report.sem:.3f})")
        else:
            result.reused += 1

    def _run(
        self,
        gateway,
        task: TaskDataset,
        setting: EvalSetting,
        result: CommandResult,
        store: t.Optional[ReportStore] = None,
        **kwargs,
    ) -> EvalReport:
        """Evaluate one setting unless its report is already stored"""
        store = store or self.store(gateway.model_id)
        key = f"{gateway.model_id}|{task.task_id}|{setting.describe()}"
        if key in store:
            result.reused += 1
            return _report_from_stored(store.get(key), setting)
        report = evaluate(
            task,
            setting,
            gateway,
            seed=self.config.seed,
            split_spec=self.split(task),
            max_queries=self.config.max_eval_queries,
            **kwargs,
        )
        self._put(store, report, result)
        return report

    def _evaluate_task(self, model_id: str, task: TaskDataset, result: CommandResult):
        gateway = self.gateway(model_id)
        store = self.store(model_id)
        layer = self.config.layer_for(gateway.profile.n_layers)
        shots = self.config.budgets.shots
        sweep = range(gateway.profile.n_layers) if self.config.sweep_layers else None

        for regime in (Regime(r) for r in self.config.regimes):
            if regime == Regime.INSTRUCTED_ZERO_SHOT:
                continue
            self._run(gateway, task, EvalSetting(regime, baseline_only=True, shots=shots), result)

            for family in FV_FAMILIES:
                reports = [
                    self._run(
                        gateway, task, EvalSetting(regime, [(fv, layer)], shots=shots, label=family), result,
                        sweep_range=sweep,
                    )
                    for fv in self._family_fvs(model_id, task.task_id, family)
                ]
                if len(reports) > 1:
                    self._put(store, average_reports(reports, f"{family}:mean"), result)

            demo = self._family_fvs(model_id, task.task_id, "demo")
            instruction = self._family_fvs(model_id, task.task_id, "instruction")
            pairs = [(d, i, "joint") for d in demo for i in instruction]
            pairs += [(fv, fv, "twice") for fv in demo + instruction]
            for fv_a, fv_b, label in pairs:
                joint = EvalSetting(regime, [(fv_a, layer), (fv_b, layer)], shots=shots, label=label)
                self._run(gateway, task, joint, result)

            if self.config.joint_sweep:
                for fv_a, fv_b in ((d, i) for d in demo for i in instruction):
                    self._joint_sweep(gateway, task, regime, fv_a, fv_b, result)

        if self.config.skyline:
            skyline = EvalSetting(Regime.CLEAN_10_SHOT, baseline_only=True, shots=shots, label="skyline")
            self._run(gateway, task, skyline, result)
            instructed = []
            for regime in self._regimes():
                texts = self.top_instruction_texts(model_id, task.task_id, regime)
                if texts:
                    setting = EvalSetting(
                        Regime.INSTRUCTED_ZERO_SHOT, baseline_only=True, label=f"skyline:{regime.value}"
                    )
                    instructed.append(self._run(gateway, task, setting, result, instructions=texts))
            if len(instructed) > 1:
                self._put(store, average_reports(instructed, "skyline:mean"), result)

    def _joint_sweep(self, gateway, task: TaskDataset, regime: Regime, fv_a, fv_b, result: CommandResult):
        """Accuracy grid over layer pairs, stored as one artifact per (task, regime, form pair)"""
        model_id = gateway.model_id
        name = f"{task.task_id}.{regime.value}.{fv_a.activation_form.value}+{fv_b.activation_form.value}.json"
        path = self.model_dir(model_id) / "joint_sweep" / name
        if path.is_file():
            result.reused += 1
            return
        grid, best = sweep_joint_layers(
            task,
            fv_a,
            fv_b,
            EvalSetting(regime, shots=self.config.budgets.shots, label="joint_sweep"),
            gateway,
            seed=self.config.seed,
            split_spec=self.split(task),
            max_queries=self.config.max_eval_queries,
        )
        payload = {
            "task_id": task.task_id,
            "regime": regime.value,
            "forms": [fv_a.activation_form.value, fv_b.activation_form.value],
            "grid": {f"{a},{b}": accuracy for (a, b), accuracy in sorted(grid.items())},
            "best": list(best),
        }
        result.written.append(self._write(path, ArtifactKind.REPORT, payload, model_id))

    def evaluate(self) -> CommandResult:
        """Baseline, function vector, joint, control and skyline evaluations for every task"""
        result = CommandResult()
        for model_id in self.config.model_ids:
            for task_id, task in self.tasks().items():
                try:
                    self._evaluate_task(model_id, task, result)
                except (ConfigError, CompatibilityError):
                    raise
                except WorkbenchError as e:
                    self._record_skip(result, model_id, task_id, f"evaluate: {e}")
        return result

    # steer

    def steer_targets(self, source: str) -> t.List[str]:
        targets = self.config.steer_target_model_ids or [m for m in self.config.model_ids if m != source]
        return [m for m in targets if m != source]

    def steer(
        self,
        source_model_id: t.Optional[str] = None,
        target_model_ids: t.Optional[t.Sequence[str]] = None,
    ) -> CommandResult:
        """Evaluate the source model's function vectors on each target model

        Raises:
            CompatibilityError: a target's hidden size or depth differs from the source's
        """
        result = CommandResult()
        source = source_model_id or self.config.steer_source_model_id
        if not source:
            raise ConfigError("no steering source model; set steer_source_model_id")
        targets = list(target_model_ids or self.steer_targets(source))
        if not targets:
            raise ConfigError(f"no steering target other than {source}")
        shots = self.config.budgets.shots
        for target in targets:
            gateway = self.gateway(target)
            store = self.store(target)
            layer = self.config.layer_for(gateway.profile.n_layers)
            for task_id, task in self.tasks().items():
                for family in ("demo", "instruction"):
                    fvs = self._family_fvs(source, task_id, family)
                    if not fvs:
                        self._record_skip(result, target, task_id, f"steer: no {family} function vector from {source}")
                        continue
                    for regime in (Regime(r) for r in self.config.regimes):
                        if regime == Regime.INSTRUCTED_ZERO_SHOT:
                            continue
                        reports = []
                        for fv in fvs:
                            steered = EvalSetting(regime, [(fv, layer)], shots=shots, label=f"steer:{family}")
                            key = f"{target}|{task_id}|{steered.describe()}"
                            if key in store:
                                result.reused += 1
                                reports.append(_report_from_stored(store.get(key), steered))
                                continue
                            report = steer_cross_model(
                                task,
                                fv,
                                gateway,
                                EvalSetting(regime, shots=shots, label=f"steer:{family}"),
                                layer=layer,
                                seed=self.config.seed,
                                split_spec=self.split(task),
                                max_queries=self.config.max_eval_queries,
                            )
                            self._put(store, report, result)
                            reports.append(report)
                        if len(reports) > 1:
                            self._put(store, average_reports(reports, f"steer:{family}:mean"), result)
        return result

    # analyze

    def analyze(self) -> CommandResult:
        """Tables, figures and the index page from every stored artifact

        Causal score tables cover the first model with both head sets.
        """
        result = CommandResult()
        reports: t.List[t.Dict[str, t.Any]] = []
        overlaps = []
        curves = []
        agreement = {}
        cie = None
        model_ids = list(self.config.model_ids)
        if self.config.steer_source_model_id:
            model_ids += [m for m in self.steer_targets(self.config.steer_source_model_id) if m not in model_ids]
        for model_id in model_ids:
            if (self.model_dir(model_id) / "reports.jsonl").is_file():
                reports.extend(self.store(model_id).records())

            demo_heads = self.load_head_set(model_id, "demo")
            instruction_heads = self.load_head_set(model_id, "instruction")
            if demo_heads is not None and instruction_heads is not None:
                overlap = analyst.head_overlap(demo_heads, instruction_heads, model_id)
                overlaps.append(overlap)
                task_curves = []
                for task_id in self.tasks():
                    summaries = {form: self.load_summary(model_id, task_id, form) for form in ActivationForm}
                    if all(s is not None for s in summaries.values()):
                        task_curves.extend(analyst.shared_head_similarity(summaries, overlap.shared, model_id))
                curves.extend(analyst.average_curves(task_curves))
                if cie is None:
                    scores = {
                        family: analyst.per_task_scores(records)
                        for family, records in self._family_records(model_id).items()
                        if records
                    }
                    cie = analyst.cie_tables(scores, {"demo": demo_heads, "instruction": instruction_heads})

            condition_sets = {
                path.stem[len("condition.") :]: self.load_head_set(model_id, path.stem)
                for path in sorted((self.model_dir(model_id) / "heads").glob("condition.*.json"))
            }
            if condition_sets:
                agreement[model_id] = analyst.condition_agreement(condition_sets)

        result.written.extend(
            analyst.emit_tables_and_plots(
                self.analysis_dir(),
                self.config_hash,
                reports=reports,
                overlaps=overlaps,
                similarity=curves,
                cie=cie,
                agreement=agreement,
                extra_tables={"optimal_layers": optimal_layer_table(reports)},
            )
        )
        return result

    def run_all(self) -> CommandResult:
        """Every command in pipeline order"""
        result = CommandResult()
        result.merge(self.generate_instructions())
        if BaselineMethod.REAL_TEXT.value in self.config.baseline_methods:
            result.merge(self.build_cache())
        result.merge(self.train())
        result.merge(self.select_heads())
        result.merge(self.evaluate())
        source = self.config.steer_source_model_id
        if source and self.steer_targets(source):
            result.merge(self.steer())
        result.merge(self.analyze())
        return result


def _regime_index(regime: LengthRegime) -> int:
    return list(LengthRegime).index(regime)


def _report_from_stored(stored: t.Dict[str, t.Any], setting: EvalSetting) -> EvalReport:
    curve = stored.get("per_layer_curve")
    return EvalReport(
        model_id=stored["model_id"],
        task_id=stored["task_id"],
        setting=setting,
        accuracy=stored["accuracy"],
        n_queries=stored["n_queries"],
        sem=stored["sem"],
        per_layer_curve={int(k): v for k, v in curve.items()} if curve else None,
        source_model_id=stored.get("source_model_id"),
        query_hash=stored.get("query_hash", ""),
    )


def optimal_layer_table(reports: t.Sequence[t.Mapping[str, t.Any]]) -> pd.DataFrame:
    """Empirically optimal layer per (model, function vector family)

    The zero-shot and shuffled-demonstration sweeps of a family are averaged
    over tasks, then optimal_layer picks the best layer of the two curves.
    """
    curves: t.Dict[t.Tuple[str, str], t.Dict[str, t.Dict[int, t.List[float]]]] = {}
    for report in reports:
        curve = report.get("per_layer_curve")
        label = report["setting"].get("label", "")
        if not curve or ":" in label:
            continue
        regime = report["setting"]["regime"]
        by_layer = curves.setdefault((report["model_id"], label), {}).setdefault(regime, {})
        for layer, accuracy in curve.items():
            by_layer.setdefault(int(layer), []).append(accuracy)
    rows = []
    for (model_id, label), by_regime in sorted(curves.items()):
        mean_curves = [
            {layer: math.fsum(values) / len(values) for layer, values in by_layer.items()}
            for _, by_layer in sorted(by_regime.items())
        ]
        rows.append(
            {
                "model_id": model_id,
                "family": label,
                "regimes": "+".join(sorted(by_regime)),
                "optimal_layer": optimal_layer(mean_curves),
            }
        )
    return pd.DataFrame(rows, columns=["model_id", "family", "regimes", "optimal_layer"])
