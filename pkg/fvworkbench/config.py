"""Run configuration.

A run is described by one TOML or JSON file. Values are resolved with the
precedence: built-in defaults < config file < command line overrides.
Credentials and endpoints never live here; see instruction_forge for the
environment variables that carry them.
"""

import dataclasses
import hashlib
import json
import pathlib
import tomllib
import typing as t
from dataclasses import dataclass, field

from .constants import (
    ACTIVATION_PROMPTS,
    BASELINE_CANDIDATES,
    BASELINES_PER_INSTRUCTION,
    CIE_PROMPTS,
    CIE_PROMPTS_PER_INSTRUCTION,
    CORPUS_CACHE_TARGET,
    CORPUS_MAX_TOKENS,
    DEFAULT_SHOTS,
    EQUIPROBABLE_DT,
    EQUIPROBABLE_T0,
    GENERATION_ROUNDS,
    INSTRUCTIONS_PER_ROUND,
    MIN_SUCCESSES,
    MINIATURE_MODEL_ID,
    MINIATURE_TRAINING_STEPS,
    MINIATURE_TUNED_MODEL_ID,
    OPEN_GENERATION_CHANCE,
    PROMPTS_PER_INSTRUCTION,
    SHORT_INSTRUCTION_MAX_TOKENS,
    TOP_HEADS,
    TOP_INSTRUCTIONS,
    TRAIN_FRACTION,
)
from .errors import ConfigError

__all__ = ["Budgets", "GeneratorSettings", "RunConfig", "load_config"]

BUNDLED_TASKS = "bundled"
TOY_TASKS = "toy"
TOY_CORPUS = "toy"

REGIMES = ("zero_shot", "shuffled_10_shot", "instructed_zero_shot", "clean_10_shot")
BASELINE_METHODS = ("equiprobable", "real_text", "other_task")
INSTRUCTION_REGIMES = ("short", "long")
GENERATOR_KINDS = ("openai", "fixture")

# fields that do not change results and are left out of the config hash
_UNHASHED = ("output_root", "device", "config_path")


@dataclass
class Budgets:
    """Every protocol budget with its default"""

    activation_prompts: int = ACTIVATION_PROMPTS
    prompts_per_instruction: int = PROMPTS_PER_INSTRUCTION
    cie_prompts: int = CIE_PROMPTS
    cie_prompts_per_instruction: int = CIE_PROMPTS_PER_INSTRUCTION
    top_instructions: int = TOP_INSTRUCTIONS
    top_heads: int = TOP_HEADS
    shots: int = DEFAULT_SHOTS
    min_successes: int = MIN_SUCCESSES
    generation_rounds: int = GENERATION_ROUNDS
    instructions_per_round: int = INSTRUCTIONS_PER_ROUND
    short_instruction_max_tokens: int = SHORT_INSTRUCTION_MAX_TOKENS
    baseline_candidates: int = BASELINE_CANDIDATES
    baselines_per_instruction: int = BASELINES_PER_INSTRUCTION
    corpus_cache_target: int = CORPUS_CACHE_TARGET
    corpus_max_tokens: int = CORPUS_MAX_TOKENS
    equiprobable_t0: float = EQUIPROBABLE_T0
    equiprobable_dt: float = EQUIPROBABLE_DT
    open_generation_chance: float = OPEN_GENERATION_CHANCE
    train_fraction: float = TRAIN_FRACTION

    def validate(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value <= 0:
                raise ConfigError(f"budgets.{f.name} must be positive, got {value}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError(f"budgets.train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.baselines_per_instruction > self.baseline_candidates:
            raise ConfigError("budgets.baselines_per_instruction exceeds budgets.baseline_candidates")


@dataclass
class GeneratorSettings:
    """Which instruction generator to use"""

    kind: str = "fixture"
    model: str = ""
    fixture_path: t.Optional[str] = None
    record_path: t.Optional[str] = None
    temperature: float = 1.0


@dataclass
class RunConfig:
    """All science parameters of a run"""

    model_ids: t.List[str] = field(default_factory=lambda: [MINIATURE_TUNED_MODEL_ID])
    steer_source_model_id: t.Optional[str] = None
    steer_target_model_ids: t.List[str] = field(default_factory=list)
    task_paths: t.List[str] = field(default_factory=lambda: [BUNDLED_TASKS])
    seed: int = 0
    regimes: t.List[str] = field(default_factory=lambda: ["zero_shot", "shuffled_10_shot"])
    skyline: bool = True
    baseline_methods: t.List[str] = field(default_factory=lambda: list(BASELINE_METHODS))
    instruction_regimes: t.List[str] = field(default_factory=lambda: list(INSTRUCTION_REGIMES))
    intervention_layer: t.Union[str, int] = "third"
    sweep_layers: bool = False
    joint_sweep: bool = False
    output_root: str = "fvworkbench_runs"
    generator: GeneratorSettings = field(default_factory=GeneratorSettings)
    corpus: str = TOY_CORPUS
    device: t.Optional[str] = None
    dtype: str = "float32"
    max_eval_queries: t.Optional[int] = None
    miniature_training_steps: int = MINIATURE_TRAINING_STEPS
    budgets: Budgets = field(default_factory=Budgets)
    config_path: t.Optional[str] = None

    @classmethod
    def from_dict(cls, data: t.Mapping[str, t.Any], source: str = "<dict>") -> "RunConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        if unknown := sorted(set(data) - known):
            raise ConfigError(f"{source}: unknown config keys {unknown}")
        try:
            if "budgets" in data:
                data["budgets"] = _nested(Budgets, data["budgets"], f"{source}: budgets")
            if "generator" in data:
                data["generator"] = _nested(GeneratorSettings, data["generator"], f"{source}: generator")
            config = cls(**data)
        except TypeError as e:
            raise ConfigError(f"{source}: {e}") from e
        config.validate()
        return config

    @classmethod
    def toy(cls, **overrides) -> "RunConfig":
        """Configuration of the end-to-end toy run on the fine-tuned miniature model"""
        config = cls(
            model_ids=[MINIATURE_TUNED_MODEL_ID],
            steer_source_model_id=MINIATURE_TUNED_MODEL_ID,
            steer_target_model_ids=[MINIATURE_MODEL_ID],
            task_paths=[TOY_TASKS],
            dtype="float64",
            corpus=TOY_CORPUS,
            budgets=Budgets(top_heads=4, baseline_candidates=20, corpus_cache_target=500),
        )
        return config.with_overrides(**overrides)

    def asdict(self) -> t.Dict[str, t.Any]:
        return dataclasses.asdict(self)

    def with_overrides(self, **overrides) -> "RunConfig":
        """Copy with overrides applied; None values are ignored

        Keys of Budgets may be given directly, e.g. top_heads=10.
        """
        data = self.asdict()
        budget_names = {f.name for f in dataclasses.fields(Budgets)}
        for key, value in overrides.items():
            if value is None:
                continue
            if key in budget_names:
                data["budgets"][key] = value
            else:
                data[key] = value
        return RunConfig.from_dict(data, source="overrides")

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of every field that affects results"""
        data = {k: v for k, v in self.asdict().items() if k not in _UNHASHED}
        data["generator"] = {k: v for k, v in data["generator"].items() if k != "record_path"}
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def validate(self):
        """Raise ConfigError for invalid values or missing referenced files"""
        self.budgets.validate()
        if not self.model_ids:
            raise ConfigError("model_ids must name at least one model")
        _check_choices("regimes", self.regimes, REGIMES)
        _check_choices("baseline_methods", self.baseline_methods, BASELINE_METHODS)
        _check_choices("instruction_regimes", self.instruction_regimes, INSTRUCTION_REGIMES)
        if self.generator.kind not in GENERATOR_KINDS:
            raise ConfigError(f"generator.kind must be one of {GENERATOR_KINDS}, got {self.generator.kind}")
        if self.generator.kind == "openai" and not self.generator.model:
            raise ConfigError("generator.model is required for the openai generator")
        if self.dtype not in ("float32", "float64", "float16", "bfloat16"):
            raise ConfigError(f"unsupported dtype {self.dtype}")
        if not (self.intervention_layer == "third" or isinstance(self.intervention_layer, int)):
            raise ConfigError(f"intervention_layer must be 'third' or an integer, got {self.intervention_layer!r}")
        if self.max_eval_queries is not None and self.max_eval_queries <= 0:
            raise ConfigError("max_eval_queries must be positive")

        for path in self.task_paths:
            if path not in (BUNDLED_TASKS, TOY_TASKS) and not self.resolve(path).exists():
                raise ConfigError(f"task path does not exist: {path}")
        if self.generator.fixture_path and not self.resolve(self.generator.fixture_path).is_file():
            raise ConfigError(f"generator fixture does not exist: {self.generator.fixture_path}")
        if (
            self.corpus != TOY_CORPUS
            and not self.corpus.startswith("hf:")
            and not self.resolve(self.corpus).is_file()
        ):
            raise ConfigError(f"corpus file does not exist: {self.corpus}")

    def check_heads(self, total_heads: int, model_id: str):
        if self.budgets.top_heads > total_heads:
            raise ConfigError(
                f"budgets.top_heads is {self.budgets.top_heads} but {model_id} has {total_heads} heads"
            )

    def resolve(self, path: t.Union[str, pathlib.Path]) -> pathlib.Path:
        """Relative paths are taken relative to the config file"""
        path = pathlib.Path(path)
        if path.is_absolute() or self.config_path is None:
            return path
        return pathlib.Path(self.config_path).parent / path

    def layer_for(self, n_layers: int) -> int:
        from .evaluator import default_intervention_layer

        if self.intervention_layer == "third":
            return default_intervention_layer(n_layers)
        return int(self.intervention_layer)


def _nested(cls, value: t.Any, source: str):
    if not isinstance(value, dict):
        raise ConfigError(f"{source} must be a table")
    known = {f.name for f in dataclasses.fields(cls)}
    if unknown := sorted(set(value) - known):
        raise ConfigError(f"{source}: unknown keys {unknown}")
    return cls(**value)


def _check_choices(name: str, values: t.Sequence[str], choices: t.Sequence[str]):
    if bad := [v for v in values if v not in choices]:
        raise ConfigError(f"{name}: unknown values {bad}; choose from {list(choices)}")


def load_config(path: t.Union[str, pathlib.Path]) -> RunConfig:
    """Load a RunConfig from a .toml or .json file"""
    path = pathlib.Path(path)
    if not path.is_file():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        if path.suffix == ".toml":
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        elif path.suffix == ".json":
            data = json.loads(path.read_text(encoding="utf-8"))
        else:
            raise ConfigError(f"config file must be .toml or .json: {path}")
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from e
    data["config_path"] = str(path)
    return RunConfig.from_dict(data, source=str(path))
