""" Python package to extract, localize and evaluate function vectors
    of demonstrations and instructions in transformer language models """

from ._version import __version__
from .analyst import OverlapReport, SimilarityCurve, emit_tables_and_plots, head_overlap, shared_head_similarity
from .baseline_factory import (
    BaselineMethod,
    BaselineSpec,
    CorpusCache,
    build_corpus_cache,
    sample_equiprobable,
    sample_other_task,
    sample_real_text,
)
from .config import Budgets, RunConfig, load_config
from .errors import WorkbenchError
from .evaluator import EvalReport, EvalSetting, Regime, evaluate, evaluate_joint, steer_cross_model
from .fv_engine import (
    ActivationForm,
    ActivationSummary,
    CieCondition,
    CieTensor,
    FunctionVector,
    HeadSet,
    aggregate_cie,
    build_fv,
    compute_cie,
    compute_mean_activations,
    select_heads,
)
from .heads import HeadId
from .instruction_forge import InstructionSet, LengthRegime, generate_instructions, select_top_instructions
from .model_gateway import InterventionPlan, ModelGateway, ModelProfile, load_gateway
from .task_corpus import PromptInstance, SplitSpec, TaskDataset, load_task, load_tasks, split

__all__ = [
    "ActivationForm",
    "ActivationSummary",
    "BaselineMethod",
    "BaselineSpec",
    "Budgets",
    "CieCondition",
    "CieTensor",
    "CorpusCache",
    "EvalReport",
    "EvalSetting",
    "FunctionVector",
    "HeadId",
    "HeadSet",
    "InstructionSet",
    "InterventionPlan",
    "LengthRegime",
    "ModelGateway",
    "ModelProfile",
    "OverlapReport",
    "PromptInstance",
    "Regime",
    "RunConfig",
    "SimilarityCurve",
    "SplitSpec",
    "TaskDataset",
    "WorkbenchError",
    "__version__",
    "aggregate_cie",
    "build_corpus_cache",
    "build_fv",
    "compute_cie",
    "compute_mean_activations",
    "emit_tables_and_plots",
    "evaluate",
    "evaluate_joint",
    "head_overlap",
    "load_config",
    "load_gateway",
    "load_task",
    "load_tasks",
    "sample_equiprobable",
    "sample_other_task",
    "sample_real_text",
    "select_heads",
    "select_top_instructions",
    "generate_instructions",
    "shared_head_similarity",
    "split",
    "steer_cross_model",
]
