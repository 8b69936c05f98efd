""" Exceptions raised by fvworkbench

Every exception derives from WorkbenchError; exit_code is the status the CLI
exits with when the exception reaches it.
"""

import typing as t

from .constants import EXIT_COMPATIBILITY, EXIT_FAILURE, EXIT_TRANSPORT


class WorkbenchError(Exception):
    """Base class for all fvworkbench errors"""

    exit_code = EXIT_FAILURE


class ConfigError(WorkbenchError):
    """Raised when a run config is malformed or references missing files"""


class TaskFormatError(WorkbenchError):
    """Raised when a task file does not match the task format"""


class InsufficientDataError(WorkbenchError):
    """Raised when a dataset is too small to split"""


class PromptOverlapError(WorkbenchError):
    """Raised when a query example also appears among the in-context examples"""


class PromptPreconditionError(WorkbenchError):
    """Raised when a prompt cannot be rendered from the given inputs"""


class VocabularyError(WorkbenchError):
    """Raised when a token id is outside the model vocabulary"""


class ContextLengthError(WorkbenchError):
    """Raised when a prompt does not fit the model context"""

    def __init__(self, token_count: int, n_ctx: int):
        super().__init__(
            f"prompt has {token_count} tokens but the model context is {n_ctx}"
        )
        self.token_count = token_count
        self.n_ctx = n_ctx


class TokenizationError(WorkbenchError):
    """Raised when a target does not produce any continuation token"""


class InterventionPlanError(WorkbenchError):
    """Raised when an intervention plan does not fit the model"""


class GeneratorTransportError(WorkbenchError):
    """Raised when the instruction generator endpoint cannot be reached; retryable"""

    exit_code = EXIT_TRANSPORT


class TaskSkipped(WorkbenchError):
    """Raised when too few instructions reach the required number of successes"""

    def __init__(self, task_id: str, success_counts: t.Dict[str, int], message: str):
        super().__init__(message)
        self.task_id = task_id
        self.success_counts = success_counts


class TaskIneligible(WorkbenchError):
    """Raised when a task cannot supply enough successful prompts"""

    def __init__(self, task_id: str, found: int, required: int):
        super().__init__(
            f"task {task_id}: found {found} successful prompts, {required} required"
        )
        self.task_id = task_id
        self.found = found
        self.required = required


class CorpusBuildError(WorkbenchError):
    """Raised when the corpus cache cannot be built"""


class InsufficientCacheError(WorkbenchError):
    """Raised when the corpus cache holds too few entries to sample from"""


class InsufficientPoolError(WorkbenchError):
    """Raised when too few other-task instructions exist"""


class CacheMismatchError(WorkbenchError):
    """Raised when a corpus cache was scored with a different model"""


class BaselineError(WorkbenchError):
    """Raised when a baseline cannot be produced"""


class AggregationError(WorkbenchError):
    """Raised when causal scores cannot be aggregated"""


class HeadSelectionError(WorkbenchError):
    """Raised when a head selection request is out of bounds"""


class CompletenessError(WorkbenchError):
    """Raised when a summary is missing a head that is needed"""


class CompatibilityError(WorkbenchError):
    """Raised when a function vector does not fit the model it is applied to"""

    exit_code = EXIT_COMPATIBILITY


class ArtifactMismatchError(WorkbenchError):
    """Raised when an artifact was produced by a different config"""


class ReportCollisionError(WorkbenchError):
    """Raised when a report with the same key but different content exists"""


__all__ = [
    "AggregationError",
    "ArtifactMismatchError",
    "BaselineError",
    "CacheMismatchError",
    "CompatibilityError",
    "CompletenessError",
    "ConfigError",
    "ContextLengthError",
    "CorpusBuildError",
    "GeneratorTransportError",
    "HeadSelectionError",
    "InsufficientCacheError",
    "InsufficientDataError",
    "InsufficientPoolError",
    "InterventionPlanError",
    "PromptOverlapError",
    "PromptPreconditionError",
    "ReportCollisionError",
    "TaskFormatError",
    "TaskIneligible",
    "TaskSkipped",
    "TokenizationError",
    "VocabularyError",
    "WorkbenchError",
]
