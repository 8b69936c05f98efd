"""Bundled task files, the toy corpus and the toy generator fixture"""

from .load_task_data import (
    BUNDLED_TASK_FILES,
    TASK_DATA_DIR,
    bundled_task_paths,
    load_bundled_tasks,
    toy_corpus_path,
    toy_instruction_fixture_path,
)

__all__ = [
    "BUNDLED_TASK_FILES",
    "TASK_DATA_DIR",
    "bundled_task_paths",
    "load_bundled_tasks",
    "toy_corpus_path",
    "toy_instruction_fixture_path",
]
