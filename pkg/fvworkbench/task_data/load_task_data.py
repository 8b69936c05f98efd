"""Locate and load the data files shipped inside the package"""

import pathlib
import typing as t

TASK_DATA_DIR = pathlib.Path(__file__).parent

BUNDLED_TASK_FILES = [
    "antonym.json",
    "capitalize.json",
    "country_capital.json",
    "english_french.json",
    "present_past.json",
    "sentiment.json",
]

TOY_CORPUS_FILE = "toy_corpus.txt"
TOY_INSTRUCTION_FIXTURE_FILE = "toy_instruction_fixture.json"


def bundled_task_paths(files: t.Optional[t.Iterable[str]] = None) -> t.List[pathlib.Path]:
    """Paths of the bundled task files"""
    return [TASK_DATA_DIR / filename for filename in (files or BUNDLED_TASK_FILES)]


def load_bundled_tasks(files: t.Optional[t.Iterable[str]] = None):
    """Load the bundled tasks as a dict of task_id to TaskDataset"""
    # imported here so task_corpus can be imported without loading any data
    from ..task_corpus import load_tasks

    return load_tasks(bundled_task_paths(files))


def toy_corpus_path() -> pathlib.Path:
    """Plain-text corpus used to build the miniature model's corpus cache"""
    return TASK_DATA_DIR / TOY_CORPUS_FILE


def toy_instruction_fixture_path() -> pathlib.Path:
    """Recorded generator responses for the toy tasks"""
    return TASK_DATA_DIR / TOY_INSTRUCTION_FIXTURE_FILE
