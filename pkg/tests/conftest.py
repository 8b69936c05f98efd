"""Config for pytest"""

import os
import pathlib
import typing as t

import numpy as np
import pytest

from fvworkbench.constants import MINIATURE_MODEL_ID, MINIATURE_TUNED_MODEL_ID
from fvworkbench.heads import HeadId
from fvworkbench.model_gateway import HeadCapture, HeadOutput, ModelProfile
from fvworkbench.task_corpus import PromptInstance, TaskDataset, task_from_dict

# the fine-tuned miniature model takes a while to train; these tests only run when asked for
SLOW = bool(os.environ.get("FVWORKBENCH_SLOW"))
slow = pytest.mark.skipif(not SLOW, reason="set FVWORKBENCH_SLOW=1 to run slow tests")

# fewer fine-tuning steps than the default so the slow tests finish in minutes
TEST_TRAINING_STEPS = 1500

# committed reference outputs; FVWORKBENCH_UPDATE_GOLDENS=1 rewrites them from the current code
GOLDEN_DIR = pathlib.Path(__file__).parent / "goldens"
UPDATE_GOLDENS = bool(os.environ.get("FVWORKBENCH_UPDATE_GOLDENS"))


def small_task(n: int = 20, task_id: str = "small") -> TaskDataset:
    """A task of n distinct pairs w00 -> x00, w01 -> x01, ..."""
    return task_from_dict(
        {"task_id": task_id, "pairs": [[f"w{i:02d}", f"x{i:02d}"] for i in range(n)]}
    )


class FakeGateway:
    """Deterministic stand-in for ModelGateway

    Tokens are whitespace words. Every head outputs a vector that depends only
    on its coordinates and the prompt's form, so means and sums are known in
    closed form. A prompt is answered correctly when its query index is even,
    or always when succeed_all is set.
    """

    def __init__(
        self,
        n_layers: int = 4,
        n_heads: int = 8,
        d_model: int = 6,
        model_id: str = "fake",
        succeed_all: bool = False,
    ):
        self.profile = ModelProfile(
            model_id=model_id,
            n_layers=n_layers,
            n_heads_per_layer=n_heads,
            d_model=d_model,
            vocab_size=1000,
            n_ctx=4096,
        )
        self.succeed_all = succeed_all
        self.calls: t.List[str] = []

    @property
    def model_id(self) -> str:
        return self.profile.model_id

    def _token(self, word: str) -> int:
        return sum(ord(c) for c in word) % self.profile.vocab_size

    def text_ids(self, text: str) -> t.List[int]:
        return [self._token(w) for w in text.split()]

    def tokenize(self, text: str) -> t.List[int]:
        return [0] + self.text_ids(text)

    def first_token_of(self, target: str, context: PromptInstance) -> int:
        return self._token(target.split()[0])

    def head_vector(self, head: HeadId, prompt: PromptInstance) -> np.ndarray:
        offset = 1.0 if prompt.form.value.startswith("demo") else -1.0
        return np.full(self.profile.d_model, head.layer * 10 + head.head + offset, dtype=np.float64)

    def _answers(self, prompt: PromptInstance) -> bool:
        return self.succeed_all or (prompt.query_index or 0) % 2 == 0

    def _distribution(self, prompt: PromptInstance) -> np.ndarray:
        target = self.first_token_of(prompt.target, prompt)
        winner = target if self._answers(prompt) else (target + 1) % self.profile.vocab_size
        dist = np.full(self.profile.vocab_size, 0.1 / (self.profile.vocab_size - 1))
        dist[winner] = 0.9
        return dist

    def capture_head_outputs(self, prompt: PromptInstance) -> HeadCapture:
        self.calls.append("capture")
        outputs = {
            head: HeadOutput(head, self.head_vector(head, prompt)) for head in self.profile.heads()
        }
        return HeadCapture(outputs, self._distribution(prompt))

    def run_with_interventions(self, prompt: PromptInstance, plan=None) -> np.ndarray:
        self.calls.append("run")
        return self._distribution(prompt)

    def batch_distributions(self, prompts, plan=None, batch_size: int = 16):
        return [self.run_with_interventions(p, plan) for p in prompts]

    def predict(self, prompt: PromptInstance, plan=None) -> int:
        return int(np.argmax(self.run_with_interventions(prompt, plan)))

    def is_success(self, prompt: PromptInstance, plan=None) -> bool:
        return self.predict(prompt, plan) == self.first_token_of(prompt.target, prompt)


@pytest.fixture(scope="session")
def miniature():
    """Untrained miniature model in float64 with the hidden-state inspection enabled"""
    from fvworkbench.miniature import miniature_gateway

    return miniature_gateway(MINIATURE_MODEL_ID, dtype="float64", debug=True)


@pytest.fixture(scope="session")
def miniature_fp32():
    """Untrained miniature model in float32"""
    from fvworkbench.miniature import miniature_gateway

    return miniature_gateway(MINIATURE_MODEL_ID, dtype="float32")


@pytest.fixture(scope="session")
def miniature_tuned(tmp_path_factory):
    """Fine-tuned miniature model; only requested by slow tests"""
    from fvworkbench.miniature import miniature_gateway

    return miniature_gateway(
        MINIATURE_TUNED_MODEL_ID,
        dtype="float64",
        training_steps=TEST_TRAINING_STEPS,
        checkpoint_dir=tmp_path_factory.mktemp("checkpoints"),
    )


@pytest.fixture(scope="session")
def toy_tasks():
    from fvworkbench.miniature import toy_tasks as _toy_tasks

    return _toy_tasks()


@pytest.fixture(scope="session")
def bundled_tasks():
    from fvworkbench.task_data import load_bundled_tasks

    return load_bundled_tasks()


@pytest.fixture(scope="function")
def fake_gateway():
    """FakeGateway with 4 layers of 8 heads"""
    return FakeGateway()


@pytest.fixture(scope="function")
def output_root(tmp_path):
    """Empty directory to write run artifacts to"""
    root = tmp_path / "runs"
    root.mkdir()
    return root
