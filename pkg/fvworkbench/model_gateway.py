"""Uniform interface to a causal language model.

The gateway wraps a transformer_lens HookedTransformer and exposes what the
pipeline needs: sequence scoring, per-head output capture at the final token,
single-head patching, and additive residual-stream injection.

Per-head outputs are read from `blocks.{l}.attn.hook_result`, i.e. after each
head's output projection into the residual stream. The attention output bias
b_O is not part of any head; it belongs to the layer:

    attn_out[l] = sum_h result[l, h] + b_O[l]

Interventions touch the final token position only. Residual additions are
applied to `blocks.{l}.hook_resid_post`, the hidden state immediately after
layer l.
"""

import logging
import typing as t
from dataclasses import dataclass, field

import numpy as np
import torch
from transformer_lens import HookedTransformer
from transformer_lens.utils import get_act_name

from .debug import _debug
from .errors import (
    ContextLengthError,
    InterventionPlanError,
    TokenizationError,
    VocabularyError,
)
from .heads import HeadId, all_heads
from .task_corpus import PromptInstance

__all__ = [
    "HeadCapture",
    "HeadOutput",
    "InterventionPlan",
    "ModelGateway",
    "ModelProfile",
    "load_gateway",
]

TORCH_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "float16": torch.float16,
    "bfloat16": torch.bfloat16,
}


@dataclass(frozen=True)
class ModelProfile:
    """Shape of a loaded model"""

    model_id: str
    n_layers: int
    n_heads_per_layer: int
    d_model: int
    vocab_size: int
    n_ctx: int
    added_vocabulary_ids: t.FrozenSet[int] = frozenset()

    @property
    def total_heads(self) -> int:
        return self.n_layers * self.n_heads_per_layer

    def heads(self) -> t.List[HeadId]:
        return all_heads(self.n_layers, self.n_heads_per_layer)

    def has_head(self, head: HeadId) -> bool:
        return 0 <= head.layer < self.n_layers and 0 <= head.head < self.n_heads_per_layer


@dataclass(frozen=True)
class HeadOutput:
    """One head's final-token output in residual space"""

    head: HeadId
    vector: np.ndarray


@dataclass
class HeadCapture:
    """Captured head outputs plus the unmodified next-token distribution"""

    outputs: t.Dict[HeadId, HeadOutput]
    distribution: np.ndarray

    def vector(self, head: HeadId) -> np.ndarray:
        return self.outputs[HeadId(*head)].vector


@dataclass
class InterventionPlan:
    """Head patches and residual additions applied at the final token"""

    additions: t.List[t.Tuple[int, np.ndarray]] = field(default_factory=list)
    head_patches: t.List[t.Tuple[HeadId, np.ndarray]] = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return not self.additions and not self.head_patches

    def validate(self, profile: ModelProfile):
        """Raise InterventionPlanError if the plan does not fit the model"""
        for layer, vector in self.additions:
            if not 0 <= layer < profile.n_layers:
                raise InterventionPlanError(
                    f"addition layer {layer} outside [0, {profile.n_layers})"
                )
            if np.shape(vector) != (profile.d_model,):
                raise InterventionPlanError(
                    f"addition at layer {layer} has shape {np.shape(vector)}, expected ({profile.d_model},)"
                )
        seen = set()
        for head, vector in self.head_patches:
            head = HeadId(*head)
            if not profile.has_head(head):
                raise InterventionPlanError(f"head {head.layer}.{head.head} not in model")
            if head in seen:
                raise InterventionPlanError(
                    f"head {head.layer}.{head.head} patched more than once"
                )
            seen.add(head)
            if np.shape(vector) != (profile.d_model,):
                raise InterventionPlanError(
                    f"patch for head {head.layer}.{head.head} has shape {np.shape(vector)}, expected ({profile.d_model},)"
                )

    def summed_additions(self) -> t.Dict[int, np.ndarray]:
        """Additions grouped by layer and summed in 64-bit"""
        summed: t.Dict[int, np.ndarray] = {}
        for layer, vector in self.additions:
            vector = np.asarray(vector, dtype=np.float64)
            summed[layer] = summed[layer] + vector if layer in summed else vector.copy()
        return summed


class ModelGateway:
    """Scoring, capture and intervention on one HookedTransformer

    Args:
        model: the HookedTransformer
        tokenizer: a HuggingFace tokenizer with a BOS token
        model_id: identifier recorded in every artifact produced with this gateway
        debug: enable the hidden-state inspection; defaults to the debug logging switch
    """

    def __init__(
        self,
        model: HookedTransformer,
        tokenizer,
        model_id: str,
        debug: t.Optional[bool] = None,
    ):
        self.model = model
        self.model.set_use_attn_result(True)
        self.model.eval()
        self.tokenizer = tokenizer
        self.debug = _debug() if debug is None else debug

        if tokenizer.bos_token_id is None:
            raise TokenizationError(f"tokenizer for {model_id} has no BOS token")
        self.bos_id = tokenizer.bos_token_id

        cfg = model.cfg
        added = set(tokenizer.all_special_ids) | set(tokenizer.get_added_vocab().values())
        self.profile = ModelProfile(
            model_id=model_id,
            n_layers=cfg.n_layers,
            n_heads_per_layer=cfg.n_heads,
            d_model=cfg.d_model,
            vocab_size=cfg.d_vocab,
            n_ctx=cfg.n_ctx,
            added_vocabulary_ids=frozenset(i for i in added if 0 <= i < cfg.d_vocab),
        )
        logging.debug(f"gateway for {model_id}: {self.profile}")

    @classmethod
    def from_pretrained(
        cls,
        model_id: str,
        device: t.Optional[str] = None,
        dtype: str = "float32",
        debug: t.Optional[bool] = None,
    ) -> "ModelGateway":
        """Load a checkpoint by name through transformer_lens"""
        model = HookedTransformer.from_pretrained(
            model_id, device=device, dtype=TORCH_DTYPES[dtype]
        )
        return cls(model, model.tokenizer, model_id, debug=debug)

    @property
    def model_id(self) -> str:
        return self.profile.model_id

    @property
    def dtype(self) -> torch.dtype:
        return self.model.cfg.dtype

    @property
    def device(self):
        return self.model.cfg.device

    # tokenization

    def text_ids(self, text: str) -> t.List[int]:
        """Token ids of text, without BOS"""
        return list(self.tokenizer.encode(text, add_special_tokens=False))

    def tokenize(self, text: str) -> t.List[int]:
        """BOS followed by the token ids of text"""
        return [self.bos_id] + self.text_ids(text)

    def decode(self, ids: t.Sequence[int]) -> str:
        return self.tokenizer.decode(list(ids), skip_special_tokens=True)

    def _continuation(self, text: str, target: str) -> t.Tuple[t.List[int], int]:
        """Split tokenize(text + target) where it stops agreeing with tokenize(text)

        Returns the prompt tokens up to the divergence point and the first
        token of target in continuation position. A trailing space of the
        answer cue may merge into the target's first token; the prompt is
        then truncated before it.
        """
        if not target:
            raise TokenizationError("target must not be empty")
        base = self.tokenize(text)
        full = self.tokenize(text + target)
        divergence = next(
            (i for i, (a, b) in enumerate(zip(base, full)) if a != b),
            min(len(base), len(full)),
        )
        if divergence >= len(full):
            raise TokenizationError(
                f"target {target!r} produces no continuation token after {text[-20:]!r}"
            )
        return full[:divergence], full[divergence]

    def prompt_tokens(self, prompt: PromptInstance) -> t.List[int]:
        """Token ids fed to the model for prompt"""
        if prompt.target:
            tokens, _ = self._continuation(prompt.rendered_text, prompt.target)
        else:
            tokens = self.tokenize(prompt.rendered_text)
        self._check_tokens(tokens)
        return tokens

    def first_token_of(self, target: str, context: PromptInstance) -> int:
        """First token id of target as tokenized after the prompt's answer cue"""
        _, token = self._continuation(context.rendered_text, target)
        return token

    def _check_tokens(self, tokens: t.Sequence[int]):
        if len(tokens) > self.profile.n_ctx:
            raise ContextLengthError(len(tokens), self.profile.n_ctx)
        for token in tokens:
            if not 0 <= token < self.profile.vocab_size:
                raise VocabularyError(
                    f"token id {token} outside vocabulary of size {self.profile.vocab_size}"
                )

    def _as_tensor(self, tokens: t.Sequence[t.Sequence[int]]) -> torch.Tensor:
        return torch.tensor(tokens, dtype=torch.long, device=self.device)

    def _as_model_vector(self, vector: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(np.asarray(vector), device=self.device).to(self.dtype)

    # scoring

    @torch.no_grad()
    def score_sequence(self, tokens: t.Sequence[int]) -> t.List[float]:
        """Per-token log-probabilities log P(token_i | tokens_<i)

        Args:
            tokens: token ids; BOS is prepended when missing and is not scored

        Returns:
            one natural-log probability per non-BOS token
        """
        tokens = list(tokens)
        if tokens and tokens[0] == self.bos_id:
            tokens = tokens[1:]
        if not tokens:
            raise TokenizationError("cannot score an empty sequence")
        ids = [self.bos_id] + tokens
        self._check_tokens(ids)
        logits = self.model(self._as_tensor([ids]))[0].double()
        logprobs = torch.log_softmax(logits[:-1], dim=-1)
        targets = torch.tensor(ids[1:], device=logprobs.device)
        return logprobs.gather(-1, targets[:, None])[:, 0].cpu().tolist()

    def score_text(self, text: str) -> t.Tuple[t.List[int], float]:
        """Token ids of text (without BOS) and their summed log-probability"""
        ids = self.text_ids(text)
        return ids, float(np.sum(self.score_sequence(ids), dtype=np.float64))

    @torch.no_grad()
    def next_token_logprobs(self, tokens: t.Sequence[int]) -> np.ndarray:
        """Log-probabilities of every next token after tokens (BOS prepended when missing)"""
        tokens = list(tokens)
        if not tokens or tokens[0] != self.bos_id:
            tokens = [self.bos_id] + tokens
        self._check_tokens(tokens)
        logits = self.model(self._as_tensor([tokens]))[0, -1].double()
        return torch.log_softmax(logits, dim=-1).cpu().numpy()

    # capture and intervention

    @torch.no_grad()
    def capture_head_outputs(self, prompt: PromptInstance) -> HeadCapture:
        """Final-token output of every head plus the next-token distribution"""
        tokens = self.prompt_tokens(prompt)
        logits, cache = self.model.run_with_cache(
            self._as_tensor([tokens]),
            names_filter=lambda name: name.endswith("attn.hook_result"),
        )
        outputs = {}
        for layer in range(self.profile.n_layers):
            result = cache[get_act_name("result", layer)][0, -1].double().cpu().numpy()
            for head in range(self.profile.n_heads_per_layer):
                head_id = HeadId(layer, head)
                outputs[head_id] = HeadOutput(head_id, result[head].copy())
        return HeadCapture(outputs, self._distribution(logits))

    def _distribution(self, logits: torch.Tensor) -> np.ndarray:
        return torch.softmax(logits[0, -1].double(), dim=-1).cpu().numpy()

    def _intervention_hooks(self, plan: InterventionPlan) -> t.List[t.Tuple[str, t.Callable]]:
        plan.validate(self.profile)
        hooks = []

        patches_by_layer: t.Dict[int, t.List[t.Tuple[int, torch.Tensor]]] = {}
        for head, vector in plan.head_patches:
            head = HeadId(*head)
            patches_by_layer.setdefault(head.layer, []).append(
                (head.head, self._as_model_vector(vector))
            )
        for layer, patches in sorted(patches_by_layer.items()):

            def patch_hook(result, hook, patches=patches):
                for head, vector in patches:
                    result[:, -1, head, :] = vector
                return result

            hooks.append((get_act_name("result", layer), patch_hook))

        for layer, vector in sorted(plan.summed_additions().items()):
            addition = self._as_model_vector(vector)

            def add_hook(resid, hook, addition=addition):
                resid[:, -1, :] = resid[:, -1, :] + addition
                return resid

            hooks.append((get_act_name("resid_post", layer), add_hook))
        return hooks

    @torch.no_grad()
    def run_with_interventions(
        self, prompt: PromptInstance, plan: t.Optional[InterventionPlan] = None
    ) -> np.ndarray:
        """Next-token distribution with head patches and residual additions applied"""
        tokens = self.prompt_tokens(prompt)
        plan = plan or InterventionPlan()
        if plan.is_empty:
            return self._distribution(self.model(self._as_tensor([tokens])))
        logits = self.model.run_with_hooks(
            self._as_tensor([tokens]), fwd_hooks=self._intervention_hooks(plan)
        )
        return self._distribution(logits)

    @torch.no_grad()
    def batch_distributions(
        self,
        prompts: t.Sequence[PromptInstance],
        plan: t.Optional[InterventionPlan] = None,
        batch_size: int = 16,
    ) -> t.List[np.ndarray]:
        """Next-token distributions for many prompts under one plan

        Prompts of equal token length are stacked into one forward pass; results
        are returned in input order and agree with run_with_interventions.
        """
        plan = plan or InterventionPlan()
        hooks = [] if plan.is_empty else self._intervention_hooks(plan)
        token_lists = [self.prompt_tokens(p) for p in prompts]
        by_length: t.Dict[int, t.List[int]] = {}
        for i, tokens in enumerate(token_lists):
            by_length.setdefault(len(tokens), []).append(i)

        results: t.List[t.Optional[np.ndarray]] = [None] * len(prompts)
        for _, indices in sorted(by_length.items()):
            for start in range(0, len(indices), batch_size):
                chunk = indices[start : start + batch_size]
                batch = self._as_tensor([token_lists[i] for i in chunk])
                logits = self.model.run_with_hooks(batch, fwd_hooks=hooks)
                probs = torch.softmax(logits[:, -1].double(), dim=-1).cpu().numpy()
                for row, i in enumerate(chunk):
                    results[i] = probs[row]
        return results

    def predict(
        self, prompt: PromptInstance, plan: t.Optional[InterventionPlan] = None
    ) -> int:
        """Argmax next token"""
        return int(np.argmax(self.run_with_interventions(prompt, plan)))

    def is_success(
        self, prompt: PromptInstance, plan: t.Optional[InterventionPlan] = None
    ) -> bool:
        """True if the argmax next token is the target's first token"""
        return self.predict(prompt, plan) == self.first_token_of(prompt.target, prompt)

    @torch.no_grad()
    def inspect_hidden_state(
        self,
        prompt: PromptInstance,
        layer: int,
        plan: t.Optional[InterventionPlan] = None,
        position: int = -1,
    ) -> np.ndarray:
        """Hidden state after layer at position, with plan applied; debug only"""
        if not self.debug:
            raise RuntimeError("hidden-state inspection requires a gateway created with debug=True")
        if not 0 <= layer < self.profile.n_layers:
            raise InterventionPlanError(f"inspected layer {layer} outside [0, {self.profile.n_layers})")
        plan = plan or InterventionPlan()
        hooks = [] if plan.is_empty else self._intervention_hooks(plan)
        captured = {}

        def capture_hook(resid, hook):
            captured["state"] = resid[0, position].double().cpu().numpy().copy()

        # appended after the addition hooks so it sees their effect
        hooks.append((get_act_name("resid_post", layer), capture_hook))
        self.model.run_with_hooks(
            self._as_tensor([self.prompt_tokens(prompt)]), fwd_hooks=hooks
        )
        return captured["state"]


def load_gateway(
    model_id: str,
    device: t.Optional[str] = None,
    dtype: str = "float32",
    debug: t.Optional[bool] = None,
    **miniature_kwargs,
) -> ModelGateway:
    """Load a gateway by model id; 'miniature' ids build the bundled toy model"""
    from .miniature import is_miniature_id, miniature_gateway

    if is_miniature_id(model_id):
        return miniature_gateway(model_id, dtype=dtype, device=device, debug=debug, **miniature_kwargs)
    return ModelGateway.from_pretrained(model_id, device=device, dtype=dtype, debug=debug)
