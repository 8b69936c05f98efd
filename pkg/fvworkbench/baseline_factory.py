"""Uninformative baselines matched to an instruction.

Three constructions, each yielding text that resembles an instruction in
token length and model log-probability but says nothing about the task:

- equiprobable: token-by-token samples whose log-probability at every
  position is close to the instruction token's log-probability
- real_text: corpus prefixes from a model-specific cache
- other_task: instructions generated for other tasks

real_text and other_task share one matching rule: take candidates of the
exact token length, widen to length +/- k for the smallest k giving at least
n_candidates entries, then take the entries closest in log-probability.
"""

import hashlib
import logging
import pathlib
import re
import typing as t
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from tqdm import tqdm

from .constants import (
    BASELINE_CANDIDATES,
    BASELINES_PER_INSTRUCTION,
    CORPUS_CACHE_TARGET,
    CORPUS_MAX_TOKENS,
    EQUIPROBABLE_DT,
    EQUIPROBABLE_T0,
)
from .debug import progress_disabled
from .errors import (
    BaselineError,
    CacheMismatchError,
    CorpusBuildError,
    InsufficientCacheError,
    InsufficientPoolError,
    PromptPreconditionError,
)
from .store import ArtifactKind, artifact_header, read_jsonl, write_jsonl
from .task_corpus import derive_seed

__all__ = [
    "BaselineMethod",
    "BaselineSpec",
    "CorpusCache",
    "MatchResult",
    "ScoredText",
    "build_corpus_cache",
    "corpus_hash",
    "load_corpus_cache",
    "read_corpus",
    "sample_equiprobable",
    "sample_other_task",
    "sample_real_text",
    "save_corpus_cache",
    "score_instruction_pool",
    "select_matched_candidates",
    "whitespace_prefixes",
]

_WHITESPACE = re.compile(r"\s+")


class BaselineMethod(Enum):
    EQUIPROBABLE = "equiprobable"
    REAL_TEXT = "real_text"
    OTHER_TASK = "other_task"


@dataclass(frozen=True)
class ScoredText:
    """A text with its token ids and summed log-probability under one model"""

    text: str
    token_ids: t.Tuple[int, ...]
    length: int
    log_probability: float

    @classmethod
    def score(cls, text: str, gateway) -> "ScoredText":
        ids, log_probability = gateway.score_text(text)
        return cls(text, tuple(ids), len(ids), log_probability)


@dataclass(frozen=True)
class BaselineSpec:
    """An uninformative stand-in for one instruction"""

    method: BaselineMethod
    source_spec_id: str
    text: str
    length_tokens: int
    log_probability: float
    index: int = 0
    token_ids: t.Tuple[int, ...] = ()
    band_steps: t.Tuple[int, ...] = ()

    @property
    def baseline_id(self) -> str:
        return f"{self.source_spec_id}~{self.method.value}.{self.index}"

    def asdict(self) -> t.Dict[str, t.Any]:
        return {
            "method": self.method.value,
            "source_spec_id": self.source_spec_id,
            "text": self.text,
            "length_tokens": self.length_tokens,
            "log_probability": self.log_probability,
            "index": self.index,
            "token_ids": list(self.token_ids),
            "band_steps": list(self.band_steps),
        }

    @classmethod
    def fromdict(cls, data: t.Dict[str, t.Any]) -> "BaselineSpec":
        return cls(
            method=BaselineMethod(data["method"]),
            source_spec_id=data["source_spec_id"],
            text=data["text"],
            length_tokens=data["length_tokens"],
            log_probability=data["log_probability"],
            index=data.get("index", 0),
            token_ids=tuple(data.get("token_ids", ())),
            band_steps=tuple(data.get("band_steps", ())),
        )


@dataclass
class CorpusCache:
    """Scored corpus prefixes for one model"""

    model_id: str
    entries: t.List[ScoredText]
    source: str
    corpus_hash: str = ""
    target: int = CORPUS_CACHE_TARGET

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class MatchResult:
    """Outcome of length-then-log-probability matching"""

    k: int
    candidates: t.List[int]
    chosen: t.List[int] = field(default_factory=list)


# equiprobable sampling


def _band_step(differences: np.ndarray, t0: float, dt: float) -> int:
    """Smallest k >= 0 for which some difference is <= t0 + k * dt"""
    smallest = float(np.min(differences))
    k = max(0, int(np.floor((smallest - t0) / dt)))
    while not np.any(differences <= t0 + k * dt):
        k += 1
    return k


def sample_equiprobable(
    instruction: str,
    gateway,
    t0: float = EQUIPROBABLE_T0,
    dt: float = EQUIPROBABLE_DT,
    seed: int = 0,
    source_spec_id: str = "",
    index: int = 0,
    max_attempts: int = 10,
) -> BaselineSpec:
    """Sample a token sequence as likely, position by position, as the instruction

    At position l the admissible tokens are those whose log-probability after
    the sampled prefix is within t0 + k*dt of the instruction token's
    log-probability after the instruction prefix, for the smallest k >= 0
    admitting any token. Added-vocabulary tokens are never admissible. One
    admissible token is drawn uniformly.

    Args:
        instruction: the informative instruction
        gateway: subject model gateway
        t0: initial band half-width in nats
        dt: band widening step in nats
        seed: sampling seed
        source_spec_id: id of the instruction
        index: which of the instruction's baselines this is
        max_attempts: resamples allowed when the sample reproduces the instruction

    Returns:
        BaselineSpec with the chosen k recorded per position in band_steps
    """
    source = gateway.text_ids(instruction)
    if not source:
        raise PromptPreconditionError("instruction must tokenize to at least one token")
    source_logprobs = gateway.score_sequence(source)
    masked = sorted(gateway.profile.added_vocabulary_ids)

    for attempt in range(max_attempts):
        rng = np.random.default_rng(derive_seed(seed, attempt))
        sampled: t.List[int] = []
        steps: t.List[int] = []
        for position, target_logprob in enumerate(source_logprobs):
            differences = np.abs(gateway.next_token_logprobs(sampled) - target_logprob)
            differences[np.isnan(differences)] = np.inf
            differences[masked] = np.inf
            k = _band_step(differences, t0, dt)
            admissible = np.flatnonzero(differences <= t0 + k * dt)
            sampled.append(int(rng.choice(admissible)))
            steps.append(k)
        text = gateway.decode(sampled)
        if text != instruction:
            break
        logging.debug(f"equiprobable sample {attempt} reproduced the instruction; resampling")
    else:
        raise BaselineError(
            f"equiprobable sampling reproduced {source_spec_id or instruction!r} {max_attempts} times"
        )

    return BaselineSpec(
        method=BaselineMethod.EQUIPROBABLE,
        source_spec_id=source_spec_id,
        text=text,
        length_tokens=len(sampled),
        log_probability=float(np.sum(gateway.score_sequence(sampled), dtype=np.float64)),
        index=index,
        token_ids=tuple(sampled),
        band_steps=tuple(steps),
    )


# corpus cache


def whitespace_prefixes(entry: str) -> t.List[str]:
    """Prefixes of entry that end where a run of whitespace starts

    whitespace_prefixes("Alpha beta gamma.") -> ["Alpha", "Alpha beta"]
    """
    return [entry[: m.start()] for m in _WHITESPACE.finditer(entry) if m.start() > 0]


def corpus_hash(source: str) -> str:
    """Content hash of a local corpus file, or of the dataset name for hf: sources"""
    digest = hashlib.sha256()
    if source.startswith("hf:"):
        digest.update(source.encode("utf-8"))
    else:
        digest.update(pathlib.Path(source).read_bytes())
    return digest.hexdigest()


def read_corpus(source: str, seed: int = 0) -> t.Iterator[str]:
    """Yield corpus entries in a seeded random order

    Args:
        source: a local plain-text file (one entry per non-blank line) or
            "hf:<dataset>/<config>", e.g. "hf:wikitext/wikitext-103-raw-v1"
        seed: order seed
    """
    if source.startswith("hf:"):
        import datasets

        name, _, config = source[3:].partition("/")
        stream = datasets.load_dataset(name, config or None, split="train", streaming=True)
        for row in stream.shuffle(seed=seed, buffer_size=10_000):
            if text := row["text"].strip():
                yield text
        return

    path = pathlib.Path(source)
    if not path.is_file():
        raise CorpusBuildError(f"corpus file does not exist: {path}")
    lines = [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    for i in np.random.default_rng(seed).permutation(len(lines)):
        yield lines[i]


def build_corpus_cache(
    gateway,
    corpus: t.Iterable[str],
    target: int = CORPUS_CACHE_TARGET,
    max_tokens: int = CORPUS_MAX_TOKENS,
    source: str = "",
    source_hash: str = "",
) -> CorpusCache:
    """Score whitespace-terminated prefixes of corpus entries

    Prefixes longer than max_tokens are dropped, along with every longer
    prefix of the same entry. Building stops after the entry during which the
    cache reaches target; that entry's prefixes are all kept.
    """
    entries: t.List[ScoredText] = []
    seen_any = False
    with tqdm(total=target, desc="corpus cache", disable=progress_disabled()) as progress:
        for entry in corpus:
            seen_any = True
            before = len(entries)
            for prefix in whitespace_prefixes(entry):
                ids = gateway.text_ids(prefix)
                if len(ids) > max_tokens:
                    break
                if not ids:
                    continue
                logprob = float(np.sum(gateway.score_sequence(ids), dtype=np.float64))
                entries.append(ScoredText(prefix, tuple(ids), len(ids), logprob))
            progress.update(min(len(entries), target) - min(before, target))
            if len(entries) >= target:
                break

    if not seen_any:
        raise CorpusBuildError(f"corpus {source or '<stream>'} is empty")
    if not entries:
        raise CorpusBuildError(f"corpus {source or '<stream>'} produced no prefixes")
    if len(entries) < target:
        logging.warning(
            f"corpus {source or '<stream>'} exhausted with {len(entries)} cached prefixes, target {target}"
        )
    return CorpusCache(gateway.model_id, entries, source, source_hash, target)


def save_corpus_cache(path: t.Union[str, pathlib.Path], cache: CorpusCache, config_hash: str = ""):
    header = artifact_header(
        ArtifactKind.CORPUS_CACHE,
        config_hash,
        cache.model_id,
        source=cache.source,
        corpus_hash=cache.corpus_hash,
        target=cache.target,
    )
    write_jsonl(
        path,
        header,
        ({"text": e.text, "token_ids": list(e.token_ids), "length": e.length, "log_probability": e.log_probability}
         for e in cache.entries),
    )


def load_corpus_cache(path: t.Union[str, pathlib.Path], model_id: str) -> CorpusCache:
    """Load a corpus cache; refuses caches scored by another model"""
    header, records = read_jsonl(path, ArtifactKind.CORPUS_CACHE)
    if header["_model_id"] != model_id:
        raise CacheMismatchError(
            f"{path} was scored with {header['_model_id']}, not {model_id}"
        )
    entries = [
        ScoredText(r["text"], tuple(r["token_ids"]), r["length"], r["log_probability"])
        for r in records
    ]
    return CorpusCache(
        model_id, entries, header.get("source", ""), header.get("corpus_hash", ""), header.get("target", len(entries))
    )


# matching


def select_matched_candidates(
    length: int,
    log_probability: float,
    pool: t.Sequence[ScoredText],
    count: int = BASELINES_PER_INSTRUCTION,
    n_candidates: int = BASELINE_CANDIDATES,
) -> MatchResult:
    """Length-then-log-probability matching over pool

    Candidates are the entries within length +/- k for the smallest k >= 0
    giving at least n_candidates entries. The count candidates closest in
    log-probability are chosen, each at most once; ties go to the earlier
    pool entry.

    Raises:
        ValueError: pool has fewer than n_candidates entries
    """
    if len(pool) < n_candidates:
        raise ValueError(f"pool of {len(pool)} entries is smaller than {n_candidates} candidates")
    lengths = np.array([entry.length for entry in pool])
    distance = np.abs(lengths - length)
    k = 0
    while np.count_nonzero(distance <= k) < n_candidates:
        k += 1
    candidates = [int(i) for i in np.flatnonzero(distance <= k)]
    gaps = {i: abs(pool[i].log_probability - log_probability) for i in candidates}
    chosen = sorted(candidates, key=lambda i: (gaps[i], i))[:count]
    return MatchResult(k=k, candidates=candidates, chosen=chosen)


def _as_scored(instruction: t.Union[str, ScoredText], gateway) -> ScoredText:
    if isinstance(instruction, ScoredText):
        return instruction
    if gateway is None:
        raise PromptPreconditionError("a gateway is needed to score an unscored instruction")
    return ScoredText.score(instruction, gateway)


def sample_real_text(
    instruction: t.Union[str, ScoredText],
    cache: CorpusCache,
    gateway=None,
    count: int = BASELINES_PER_INSTRUCTION,
    n_candidates: int = BASELINE_CANDIDATES,
    source_spec_id: str = "",
) -> t.List[BaselineSpec]:
    """Corpus prefixes matched to the instruction by length and log-probability"""
    if gateway is not None and cache.model_id != gateway.model_id:
        raise CacheMismatchError(f"cache was scored with {cache.model_id}, not {gateway.model_id}")
    scored = _as_scored(instruction, gateway)
    pool = [entry for entry in cache.entries if entry.text != scored.text]
    if len(pool) < n_candidates:
        raise InsufficientCacheError(
            f"corpus cache holds {len(pool)} usable entries; {n_candidates} candidates are needed"
        )
    match = select_matched_candidates(scored.length, scored.log_probability, pool, count, n_candidates)
    return [
        BaselineSpec(
            BaselineMethod.REAL_TEXT,
            source_spec_id,
            pool[i].text,
            pool[i].length,
            pool[i].log_probability,
            index=n,
            token_ids=pool[i].token_ids,
        )
        for n, i in enumerate(match.chosen)
    ]


def score_instruction_pool(
    instruction_sets: t.Iterable, gateway
) -> t.Dict[str, t.List[ScoredText]]:
    """Score every instruction of every set; keyed by task_id"""
    pool: t.Dict[str, t.List[ScoredText]] = {}
    for instruction_set in instruction_sets:
        scored = pool.setdefault(instruction_set.task_id, [])
        scored.extend(ScoredText.score(text, gateway) for _, text in instruction_set.instructions)
    return pool


def sample_other_task(
    instruction: t.Union[str, ScoredText],
    task_id: str,
    pool: t.Mapping[str, t.Sequence[ScoredText]],
    gateway=None,
    count: int = BASELINES_PER_INSTRUCTION,
    n_candidates: int = BASELINE_CANDIDATES,
    source_spec_id: str = "",
) -> t.List[BaselineSpec]:
    """Instructions of other tasks matched by length and log-probability

    Args:
        instruction: the instruction, or its ScoredText
        task_id: the instruction's task; its own instructions are excluded
        pool: scored instructions of all tasks, keyed by task_id
        gateway: needed only when instruction is a plain string
        count: baselines to return
        n_candidates: minimum candidate set size
        source_spec_id: id of the instruction
    """
    scored = _as_scored(instruction, gateway)
    others = [
        entry
        for other_id in sorted(pool)
        if other_id != task_id
        for entry in pool[other_id]
        if entry.text != scored.text
    ]
    if len(others) < n_candidates:
        raise InsufficientPoolError(
            f"{len(others)} instructions of tasks other than {task_id}; {n_candidates} candidates are needed"
        )
    match = select_matched_candidates(scored.length, scored.log_probability, others, count, n_candidates)
    return [
        BaselineSpec(
            BaselineMethod.OTHER_TASK,
            source_spec_id,
            others[i].text,
            others[i].length,
            others[i].log_probability,
            index=n,
            token_ids=others[i].token_ids,
        )
        for n, i in enumerate(match.chosen)
    ]
