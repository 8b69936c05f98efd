""" Functions for writing and loading fvworkbench artifacts

Every artifact is a JSON document, or a JSON-lines file whose first line is a
header, carrying the fields:

    _version: fvworkbench version that wrote it
    _kind: artifact kind (see ArtifactKind)
    _config_hash: hash of the RunConfig that produced it
    _model_id: model the artifact was computed with
"""

import json
import logging
import os
import pathlib
import threading
import typing as t
from enum import Enum

from ._version import __version__
from .errors import ArtifactMismatchError, ReportCollisionError

__all__ = [
    "ArtifactKind",
    "ReportStore",
    "artifact_header",
    "artifact_kind",
    "canonical_json",
    "load_artifact",
    "model_slug",
    "read_jsonl",
    "write_artifact",
    "write_jsonl",
]

HEADER_KEYS = ("_version", "_kind", "_config_hash", "_model_id")


class ArtifactKind(Enum):
    INSTRUCTIONS = "instructions"
    TOP_INSTRUCTIONS = "top_instructions"
    CORPUS_CACHE = "corpus_cache"
    BASELINES = "baselines"
    ACTIVATIONS = "activations"
    CIE = "cie"
    HEADS = "heads"
    FUNCTION_VECTOR = "function_vector"
    REPORT = "report"
    SKIPPED = "skipped"


class ArtifactFormat(Enum):
    JSON = 1
    JSON_LINES = 2


def canonical_json(data: t.Any) -> str:
    """JSON with sorted keys and no whitespace; equal data gives equal text"""
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def model_slug(model_id: str) -> str:
    """Directory name for a model id, e.g. meta-llama/Llama-3.2-3B -> meta-llama__Llama-3.2-3B"""
    return model_id.replace("/", "__").replace(":", "_")


def artifact_header(
    kind: ArtifactKind, config_hash: str, model_id: str, **extra
) -> t.Dict[str, t.Any]:
    header = {
        "_version": __version__,
        "_kind": kind.value,
        "_config_hash": config_hash,
        "_model_id": model_id,
    }
    header.update(extra)
    return header


def artifact_format(path: t.Union[str, pathlib.Path]) -> ArtifactFormat:
    """Return ArtifactFormat of the file at path"""
    with open(path, encoding="utf-8") as fp:
        first = fp.readline()
        second = fp.readline()
    if not first or first[0] != "{":
        raise ValueError(f"Unknown artifact file type: {path}")
    try:
        json.loads(first)
    except json.JSONDecodeError:
        # a pretty-printed document spans several lines
        return ArtifactFormat.JSON
    return ArtifactFormat.JSON_LINES if second else ArtifactFormat.JSON


def artifact_kind(path: t.Union[str, pathlib.Path]) -> ArtifactKind:
    """Return the ArtifactKind recorded in the artifact at path"""
    with open(path, encoding="utf-8") as fp:
        if artifact_format(path) == ArtifactFormat.JSON_LINES:
            header = json.loads(fp.readline())
        else:
            header = json.load(fp)
    return ArtifactKind(header["_kind"])


def _check_header(
    path,
    header: t.Dict[str, t.Any],
    kind: t.Optional[ArtifactKind],
    config_hash: t.Optional[str],
    model_id: t.Optional[str],
    force: bool,
):
    if kind is not None and header.get("_kind") != kind.value:
        raise ArtifactMismatchError(
            f"{path} holds a {header.get('_kind')} artifact, expected {kind.value}"
        )
    problems = []
    if config_hash is not None and header.get("_config_hash") != config_hash:
        problems.append(
            f"config hash {header.get('_config_hash')} differs from running config {config_hash}"
        )
    if model_id is not None and header.get("_model_id") != model_id:
        problems.append(f"model {header.get('_model_id')} differs from {model_id}")
    if not problems:
        return
    message = f"{path}: " + "; ".join(problems)
    if not force:
        raise ArtifactMismatchError(message)
    logging.warning(f"{message} (forced)")


def write_artifact(
    path: t.Union[str, pathlib.Path],
    kind: ArtifactKind,
    payload: t.Dict[str, t.Any],
    config_hash: str,
    model_id: str,
):
    """Write payload as a JSON document with an artifact header"""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = artifact_header(kind, config_hash, model_id)
    data.update(payload)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, mode="w", encoding="utf-8") as fp:
        json.dump(data, fp, indent=2, sort_keys=True)
        fp.write("\n")
    os.replace(tmp, path)


def load_artifact(
    path: t.Union[str, pathlib.Path],
    kind: t.Optional[ArtifactKind] = None,
    config_hash: t.Optional[str] = None,
    model_id: t.Optional[str] = None,
    force: bool = False,
) -> t.Dict[str, t.Any]:
    """Load a JSON artifact and check its header

    Raises:
        FileNotFoundError: no file at path
        ArtifactMismatchError: kind differs, or config hash or model differ and force is False
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Could not find artifact file: {path}")
    with open(path, encoding="utf-8") as fp:
        data = json.load(fp)
    _check_header(path, data, kind, config_hash, model_id, force)
    return data


def write_jsonl(
    path: t.Union[str, pathlib.Path],
    header: t.Dict[str, t.Any],
    records: t.Iterable[t.Dict[str, t.Any]],
):
    """Write a header line followed by one JSON record per line"""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, mode="w", encoding="utf-8") as fp:
        fp.write(canonical_json(header) + "\n")
        for record in records:
            fp.write(canonical_json(record) + "\n")
    os.replace(tmp, path)


def read_jsonl(
    path: t.Union[str, pathlib.Path],
    kind: t.Optional[ArtifactKind] = None,
    config_hash: t.Optional[str] = None,
    model_id: t.Optional[str] = None,
    force: bool = False,
) -> t.Tuple[t.Dict[str, t.Any], t.List[t.Dict[str, t.Any]]]:
    """Read a JSON-lines artifact written by write_jsonl

    Returns: (header, records)
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Could not find artifact file: {path}")
    with open(path, encoding="utf-8") as fp:
        header = json.loads(fp.readline())
        _check_header(path, header, kind, config_hash, model_id, force)
        records = [json.loads(line) for line in fp if line.strip()]
    return header, records


class ReportStore:
    """Append-only JSON-lines store of evaluation reports keyed by a string

    Writing an identical payload under an existing key is a no-op; a different
    payload under an existing key raises ReportCollisionError unless overwrite
    is True, in which case the last write wins.

    Args:
        path: the reports.jsonl file
        config_hash: hash of the running config, recorded on every line
        force: accept existing lines written under a different config hash
    """

    def __init__(self, path: t.Union[str, pathlib.Path], config_hash: str, force: bool = False):
        self.path = pathlib.Path(path)
        self.config_hash = config_hash
        self._lock = threading.Lock()
        self._records: t.Dict[str, t.Dict[str, t.Any]] = {}
        if self.path.is_file():
            with open(self.path, encoding="utf-8") as fp:
                for line in fp:
                    if not line.strip():
                        continue
                    record = json.loads(line)
                    _check_header(self.path, record, ArtifactKind.REPORT, config_hash, None, force)
                    self._records[record["_key"]] = self._payload(record)

    @staticmethod
    def _payload(record: t.Dict[str, t.Any]) -> t.Dict[str, t.Any]:
        return {k: v for k, v in record.items() if k not in HEADER_KEYS and k != "_key"}

    def __contains__(self, key: str) -> bool:
        return key in self._records

    def __len__(self) -> int:
        return len(self._records)

    def get(self, key: str) -> t.Optional[t.Dict[str, t.Any]]:
        return self._records.get(key)

    def keys(self) -> t.List[str]:
        return sorted(self._records)

    def records(self) -> t.List[t.Dict[str, t.Any]]:
        """All payloads, ordered by key"""
        return [self._records[key] for key in self.keys()]

    def put(
        self,
        key: str,
        payload: t.Dict[str, t.Any],
        model_id: str = "",
        overwrite: bool = False,
    ) -> bool:
        """Store payload under key

        Returns:
            True if a line was written, False if the identical payload was already stored
        """
        # round-trip so the comparison sees exactly what a reload would
        payload = json.loads(canonical_json(payload))
        with self._lock:
            existing = self._records.get(key)
            if existing is not None:
                if canonical_json(existing) == canonical_json(payload):
                    return False
                if not overwrite:
                    raise ReportCollisionError(
                        f"report {key} already stored in {self.path} with different content"
                    )
            record = artifact_header(ArtifactKind.REPORT, self.config_hash, model_id, _key=key)
            record.update(payload)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, mode="a", encoding="utf-8") as fp:
                fp.write(canonical_json(record) + "\n")
            self._records[key] = payload
            return True
