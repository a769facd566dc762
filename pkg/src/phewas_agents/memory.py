"""Per-agent long-term memory: case embeddings, cosine retrieval, JSONL persistence."""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ConflictError, DegenerateInputError, ProtocolError, ValidationError
from .wire import post_json

DEFAULT_DIMENSION = 4096
EMBED_ENDPOINT_ENV = "PHEWAS_EMBED_ENDPOINT"
EMBED_KEY_ENV = "PHEWAS_EMBED_KEY"

_TOKEN_SPLIT = re.compile(r"[^0-9A-Za-z]+")


class EmbeddingMode(str, Enum):
    DETERMINISTIC = "Deterministic"
    REMOTE = "Remote"


@dataclass(frozen=True)
class EmbeddingSpec:
    mode: EmbeddingMode = EmbeddingMode.DETERMINISTIC
    dimension: int = DEFAULT_DIMENSION
    endpoint: str | None = None
    api_key: str | None = None
    timeout: float = 30.0
    retries: int = 2

    def __post_init__(self):
        if self.dimension < 1:
            raise ValidationError("embedding dimension must be positive")
        if self.mode is EmbeddingMode.REMOTE and not self.endpoint:
            raise ConfigurationError("remote embedding needs an endpoint")

    @classmethod
    def remote_from_env(cls, dimension: int = DEFAULT_DIMENSION) -> "EmbeddingSpec":
        return cls(EmbeddingMode.REMOTE, dimension, os.environ.get(EMBED_ENDPOINT_ENV),
                   os.environ.get(EMBED_KEY_ENV))


def tokenize(text: str) -> list[str]:
    return [t.lower() for t in _TOKEN_SPLIT.split(text) if t]


def _hash64(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def embed(spec: EmbeddingSpec, case_text: str, phenotype_ids: Sequence[str] = ()) -> np.ndarray:
    """Embed a case description and its phenotype ids into a unit vector.

    Deterministic mode is signed feature hashing: every token (text and ids
    split on non-alphanumerics, lower-cased) is hashed with 64-bit BLAKE2b;
    ``h mod E`` picks the bucket and the parity of ``h // E`` the sign.
    """
    if not case_text.strip() and not phenotype_ids:
        raise ValidationError("nothing to embed")
    if spec.mode is EmbeddingMode.REMOTE:
        text = " ".join([case_text, *phenotype_ids]).strip()
        body = post_json(spec.endpoint, {"texts": [text]}, timeout=spec.timeout,
                         retries=spec.retries, api_key=spec.api_key)
        try:
            vec = np.asarray(body["vectors"][0], dtype=float)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed embedding response: {exc}") from exc
        if vec.shape != (spec.dimension,):
            raise ProtocolError(f"embedding has shape {vec.shape}, expected ({spec.dimension},)")
    else:
        vec = np.zeros(spec.dimension)
        for tok in tokenize(case_text) + [t for pid in phenotype_ids for t in tokenize(pid)]:
            h = _hash64(tok)
            vec[h % spec.dimension] += 1.0 if (h // spec.dimension) % 2 == 0 else -1.0
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        # every token cancelled out against a colliding one
        raise DegenerateInputError("embedding collapsed to the zero vector")
    return vec / norm


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("zero vector")
    return max(-1.0, min(1.0, float(np.dot(a, b)) / (na * nb)))


@dataclass(frozen=True)
class MemoryCase:
    case_id: str
    embedding: tuple[float, ...]
    summary: str
    recommended_phenotype_ids: tuple[str, ...] = ()
    outcome_note: str = ""
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))

    def __post_init__(self):
        object.__setattr__(self, "embedding", tuple(float(v) for v in self.embedding))
        object.__setattr__(self, "recommended_phenotype_ids", tuple(self.recommended_phenotype_ids))
        if math.fsum(v * v for v in self.embedding) <= 0.0:
            raise ValidationError("memory case embedding must have positive norm")

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "embedding": list(self.embedding),
            "summary": self.summary,
            "recommended_phenotype_ids": list(self.recommended_phenotype_ids),
            "outcome_note": self.outcome_note,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryCase":
        return cls(d["case_id"], tuple(d["embedding"]), d["summary"],
                   tuple(d.get("recommended_phenotype_ids", ())), d.get("outcome_note", ""),
                   d.get("created_at", ""))


class MemoryBank:
    """Append-only case store for one agent.

    Retrieval reads an immutable snapshot (a tuple of cases plus a stacked
    matrix); :meth:`store` swaps in a new snapshot under a writer lock and,
    when a path is attached, appends one JSON line before publishing.
    """

    def __init__(self, agent_id: str, dimension: int = DEFAULT_DIMENSION,
                 cases: Sequence[MemoryCase] = (), path=None, hidden_ids: Sequence[str] = ()):
        self.agent_id = agent_id
        # ids already in the backing file but withheld from retrieval; they still block re-storing
        self.hidden_ids = frozenset(hidden_ids)
        self.dimension = dimension
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        # cases and their embedding matrix are swapped together so readers never see a torn pair
        self._state: tuple[tuple[MemoryCase, ...], np.ndarray] = ((), np.zeros((0, dimension)))
        for c in cases:
            self._append(c)

    @property
    def cases(self) -> tuple[MemoryCase, ...]:
        return self._state[0]

    def __len__(self):
        return len(self._state[0])

    def _append(self, case: MemoryCase) -> None:
        if len(case.embedding) != self.dimension:
            raise ValidationError(f"case dimension {len(case.embedding)} != bank dimension {self.dimension}")
        cases, matrix = self._state
        if case.case_id in self.hidden_ids or any(c.case_id == case.case_id for c in cases):
            raise ConflictError(f"case id {case.case_id!r} already stored")
        row = np.asarray(case.embedding)[None, :]
        self._state = (cases + (case,), np.vstack([matrix, row]))

    def has_case(self, case_id: str) -> bool:
        return case_id in self.hidden_ids or any(c.case_id == case_id for c in self.cases)

    def snapshot(self) -> tuple[tuple[MemoryCase, ...], np.ndarray]:
        return self._state

    @classmethod
    def load(cls, path, agent_id: str, dimension: int = DEFAULT_DIMENSION) -> "MemoryBank":
        path = Path(path)
        cases = []
        if path.exists():
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        cases.append(MemoryCase.from_dict(json.loads(line)))
        return cls(agent_id, dimension, cases, path=path)


def store(bank: MemoryBank, case: MemoryCase) -> MemoryBank:
    with bank._lock:
        if len(case.embedding) != bank.dimension:
            raise ValidationError(f"case dimension {len(case.embedding)} != bank dimension {bank.dimension}")
        if bank.has_case(case.case_id):
            raise ConflictError(f"case id {case.case_id!r} already stored")
        if bank.path is not None:
            bank.path.parent.mkdir(parents=True, exist_ok=True)
            with open(bank.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(json.dumps(case.to_dict(), ensure_ascii=False) + "\n")
        bank._append(case)
    return bank


def retrieve(bank: MemoryBank, query, k: int = 1) -> list[tuple[MemoryCase, float]]:
    """Top-``k`` cases by cosine similarity; ties keep insertion order."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    q = np.asarray(query, dtype=float)
    if q.shape != (bank.dimension,):
        raise ValidationError(f"query dimension {q.shape} != bank dimension {bank.dimension}")
    cases, mat = bank.snapshot()
    if not cases:
        return []
    qn = float(np.linalg.norm(q))
    if qn == 0.0:
        raise DegenerateInputError("zero query vector")
    sims = np.clip(mat @ q / (np.linalg.norm(mat, axis=1) * qn), -1.0, 1.0)
    order = sorted(range(len(cases)), key=lambda i: (-sims[i], i))[:k]
    return [(cases[i], float(sims[i])) for i in order]
