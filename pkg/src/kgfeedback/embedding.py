"""Text embedding providers and query/triplet relevance scoring."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from pathlib import Path

import numpy as np
import requests

from kgfeedback.graph import KnowledgeGraph, Triplet

logger = logging.getLogger(__name__)

EPS_RELEVANCE = 1e-4
DEFAULT_DIM = 2048

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class EmbeddingError(Exception):
    pass


class EmbeddingTransportError(EmbeddingError):
    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempt(s))")
        self.attempts = attempts


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _TOKEN_RE.findall(text.lower())


def token_bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % dim


def _normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0 or not np.isfinite(norm):
        raise EmbeddingError("cannot normalize a zero or non-finite vector")
    return vec / norm


class HashEmbedder:
    """Deterministic hashed bag-of-tokens embedding."""

    def __init__(self, dim: int = DEFAULT_DIM):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        tokens = tokenize(text)
        if not tokens:
            raise ValueError(f"text has no alphanumeric tokens: {text!r}")
        vec = np.zeros(self.dim)
        for tok in tokens:
            vec[token_bucket(tok, self.dim)] += 1.0
        return _normalize(vec)

    def embed_many(self, texts: list[str]) -> list[np.ndarray]:
        return [self.embed(t) for t in texts]


class RemoteEmbedder:
    """Embedding service client with an optional record/replay fixture.

    The service receives ``{"texts": [...]}`` and answers
    ``{"vectors": [[...], ...]}`` with one vector per text.  The fixture is a
    JSON object mapping text to vector.
    """

    def __init__(
        self,
        endpoint: str | None = None,
        *,
        mode: str = "live",
        fixture_path: str | os.PathLike | None = None,
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.5,
    ):
        if mode not in ("live", "record", "replay"):
            raise ValueError(f"unknown mode {mode!r}")
        self.endpoint = endpoint or os.environ.get("EMBED_ENDPOINT")
        self.mode = mode
        self.fixture_path = Path(fixture_path) if fixture_path else None
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.dim: int | None = None
        self._fixture: dict[str, list[float]] = {}
        if self.fixture_path and self.fixture_path.exists():
            self._fixture = json.loads(self.fixture_path.read_text(encoding="utf-8"))
        if mode != "replay" and not self.endpoint:
            raise EmbeddingError("EMBED_ENDPOINT is not configured")
        if mode != "live" and self.fixture_path is None:
            raise EmbeddingError(f"{mode} mode needs a fixture path")

    def _post(self, texts: list[str]) -> list[list[float]]:
        last: Exception | None = None
        for attempt in range(1, self.retries + 1):
            try:
                resp = requests.post(self.endpoint, json={"texts": texts}, timeout=self.timeout)
                resp.raise_for_status()
                vectors = resp.json()["vectors"]
                if len(vectors) != len(texts):
                    raise EmbeddingError("embedding service returned the wrong number of vectors")
                return vectors
            except (requests.RequestException, KeyError, ValueError) as exc:
                last = exc
                logger.warning("embedding request failed (attempt %d/%d): %s", attempt, self.retries, exc)
                if attempt < self.retries:
                    time.sleep(self.backoff * 2 ** (attempt - 1))
        raise EmbeddingTransportError(str(last), self.retries)

    def embed_many(self, texts: list[str]) -> list[np.ndarray]:
        for t in texts:
            if not t or not t.strip():
                raise ValueError("cannot embed empty text")
        missing = [t for t in dict.fromkeys(texts) if t not in self._fixture]
        if missing:
            if self.mode == "replay":
                raise EmbeddingError(f"embedding fixture miss for {missing[0]!r}")
            vectors = self._post(missing)
            for t, v in zip(missing, vectors):
                self._fixture[t] = [float(x) for x in v]
            if self.mode == "record":
                self.fixture_path.write_text(json.dumps(self._fixture, sort_keys=True), encoding="utf-8")
        out = [_normalize(np.asarray(self._fixture[t], dtype=float)) for t in texts]
        dims = {v.shape[0] for v in out}
        if self.dim is not None:
            dims.add(self.dim)
        if len(dims) > 1:
            raise EmbeddingError(f"inconsistent embedding dimensions {sorted(dims)}")
        if out:
            self.dim = out[0].shape[0]
        return out

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]


def cosine_to_relevance(cos: float) -> float:
    """Map cosine in [-1, 1] to a strictly positive relevance in [eps, 1]."""
    return min(1.0, max(EPS_RELEVANCE, (cos + 1.0) / 2.0))


def relevance_between(a: np.ndarray, b: np.ndarray) -> float:
    return cosine_to_relevance(float(np.dot(a, b)))


def triplet_text(kg: KnowledgeGraph, t: Triplet) -> str:
    return f"{kg.entities[t.head].name} {t.relation} {kg.entities[t.tail].name}"


class RelevanceScorer:
    """Scores query relevance against triplets and entity names.

    Triplet embeddings are cached by id in one stacked matrix; call
    ``invalidate`` when triplets are added or renamed.
    """

    def __init__(self, kg: KnowledgeGraph, embedder=None):
        self.kg = kg
        self.embedder = embedder or HashEmbedder()
        self._rows: dict[str, int] = {}
        self._vecs: list[np.ndarray] = []
        self._matrix: np.ndarray | None = None
        self._entity_ids: list[str] | None = None
        self._entity_matrix: np.ndarray | None = None
        self._lock = threading.Lock()

    def embed_query(self, text: str) -> np.ndarray:
        return self.embedder.embed(text)

    def _ensure(self, tids) -> None:
        missing = [tid for tid in dict.fromkeys(tids) if tid not in self._rows]
        if not missing:
            return
        vecs = self.embedder.embed_many([triplet_text(self.kg, self.kg.get(tid)) for tid in missing])
        with self._lock:
            for tid, vec in zip(missing, vecs):
                if tid not in self._rows:
                    self._rows[tid] = len(self._vecs)
                    self._vecs.append(vec)
            self._matrix = None

    def triplet_vector(self, tid: str) -> np.ndarray:
        self._ensure([tid])
        return self._vecs[self._rows[tid]]

    def relevance(self, query_vec: np.ndarray, t: Triplet | str) -> float:
        tid = t if isinstance(t, str) else t.tid
        return relevance_between(query_vec, self.triplet_vector(tid))

    def relevances(self, query_vec: np.ndarray, tids) -> dict[str, float]:
        tids = list(tids)
        if not tids:
            return {}
        self._ensure(tids)
        with self._lock:
            if self._matrix is None:
                self._matrix = np.stack(self._vecs)
            matrix = self._matrix
        cos = matrix @ query_vec
        rel = np.clip((cos + 1.0) / 2.0, EPS_RELEVANCE, 1.0)
        return {tid: float(rel[self._rows[tid]]) for tid in tids}

    def entity_relevances(self, query_vec: np.ndarray) -> tuple[list[str], np.ndarray]:
        if not self.kg.entities:
            return [], np.zeros(0)
        if self._entity_matrix is None or len(self._entity_ids) != len(self.kg.entities):
            ids = sorted(self.kg.entities)
            vecs = self.embedder.embed_many([self.kg.entities[e].name for e in ids])
            with self._lock:
                self._entity_ids = ids
                self._entity_matrix = np.stack(vecs)
        cos = self._entity_matrix @ query_vec
        return self._entity_ids, np.clip((cos + 1.0) / 2.0, EPS_RELEVANCE, 1.0)

    def invalidate(self, tids=None) -> None:
        with self._lock:
            if tids is None:
                self._rows.clear()
                self._vecs.clear()
            else:
                # re-embed on next use; stale rows stay but are unreachable
                for tid in tids:
                    self._rows.pop(tid, None)
            self._matrix = None
            self._entity_matrix = None
