"""Response embedding backends and vector utilities.

Two backends share the same surface: a deterministic seeded-hash mock for
tests and offline runs, and a client for OpenAI-compatible ``/embeddings``
endpoints. Both expose single-text ``embed`` and batched, sklearn-style
``transform``.
"""
from __future__ import annotations

import hashlib
import os
import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import requests
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import DimensionMismatchError, as_vector, check_positive

DEFAULT_DIMENSION = 384  # width of the default lightweight sentence encoder


class EmbeddingBackendError(RuntimeError):
    """Base class for embedding backend failures."""


class EmbeddingTransportError(EmbeddingBackendError):
    """The embeddings endpoint could not be reached."""


class EmbeddingStatusError(EmbeddingBackendError):
    """The embeddings endpoint answered with a non-success status."""

    def __init__(self, status_code: int, detail: str = ""):
        super().__init__(f"embeddings endpoint returned status {status_code}"
                         + (f": {detail}" if detail else ""))
        self.status_code = status_code


class EmbeddingSchemaError(EmbeddingBackendError):
    """The endpoint response did not match the expected JSON shape."""


@dataclass
class EmbedderConfig:
    """Configuration for building an embedding backend."""

    backend: str = "deterministic-mock"
    dimension: int = DEFAULT_DIMENSION
    seed: int = 0
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str = "OPENAI_API_KEY"
    batch_size: int = 64
    timeout: float = 30.0
    cache: bool = False

    def __post_init__(self) -> None:
        if self.backend not in ("deterministic-mock", "http-service"):
            raise ValueError(f"unknown embedding backend {self.backend!r}")
        check_positive(self.dimension, "dimension")
        check_positive(self.batch_size, "batch_size")
        if self.backend == "http-service" and not self.endpoint:
            raise ValueError("http-service embedder requires an endpoint")


def cosine(u: Sequence[float] | np.ndarray, v: Sequence[float] | np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; zero-norm inputs yield 0 by convention."""
    u = as_vector(u, name="u")
    v = as_vector(v, dim=u.shape[0], name="v")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def mean_vector(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Component-wise arithmetic mean of a nonempty list of equal-length vectors."""
    if len(vectors) == 0:
        raise ValueError("mean_vector requires at least one vector")
    first = as_vector(vectors[0], name="vectors[0]")
    stacked = np.stack(
        [first] + [as_vector(v, dim=first.shape[0], name=f"vectors[{i}]")
                   for i, v in enumerate(vectors[1:], start=1)])
    return stacked.mean(axis=0)


class _CacheMixin:
    """Optional in-memory memo keyed by the SHA-256 of the text."""

    _memo: dict[bytes, np.ndarray]
    _memo_lock: threading.Lock
    cache: bool

    def _init_cache(self) -> None:
        self._memo = {}
        self._memo_lock = threading.Lock()

    def _cached(self, text: str) -> np.ndarray | None:
        if not self.cache:
            return None
        key = hashlib.sha256(text.encode("utf-8")).digest()
        with self._memo_lock:
            hit = self._memo.get(key)
        return None if hit is None else hit.copy()

    def _store(self, text: str, vec: np.ndarray) -> None:
        if not self.cache:
            return
        key = hashlib.sha256(text.encode("utf-8")).digest()
        with self._memo_lock:
            self._memo[key] = vec.copy()


class MockEmbedder(_CacheMixin, TransformerMixin, BaseEstimator):
    """Deterministic seeded-hash embedder.

    Not semantically meaningful, but bitwise reproducible: the text bytes and
    the seed are hashed, the digest seeds a PCG64 stream that draws ``dimension``
    floats uniformly from [-1, 1], and the result is L2-normalized. Distinct
    texts get distinct vectors almost surely.
    """

    def __init__(self, dimension: int = DEFAULT_DIMENSION, seed: int = 0,
                 cache: bool = False):
        self.dimension = dimension
        self.seed = seed
        self.cache = cache
        self._init_cache()

    def fit(self, X=None, y=None) -> "MockEmbedder":
        return self

    def embed(self, text: str) -> np.ndarray:
        hit = self._cached(text)
        if hit is not None:
            return hit
        material = hashlib.sha256(
            int(self.seed).to_bytes(8, "little", signed=True)
            + text.encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(material, "little"))
        vec = rng.uniform(-1.0, 1.0, self.dimension)
        norm = np.linalg.norm(vec)
        if norm == 0.0:  # unreachable in practice; keeps the invariant airtight
            vec[0] = 1.0
            norm = 1.0
        vec = vec / norm
        self._store(text, vec)
        return vec

    def transform(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.embed(t) for t in texts])


class HttpEmbedder(_CacheMixin, TransformerMixin, BaseEstimator):
    """Client for an OpenAI-compatible embeddings endpoint.

    Sends ``{"model": ..., "input": [texts]}`` and expects per-input float
    arrays under ``data[i].embedding``. Bearer auth is read from the
    environment variable named by ``api_key_env`` when present.
    """

    def __init__(self, endpoint: str, model: str | None = None,
                 dimension: int = DEFAULT_DIMENSION,
                 api_key_env: str = "OPENAI_API_KEY", batch_size: int = 64,
                 timeout: float = 30.0, cache: bool = False):
        self.endpoint = endpoint
        self.model = model
        self.dimension = dimension
        self.api_key_env = api_key_env
        self.batch_size = batch_size
        self.timeout = timeout
        self.cache = cache
        self._init_cache()
        self._session = requests.Session()

    def fit(self, X=None, y=None) -> "HttpEmbedder":
        return self

    def embed(self, text: str) -> np.ndarray:
        return self.transform([text])[0]

    def transform(self, texts: Sequence[str]) -> np.ndarray:
        out: list[np.ndarray | None] = [self._cached(t) for t in texts]
        missing = [i for i, v in enumerate(out) if v is None]
        for start in range(0, len(missing), self.batch_size):
            idx = missing[start:start + self.batch_size]
            batch = [texts[i] for i in idx]
            for i, vec in zip(idx, self._request(batch)):
                self._store(texts[i], vec)
                out[i] = vec
        return np.stack(out)  # type: ignore[arg-type]

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _request(self, batch: list[str]) -> list[np.ndarray]:
        payload: dict = {"input": batch}
        if self.model:
            payload["model"] = self.model
        try:
            response = self._session.post(self.endpoint, json=payload,
                                          headers=self._headers(),
                                          timeout=self.timeout)
        except requests.RequestException as exc:
            raise EmbeddingTransportError(
                f"failed to reach embeddings endpoint {self.endpoint}: {exc}"
            ) from exc
        if not 200 <= response.status_code < 300:
            raise EmbeddingStatusError(response.status_code, response.text[:200])
        try:
            rows = response.json()["data"]
            vectors = [np.asarray(row["embedding"], dtype=np.float64)
                       for row in rows]
        except (ValueError, KeyError, TypeError) as exc:
            raise EmbeddingSchemaError(
                f"malformed embeddings response: {exc}") from exc
        if len(vectors) != len(batch):
            raise EmbeddingSchemaError(
                f"endpoint returned {len(vectors)} embeddings for "
                f"{len(batch)} inputs")
        for vec in vectors:
            if vec.ndim != 1 or vec.shape[0] != self.dimension:
                raise DimensionMismatchError(
                    f"endpoint returned embedding of length {vec.shape}, "
                    f"expected {self.dimension}")
            if not np.all(np.isfinite(vec)):
                raise EmbeddingSchemaError("embedding contains non-finite values")
        return vectors


def build_embedder(config: EmbedderConfig) -> MockEmbedder | HttpEmbedder:
    """Instantiate the backend described by ``config``."""
    if config.backend == "deterministic-mock":
        return MockEmbedder(dimension=config.dimension, seed=config.seed,
                            cache=config.cache)
    assert config.endpoint is not None  # enforced by EmbedderConfig
    return HttpEmbedder(endpoint=config.endpoint, model=config.model,
                        dimension=config.dimension,
                        api_key_env=config.api_key_env,
                        batch_size=config.batch_size, timeout=config.timeout,
                        cache=config.cache)
