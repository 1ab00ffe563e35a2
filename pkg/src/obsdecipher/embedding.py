"""Embedding providers and vector arithmetic.

The image encoder itself is an external backend: this module defines the
provider contract, a deterministic offline stub used throughout the test
suite, an HTTP client for a hosted encoder, and the double-precision vector
operations the classifier and the semantic cache rely on.
"""

from __future__ import annotations

import base64
import hashlib
import os
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
import requests

from .errors import (
    DimensionMismatchError,
    EmptyInputError,
    ProviderUnavailableError,
    ZeroNormError,
)

DEFAULT_DIM = 768

EMBED_URL_ENV = "OBS_EMBED_URL"


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    """Fixed-length vector of finite float64 values."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise DimensionMismatchError("embedding must be a non-empty 1-d vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("embedding contains NaN or infinite values")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingVector):
            return NotImplemented
        return bool(np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash(self.values.tobytes())

    def tolist(self) -> list[float]:
        return self.values.tolist()


class EmbeddingProvider(ABC):
    """Contract every encoder backend satisfies.

    ``embed_image``/``embed_text`` must be deterministic for identical input
    bytes within a session and safe to call from multiple threads.
    """

    name: str
    dim: int

    @abstractmethod
    def embed_image(self, image: bytes) -> EmbeddingVector: ...

    @abstractmethod
    def embed_text(self, text: str) -> EmbeddingVector: ...


def embed_image(provider: EmbeddingProvider, image: bytes) -> EmbeddingVector:
    """Encode image bytes, enforcing the provider's declared dimension."""
    if not image:
        raise EmptyInputError("image bytes are empty")
    vec = provider.embed_image(image)
    if vec.dim != provider.dim:
        raise DimensionMismatchError(
            f"provider {provider.name!r} returned {vec.dim} values, expected {provider.dim}"
        )
    return vec


def embed_text(provider: EmbeddingProvider, text: str) -> EmbeddingVector:
    """Encode UTF-8 text, enforcing the provider's declared dimension."""
    if not text:
        raise EmptyInputError("text is empty")
    vec = provider.embed_text(text)
    if vec.dim != provider.dim:
        raise DimensionMismatchError(
            f"provider {provider.name!r} returned {vec.dim} values, expected {provider.dim}"
        )
    return vec


class StubEmbeddingProvider(EmbeddingProvider):
    """Offline provider: embeddings are a pure function of the input bytes.

    The input is hashed to a 64-bit key that seeds a counter-based Philox
    stream; the vector is ``dim`` standard-normal draws, L2-normalized.
    Distinct inputs collide with negligible probability, which is enough to
    exercise every downstream component without model weights.
    """

    def __init__(self, dim: int = DEFAULT_DIM, name: str = "stub"):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.name = name

    def _vector(self, payload: bytes) -> EmbeddingVector:
        key = int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")
        rng = np.random.Generator(np.random.Philox(key=key))
        values = rng.standard_normal(self.dim)
        norm = float(np.linalg.norm(values))
        while norm == 0.0:  # unreachable in practice; keeps the contract total
            key = (key + 1) & 0xFFFFFFFFFFFFFFFF
            rng = np.random.Generator(np.random.Philox(key=key))
            values = rng.standard_normal(self.dim)
            norm = float(np.linalg.norm(values))
        return EmbeddingVector(values / norm)

    def embed_image(self, image: bytes) -> EmbeddingVector:
        if not image:
            raise EmptyInputError("image bytes are empty")
        return self._vector(b"image\x00" + image)

    def embed_text(self, text: str) -> EmbeddingVector:
        if not text:
            raise EmptyInputError("text is empty")
        return self._vector(b"text\x00" + text.encode("utf-8"))


class RemoteEmbeddingProvider(EmbeddingProvider):
    """HTTP client for a hosted encoder (e.g. a DINOv2 service).

    Protocol: POST ``<base>/embed`` with ``{"kind": "image"|"text", "data":
    <base64 or utf-8>}``; the service replies ``{"dim": n, "values": [...]}``.
    Concurrent in-flight requests are bounded by ``max_in_flight``.
    """

    def __init__(
        self,
        url: str,
        dim: int = DEFAULT_DIM,
        name: str | None = None,
        timeout: float = 60.0,
        max_in_flight: int = 4,
    ):
        base = url.rstrip("/")
        self._endpoint = base if base.endswith("/embed") else base + "/embed"
        self.dim = dim
        self.name = name or f"remote:{self._endpoint}"
        self._timeout = timeout
        self._gate = threading.Semaphore(max_in_flight)

    def _post(self, kind: str, data: str) -> EmbeddingVector:
        try:
            with self._gate:
                resp = requests.post(
                    self._endpoint,
                    json={"kind": kind, "data": data},
                    timeout=self._timeout,
                )
        except requests.RequestException as exc:
            raise ProviderUnavailableError(f"embedding endpoint unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise ProviderUnavailableError(
                f"embedding endpoint returned HTTP {resp.status_code}"
            )
        try:
            body = resp.json()
            values = body["values"]
            reported = int(body["dim"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ProviderUnavailableError(f"malformed embedding response: {exc}") from exc
        if reported != self.dim or len(values) != self.dim:
            raise DimensionMismatchError(
                f"endpoint returned {len(values)} values (dim={reported}), expected {self.dim}"
            )
        return EmbeddingVector(np.asarray(values, dtype=np.float64))

    def embed_image(self, image: bytes) -> EmbeddingVector:
        if not image:
            raise EmptyInputError("image bytes are empty")
        return self._post("image", base64.b64encode(image).decode("ascii"))

    def embed_text(self, text: str) -> EmbeddingVector:
        if not text:
            raise EmptyInputError("text is empty")
        return self._post("text", text)


def provider_from_env(dim: int = DEFAULT_DIM) -> EmbeddingProvider:
    """Remote provider when OBS_EMBED_URL is set, stub otherwise."""
    url = os.environ.get(EMBED_URL_ENV, "").strip()
    if url:
        return RemoteEmbeddingProvider(url, dim=dim)
    return StubEmbeddingProvider(dim=dim)


def _check_dims(a: EmbeddingVector, b: EmbeddingVector) -> None:
    if a.dim != b.dim:
        raise DimensionMismatchError(f"dimension mismatch: {a.dim} vs {b.dim}")


def euclidean_distance(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """L2 distance in double precision."""
    _check_dims(a, b)
    return float(np.linalg.norm(a.values - b.values))


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine of the angle between two nonzero vectors, clamped to [-1, 1]."""
    _check_dims(a, b)
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine similarity undefined for zero-norm vector")
    value = float(np.dot(a.values, b.values) / (na * nb))
    return max(-1.0, min(1.0, value))
