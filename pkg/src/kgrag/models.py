"""Embedders and rerankers.

Everything that needs a text encoder or a cross-encoder takes a plain
callable, so real models and the deterministic stand-ins used in tests are
interchangeable:

* an embedder maps one text to a fixed-dimension vector;
* a reranker maps ``(query, texts)`` to one relevance score per text.
"""

from __future__ import annotations

import hashlib
import logging
import re
import time
import unicodedata
from typing import Callable, Sequence

import httpx
import numpy as np

logger = logging.getLogger(__name__)

Embedder = Callable[[str], Sequence[float]]
Reranker = Callable[[str, Sequence[str]], Sequence[float]]

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(unicodedata.normalize("NFC", text).casefold())


class HashingEmbedder:
    """Character n-gram counts hashed into a fixed number of buckets.

    Stable across processes (uses blake2b, not ``hash``), so indices built
    from it are reproducible without downloading a model.
    """

    def __init__(self, dimension: int = 256, ngram: int = 3):
        if dimension < 1 or ngram < 1:
            raise ValueError("dimension and ngram must be positive")
        self.dimension = dimension
        self.ngram = ngram
        self.tag = f"hashing-{ngram}gram-{dimension}"

    def __call__(self, text: str) -> np.ndarray:
        norm = " " + unicodedata.normalize("NFC", text).casefold().strip() + " "
        vec = np.zeros(self.dimension, dtype=np.float64)
        n = self.ngram
        grams = [norm[i : i + n] for i in range(max(1, len(norm) - n + 1))]
        for gram in grams:
            digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
            vec[int.from_bytes(digest, "little") % self.dimension] += 1.0
        return vec


def token_overlap_reranker(query: str, texts: Sequence[str]) -> list[float]:
    """Jaccard overlap between query tokens and each text's tokens."""
    q = set(tokenize(query))
    scores = []
    for text in texts:
        t = set(tokenize(text))
        union = q | t
        scores.append(len(q & t) / len(union) if union else 0.0)
    return scores


class TransportError(RuntimeError):
    """A remote model endpoint could not be reached or answered non-2xx."""


def post_json(
    client: httpx.Client,
    url: str,
    payload,
    *,
    retries: int = 1,
    backoff: float = 0.5,
    headers: dict[str, str] | None = None,
):
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            resp = client.post(url, json=payload, headers=headers)
            resp.raise_for_status()
            return resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            last = exc
            logger.warning("POST %s failed (attempt %d): %s", url, attempt + 1, exc)
            if attempt < retries and backoff:
                time.sleep(backoff * (attempt + 1))
    raise TransportError(f"POST {url} failed after {retries + 1} attempts: {last}")


class HttpEmbedder:
    """POSTs a JSON array of strings, expects an array of float arrays back."""

    def __init__(
        self,
        url: str,
        *,
        timeout: float = 30.0,
        retries: int = 1,
        client: httpx.Client | None = None,
    ):
        self.url = url
        self.retries = retries
        self.client = client or httpx.Client(timeout=timeout)
        self.tag = f"http:{url}"
        self.dimension: int | None = None

    def embed_many(self, texts: Sequence[str]) -> list[list[float]]:
        data = post_json(self.client, self.url, list(texts), retries=self.retries)
        if not isinstance(data, list) or len(data) != len(texts):
            raise TransportError(f"embedder returned {type(data).__name__} of unexpected length")
        vectors = [[float(x) for x in row] for row in data]
        for row in vectors:
            if self.dimension is None:
                self.dimension = len(row)
            elif len(row) != self.dimension:
                raise TransportError(f"embedding dimension changed: {len(row)} != {self.dimension}")
        return vectors

    def __call__(self, text: str) -> list[float]:
        return self.embed_many([text])[0]


class HttpReranker:
    """POSTs ``{"query": ..., "texts": [...]}``, expects an array of scores."""

    def __init__(
        self,
        url: str,
        *,
        timeout: float = 30.0,
        retries: int = 1,
        client: httpx.Client | None = None,
    ):
        self.url = url
        self.retries = retries
        self.client = client or httpx.Client(timeout=timeout)

    def __call__(self, query: str, texts: Sequence[str]) -> list[float]:
        if not texts:
            return []
        data = post_json(
            self.client, self.url, {"query": query, "texts": list(texts)}, retries=self.retries
        )
        if not isinstance(data, list) or len(data) != len(texts):
            raise TransportError("reranker returned an unexpected payload")
        return [float(x) for x in data]
