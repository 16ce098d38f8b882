"""Entity linking: map generated mentions onto graph entities.

Two complementary methods, usable alone or together:

* fuzzy string matching on entity names (token-set edit-distance ratio);
* cosine similarity between embedded mention and embedded entity names.

Each mention gets its own top-``m`` budget per method. The union over all
mentions is deduplicated by entity id, keeping the higher-scoring link.
"""

from __future__ import annotations

import enum
import logging
import unicodedata
import weakref
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from rapidfuzz import fuzz, process

from .graph_store import GraphStore
from .models import Embedder

logger = logging.getLogger(__name__)

DEFAULT_TOP_M = 3
STRING_SCORE_FLOOR = 0.4


class LinkMode(str, enum.Enum):
    STRING = "string"
    EMBEDDING = "embedding"
    BOTH = "both"


class MentionSource(str, enum.Enum):
    EXTRACTED = "extracted"
    DRAFT_ANSWER = "draft_answer"


class LinkingConfigError(ValueError):
    pass


class IndexBuildError(RuntimeError):
    def __init__(self, failed: Sequence[str]):
        self.failed = list(failed)
        preview = ", ".join(repr(n) for n in self.failed[:10])
        more = f" (+{len(self.failed) - 10} more)" if len(self.failed) > 10 else ""
        super().__init__(f"embedder failed on {len(self.failed)} names: {preview}{more}")


@dataclass(frozen=True)
class Mention:
    text: str
    source: MentionSource = MentionSource.EXTRACTED

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise ValueError("mention text must be non-empty")


@dataclass(frozen=True)
class LinkedEntity:
    entity: str
    mention: Mention
    method: str
    score: float
    rank: int


def normalize_text(text: str) -> str:
    return unicodedata.normalize("NFC", text).casefold().strip()


def string_score(mention: str, name: str) -> float:
    """Token-set ratio in [0, 1] between two already-normalized strings."""
    return fuzz.token_set_ratio(mention, name, processor=None) / 100.0


def _tiebreak_ratio(mention: str, name: str) -> float:
    # separates an exact match from a mere token superset, both of which
    # score 1.0 under the token-set ratio
    return fuzz.ratio(mention, name, processor=None) / 100.0


@dataclass
class EmbeddingIndex:
    ids: list[str]
    matrix: np.ndarray
    tag: str
    embedder: Embedder

    @property
    def dimension(self) -> int:
        return int(self.matrix.shape[1])

    def vector(self, entity_id: str) -> np.ndarray:
        return self.matrix[self.ids.index(entity_id)]

    def embed(self, text: str) -> np.ndarray:
        vec = np.asarray(self.embedder(text), dtype=np.float64)
        if vec.shape != (self.dimension,):
            raise LinkingConfigError(f"embedder returned shape {vec.shape}, index has {self.dimension}")
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def nearest(self, text: str, m: int) -> list[tuple[str, float]]:
        if not self.ids:
            return []
        sims = self.matrix @ self.embed(text)
        keep = np.arange(len(self.ids))
        if keep.size > m:
            kth = np.partition(sims, keep.size - m)[keep.size - m]
            keep = np.flatnonzero(sims >= kth)
        order = sorted(keep.tolist(), key=lambda i: (-sims[i], self.ids[i]))
        return [(self.ids[i], float(sims[i])) for i in order[:m]]


def build_embedding_index(store: GraphStore, embedder: Embedder, tag: str | None = None) -> EmbeddingIndex:
    """Embed every entity name and L2-normalize."""
    ids = list(store.entities)
    rows = []
    failed = []
    dim: int | None = None
    for entity_id in ids:
        name = store.entities[entity_id].name
        try:
            vec = np.asarray(embedder(name), dtype=np.float64).ravel()
        except Exception as exc:  # any embedder error counts as a failed name
            logger.debug("embedder failed on %r: %s", name, exc)
            failed.append(name)
            continue
        norm = float(np.linalg.norm(vec))
        if dim is None:
            dim = vec.size
        if vec.size != dim or norm == 0.0 or not np.isfinite(norm):
            failed.append(name)
            continue
        rows.append(vec / norm)
    if failed:
        raise IndexBuildError(failed)
    matrix = np.vstack(rows) if rows else np.zeros((0, dim or 1))
    return EmbeddingIndex(
        ids=ids, matrix=matrix, tag=tag or getattr(embedder, "tag", "custom"), embedder=embedder
    )


_NAME_CACHE: "weakref.WeakKeyDictionary[GraphStore, tuple[list[str], list[str]]]" = (
    weakref.WeakKeyDictionary()
)


def _normalized_names(store: GraphStore) -> tuple[list[str], list[str]]:
    cached = _NAME_CACHE.get(store)
    if cached is None or len(cached[0]) != len(store.entities):
        ids = list(store.entities)
        names = [normalize_text(store.entities[i].name) for i in ids]
        cached = (ids, names)
        _NAME_CACHE[store] = cached
    return cached


def string_candidates(
    mention: str, store: GraphStore, m: int, floor: float = STRING_SCORE_FLOOR
) -> list[tuple[str, float]]:
    """Top-``m`` ``(entity_id, score)`` by string score, floor applied.

    Ranked by score, then plain edit ratio, then entity id.
    """
    ids, names = _normalized_names(store)
    if not ids:
        return []
    query = normalize_text(mention)
    scores = process.cdist([query], names, scorer=fuzz.token_set_ratio, processor=None, workers=1)[0]
    keep = np.flatnonzero(scores >= floor * 100.0)
    if keep.size > m:
        kth = np.partition(scores[keep], keep.size - m)[keep.size - m]
        keep = keep[scores[keep] >= kth]
    ranked = sorted(
        keep.tolist(),
        key=lambda i: (-float(scores[i]), -_tiebreak_ratio(query, names[i]), ids[i]),
    )
    return [(ids[i], float(scores[i]) / 100.0) for i in ranked[:m]]


def link(
    mentions: Iterable[Mention | str],
    store: GraphStore,
    m: int = DEFAULT_TOP_M,
    mode: LinkMode | str = LinkMode.STRING,
    index: EmbeddingIndex | None = None,
    floor: float = STRING_SCORE_FLOOR,
) -> list[LinkedEntity]:
    if m < 1:
        raise ValueError("m must be >= 1")
    mode = LinkMode(mode)
    if mode in (LinkMode.EMBEDDING, LinkMode.BOTH) and index is None:
        raise LinkingConfigError(f"link mode {mode.value!r} needs an embedding index")

    unique: dict[Mention, None] = {}
    for mention in mentions:
        if isinstance(mention, str):
            if not mention.strip():
                continue
            mention = Mention(mention)
        unique.setdefault(mention, None)

    raw: list[LinkedEntity] = []
    for mention in unique:
        if mode in (LinkMode.STRING, LinkMode.BOTH):
            for rank, (eid, score) in enumerate(string_candidates(mention.text, store, m, floor), 1):
                raw.append(LinkedEntity(eid, mention, "string", score, rank))
        if mode in (LinkMode.EMBEDDING, LinkMode.BOTH):
            assert index is not None
            for rank, (eid, sim) in enumerate(index.nearest(mention.text, m), 1):
                score = min(1.0, max(0.0, sim))
                raw.append(LinkedEntity(eid, mention, "embedding", score, rank))

    best: dict[str, LinkedEntity] = {}
    for item in raw:
        current = best.get(item.entity)
        if current is None or item.score > current.score:
            best[item.entity] = item
    return list(best.values())


def resolve_names(
    names: Iterable[str], store: GraphStore, warnings: list[str] | None = None
) -> list[str]:
    """Map entity names back to ids: exact name first, else best fuzzy hit.

    Unlinkable names are dropped (and noted in ``warnings``).
    """
    ids, normalized = _normalized_names(store)
    exact: dict[str, str] = {}
    for eid, name in zip(ids, normalized):
        exact.setdefault(name, eid)
    out: list[str] = []
    for name in names:
        if name in store.entities:
            hit = name
        else:
            hit = exact.get(normalize_text(name))
            if hit is None:
                candidates = string_candidates(name, store, 1)
                hit = candidates[0][0] if candidates else None
        if hit is None:
            msg = f"could not link {name!r}"
            logger.info(msg)
            if warnings is not None:
                warnings.append(msg)
            continue
        if hit not in out:
            out.append(hit)
    return out
