"""Triplet retrieval.

Three retrievers produce ranked triplets for a question:

* ``agentic_retrieve``: an LLM walks the graph one hop at a time, choosing
  relations to keep and entities to expand next.
* ``text_retrieve``: scores every triplet by the summed cosine similarity of
  the question to its head name, relation label and tail name.
* ``rerank_retrieve``: collects the L-hop neighbourhood of the seeds and
  narrows it with a relation filter, a triplet filter and a final rerank.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import templates
from .graph_store import GraphStore, Triplet, render_triplets
from .linking import resolve_names
from .models import Embedder, Reranker, TransportError

logger = logging.getLogger(__name__)

DEFAULT_AGENT_ITERATIONS = 3
DEFAULT_FRONTIER_CAP = 8
DEFAULT_HOPS = 2
DEFAULT_K_R = 20
DEFAULT_K_T = 100
LARGE_STORE_TRIPLETS = 1_000_000
SCORE_DECIMALS = 12


class SupportsComplete(Protocol):
    def complete(self, request) -> str: ...


class Scorer(str, enum.Enum):
    EMBEDDING_SUM = "embedding_sum"
    RERANKER = "reranker"


@dataclass(frozen=True)
class ScoredTriplet:
    triplet: Triplet
    score: float
    scorer: Scorer

    @property
    def sort_key(self) -> tuple:
        return (-self.score, self.triplet.key)


def rank(triplets: Iterable[Triplet], scores: Sequence[float], scorer: Scorer) -> list[ScoredTriplet]:
    """Sort by (score desc, triplet key asc).

    Scores are rounded first so that sums which are equal in exact arithmetic
    but differ in the last bits still fall back to the key.
    """
    items = [
        ScoredTriplet(t, round(float(s), SCORE_DECIMALS), scorer) for t, s in zip(triplets, scores)
    ]
    items.sort(key=lambda s: s.sort_key)
    return items


def default_k(store: GraphStore) -> int:
    return 50 if len(store) > LARGE_STORE_TRIPLETS else 10


# agentic ------------------------------------------------------------------


@dataclass
class AgentState:
    iteration: int
    frontier: tuple[str, ...]
    candidates: int = 0
    selected_relations: tuple[str, ...] = ()
    added: tuple[Triplet, ...] = ()
    accumulated: int = 0
    next_entities: tuple[str, ...] = ()
    finished: bool = False
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "frontier": list(self.frontier),
            "candidates": self.candidates,
            "selected_relations": list(self.selected_relations),
            "added": [list(t.key) for t in self.added],
            "accumulated": self.accumulated,
            "next_entities": list(self.next_entities),
            "finished": self.finished,
            "notes": list(self.notes),
        }


@dataclass
class AgentRun:
    triplets: list[Triplet]
    states: list[AgentState]
    calls: int = 0
    failed: bool = False


def parse_selected(text: str) -> list[str] | None:
    """Lines of the ``<selected>`` (or ``<select>``) block; None if missing."""
    body = templates.extract_block(text, "selected", "select")
    if body is None:
        return None
    return templates.block_lines(body)


def parse_next_entities(text: str) -> tuple[list[str], bool]:
    """(names, finished) from an entity-selection response."""
    lines = templates.block_lines(templates.extract_block(text, "next-entities"))
    if any(line.upper() == templates.FINISH for line in lines):
        return [], True
    return lines, False


def relation_prompt(question: str, entity_name: str, relations: Sequence[str], template_dir=None) -> str:
    return templates.render(
        templates.load_template("relation_selection", template_dir),
        {"question": question, "entity": entity_name, "relations": "\n".join(relations)},
    )


def entity_prompt(question: str, context: str, template_dir=None) -> str:
    return templates.render(
        templates.load_template("entity_selection", template_dir),
        {"question": question, "graph_context": context},
    )


class _Caller:
    """Counts calls; retries a transport failure once."""

    def __init__(self, llm: SupportsComplete):
        self.llm = llm
        self.calls = 0

    def __call__(self, prompt: str) -> str:
        for attempt in range(2):
            self.calls += 1
            try:
                return self.llm.complete(prompt)
            except TransportError as exc:
                logger.warning("agent LLM call failed (attempt %d): %s", attempt + 1, exc)
                if attempt == 1:
                    raise
        raise AssertionError("unreachable")


def agentic_retrieve(
    question: str,
    seeds: Iterable[str],
    store: GraphStore,
    llm: SupportsComplete,
    max_iterations: int = DEFAULT_AGENT_ITERATIONS,
    prior: Iterable[Triplet] = (),
    frontier_cap: int = DEFAULT_FRONTIER_CAP,
    template_dir=None,
) -> AgentRun:
    """LLM-guided one-hop traversal from ``seeds``.

    Each iteration expands the frontier by one hop, asks the LLM which
    relations matter (one call per frontier entity that has edges), keeps the
    matching triplets and asks which entities to expand next (one call).
    ``prior`` triplets are shown to the entity selector but are not part of
    the returned set, which holds only what this run retrieved.
    """
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    if frontier_cap < 1:
        raise ValueError("frontier_cap must be >= 1")
    call = _Caller(llm)
    prior = list(prior)
    seen_prior = {t.key for t in prior}
    gathered: dict[tuple[str, str, str], Triplet] = {}
    states: list[AgentState] = []
    frontier = [e for e in dict.fromkeys(seeds) if e in store.entities]
    failed = False

    for t in range(1, max_iterations + 1):
        state = AgentState(iteration=t, frontier=tuple(frontier[:frontier_cap]))
        states.append(state)
        if len(frontier) > frontier_cap:
            state.notes.append(f"frontier capped at {frontier_cap} of {len(frontier)}")
        added: list[Triplet] = []
        selected_all: dict[str, None] = {}
        try:
            for entity in state.frontier:
                candidates = store.one_hop([entity])
                if not candidates:
                    continue
                state.candidates += len(candidates)
                relations = list(dict.fromkeys(c.relation for c in candidates))
                reply = call(relation_prompt(question, store.name_of(entity), relations, template_dir))
                chosen = parse_selected(reply)
                valid = [r for r in (chosen or []) if r in relations]
                if not valid:
                    state.notes.append(f"no usable relation selection for {entity!r}; keeping all")
                    logger.info("relation selection unusable for %r; keeping all relations", entity)
                    valid = relations
                keep = set(valid)
                selected_all.update(dict.fromkeys(valid))
                for c in candidates:
                    if c.relation in keep and c.key not in gathered:
                        gathered[c.key] = c
                        added.append(c)
            state.selected_relations = tuple(selected_all)
            state.added = tuple(added)
            state.accumulated = len(gathered)
            if state.candidates == 0:
                state.finished = True
                state.notes.append("nothing to expand")
                break
            context = prior + [g for key, g in gathered.items() if key not in seen_prior]
            reply = call(entity_prompt(question, "\n".join(render_triplets(context, store.name_of)), template_dir))
        except TransportError as exc:
            state.notes.append(f"LLM failure, stopping: {exc}")
            state.added = tuple(added)
            state.accumulated = len(gathered)
            failed = True
            break
        names, finished = parse_next_entities(reply)
        if finished or not names:
            state.finished = True
            break
        frontier = resolve_names(names, store, state.notes)
        state.next_entities = tuple(frontier)
        if not frontier:
            state.finished = True
            break

    return AgentRun(list(gathered.values()), states, call.calls, failed)


# text-based ---------------------------------------------------------------


def _unit_rows(vectors: Sequence[Sequence[float]]) -> np.ndarray:
    matrix = np.asarray(vectors, dtype=np.float64)
    if matrix.ndim != 2:
        matrix = matrix.reshape(len(vectors), -1)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return matrix / norms


@dataclass
class TextIndex:
    """Unit-normalised embeddings of every entity name and relation label."""

    store: GraphStore
    embedder: Embedder
    names: list[str]
    name_matrix: np.ndarray
    relations: list[str]
    relation_matrix: np.ndarray
    head_rows: np.ndarray
    relation_rows: np.ndarray
    tail_rows: np.ndarray

    @classmethod
    def build(cls, store: GraphStore, embedder: Embedder) -> "TextIndex":
        names = list(dict.fromkeys(store.name_of(e) for e in store.entities))
        name_pos = {n: i for i, n in enumerate(names)}
        relations = sorted(store.relations())
        rel_pos = {r: i for i, r in enumerate(relations)}
        name_matrix = _unit_rows([embedder(n) for n in names]) if names else np.zeros((0, 1))
        rel_matrix = _unit_rows([embedder(r) for r in relations]) if relations else np.zeros((0, 1))
        heads = np.array([name_pos[store.name_of(t.head)] for t in store.triplets], dtype=np.int64)
        rels = np.array([rel_pos[t.relation] for t in store.triplets], dtype=np.int64)
        tails = np.array([name_pos[store.name_of(t.tail)] for t in store.triplets], dtype=np.int64)
        return cls(store, embedder, names, name_matrix, relations, rel_matrix, heads, rels, tails)

    def scores(self, question: str) -> np.ndarray:
        q = _unit_rows([self.embedder(question)])[0]
        name_sim = self.name_matrix @ q if len(self.names) else np.zeros(0)
        rel_sim = self.relation_matrix @ q if len(self.relations) else np.zeros(0)
        # head + tail first: a triplet and its reverse then score bit-identically
        return (name_sim[self.head_rows] + name_sim[self.tail_rows]) + rel_sim[self.relation_rows]


def text_retrieve(
    question: str,
    k: int,
    store: GraphStore,
    embedder: Embedder | None = None,
    index: TextIndex | None = None,
) -> list[ScoredTriplet]:
    """Top ``k`` triplets by summed head/relation/tail cosine similarity."""
    if k <= 0:
        raise ValueError("k must be positive")
    if index is None:
        if embedder is None:
            raise ValueError("text_retrieve needs an embedder or a prebuilt index")
        index = TextIndex.build(store, embedder)
    if not store.triplets:
        return []
    return rank(store.triplets, index.scores(question).tolist(), Scorer.EMBEDDING_SUM)[:k]


# graph reranker -------------------------------------------------------------


@dataclass
class RerankStages:
    """Every stage of the funnel, for inspection."""

    neighbourhood: list[Triplet]  # T^(L)
    relations: list[str]  # R^(L)
    kept_relations: list[str]  # R_q
    relation_filtered: list[Triplet]  # T_r^(L)
    pruned: list[ScoredTriplet]  # T_q^(L)
    final: list[ScoredTriplet]  # T_q

    @property
    def triplets(self) -> list[Triplet]:
        return [s.triplet for s in self.final]


def l_hop_triplets(seeds: Iterable[str], store: GraphStore, hops: int) -> list[Triplet]:
    """Triplets reached by ``hops`` rounds of undirected one-hop expansion."""
    frontier = [s for s in dict.fromkeys(seeds) if s in store.entities]
    visited = set(frontier)
    found: dict[tuple[str, str, str], Triplet] = {}
    for _ in range(hops):
        nxt: list[str] = []
        for t in store.one_hop(frontier):
            found.setdefault(t.key, t)
            for node in (t.head, t.tail):
                if node not in visited:
                    visited.add(node)
                    nxt.append(node)
        frontier = nxt
        if not frontier:
            break
    return list(found.values())


def triplet_text(t: Triplet, store: GraphStore) -> str:
    return f"{store.name_of(t.head)} {t.relation} {store.name_of(t.tail)}"


def _scores(reranker: Reranker, question: str, texts: list[str]) -> list[float]:
    scores = list(reranker(question, texts)) if texts else []
    if len(scores) != len(texts):
        raise ValueError(f"reranker returned {len(scores)} scores for {len(texts)} texts")
    return scores


def rerank_retrieve(
    question: str,
    seeds: Iterable[str],
    store: GraphStore,
    reranker: Reranker,
    hops: int = DEFAULT_HOPS,
    k_r: int = DEFAULT_K_R,
    k_t: int = DEFAULT_K_T,
    k: int = 10,
    final_reranker: Reranker | None = None,
) -> RerankStages:
    for name, value in (("hops", hops), ("k_r", k_r), ("k_t", k_t), ("k", k)):
        if value < 1:
            raise ValueError(f"{name} must be >= 1")
    neighbourhood = l_hop_triplets(seeds, store, hops)
    relations = list(dict.fromkeys(t.relation for t in neighbourhood))
    if not neighbourhood:
        return RerankStages([], [], [], [], [], [])

    rel_scores = [round(float(s), SCORE_DECIMALS) for s in _scores(reranker, question, relations)]
    order = sorted(range(len(relations)), key=lambda i: (-rel_scores[i], relations[i]))
    kept = [relations[i] for i in order[:k_r]]
    keep = set(kept)
    filtered = [t for t in neighbourhood if t.relation in keep]

    texts = [triplet_text(t, store) for t in filtered]
    pruned = rank(filtered, _scores(reranker, question, texts), Scorer.RERANKER)[:k_t]

    second = final_reranker or reranker
    final_texts = [triplet_text(s.triplet, store) for s in pruned]
    final = rank([s.triplet for s in pruned], _scores(second, question, final_texts), Scorer.RERANKER)[:k]
    return RerankStages(neighbourhood, relations, kept, filtered, pruned, final)
