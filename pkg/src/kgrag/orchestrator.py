"""The refinement loop.

Each iteration asks the linker for artifacts, links them to graph entities,
runs path, query and triplet retrieval, and folds everything into one
growing ``RetrievalContext``. A final LLM call answers over that context.
Every run yields a JSON-lines trace with no timestamps, so two runs with the
same scripted backend produce identical bytes.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from . import kg_linker
from .cypher import QueryFailure, ResultTable, run_query_text
from .graph_store import GraphStore, Triplet, render_triplets
from .linking import (
    EmbeddingIndex, LinkMode, Mention, MentionSource, build_embedding_index, link, resolve_names,
)
from .models import HashingEmbedder, HttpEmbedder, HttpReranker, TransportError, token_overlap_reranker
from .paths import GroundedPath, follow_paths, shortest_paths
from .retrieval import TextIndex, agentic_retrieve, default_k, rerank_retrieve, text_retrieve

logger = logging.getLogger(__name__)


class Source(str, enum.Enum):
    AGENTIC = "agentic"
    SCORING = "scoring"
    FOLLOW = "follow"
    SHORTEST = "shortest"
    QUERY = "query"


# lower number survives budget pruning first
_PRIORITY = {Source.QUERY: 0, Source.FOLLOW: 1, Source.SHORTEST: 1, Source.AGENTIC: 2, Source.SCORING: 3}


@dataclass(frozen=True)
class QueryResult:
    query: str
    result: ResultTable | QueryFailure

    @property
    def key(self) -> str:
        return self.query

    def render(self, name_of=str) -> str:
        return f"Query: {' '.join(self.query.split())}\nResult: {self.result.render()}"

    def to_dict(self) -> dict:
        return {"query": self.query, "result": self.result.to_dict()}


@dataclass
class ContextItem:
    value: Triplet | GroundedPath | QueryResult
    provenance: tuple[Source, ...]
    iteration: int
    order: int

    @property
    def kind(self) -> str:
        if isinstance(self.value, Triplet):
            return "triplet"
        if isinstance(self.value, GroundedPath):
            return "path"
        return "query"

    @property
    def priority(self) -> int:
        return min(_PRIORITY[s] for s in self.provenance)

    def render(self, name_of=str) -> str:
        if isinstance(self.value, Triplet):
            return render_triplets([self.value], name_of)[0]
        return self.value.render(name_of)

    def entity_names(self, name_of=str) -> list[str]:
        v = self.value
        if isinstance(v, Triplet):
            return [name_of(v.head), name_of(v.tail)]
        if isinstance(v, GroundedPath):
            return [name_of(v.nodes[0]), name_of(v.nodes[-1])]
        if isinstance(v.result, ResultTable):
            return [str(cell) for row in v.result.rows for cell in row if cell is not None]
        return []

    def to_dict(self) -> dict:
        v = self.value
        body = {"key": list(v.key)} if isinstance(v, Triplet) else v.to_dict()
        return {
            "kind": self.kind,
            "provenance": [s.value for s in self.provenance],
            "iteration": self.iteration,
            **body,
        }


def _count_tokens(text: str) -> int:
    return len(text.split())


class RetrievalContext:
    """Deduplicated, insertion-ordered union of everything retrieved."""

    def __init__(self) -> None:
        self._items: dict[tuple, ContextItem] = {}

    def _key(self, value) -> tuple:
        if isinstance(value, Triplet):
            return ("triplet", value.key)
        if isinstance(value, GroundedPath):
            return ("path", value.key)
        return ("query", value.key)

    def add(self, value, source: Source | str, iteration: int = 0) -> bool:
        """Insert ``value``; True if it was new. Repeats only gain a provenance tag."""
        source = Source(source)
        key = self._key(value)
        item = self._items.get(key)
        if item is None:
            self._items[key] = ContextItem(value, (source,), iteration, len(self._items))
            return True
        if source not in item.provenance:
            item.provenance = item.provenance + (source,)
        return False

    def extend(self, values: Iterable, source: Source | str, iteration: int = 0) -> int:
        return sum(self.add(v, source, iteration) for v in values)

    def __len__(self) -> int:
        return len(self._items)

    def __bool__(self) -> bool:
        return bool(self._items)

    @property
    def items(self) -> list[ContextItem]:
        return list(self._items.values())

    @property
    def triplets(self) -> list[Triplet]:
        return [i.value for i in self._items.values() if isinstance(i.value, Triplet)]

    @property
    def paths(self) -> list[GroundedPath]:
        return [i.value for i in self._items.values() if isinstance(i.value, GroundedPath)]

    @property
    def query_results(self) -> list[QueryResult]:
        return [i.value for i in self._items.values() if isinstance(i.value, QueryResult)]

    def ranked_items(self) -> list[ContextItem]:
        """Items in retrieval order (iteration, then insertion)."""
        return sorted(self._items.values(), key=lambda i: i.order)

    def without(self, source: Source | str) -> "RetrievalContext":
        """Copy with ``source`` removed from every item; items left untagged are dropped."""
        source = Source(source)
        out = RetrievalContext()
        for key, item in self._items.items():
            tags = tuple(s for s in item.provenance if s is not source)
            if tags:
                out._items[key] = ContextItem(item.value, tags, item.iteration, len(out._items))
        return out

    def select(self, budget: int | None, name_of=str) -> list[ContextItem]:
        """Items kept under a whitespace-token ``budget``.

        Candidates are taken by source priority (query results, paths,
        agentic triplets, scoring triplets), newest first within a class,
        while they still fit.
        """
        items = self.ranked_items()
        if budget is None:
            return items
        chosen: list[ContextItem] = []
        used = 0
        for item in sorted(items, key=lambda i: (i.priority, -i.order)):
            cost = _count_tokens(item.render(name_of))
            if used + cost <= budget:
                chosen.append(item)
                used += cost
        return sorted(chosen, key=lambda i: i.order)

    def verbalize(self, store: GraphStore | None = None, budget: int | None = None) -> str:
        name_of = store.name_of if store is not None else str
        selected = self.select(budget, name_of)
        queries = [i.render(name_of) for i in selected if i.kind == "query"]
        paths = [i.render(name_of) for i in selected if i.kind == "path"]
        triplets = render_triplets([i.value for i in selected if i.kind == "triplet"], name_of)
        return "\n".join(queries + paths + triplets)

    def to_dict(self) -> dict:
        return {"items": [i.to_dict() for i in self.ranked_items()]}


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    refinement_iterations: int = 2
    agent_iterations: int = 3
    top_m: int = 3
    link_mode: str = "string"
    k: int | None = None  # None picks by store size
    k_r: int = 20
    k_t: int = 100
    hops: int = 2
    max_hops: int = 4
    grounding_cap: int = 256
    frontier_cap: int = 8
    agentic: bool = True
    scoring: bool = True
    scoring_method: str = "text"  # text | rerank
    query: bool = True
    paths: bool = True
    context_budget: int | None = 8000
    per_task: bool = False
    dialect: str = "openCypher"
    template_dir: str | None = None
    embedder_url: str | None = None
    reranker_url: str | None = None
    embedding_dimension: int = 256

    _COUNTS = (
        "agent_iterations", "top_m", "k_r", "k_t",
        "hops", "max_hops", "grounding_cap", "frontier_cap", "embedding_dimension",
    )

    def __post_init__(self) -> None:
        for name in self._COUNTS:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {value!r}")
        # zero refinement iterations is the direct-answer baseline
        value = self.refinement_iterations
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            raise ConfigError(f"refinement_iterations must be an integer >= 0, got {value!r}")
        for name in ("k", "context_budget"):
            value = getattr(self, name)
            if value is not None and (isinstance(value, bool) or not isinstance(value, int) or value < 1):
                raise ConfigError(f"{name} must be an integer >= 1 or null, got {value!r}")
        try:
            LinkMode(self.link_mode)
        except ValueError:
            raise ConfigError(f"unknown link_mode {self.link_mode!r}") from None
        if self.scoring_method not in ("text", "rerank"):
            raise ConfigError(f"unknown scoring_method {self.scoring_method!r}")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "PipelineConfig":
        unknown = sorted(set(data) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**dict(data))

    def replace(self, **changes: Any) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class PipelineResult:
    question: str
    answers: list[str]
    context: RetrievalContext
    trace: list[dict]
    draft_answers: list[str] = field(default_factory=list)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True, ensure_ascii=False) + "\n" for e in self.trace)

    def write_trace(self, path: str | Path) -> None:
        Path(path).write_text(self.trace_jsonl(), encoding="utf-8")


def call_budget(trace: Iterable[Mapping[str, Any]]) -> int:
    """Total LLM invocations recorded in a trace."""
    return sum(int(event.get("calls", 0)) for event in trace)


def budget_ceiling(config: PipelineConfig) -> int:
    per_linker = len(kg_linker.TASK_HEADERS) if config.per_task else 1
    return config.refinement_iterations * (per_linker + 2 * config.agent_iterations * config.frontier_cap) + 1


def _dedup_answers(answers: Iterable[str]) -> list[str]:
    return list(dict.fromkeys(a.strip() for a in answers if a and a.strip()))


class Pipeline:
    """Holds a store, an LLM and a config; answers questions.

    Indexes for embedding linking and text retrieval are built lazily and
    shared by concurrent ``run`` calls.
    """

    def __init__(self, store: GraphStore, llm: Any, config: PipelineConfig | None = None,
                 embedder=None, reranker=None):
        self.store = store
        self.llm = llm
        self.config = config or PipelineConfig()
        self.embedder = embedder or self._default_embedder()
        self.reranker = reranker or (
            HttpReranker(self.config.reranker_url) if self.config.reranker_url else token_overlap_reranker
        )
        self.schema = store.schema()
        self._lock = threading.Lock()
        self._text_index: TextIndex | None = None
        self._link_index: EmbeddingIndex | None = None

    def _default_embedder(self):
        if self.config.embedder_url:
            return HttpEmbedder(self.config.embedder_url)
        return HashingEmbedder(self.config.embedding_dimension)

    def text_index(self) -> TextIndex:
        with self._lock:
            if self._text_index is None:
                self._text_index = TextIndex.build(self.store, self.embedder)
            return self._text_index

    def link_index(self) -> EmbeddingIndex | None:
        if LinkMode(self.config.link_mode) is LinkMode.STRING:
            return None
        with self._lock:
            if self._link_index is None:
                self._link_index = build_embedding_index(self.store, self.embedder)
            return self._link_index

    def run(self, question: str, seed_entities: Iterable[str] = ()) -> PipelineResult:
        return run_pipeline(question, self.store, self.llm, self.config, pipeline=self,
                            seed_entities=seed_entities)


def _prompt_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def run_pipeline(
    question: str,
    store: GraphStore,
    llm: Any,
    config: PipelineConfig | None = None,
    *,
    pipeline: Pipeline | None = None,
    seed_entities: Iterable[str] = (),
) -> PipelineResult:
    """Answer ``question``; never raises for LLM failures (see ``PipelineResult.error``).

    ``seed_entities`` (names or ids) join the linked question entities in
    the first iteration.
    """
    config = config or (pipeline.config if pipeline else PipelineConfig())
    pipe = pipeline or Pipeline(store, llm, config)
    context = RetrievalContext()
    trace: list[dict] = []
    seen: set[str] = set()
    first_drafts: list[str] | None = None
    latest_drafts: list[str] = []
    k = config.k or default_k(store)
    seed_warnings: list[str] = []
    seed_ids = resolve_names(list(seed_entities), store, seed_warnings)

    def emit(event: str, **data: Any) -> None:
        trace.append({"event": event, **data})

    def strategy(name: str, iteration: int, fn):
        try:
            return fn()
        except Exception as exc:  # a failing strategy only removes its own items
            logger.warning("%s retrieval failed: %s", name, exc)
            emit("strategy_error", iteration=iteration, strategy=name, error=f"{type(exc).__name__}: {exc}")
            return None

    for t in range(1, config.refinement_iterations + 1):
        try:
            linker = kg_linker.generate_artifacts(
                question, pipe.schema, context.verbalize(store, config.context_budget) if context else None, llm,
                store=store, dialect=config.dialect, template_dir=config.template_dir,
                per_task=config.per_task,
            )
        except TransportError as exc:
            emit("linker", iteration=t, calls=2 * (len(kg_linker.TASK_HEADERS) if config.per_task else 1),
                 error=str(exc))
            emit("error", iteration=t, stage="linker", error=str(exc))
            return PipelineResult(question, [], context, trace, first_drafts or [], error=str(exc))
        arts = linker.artifacts
        emit(
            "linker", iteration=t, calls=linker.calls,
            prompts=[_prompt_digest(p.prompt) for p in linker.prompts],
            responses=linker.responses, artifacts=arts.to_dict(),
        )
        if first_drafts is None:
            first_drafts = list(arts.draft_answers)
        if arts.draft_answers:
            latest_drafts = list(arts.draft_answers)

        mentions = [Mention(e, MentionSource.EXTRACTED) for e in arts.entities if e.strip()]
        mentions += [Mention(a, MentionSource.DRAFT_ANSWER) for a in arts.draft_answers if a.strip()]
        linked = link(mentions, store, m=config.top_m, mode=config.link_mode, index=pipe.link_index())
        question_ids = [le.entity for le in linked if le.mention.source is MentionSource.EXTRACTED]
        if t == 1 and seed_ids:
            question_ids = list(dict.fromkeys(seed_ids + question_ids))
        answer_ids = [le.entity for le in linked if le.mention.source is MentionSource.DRAFT_ANSWER]
        all_ids = list(dict.fromkeys(question_ids + answer_ids))
        emit(
            "link", iteration=t,
            linked=[
                {"mention": le.mention.text, "source": le.mention.source.value, "entity": le.entity,
                 "method": le.method, "score": round(le.score, 6), "rank": le.rank}
                for le in linked
            ],
        )

        if arts.finished:
            emit("terminate", iteration=t, reason="linker finished")
            break
        if not arts.entities:
            emit("terminate", iteration=t, reason="no entities")
            break
        new_ids = [e for e in all_ids if e not in seen]
        if not new_ids:
            emit("terminate", iteration=t, reason="no new entities")
            break
        seen.update(all_ids)
        before = len(context)

        if config.paths:
            warnings: list[str] = []
            followed = strategy("follow", t, lambda: follow_paths(
                arts.paths, question_ids, store, cap=config.grounding_cap, warnings=warnings))
            shortest = strategy("shortest", t, lambda: shortest_paths(
                question_ids, answer_ids, store, max_hops=config.max_hops, warnings=warnings))
            added_f = context.extend(followed or [], Source.FOLLOW, t)
            added_s = context.extend(shortest or [], Source.SHORTEST, t)
            emit("paths", iteration=t, follow=[p.to_dict() for p in followed or []],
                 shortest=[p.to_dict() for p in shortest or []], added=added_f + added_s, warnings=warnings)

        if config.query and arts.query:
            result = run_query_text(arts.query, store)
            context.add(QueryResult(arts.query, result), Source.QUERY, t)
            emit("query", iteration=t, query=arts.query, result=result.to_dict())

        if config.agentic and all_ids:
            prior = context.triplets
            try:
                run = agentic_retrieve(
                    question, all_ids, store, llm, max_iterations=config.agent_iterations,
                    prior=prior, frontier_cap=config.frontier_cap, template_dir=config.template_dir,
                )
            except Exception as exc:
                emit("strategy_error", iteration=t, strategy="agentic", error=f"{type(exc).__name__}: {exc}")
                run = None
            if run is not None:
                added = context.extend(run.triplets, Source.AGENTIC, t)
                emit("agentic", iteration=t, calls=run.calls, failed=run.failed, added=added,
                     states=[s.to_dict() for s in run.states])

        if config.scoring:
            if config.scoring_method == "text":
                scored = strategy("scoring", t, lambda: text_retrieve(question, k, store, index=pipe.text_index()))
            else:
                scored = strategy("scoring", t, lambda: rerank_retrieve(
                    question, all_ids, store, pipe.reranker, hops=config.hops,
                    k_r=config.k_r, k_t=config.k_t, k=k).final)
            scored = scored or []
            added = context.extend([s.triplet for s in scored], Source.SCORING, t)
            emit("scoring", iteration=t, method=config.scoring_method, added=added,
                 triplets=[[list(s.triplet.key), s.score] for s in scored])

        emit("context", iteration=t, size=len(context), added=len(context) - before)

    prompt = kg_linker.final_answer_prompt(
        question, context.verbalize(store, config.context_budget), template_dir=config.template_dir
    )
    try:
        response, calls = kg_linker._complete_with_retry(llm, prompt)
    except TransportError as exc:
        emit("answer", calls=2, error=str(exc))
        emit("error", stage="answer", error=str(exc))
        return PipelineResult(question, [], context, trace, first_drafts or [], error=str(exc))
    answers = _dedup_answers(kg_linker.parse_answers(response))
    fallback = False
    if not answers:
        answers = _dedup_answers(latest_drafts)
        fallback = True
    emit("answer", calls=calls, prompt=_prompt_digest(prompt), response=response,
         answers=answers, draft_fallback=fallback)
    return PipelineResult(question, answers, context, trace, first_drafts or [])
