"""Answer metrics and the batch evaluation harness.

Answers match gold strings after NFC normalisation, case-folding and
trimming, and only as whole strings. Aggregates are computed with
``fractions.Fraction`` and converted to floats only for display.
"""

from __future__ import annotations

import json
import logging
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Sequence

from .graph_store import GraphStore, Triplet
from .retrieval import default_k
from .orchestrator import ContextItem, Pipeline, PipelineConfig, RetrievalContext, Source

logger = logging.getLogger(__name__)


def normalize_answer(text: str) -> str:
    return unicodedata.normalize("NFC", text).casefold().strip()


def hit(predictions: Iterable[str], gold: Iterable[str]) -> int:
    targets = {normalize_answer(g) for g in gold}
    return int(any(normalize_answer(p) in targets for p in predictions))


def hit_at_2(kg_answers: Sequence[str], direct_answers: Sequence[str], gold: Iterable[str]) -> int:
    """Hit over the top answer of each source (at most two candidates)."""
    return hit(list(kg_answers[:1]) + list(direct_answers[:1]), gold)


def _item_names(item: Any, name_of) -> list[str]:
    if isinstance(item, ContextItem):
        return item.entity_names(name_of)
    if isinstance(item, Triplet):
        return [name_of(item.head), name_of(item.tail)]
    return ContextItem(item, (Source.QUERY,), 0, 0).entity_names(name_of)


def recall_at_k(
    retrieved: RetrievalContext | Sequence[Any],
    gold: Iterable[str],
    k: int,
    store: GraphStore | None = None,
) -> int:
    """1 if a gold answer names an entity in the first ``k`` retrieved items."""
    if k <= 0:
        raise ValueError("k must be positive")
    items = retrieved.ranked_items() if isinstance(retrieved, RetrievalContext) else list(retrieved)
    name_of = store.name_of if store is not None else str
    targets = {normalize_answer(g) for g in gold}
    for item in items[:k]:
        if any(normalize_answer(n) in targets for n in _item_names(item, name_of)):
            return 1
    return 0


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class QaExample:
    id: str
    question: str
    answers: tuple[str, ...]
    seed_entities: tuple[str, ...] = ()

    @property
    def scoreable(self) -> bool:
        return bool(self.answers)


def load_dataset(path: str | Path) -> list[QaExample]:
    examples: list[QaExample] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(raw, dict):
                raise DatasetError(f"line {lineno}: expected an object")
            try:
                ex = QaExample(
                    id=str(raw["id"]),
                    question=str(raw["question"]),
                    answers=tuple(str(a) for a in raw.get("answers", [])),
                    seed_entities=tuple(str(s) for s in raw.get("seed_entities") or []),
                )
            except KeyError as exc:
                raise DatasetError(f"line {lineno}: missing field {exc.args[0]!r}") from None
            if not ex.question.strip():
                raise DatasetError(f"line {lineno}: empty question")
            if ex.id in seen:
                raise DatasetError(f"line {lineno}: duplicate id {ex.id!r}")
            seen.add(ex.id)
            examples.append(ex)
    return examples


@dataclass
class ExampleScore:
    id: str
    question: str
    gold: list[str]
    answers: list[str]
    draft_answers: list[str]
    hit: int
    hit_at_2: int
    recall_at_k: int
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def mean(values: Sequence[int]) -> Fraction:
    return Fraction(sum(values), len(values)) if values else Fraction(0)


@dataclass
class MetricReport:
    per_example: list[ExampleScore]
    k: int
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def scored(self) -> list[ExampleScore]:
        return [e for e in self.per_example if e.gold]

    @property
    def hit_rate(self) -> Fraction:
        return mean([e.hit for e in self.scored])

    @property
    def hit_at_2_rate(self) -> Fraction:
        return mean([e.hit_at_2 for e in self.scored])

    @property
    def recall_rate(self) -> Fraction:
        return mean([e.recall_at_k for e in self.scored])

    @property
    def counts(self) -> dict[str, int]:
        return {
            "examples": len(self.per_example),
            "scored": len(self.scored),
            "unscoreable": len(self.per_example) - len(self.scored),
            "errors": sum(1 for e in self.per_example if e.error),
        }

    def to_dict(self) -> dict[str, Any]:
        n = len(self.scored)

        def frac(attr: str) -> dict[str, Any]:
            # exact is hits over scored examples, left unreduced
            total = sum(getattr(e, attr) for e in self.scored)
            return {"value": round(total / n, 6) if n else 0.0, "exact": f"{total}/{n}"}

        return {
            "hit": frac("hit"),
            "hit_at_2": frac("hit_at_2"),
            f"recall_at_{self.k}": frac("recall_at_k"),
            "k": self.k,
            "counts": self.counts,
            "config": self.config,
        }


def score_example(example: QaExample, pipeline: Pipeline, k: int) -> ExampleScore:
    base = dict(id=example.id, question=example.question, gold=list(example.answers))
    try:
        result = pipeline.run(example.question, seed_entities=example.seed_entities)
    except Exception as exc:  # counted, scored 0
        logger.exception("example %s failed", example.id)
        return ExampleScore(**base, answers=[], draft_answers=[], hit=0, hit_at_2=0, recall_at_k=0,
                            error=f"{type(exc).__name__}: {exc}")
    if result.error:
        return ExampleScore(**base, answers=[], draft_answers=result.draft_answers, hit=0, hit_at_2=0,
                            recall_at_k=0, error=result.error)
    return ExampleScore(
        **base,
        answers=result.answers,
        draft_answers=result.draft_answers,
        hit=hit(result.answers, example.answers),
        hit_at_2=hit_at_2(result.answers, result.draft_answers, example.answers),
        recall_at_k=recall_at_k(result.context, example.answers, k, pipeline.store),
    )


def evaluate_batch(
    dataset: str | Path | Sequence[QaExample],
    store: GraphStore,
    llm: Any,
    config: PipelineConfig | None = None,
    *,
    workers: int = 1,
    out_dir: str | Path | None = None,
    k: int | None = None,
) -> MetricReport:
    """Run the pipeline on every example and aggregate the metrics.

    Writes ``report.json`` and ``examples.jsonl`` to ``out_dir`` if given.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    examples = load_dataset(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    config = config or PipelineConfig()
    pipeline = Pipeline(store, llm, config)
    k = k or config.k or default_k(store)
    if workers == 1:
        scores = [score_example(e, pipeline, k) for e in examples]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(lambda e: score_example(e, pipeline, k), examples))
    report = MetricReport(scores, k, config.to_dict())
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
        with open(out / "examples.jsonl", "w", encoding="utf-8") as fh:
            for s in scores:
                fh.write(json.dumps(s.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    return report
