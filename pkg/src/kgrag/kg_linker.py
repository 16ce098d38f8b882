"""Graph-artifact generation: prompt construction and response parsing.

One LLM call returns four tagged blocks::

    <entities>    mentions to link, or FINISH
    <paths>       relation chains, hops joined by "->"
    <opencypher>  a graph query
    <answers>     draft answers

``parse_response`` is total: any input string yields a ``GraphArtifacts``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import templates
from .graph_store import Schema
from .models import TransportError
from .paths import RelationPath

logger = logging.getLogger(__name__)

TASK_HEADERS = (
    "Task: Entity Extraction",
    "Task: Relationship Path Identification",
    "Task: Graph Query Generation",
    "Task: Draft Answer Generation",
)
RELEVANT_ENTITY_HEADER = "Task: Relevant Entity Extraction"
EMPTY_SCHEMA = "(empty schema)"


@dataclass(frozen=True)
class PromptBundle:
    task_text: str
    question: str
    schema_text: str
    context_text: str
    prompt: str

    def __str__(self) -> str:
        return self.prompt


@dataclass(frozen=True)
class GraphArtifacts:
    entities: tuple[str, ...] = ()
    paths: tuple[RelationPath, ...] = ()
    query: str | None = None
    draft_answers: tuple[str, ...] = ()
    finished: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "entities": list(self.entities),
            "paths": [list(p.relations) for p in self.paths],
            "query": self.query,
            "draft_answers": list(self.draft_answers),
            "finished": self.finished,
        }


def _context_text(context: Any, store: Any = None) -> str:
    if context is None:
        return ""
    if isinstance(context, str):
        return context
    return context.verbalize(store)


def task_blocks(
    has_context: bool, *, dialect: str = "openCypher", template_dir: str | Path | None = None
) -> list[str]:
    """The four task sections in prompt order."""
    rules = templates.load_template("entity_rules", template_dir).rstrip("\n")
    answer_body = templates.load_template("answer_body", template_dir).rstrip("\n")
    entity_name = "relevant_entity_task" if has_context else "entity_task"
    values = {"entity_rules": rules, "answer_body": answer_body, "openCypher": dialect}
    return [
        templates.render(templates.load_template(name, template_dir), values).rstrip("\n")
        for name in (entity_name, "paths_task", "query_task", "answer_task")
    ]


def build_prompt(
    question: str,
    schema: Schema | str | None,
    context: Any = None,
    *,
    store: Any = None,
    dialect: str = "openCypher",
    template_dir: str | Path | None = None,
    only_task: int | None = None,
) -> PromptBundle:
    """Render the combined four-task prompt (or one task with ``only_task``).

    ``context`` may be a string or anything with ``verbalize(store)``. When
    it renders non-empty, the entity task switches to the relevant-entity
    variant that allows FINISH.
    """
    if schema is None or (isinstance(schema, Schema) and schema.is_empty()):
        schema_text = EMPTY_SCHEMA
    else:
        schema_text = schema if isinstance(schema, str) else schema.render()
    context_text = _context_text(context, store)
    blocks = task_blocks(bool(context_text.strip()), dialect=dialect, template_dir=template_dir)
    if only_task is not None:
        blocks = [blocks[only_task]]
    task_template = templates.render(
        templates.load_template("linker", template_dir), {"tasks": "\n\n".join(blocks)}
    )
    prompt = templates.render(
        task_template,
        {"question": question, "schema": schema_text, "graph_context": context_text},
    )
    return PromptBundle(task_template, question, schema_text, context_text, prompt)


def final_answer_prompt(
    question: str, context: Any = None, *, store: Any = None, template_dir: str | Path | None = None
) -> str:
    answer_body = templates.load_template("answer_body", template_dir).rstrip("\n")
    return templates.render(
        templates.load_template("final_answer", template_dir),
        {"answer_body": answer_body, "question": question, "graph_context": _context_text(context, store)},
    )


def _parse_path(line: str) -> RelationPath | None:
    try:
        return RelationPath.parse(line)
    except ValueError:
        return None


def parse_response(text: Any) -> GraphArtifacts:
    """Extract artifacts from an LLM reply; never raises."""
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    elif not isinstance(text, str):
        text = "" if text is None else str(text)
    try:
        entity_lines = templates.block_lines(templates.extract_block(text, "entities"))
        finished = len(entity_lines) == 1 and entity_lines[0].upper() == templates.FINISH
        entities = () if finished else tuple(dict.fromkeys(entity_lines))
        paths = tuple(
            dict.fromkeys(
                p for p in map(_parse_path, templates.block_lines(templates.extract_block(text, "paths"))) if p
            )
        )
        query_body = templates.extract_block(text, "opencypher")
        query = query_body.strip() if query_body and query_body.strip() else None
        answers = tuple(
            dict.fromkeys(templates.block_lines(templates.extract_block(text, "answers", "answer")))
        )
    except Exception:  # pragma: no cover - defensive; the helpers above are total
        logger.exception("response parsing failed")
        return GraphArtifacts()
    return GraphArtifacts(entities, paths, query, answers, finished)


def parse_answers(text: str) -> list[str]:
    return list(parse_response(text).draft_answers)


def render_response(artifacts: GraphArtifacts) -> str:
    """Tagged text that ``parse_response`` reads back to ``artifacts``."""
    entities = [templates.FINISH] if artifacts.finished else list(artifacts.entities)
    blocks = [
        ("entities", entities),
        ("paths", [str(p) for p in artifacts.paths]),
        ("opencypher", [artifacts.query] if artifacts.query else []),
        ("answers", list(artifacts.draft_answers)),
    ]
    out = []
    for tag, lines in blocks:
        out.append(f"<{tag}>")
        out.extend(lines)
        out.append(f"</{tag}>")
    return "\n".join(out) + "\n"


@dataclass
class LinkerCall:
    prompts: list[PromptBundle]
    responses: list[str]
    artifacts: GraphArtifacts
    calls: int = 1
    notes: list[str] = field(default_factory=list)


def _complete_with_retry(llm: Any, prompt: str) -> tuple[str, int]:
    attempts = 0
    while True:
        attempts += 1
        try:
            return llm.complete(prompt), attempts
        except TransportError as exc:
            logger.warning("linker call failed (attempt %d): %s", attempts, exc)
            if attempts >= 2:
                raise


def generate_artifacts(
    question: str,
    schema: Schema | str | None,
    context: Any,
    llm: Any,
    *,
    store: Any = None,
    dialect: str = "openCypher",
    template_dir: str | Path | None = None,
    per_task: bool = False,
) -> LinkerCall:
    """Build the prompt, call the LLM once (retrying one transport failure), parse.

    With ``per_task`` each of the four tasks gets its own call and each
    reply contributes only its own block.
    """
    kwargs = dict(store=store, dialect=dialect, template_dir=template_dir)
    if not per_task:
        bundle = build_prompt(question, schema, context, **kwargs)
        response, calls = _complete_with_retry(llm, bundle.prompt)
        return LinkerCall([bundle], [response], parse_response(response), calls)

    bundles, responses, parsed, calls = [], [], [], 0
    for index in range(len(TASK_HEADERS)):
        bundle = build_prompt(question, schema, context, only_task=index, **kwargs)
        response, attempts = _complete_with_retry(llm, bundle.prompt)
        bundles.append(bundle)
        responses.append(response)
        parsed.append(parse_response(response))
        calls += attempts
    entity, path, query, answer = parsed
    merged = GraphArtifacts(
        entities=entity.entities,
        paths=path.paths,
        query=query.query,
        draft_answers=answer.draft_answers,
        finished=entity.finished,
    )
    return LinkerCall(bundles, responses, merged, calls)
