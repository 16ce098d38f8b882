"""In-memory directed property graph.

The store keeps an entity table plus outgoing/incoming adjacency lists and a
relation index over :class:`Triplet` facts. It is built once by one of the
ingestion helpers and treated as read-only afterwards, so it can be shared
between threads without locking.
"""

from __future__ import annotations

import json
import logging
import unicodedata
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

Scalar = str | int | float | bool

ARROW = " -> "
INVERSE_ARROW = " <- "
TAIL_SEPARATOR = " | "


class IngestionError(ValueError):
    """Raised when input rows cannot be turned into a graph."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def normalize_label(text: str) -> str:
    return unicodedata.normalize("NFC", text)


@dataclass(frozen=True)
class Triplet:
    head: str
    relation: str
    tail: str
    properties: Mapping[str, Scalar] = field(default_factory=dict, compare=False, repr=False)

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.head, self.relation, self.tail)


@dataclass(frozen=True)
class Entity:
    id: str
    name: str
    type: str | None = None
    properties: Mapping[str, Scalar] = field(default_factory=dict, compare=False)


@dataclass
class Schema:
    node_types: set[str] = field(default_factory=set)
    relation_types: set[str] = field(default_factory=set)
    relation_signatures: set[tuple[str, str, str]] = field(default_factory=set)
    property_keys: dict[str, set[str]] = field(default_factory=dict)

    def is_empty(self) -> bool:
        return not (self.node_types or self.relation_types or self.property_keys)

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_types": sorted(self.node_types),
            "relation_types": sorted(self.relation_types),
            "relation_signatures": [list(s) for s in sorted(self.relation_signatures)],
            "property_keys": {k: sorted(v) for k, v in sorted(self.property_keys.items())},
        }

    def render(self) -> str:
        """Plain-text rendering used inside prompts."""
        if self.is_empty():
            return "(empty schema)"
        lines = []
        if self.node_types:
            lines.append("Node types: " + ", ".join(sorted(self.node_types)))
        if self.relation_types:
            lines.append("Relation types: " + ", ".join(sorted(self.relation_types)))
        if self.relation_signatures:
            lines.append("Relationships:")
            for src, rel, dst in sorted(self.relation_signatures):
                lines.append(f"  (:{src})-[:{rel}]->(:{dst})")
        if self.property_keys:
            lines.append("Properties:")
            for label, keys in sorted(self.property_keys.items()):
                lines.append(f"  {label}: {', '.join(sorted(keys))}")
        return "\n".join(lines)


class GraphStore:
    """Entity table, adjacency lists and relation index over a triplet list."""

    def __init__(self) -> None:
        self.entities: dict[str, Entity] = {}
        self.triplets: list[Triplet] = []
        self._outgoing: dict[str, list[Triplet]] = defaultdict(list)
        self._incoming: dict[str, list[Triplet]] = defaultdict(list)
        self._by_relation: dict[str, list[Triplet]] = defaultdict(list)

    # building -------------------------------------------------------------

    def _add_entity(self, entity: Entity) -> Entity:
        existing = self.entities.get(entity.id)
        if existing is not None:
            return existing
        self.entities[entity.id] = entity
        return entity

    def _add_triplet(self, triplet: Triplet) -> None:
        if triplet.head not in self.entities or triplet.tail not in self.entities:
            raise IngestionError(f"triplet {triplet.key} references an unknown entity")
        if not triplet.relation:
            raise IngestionError("empty relation label")
        self.triplets.append(triplet)
        self._outgoing[triplet.head].append(triplet)
        self._incoming[triplet.tail].append(triplet)
        self._by_relation[triplet.relation].append(triplet)

    @classmethod
    def from_parts(cls, entities: Iterable[Entity], triplets: Iterable[Triplet]) -> "GraphStore":
        store = cls()
        for entity in entities:
            if entity.id in store.entities:
                raise IngestionError(f"duplicate entity id {entity.id!r}")
            store._add_entity(entity)
        for triplet in triplets:
            store._add_triplet(triplet)
        return store

    # reading ----------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.triplets)

    def __contains__(self, entity_id: object) -> bool:
        return entity_id in self.entities

    def outgoing(self, entity_id: str) -> list[Triplet]:
        return self._outgoing.get(entity_id, [])

    def incoming(self, entity_id: str) -> list[Triplet]:
        return self._incoming.get(entity_id, [])

    def by_relation(self, relation: str) -> list[Triplet]:
        return self._by_relation.get(relation, [])

    def relations(self) -> list[str]:
        return list(self._by_relation)

    def name_of(self, entity_id: str) -> str:
        entity = self.entities.get(entity_id)
        return entity.name if entity is not None else entity_id

    def has_edge(self, head: str, relation: str, tail: str) -> bool:
        return any(t.relation == relation and t.tail == tail for t in self.outgoing(head))

    def neighbors(self, entity_id: str) -> set[str]:
        out = {t.tail for t in self.outgoing(entity_id)}
        out.update(t.head for t in self.incoming(entity_id))
        return out

    def one_hop(self, entity_ids: Iterable[str], warnings: list[str] | None = None) -> list[Triplet]:
        return one_hop(entity_ids, self, warnings)

    def schema(self) -> Schema:
        return get_schema(self)


def _parse_scalar(text: str) -> Scalar:
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _check_properties(props: Mapping[str, Any], where: str) -> dict[str, Scalar]:
    clean = {}
    for key, value in props.items():
        if not isinstance(value, (str, int, float, bool)):
            raise IngestionError(f"{where}: property {key!r} is not a scalar")
        clean[str(key)] = value
    return clean


def ingest_triples(
    rows: Sequence[Sequence[str]],
    entities: Iterable[Entity] | None = None,
    *,
    line_numbers: Sequence[int] | None = None,
) -> GraphStore:
    """Build a store from ``(head, relation, tail[, timestamp])`` rows.

    Heads and tails are entity names unless ``entities`` declares ids, in
    which case a row may reference either a declared id or a declared name.
    A fourth column folds into the relation label as ``"relation: timestamp"``.
    """
    if not rows:
        raise IngestionError("empty input")
    store = GraphStore()
    by_name: dict[str, str] = {}
    for entity in entities or ():
        if entity.id in store.entities:
            raise IngestionError(f"duplicate entity id {entity.id!r}")
        store._add_entity(entity)
        by_name.setdefault(entity.name, entity.id)

    def resolve(name: str) -> str:
        if name in store.entities:
            return name
        if name in by_name:
            return by_name[name]
        store._add_entity(Entity(id=name, name=name))
        return name

    for index, row in enumerate(rows):
        lineno = line_numbers[index] if line_numbers else index + 1
        if len(row) < 3:
            raise IngestionError(f"expected at least 3 fields, got {len(row)}", line=lineno)
        if len(row) > 4:
            raise IngestionError(f"expected at most 4 fields, got {len(row)}", line=lineno)
        head, relation, tail = (normalize_label(str(x).strip()) for x in row[:3])
        if not head or not relation or not tail:
            raise IngestionError("empty head, relation or tail", line=lineno)
        if len(row) == 4 and str(row[3]).strip():
            relation = f"{relation}: {str(row[3]).strip()}"
        store._add_triplet(Triplet(resolve(head), relation, resolve(tail)))
    return store


def _read_tsv(path: str | Path) -> list[tuple[int, list[str]]]:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            rows.append((lineno, line.split("\t")))
    return rows


def read_entities_tsv(path: str | Path) -> list[Entity]:
    """Entity metadata: ``id<TAB>name[<TAB>type[<TAB>key=value ...]]``."""
    entities = []
    for lineno, fields in _read_tsv(path):
        if len(fields) < 2 or not fields[0].strip() or not fields[1].strip():
            raise IngestionError("entity rows need id and name", line=lineno)
        etype = fields[2].strip() if len(fields) > 2 and fields[2].strip() else None
        props: dict[str, Scalar] = {}
        for extra in fields[3:]:
            if "=" not in extra:
                raise IngestionError(f"expected key=value, got {extra!r}", line=lineno)
            key, _, value = extra.partition("=")
            props[key.strip()] = _parse_scalar(value.strip())
        entities.append(
            Entity(
                id=normalize_label(fields[0].strip()),
                name=normalize_label(fields[1].strip()),
                type=etype,
                properties=props,
            )
        )
    return entities


def load_triples_tsv(path: str | Path, entities_path: str | Path | None = None) -> GraphStore:
    """Ingest a 3/4-column triples TSV; ``#`` lines are comments."""
    numbered = _read_tsv(path)
    entities = read_entities_tsv(entities_path) if entities_path else None
    return ingest_triples(
        [fields for _, fields in numbered],
        entities,
        line_numbers=[lineno for lineno, _ in numbered],
    )


def load_graph_json(path: str | Path) -> GraphStore:
    """Property-graph JSON: ``{"nodes": [...], "edges": [...]}``.

    Nodes carry ``id``, optional ``name``, ``type`` and ``properties``; edges
    carry ``source``, ``relation``, ``target`` and optional ``properties``.
    """
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return graph_from_dict(doc)


def graph_from_dict(doc: Mapping[str, Any]) -> GraphStore:
    entities = []
    for i, node in enumerate(doc.get("nodes", [])):
        if "id" not in node:
            raise IngestionError(f"node #{i} has no id")
        node_id = normalize_label(str(node["id"]))
        entities.append(
            Entity(
                id=node_id,
                name=normalize_label(str(node.get("name", node_id))),
                type=node.get("type"),
                properties=_check_properties(node.get("properties", {}), f"node {node_id}"),
            )
        )
    triplets = []
    for i, edge in enumerate(doc.get("edges", [])):
        try:
            head, rel, tail = edge["source"], edge["relation"], edge["target"]
        except KeyError as exc:
            raise IngestionError(f"edge #{i} is missing {exc.args[0]!r}") from None
        triplets.append(
            Triplet(
                normalize_label(str(head)),
                normalize_label(str(rel)),
                normalize_label(str(tail)),
                _check_properties(edge.get("properties", {}), f"edge #{i}"),
            )
        )
    if not entities and not triplets:
        raise IngestionError("empty input")
    return GraphStore.from_parts(entities, triplets)


def get_schema(store: GraphStore) -> Schema:
    schema = Schema()
    for entity in store.entities.values():
        if entity.type:
            schema.node_types.add(entity.type)
            if entity.properties:
                schema.property_keys.setdefault(entity.type, set()).update(entity.properties)
    for t in store.triplets:
        schema.relation_types.add(t.relation)
        src = store.entities[t.head].type
        dst = store.entities[t.tail].type
        if src and dst:
            schema.relation_signatures.add((src, t.relation, dst))
        if t.properties:
            schema.property_keys.setdefault(t.relation, set()).update(t.properties)
    return schema


def one_hop(
    entity_ids: Iterable[str],
    store: GraphStore,
    warnings: list[str] | None = None,
) -> list[Triplet]:
    """Every triplet whose head or tail is one of ``entity_ids``.

    Order follows the input ids, outgoing before incoming. Unknown ids are
    skipped and noted in ``warnings`` when a list is given.
    """
    seen: dict[tuple[str, str, str], Triplet] = {}
    for entity_id in entity_ids:
        if entity_id not in store.entities:
            msg = f"unknown entity {entity_id!r}"
            logger.debug(msg)
            if warnings is not None:
                warnings.append(msg)
            continue
        for t in store.outgoing(entity_id):
            seen.setdefault(t.key, t)
        for t in store.incoming(entity_id):
            seen.setdefault(t.key, t)
    return list(seen.values())


def render_triplets(triplets: Iterable[Triplet], name_of: Callable[[str], str] = str) -> list[str]:
    """One line per (head, relation); several tails merge with ``" | "``."""
    groups: dict[tuple[str, str], list[str]] = {}
    for t in triplets:
        tails = groups.setdefault((t.head, t.relation), [])
        tail = name_of(t.tail)
        if tail not in tails:
            tails.append(tail)
    return [
        f"{name_of(head)}{ARROW}{rel}{ARROW}{TAIL_SEPARATOR.join(tails)}"
        for (head, rel), tails in groups.items()
    ]


def verbalize(items: Any, store: GraphStore | None = None) -> str:
    """Render triplets, grounded paths, query results or a whole context."""
    name_of = store.name_of if store is not None else str
    if hasattr(items, "verbalize"):
        return items.verbalize(store)
    items = list(items)
    lines: list[str] = []
    pending: list[Triplet] = []
    for item in items:
        if isinstance(item, Triplet):
            pending.append(item)
            continue
        if pending:
            lines.extend(render_triplets(pending, name_of))
            pending = []
        lines.append(item.render(name_of))
    if pending:
        lines.extend(render_triplets(pending, name_of))
    return "\n".join(lines)
