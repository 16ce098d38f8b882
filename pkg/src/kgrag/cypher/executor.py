"""Evaluate a parsed query against a :class:`GraphStore`.

Semantics in brief:

* pattern matching enumerates bindings in canonical order: entities in
  insertion order, then each entity's adjacency lists in insertion order;
  a relationship is used at most once per binding row;
* ``WHERE`` keeps rows whose predicate is true under three-valued logic;
  a missing property is null, and null fails every comparison;
* comparing a string with a number (or any other mismatched pair) gives
  null and bumps ``ResultTable.warnings``;
* with aggregates, non-aggregate return items are grouping keys; with only
  aggregates there is always exactly one row (``count`` of nothing is 0,
  ``avg``/``min``/``max`` of nothing are null);
* ``ORDER BY`` then ``LIMIT`` are applied last. Nulls sort last ascending.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterator

from ..graph_store import GraphStore, Triplet
from .ast import (
    BoolOp,
    Comparison,
    Expression,
    FunctionCall,
    Literal,
    NodePattern,
    Not,
    PathPattern,
    Property,
    Query,
    RelPattern,
    Variable,
    format_expr,
)
from .parser import CypherError, parse


class CypherExecutionError(CypherError):
    kind = "execution"


@dataclass(frozen=True)
class NodeRef:
    id: str


@dataclass(frozen=True)
class RelRef:
    triplet: Triplet

    def __eq__(self, other: object) -> bool:
        return isinstance(other, RelRef) and other.triplet is self.triplet

    def __hash__(self) -> int:
        return id(self.triplet)


@dataclass
class ResultTable:
    columns: list[str]
    rows: list[tuple] = field(default_factory=list)
    warnings: int = 0

    def __post_init__(self) -> None:
        for row in self.rows:
            if len(row) != len(self.columns):
                raise ValueError("row arity does not match columns")

    def to_tsv(self) -> str:
        lines = ["\t".join(self.columns)]
        lines += ["\t".join(_cell(v) for v in row) for row in self.rows]
        return "\n".join(lines)

    def render(self) -> str:
        if not self.rows:
            return "query returned no results"
        return "\n".join(
            ", ".join(f"{col}: {_cell(v)}" for col, v in zip(self.columns, row)) for row in self.rows
        )

    def to_dict(self) -> dict[str, Any]:
        return {"columns": list(self.columns), "rows": [list(r) for r in self.rows], "warnings": self.warnings}


def _cell(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return "[" + ", ".join(_cell(v) for v in value) + "]"
    return str(value)


@dataclass
class QueryFailure:
    """A query that could not be parsed or executed."""

    query: str
    kind: str
    message: str
    line: int | None = None
    column: int | None = None

    def render(self) -> str:
        return self.message

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "message": self.message, "line": self.line, "column": self.column}


# matching -------------------------------------------------------------------


def _node_ok(store: GraphStore, entity_id: str, pattern: NodePattern) -> bool:
    entity = store.entities[entity_id]
    if pattern.label is not None and entity.type != pattern.label:
        return False
    for key, lit in pattern.properties:
        if not _equal(_node_property(store, entity_id, key), lit.value):
            return False
    return True


def _rel_ok(triplet: Triplet, pattern: RelPattern) -> bool:
    if pattern.type is not None and triplet.relation != pattern.type:
        return False
    for key, lit in pattern.properties:
        if not _equal(triplet.properties.get(key), lit.value):
            return False
    return True


def _equal(a: Any, b: Any) -> bool:
    if a is None or b is None:
        return False
    if _is_number(a) and _is_number(b):
        return float(a) == float(b)
    return type(a) is type(b) and a == b


def _edges(store: GraphStore, node: str, direction: str) -> Iterator[tuple[Triplet, str]]:
    if direction in ("out", "both"):
        for t in store.outgoing(node):
            yield t, t.tail
    if direction in ("in", "both"):
        for t in store.incoming(node):
            if direction == "both" and t.head == t.tail:
                continue  # self-loop already produced by the outgoing pass
            yield t, t.head


def _match_path(store: GraphStore, path: PathPattern, binding: dict) -> Iterator[dict]:
    first = path.nodes[0]
    if first.variable is not None and first.variable in binding:
        starts = [binding[first.variable].id]
    else:
        starts = list(store.entities)

    def extend(index: int, node_id: str, row: dict, used: frozenset) -> Iterator[dict]:
        if index == len(path.rels):
            yield row
            return
        rel = path.rels[index]
        nxt = path.nodes[index + 1]
        for triplet, other in _edges(store, node_id, rel.direction):
            if id(triplet) in used or not _rel_ok(triplet, rel):
                continue
            if rel.variable is not None and rel.variable in row and row[rel.variable].triplet is not triplet:
                continue
            if nxt.variable is not None and nxt.variable in row and row[nxt.variable].id != other:
                continue
            if not _node_ok(store, other, nxt):
                continue
            new = dict(row)
            if rel.variable is not None:
                new[rel.variable] = RelRef(triplet)
            if nxt.variable is not None:
                new[nxt.variable] = NodeRef(other)
            yield from extend(index + 1, other, new, used | {id(triplet)})

    for start in starts:
        if not _node_ok(store, start, first):
            continue
        row = dict(binding)
        if first.variable is not None:
            row[first.variable] = NodeRef(start)
        yield from extend(0, start, row, frozenset())


def match(store: GraphStore, patterns: tuple[PathPattern, ...]) -> Iterator[dict]:
    def rec(i: int, binding: dict) -> Iterator[dict]:
        if i == len(patterns):
            yield binding
            return
        for row in _match_path(store, patterns[i], binding):
            yield from rec(i + 1, row)

    yield from rec(0, {})


# evaluation -------------------------------------------------------------------


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _node_property(store: GraphStore, entity_id: str, key: str) -> Any:
    entity = store.entities[entity_id]
    if key in entity.properties:
        return entity.properties[key]
    if key == "name":
        return entity.name
    if key == "id":
        return entity.id
    return None


class _Evaluator:
    def __init__(self, store: GraphStore):
        self.store = store
        self.warnings = 0

    def value(self, expr: Expression, row: dict) -> Any:
        if isinstance(expr, Literal):
            return expr.value
        if isinstance(expr, Variable):
            return row.get(expr.name)
        if isinstance(expr, Property):
            ref = row.get(expr.variable)
            if isinstance(ref, NodeRef):
                return _node_property(self.store, ref.id, expr.key)
            if isinstance(ref, RelRef):
                return ref.triplet.properties.get(expr.key)
            return None
        if isinstance(expr, Comparison):
            return self.compare(expr.op, self.value(expr.left, row), self.value(expr.right, row))
        if isinstance(expr, Not):
            v = self.truth(self.value(expr.operand, row))
            return None if v is None else not v
        if isinstance(expr, BoolOp):
            values = [self.truth(self.value(o, row)) for o in expr.operands]
            if expr.op == "AND":
                if any(v is False for v in values):
                    return False
                return None if any(v is None for v in values) else True
            if any(v is True for v in values):
                return True
            return None if any(v is None for v in values) else False
        if isinstance(expr, FunctionCall):
            raise CypherExecutionError(f"aggregate {expr.name} used outside RETURN")
        raise CypherExecutionError(f"cannot evaluate {expr!r}")

    def truth(self, v: Any) -> bool | None:
        if v is None or isinstance(v, bool):
            return v
        self.warnings += 1
        return None

    def compare(self, op: str, a: Any, b: Any) -> bool | None:
        if a is None or b is None:
            return None
        if _is_number(a) and _is_number(b):
            a, b = float(a), float(b)
        elif isinstance(a, str) and isinstance(b, str):
            pass
        elif isinstance(a, bool) and isinstance(b, bool):
            pass
        elif type(a) is type(b) and isinstance(a, (NodeRef, RelRef)):
            if op not in ("=", "<>"):
                self.warnings += 1
                return None
        else:
            self.warnings += 1
            return None
        if op == "=":
            return a == b
        if op == "<>":
            return a != b
        if op == "<":
            return a < b
        if op == "<=":
            return a <= b
        if op == ">":
            return a > b
        return a >= b

    def aggregate(self, call: FunctionCall, rows: list[dict]) -> Any:
        if call.argument is None:
            return len(rows)
        values = [self.value(call.argument, r) for r in rows]
        values = [v for v in values if v is not None]
        if call.distinct:
            values = list(dict.fromkeys(_hashable(v) for v in values))
        if call.name == "count":
            return len(values)
        if call.name == "collect":
            return [self.display(v) for v in values]
        if call.name in ("sum", "avg"):
            numbers = [float(v) for v in values if _is_number(v)]
            self.warnings += len(values) - len(numbers)
            if call.name == "sum":
                return float(sum(numbers))
            return sum(numbers) / len(numbers) if numbers else None
        numbers = [float(v) for v in values if _is_number(v)]
        strings = [v for v in values if isinstance(v, str)]
        pool = numbers if numbers else strings
        self.warnings += len(values) - len(pool)
        if not pool:
            return None
        return min(pool) if call.name == "min" else max(pool)

    def display(self, v: Any) -> Any:
        if isinstance(v, NodeRef):
            return self.store.name_of(v.id)
        if isinstance(v, RelRef):
            return v.triplet.relation
        if isinstance(v, list):
            return [self.display(x) for x in v]
        return v


def _hashable(v: Any) -> Any:
    return tuple(v) if isinstance(v, list) else v


def _sort_key(v: Any) -> tuple:
    if v is None:
        return (1, 0, 0)
    if isinstance(v, bool):
        return (0, 0, v)
    if _is_number(v):
        return (0, 1, float(v))
    if isinstance(v, str):
        return (0, 2, v)
    return (0, 3, str(v))


def column_name(item) -> str:
    return item.alias or format_expr(item.expression)


def execute_query(query: Query, store: GraphStore) -> ResultTable:
    ev = _Evaluator(store)
    columns = [column_name(item) for item in query.returns]
    bindings = []
    for row in match(store, query.patterns):
        if query.where is not None and ev.truth(ev.value(query.where, row)) is not True:
            continue
        bindings.append(row)

    # each output row carries the binding it came from, for ORDER BY on
    # expressions that are not projected
    if query.has_aggregates:
        key_items = [i for i, item in enumerate(query.returns) if not isinstance(item.expression, FunctionCall)]
        groups: dict[tuple, list[dict]] = {}
        if not key_items:
            groups[()] = bindings
        for b in bindings if key_items else ():
            key = tuple(_hashable(ev.value(query.returns[i].expression, b)) for i in key_items)
            groups.setdefault(key, []).append(b)
        produced = []
        for key, rows in groups.items():
            values: list[Any] = []
            key_iter = iter(key)
            for item in query.returns:
                if isinstance(item.expression, FunctionCall):
                    values.append(ev.aggregate(item.expression, rows))
                else:
                    values.append(next(key_iter))
            produced.append((values, rows[0] if rows else {}))
    else:
        produced = [([ev.value(item.expression, b) for item in query.returns], b) for b in bindings]

    if query.distinct:
        seen = set()
        unique = []
        for values, b in produced:
            k = tuple(_hashable(v) for v in values)
            if k not in seen:
                seen.add(k)
                unique.append((values, b))
        produced = unique

    if query.order_by:
        aliases = {item.alias: i for i, item in enumerate(query.returns) if item.alias}
        exprs = {item.expression: i for i, item in enumerate(query.returns)}

        def order_value(entry, expr):
            values, b = entry
            if isinstance(expr, Variable) and expr.name in aliases:
                return values[aliases[expr.name]]
            if expr in exprs:
                return values[exprs[expr]]
            return ev.value(expr, b)

        for item in reversed(query.order_by):
            produced.sort(key=lambda e, x=item.expression: _sort_key(_hashable(order_value(e, x))),
                          reverse=item.descending)

    if query.limit is not None:
        produced = produced[: query.limit]

    rows = [tuple(ev.display(v) for v in values) for values, _ in produced]
    return ResultTable(columns=columns, rows=rows, warnings=ev.warnings)


def run_query_text(text: str, store: GraphStore) -> ResultTable | QueryFailure:
    """Parse and execute; failures come back as a :class:`QueryFailure`."""
    try:
        return execute_query(parse(text), store)
    except CypherError as exc:
        return QueryFailure(text or "", exc.kind, str(exc), exc.line, exc.column)
    except RecursionError:
        return QueryFailure(text or "", "syntax", "parse error at line 1, column 1: query nests too deeply")
