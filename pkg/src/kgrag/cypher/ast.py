"""Syntax tree for the supported openCypher subset.

Nodes are frozen dataclasses without source positions, so two parses of
equivalent text compare equal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

AGGREGATES = frozenset({"avg", "count", "sum", "min", "max", "collect"})
COMPARISON_OPS = ("<", "<=", "=", "<>", ">=", ">")


@dataclass(frozen=True)
class Literal:
    value: Union[float, str, bool, None]


@dataclass(frozen=True)
class Variable:
    name: str


@dataclass(frozen=True)
class Property:
    variable: str
    key: str


@dataclass(frozen=True)
class Comparison:
    op: str
    left: "Expression"
    right: "Expression"


@dataclass(frozen=True)
class BoolOp:
    op: str  # "AND" | "OR"
    operands: tuple["Expression", ...]


@dataclass(frozen=True)
class Not:
    operand: "Expression"


@dataclass(frozen=True)
class FunctionCall:
    name: str
    argument: "Expression | None"  # None means count(*)
    distinct: bool = False

    @property
    def is_aggregate(self) -> bool:
        return self.name in AGGREGATES


Expression = Union[Literal, Variable, Property, Comparison, BoolOp, Not, FunctionCall]


@dataclass(frozen=True)
class NodePattern:
    variable: str | None = None
    label: str | None = None
    properties: tuple[tuple[str, Literal], ...] = ()


@dataclass(frozen=True)
class RelPattern:
    variable: str | None = None
    type: str | None = None
    properties: tuple[tuple[str, Literal], ...] = ()
    direction: str = "out"  # "out" ->, "in" <-, "both" --


@dataclass(frozen=True)
class PathPattern:
    nodes: tuple[NodePattern, ...]
    rels: tuple[RelPattern, ...] = ()


@dataclass(frozen=True)
class ReturnItem:
    expression: Expression
    alias: str | None = None


@dataclass(frozen=True)
class OrderItem:
    expression: Expression
    descending: bool = False


@dataclass(frozen=True)
class Query:
    patterns: tuple[PathPattern, ...]
    returns: tuple[ReturnItem, ...]
    where: Expression | None = None
    distinct: bool = False
    order_by: tuple[OrderItem, ...] = ()
    limit: int | None = None

    @property
    def has_aggregates(self) -> bool:
        return any(isinstance(i.expression, FunctionCall) for i in self.returns)


def _quote(text: str) -> str:
    return "'" + text.replace("\\", "\\\\").replace("'", "\\'") + "'"


def _name(ident: str) -> str:
    if ident.isidentifier() and ident.upper() not in _RESERVED:
        return ident
    return "`" + ident.replace("`", "``") + "`"


def _label(ident: str) -> str:
    if ident.isidentifier():
        return ident
    return "`" + ident.replace("`", "``") + "`"


_RESERVED = frozenset(
    "MATCH WHERE RETURN ORDER BY ASC ASCENDING DESC DESCENDING LIMIT AND OR NOT "
    "DISTINCT AS TRUE FALSE NULL".split()
)


def format_literal(lit: Literal) -> str:
    v = lit.value
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return _quote(v)
    return repr(float(v))


def format_expr(expr: Expression) -> str:
    if isinstance(expr, Literal):
        return format_literal(expr)
    if isinstance(expr, Variable):
        return _name(expr.name)
    if isinstance(expr, Property):
        return f"{_name(expr.variable)}.{_label(expr.key)}"
    if isinstance(expr, FunctionCall):
        inner = "*" if expr.argument is None else format_expr(expr.argument)
        return f"{expr.name}({'DISTINCT ' if expr.distinct else ''}{inner})"
    if isinstance(expr, Comparison):
        return f"{_wrap(expr.left)} {expr.op} {_wrap(expr.right)}"
    if isinstance(expr, Not):
        return f"NOT {_wrap(expr.operand)}"
    if isinstance(expr, BoolOp):
        return f" {expr.op} ".join(_wrap(o) for o in expr.operands)
    raise TypeError(f"not an expression: {expr!r}")


def _wrap(expr: Expression) -> str:
    text = format_expr(expr)
    if isinstance(expr, (BoolOp, Not, Comparison)):
        return f"({text})"
    return text


def _props(props: tuple[tuple[str, Literal], ...]) -> str:
    if not props:
        return ""
    return " {" + ", ".join(f"{_label(k)}: {format_literal(v)}" for k, v in props) + "}"


def format_pattern(path: PathPattern) -> str:
    def node(n: NodePattern) -> str:
        label = f":{_label(n.label)}" if n.label else ""
        return f"({_name(n.variable) if n.variable else ''}{label}{_props(n.properties)})"

    parts = [node(path.nodes[0])]
    for rel, nxt in zip(path.rels, path.nodes[1:]):
        body = (_name(rel.variable) if rel.variable else "") + (f":{_label(rel.type)}" if rel.type else "")
        inner = f"[{body}{_props(rel.properties)}]"
        if rel.direction == "out":
            parts.append(f"-{inner}->")
        elif rel.direction == "in":
            parts.append(f"<-{inner}-")
        else:
            parts.append(f"-{inner}-")
        parts.append(node(nxt))
    return "".join(parts)


def format_query(query: Query) -> str:
    """Canonical text for a query; reparses to an equal tree."""
    out = ["MATCH " + ", ".join(format_pattern(p) for p in query.patterns)]
    if query.where is not None:
        out.append("WHERE " + format_expr(query.where))
    items = []
    for item in query.returns:
        text = format_expr(item.expression)
        items.append(f"{text} AS {_name(item.alias)}" if item.alias else text)
    out.append("RETURN " + ("DISTINCT " if query.distinct else "") + ", ".join(items))
    if query.order_by:
        out.append(
            "ORDER BY "
            + ", ".join(format_expr(o.expression) + (" DESC" if o.descending else "") for o in query.order_by)
        )
    if query.limit is not None:
        out.append(f"LIMIT {query.limit}")
    return "\n".join(out)
