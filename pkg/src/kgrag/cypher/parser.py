"""Tokenizer and recursive-descent parser for the openCypher subset.

Supported::

    MATCH pattern [, pattern ...] [MATCH ...]
    [WHERE expr]
    RETURN [DISTINCT] expr [AS alias] [, ...]
    [ORDER BY expr [ASC|DESC] [, ...]]
    [LIMIT n]

Patterns are ``(v:Label {k: lit})`` nodes joined by ``-[r:TYPE {k: lit}]->``,
``<-[...]-`` or ``-[...]-`` relationships. Expressions cover literals,
variables, property access, the comparisons ``< <= = <> >= >``, AND/OR/NOT
and the aggregates avg/count/sum/min/max/collect. Everything else is
rejected with a positioned error.
"""

from __future__ import annotations

from dataclasses import dataclass

from .ast import (
    AGGREGATES,
    BoolOp,
    Comparison,
    Expression,
    FunctionCall,
    Literal,
    NodePattern,
    Not,
    OrderItem,
    PathPattern,
    Property,
    Query,
    RelPattern,
    ReturnItem,
    Variable,
)

KEYWORDS = frozenset(
    "MATCH WHERE RETURN ORDER BY ASC ASCENDING DESC DESCENDING LIMIT AND OR NOT "
    "DISTINCT AS TRUE FALSE NULL".split()
)
UNSUPPORTED_CLAUSES = frozenset(
    "CREATE MERGE DELETE DETACH SET REMOVE WITH UNWIND OPTIONAL CALL UNION SKIP "
    "FOREACH LOAD USING YIELD".split()
)
UNSUPPORTED_OPERATORS = frozenset("IN IS CONTAINS STARTS ENDS XOR".split())
MAX_NESTING = 64


class CypherError(ValueError):
    kind = "error"

    def __init__(self, message: str, text: str = "", position: int | None = None, token: str | None = None):
        self.position = position
        self.token = token
        self.line = self.column = None
        if position is not None:
            self.line = text.count("\n", 0, position) + 1
            self.column = position - (text.rfind("\n", 0, position) + 1) + 1
        super().__init__(message)


class EmptyQueryError(CypherError):
    kind = "empty_query"


class CypherSyntaxError(CypherError):
    kind = "syntax"


class UnsupportedClauseError(CypherError):
    kind = "unsupported"


class UnboundVariableError(CypherError):
    kind = "unbound_variable"


@dataclass(frozen=True)
class Token:
    kind: str  # IDENT KEYWORD NUMBER STRING OP EOF
    value: str
    pos: int
    quoted: bool = False


_OPERATORS = ("<>", "<=", ">=", "(", ")", "[", "]", "{", "}", ":", ",", ".", "-", ">", "<", "=", "*", "|")


def _where(text: str, pos: int) -> str:
    line = text.count("\n", 0, pos) + 1
    col = pos - (text.rfind("\n", 0, pos) + 1) + 1
    return f"line {line}, column {col}"


def _is_digit(ch: str) -> bool:
    return "0" <= ch <= "9"


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if text.startswith("//", i):
            j = text.find("\n", i)
            i = n if j < 0 else j
            continue
        if _is_digit(ch) or (ch == "." and i + 1 < n and _is_digit(text[i + 1])):
            j = i
            while j < n and _is_digit(text[j]):
                j += 1
            if j < n and text[j] == "." and j + 1 < n and _is_digit(text[j + 1]):
                j += 1
                while j < n and _is_digit(text[j]):
                    j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and _is_digit(text[k]):
                    j = k
                    while j < n and _is_digit(text[j]):
                        j += 1
            if j < n and (text[j].isalpha() or text[j] == "_"):
                raise CypherSyntaxError(
                    f"parse error at {_where(text, i)}: malformed number", text, i, text[i : j + 1]
                )
            tokens.append(Token("NUMBER", text[i:j], i))
            i = j
            continue
        if ch in "'\"":
            j = i + 1
            buf = []
            while j < n and text[j] != ch:
                if text[j] == "\\" and j + 1 < n:
                    esc = text[j + 1]
                    buf.append({"n": "\n", "t": "\t", "r": "\r"}.get(esc, esc))
                    j += 2
                    continue
                buf.append(text[j])
                j += 1
            if j >= n:
                raise CypherSyntaxError(
                    f"parse error at {_where(text, i)}: unterminated string", text, i, text[i:]
                )
            tokens.append(Token("STRING", "".join(buf), i))
            i = j + 1
            continue
        if ch == "`":
            j = i + 1
            buf = []
            while True:
                if j >= n:
                    raise CypherSyntaxError(
                        f"parse error at {_where(text, i)}: unterminated quoted name", text, i, text[i:]
                    )
                if text[j] == "`":
                    if j + 1 < n and text[j + 1] == "`":
                        buf.append("`")
                        j += 2
                        continue
                    break
                buf.append(text[j])
                j += 1
            tokens.append(Token("IDENT", "".join(buf), i, quoted=True))
            i = j + 1
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            word = text[i:j]
            kind = "KEYWORD" if word.upper() in KEYWORDS else "IDENT"
            tokens.append(Token(kind, word.upper() if kind == "KEYWORD" else word, i))
            i = j
            continue
        for op in _OPERATORS:
            if text.startswith(op, i):
                tokens.append(Token("OP", op, i))
                i += len(op)
                break
        else:
            raise CypherSyntaxError(f"parse error at {_where(text, i)}: unexpected character {ch!r}", text, i, ch)
    tokens.append(Token("EOF", "", n))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = tokenize(text)
        self.i = 0
        self.node_vars: set[str] = set()
        self.rel_vars: set[str] = set()
        self.aliases: set[str] = set()
        self.nesting = 0

    # token helpers ----------------------------------------------------------

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def peek(self, offset: int = 1) -> Token:
        return self.tokens[min(self.i + offset, len(self.tokens) - 1)]

    def advance(self) -> Token:
        tok = self.tokens[self.i]
        if tok.kind != "EOF":
            self.i += 1
        return tok

    def at(self, kind: str, value: str | None = None) -> bool:
        tok = self.tok
        return tok.kind == kind and (value is None or tok.value == value)

    def accept(self, kind: str, value: str | None = None) -> Token | None:
        if self.at(kind, value):
            return self.advance()
        return None

    def error(self, message: str, tok: Token | None = None) -> CypherError:
        tok = tok or self.tok
        if tok.kind == "IDENT" and not tok.quoted:
            upper = tok.value.upper()
            if upper in UNSUPPORTED_CLAUSES:
                return UnsupportedClauseError(
                    f"parse error at {_where(self.text, tok.pos)}: unsupported clause {upper}",
                    self.text, tok.pos, tok.value,
                )
            if upper in UNSUPPORTED_OPERATORS:
                return UnsupportedClauseError(
                    f"parse error at {_where(self.text, tok.pos)}: unsupported operator {upper}",
                    self.text, tok.pos, tok.value,
                )
        shown = "end of input" if tok.kind == "EOF" else repr(tok.value)
        return CypherSyntaxError(
            f"parse error at {_where(self.text, tok.pos)}: {message}, got {shown}",
            self.text, tok.pos, tok.value,
        )

    def expect(self, kind: str, value: str | None = None, what: str | None = None) -> Token:
        tok = self.accept(kind, value)
        if tok is None:
            raise self.error(f"expected {what or value or kind.lower()}")
        return tok

    def name(self, what: str) -> str:
        if self.at("IDENT"):
            return self.advance().value
        raise self.error(f"expected {what}")

    def key_name(self, what: str = "property key") -> str:
        # labels and keys may collide with keywords (:Order, n.count)
        if self.tok.kind in ("IDENT", "KEYWORD"):
            return self.advance().value if self.tok.kind == "IDENT" else self.advance_keyword_raw()
        raise self.error(f"expected {what}")

    def advance_keyword_raw(self) -> str:
        tok = self.advance()
        return self.text[tok.pos : tok.pos + len(tok.value)]

    # grammar --------------------------------------------------------------

    def query(self) -> Query:
        if not self.at("KEYWORD", "MATCH"):
            raise self.error("expected MATCH")
        patterns: list[PathPattern] = []
        while self.accept("KEYWORD", "MATCH"):
            patterns.append(self.path())
            while self.accept("OP", ","):
                patterns.append(self.path())
        where = None
        if self.accept("KEYWORD", "WHERE"):
            where = self.expression(allow_aggregates=False)
        self.expect("KEYWORD", "RETURN", "RETURN")
        distinct = bool(self.accept("KEYWORD", "DISTINCT"))
        returns = [self.return_item()]
        while self.accept("OP", ","):
            returns.append(self.return_item())
        aliases = [r.alias for r in returns if r.alias]
        self.aliases = set(aliases)
        order: list[OrderItem] = []
        if self.at("KEYWORD", "ORDER"):
            self.advance()
            self.expect("KEYWORD", "BY", "BY")
            order.append(self.order_item(returns, distinct))
            while self.accept("OP", ","):
                order.append(self.order_item(returns, distinct))
        limit = None
        if self.accept("KEYWORD", "LIMIT"):
            tok = self.expect("NUMBER", what="integer")
            if not tok.value.isdigit():
                raise self.error("LIMIT needs a non-negative integer", tok)
            limit = int(tok.value)
        if not self.at("EOF"):
            raise self.error("expected end of query")
        return Query(
            patterns=tuple(patterns),
            returns=tuple(returns),
            where=where,
            distinct=distinct,
            order_by=tuple(order),
            limit=limit,
        )

    def properties(self) -> tuple[tuple[str, Literal], ...]:
        if not self.accept("OP", "{"):
            return ()
        items = []
        if not self.at("OP", "}"):
            while True:
                key = self.key_name()
                self.expect("OP", ":", "':'")
                items.append((key, self.literal()))
                if not self.accept("OP", ","):
                    break
        self.expect("OP", "}", "'}'")
        return tuple(items)

    def bind(self, tok: Token, kind: str) -> None:
        name = tok.value
        own, other = (self.node_vars, self.rel_vars) if kind == "node" else (self.rel_vars, self.node_vars)
        if name in other:
            raise CypherSyntaxError(
                f"parse error at {_where(self.text, tok.pos)}: variable {name} used as both node and relationship",
                self.text, tok.pos, name,
            )
        own.add(name)

    def node(self) -> NodePattern:
        self.expect("OP", "(", "'('")
        var = label = None
        if self.at("IDENT"):
            tok = self.advance()
            self.bind(tok, "node")
            var = tok.value
        if self.accept("OP", ":"):
            label = self.key_name("label")
        props = self.properties()
        self.expect("OP", ")", "')'")
        return NodePattern(var, label, props)

    def rel(self) -> RelPattern:
        left_arrow = bool(self.accept("OP", "<"))
        self.expect("OP", "-", "'-'")
        var = rtype = None
        props: tuple = ()
        if self.accept("OP", "["):
            if self.at("IDENT"):
                tok = self.advance()
                self.bind(tok, "rel")
                var = tok.value
            if self.accept("OP", ":"):
                rtype = self.key_name("relationship type")
            if self.at("OP", "*"):
                raise UnsupportedClauseError(
                    f"parse error at {_where(self.text, self.tok.pos)}: variable-length patterns are not supported",
                    self.text, self.tok.pos, "*",
                )
            if self.at("OP", "|"):
                raise UnsupportedClauseError(
                    f"parse error at {_where(self.text, self.tok.pos)}: relationship type alternatives are not supported",
                    self.text, self.tok.pos, "|",
                )
            props = self.properties()
            self.expect("OP", "]", "']'")
        self.expect("OP", "-", "'-'")
        right_arrow = bool(self.accept("OP", ">"))
        if left_arrow and right_arrow:
            raise self.error("relationship cannot point both ways", self.tokens[self.i - 1])
        direction = "in" if left_arrow else "out" if right_arrow else "both"
        return RelPattern(var, rtype, props, direction)

    def path(self) -> PathPattern:
        nodes = [self.node()]
        rels = []
        while self.at("OP", "-") or self.at("OP", "<"):
            rels.append(self.rel())
            nodes.append(self.node())
        return PathPattern(tuple(nodes), tuple(rels))

    def return_item(self) -> ReturnItem:
        start = self.tok
        expr = self.expression(allow_aggregates=True)
        self.check_aggregate_placement(expr, start)
        alias = None
        if self.accept("KEYWORD", "AS"):
            alias = self.name("alias")
        return ReturnItem(expr, alias)

    def order_item(self, returns: list[ReturnItem], distinct: bool) -> OrderItem:
        start = self.tok
        expr = self.expression(allow_aggregates=True, allow_aliases=True)
        self.check_aggregate_placement(expr, start)
        projected = any(expr == r.expression for r in returns) or (
            isinstance(expr, Variable) and expr.name in self.aliases
        )
        if not projected and (distinct or any(isinstance(r.expression, FunctionCall) for r in returns)):
            raise CypherSyntaxError(
                f"parse error at {_where(self.text, start.pos)}: ORDER BY after aggregation or DISTINCT "
                "must use a returned expression or alias",
                self.text, start.pos, start.value,
            )
        if isinstance(expr, FunctionCall) and not projected:
            raise CypherSyntaxError(
                f"parse error at {_where(self.text, start.pos)}: aggregate in ORDER BY must also be returned",
                self.text, start.pos, start.value,
            )
        descending = False
        if self.accept("KEYWORD", "DESC") or self.accept("KEYWORD", "DESCENDING"):
            descending = True
        else:
            self.accept("KEYWORD", "ASC") or self.accept("KEYWORD", "ASCENDING")
        return OrderItem(expr, descending)

    # expressions ------------------------------------------------------------

    def expression(self, allow_aggregates: bool, allow_aliases: bool = False) -> Expression:
        self.allow_aggregates = allow_aggregates
        self.allow_aliases = allow_aliases
        return self.or_expr()

    def check_aggregate_placement(self, expr: Expression, start: Token) -> None:
        if isinstance(expr, FunctionCall):
            return
        if _contains_aggregate(expr):
            raise self.error("aggregates must be top-level return items", start)

    def or_expr(self) -> Expression:
        operands = [self.and_expr()]
        while self.accept("KEYWORD", "OR"):
            operands.append(self.and_expr())
        return operands[0] if len(operands) == 1 else BoolOp("OR", tuple(operands))

    def and_expr(self) -> Expression:
        operands = [self.not_expr()]
        while self.accept("KEYWORD", "AND"):
            operands.append(self.not_expr())
        return operands[0] if len(operands) == 1 else BoolOp("AND", tuple(operands))

    def not_expr(self) -> Expression:
        if self.at("KEYWORD", "NOT"):
            self.enter()
            self.advance()
            inner = Not(self.not_expr())
            self.nesting -= 1
            return inner
        return self.comparison()

    def comparison(self) -> Expression:
        left = self.atom()
        if self.at("OP") and self.tok.value in ("<", "<=", "=", "<>", ">=", ">"):
            op = self.advance().value
            right = self.atom()
            if self.at("OP") and self.tok.value in ("<", "<=", "=", "<>", ">=", ">"):
                raise self.error("chained comparisons are not supported")
            return Comparison(op, left, right)
        return left

    def enter(self) -> None:
        self.nesting += 1
        if self.nesting > MAX_NESTING:
            raise self.error(f"expression nests deeper than {MAX_NESTING} levels")

    def literal(self) -> Literal:
        tok = self.tok
        if tok.kind == "NUMBER":
            self.advance()
            return Literal(float(tok.value))
        if tok.kind == "OP" and tok.value == "-" and self.peek().kind == "NUMBER":
            self.advance()
            return Literal(-float(self.advance().value))
        if tok.kind == "STRING":
            self.advance()
            return Literal(tok.value)
        if tok.kind == "KEYWORD" and tok.value in ("TRUE", "FALSE", "NULL"):
            self.advance()
            return Literal({"TRUE": True, "FALSE": False, "NULL": None}[tok.value])
        raise self.error("expected literal")

    def atom(self) -> Expression:
        tok = self.tok
        if tok.kind in ("NUMBER", "STRING") or (tok.kind == "KEYWORD" and tok.value in ("TRUE", "FALSE", "NULL")):
            return self.literal()
        if tok.kind == "OP" and tok.value == "-" and self.peek().kind == "NUMBER":
            return self.literal()
        if tok.kind == "OP" and tok.value == "(":
            self.enter()
            self.advance()
            inner = self.or_expr()
            self.expect("OP", ")", "')'")
            self.nesting -= 1
            return inner
        if tok.kind == "IDENT":
            if self.peek().kind == "OP" and self.peek().value == "(" and not tok.quoted:
                return self.function()
            self.advance()
            if self.accept("OP", "."):
                key = self.key_name()
                self.check_bound(tok)
                return Property(tok.value, key)
            self.check_bound(tok, alias_ok=self.allow_aliases)
            return Variable(tok.value)
        raise self.error("expected expression")

    def function(self) -> FunctionCall:
        tok = self.advance()
        name = tok.value.lower()
        if name not in AGGREGATES:
            raise UnsupportedClauseError(
                f"parse error at {_where(self.text, tok.pos)}: unsupported function {tok.value}",
                self.text, tok.pos, tok.value,
            )
        if not self.allow_aggregates:
            raise self.error("aggregates are not allowed here", tok)
        self.expect("OP", "(", "'('")
        distinct = bool(self.accept("KEYWORD", "DISTINCT"))
        if self.at("OP", "*"):
            star = self.advance()
            if name != "count" or distinct:
                raise self.error("'*' is only allowed in count(*)", star)
            arg = None
        else:
            saved = self.allow_aggregates
            self.allow_aggregates = False
            arg = self.or_expr()
            self.allow_aggregates = saved
        self.expect("OP", ")", "')'")
        return FunctionCall(name, arg, distinct)

    def check_bound(self, tok: Token, alias_ok: bool = False) -> None:
        name = tok.value
        if name in self.node_vars or name in self.rel_vars:
            return
        if alias_ok and name in self.aliases:
            return
        raise UnboundVariableError(
            f"unbound variable {name} ({_where(self.text, tok.pos)})", self.text, tok.pos, name
        )


def _contains_aggregate(expr: Expression) -> bool:
    if isinstance(expr, FunctionCall):
        return True
    if isinstance(expr, Comparison):
        return _contains_aggregate(expr.left) or _contains_aggregate(expr.right)
    if isinstance(expr, BoolOp):
        return any(_contains_aggregate(o) for o in expr.operands)
    if isinstance(expr, Not):
        return _contains_aggregate(expr.operand)
    return False


def parse(text: str) -> Query:
    """Parse query text into a :class:`Query`; raises :class:`CypherError`."""
    if text is None or not text.strip():
        raise EmptyQueryError("empty query", text or "", 0)
    return _Parser(text).query()
