"""openCypher-subset parser and in-memory executor."""

from .ast import Query, format_query
from .executor import (
    CypherExecutionError,
    QueryFailure,
    ResultTable,
    execute_query,
    run_query_text,
)
from .parser import (
    CypherError,
    CypherSyntaxError,
    EmptyQueryError,
    UnboundVariableError,
    UnsupportedClauseError,
    parse,
)

__all__ = [
    "CypherError",
    "CypherExecutionError",
    "CypherSyntaxError",
    "EmptyQueryError",
    "Query",
    "QueryFailure",
    "ResultTable",
    "UnboundVariableError",
    "UnsupportedClauseError",
    "execute_query",
    "format_query",
    "parse",
    "run_query_text",
]
