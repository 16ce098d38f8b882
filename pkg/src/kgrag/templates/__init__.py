"""Prompt template assets and tagged-block helpers.

Templates are UTF-8 text files with ``{name}`` placeholders. Substitution is
a single pass over the template, so placeholder-like text inside substituted
values (a question containing ``{schema}``, say) is left alone.
"""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")
_FENCE = re.compile(r"^\s*```[^\n]*$", re.MULTILINE)
FINISH = "FINISH"


@lru_cache(maxsize=None)
def _packaged(name: str) -> str:
    return resources.files(__name__).joinpath(f"{name}.txt").read_text(encoding="utf-8")


def load_template(name: str, directory: str | Path | None = None) -> str:
    """Read ``name.txt`` from ``directory`` if it exists there, else the packaged copy."""
    if directory is not None:
        path = Path(directory) / f"{name}.txt"
        if path.is_file():
            return path.read_text(encoding="utf-8")
    return _packaged(name)


def render(template: str, values: Mapping[str, str]) -> str:
    """Substitute known placeholders; unknown ``{...}`` text is kept verbatim."""

    def sub(m: re.Match) -> str:
        key = m.group(1)
        return values[key] if key in values else m.group(0)

    return _PLACEHOLDER.sub(sub, template)


def extract_block(text: str, *tags: str) -> str | None:
    """Raw content of the earliest ``<tag>`` among ``tags``, or None if absent.

    Tag names match case-insensitively. An opening tag with no closing tag
    takes everything up to the end of the text.
    """
    best: tuple[int, int, str] | None = None
    for tag in tags:
        m = re.search(rf"<\s*{re.escape(tag)}\s*>", text, re.IGNORECASE)
        if m and (best is None or m.start() < best[0]):
            best = (m.start(), m.end(), tag)
    if best is None:
        return None
    _, end, tag = best
    close = re.search(rf"<\s*/\s*{re.escape(tag)}\s*>", text[end:], re.IGNORECASE)
    body = text[end : end + close.start()] if close else text[end:]
    return _FENCE.sub("", body)


def block_lines(body: str | None) -> list[str]:
    """Non-blank stripped lines of a block."""
    if not body:
        return []
    return [line.strip() for line in body.splitlines() if line.strip()]
