"""Path retrieval over the graph.

``follow_paths`` grounds generated relation chains hop by hop, starting from
linked entities. ``shortest_paths`` connects linked question entities with
linked candidate answers. Both treat every edge as traversable in either
direction and record which way each hop went.
"""

from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable

from .graph_store import ARROW, INVERSE_ARROW, GraphStore, normalize_label

logger = logging.getLogger(__name__)

DEFAULT_GROUNDING_CAP = 256
DEFAULT_MAX_HOPS = 4


class Direction(str, enum.Enum):
    FORWARD = "forward"
    INVERSE = "inverse"


@dataclass(frozen=True)
class RelationPath:
    relations: tuple[str, ...]

    def __post_init__(self) -> None:
        labels = tuple(normalize_label(r.strip()) for r in self.relations)
        if not labels or any(not r for r in labels):
            raise ValueError(f"invalid relation path {self.relations!r}")
        object.__setattr__(self, "relations", labels)

    @classmethod
    def parse(cls, text: str) -> "RelationPath":
        return cls(tuple(part for part in text.split("->")))

    def __str__(self) -> str:
        return " -> ".join(self.relations)


@dataclass(frozen=True)
class GroundedPath:
    nodes: tuple[str, ...]
    relations: tuple[str, ...] = ()
    directions: tuple[Direction, ...] = ()

    def __post_init__(self) -> None:
        if len(self.nodes) != len(self.relations) + 1 or len(self.directions) != len(self.relations):
            raise ValueError("a grounded path needs len(nodes) == len(relations) + 1")

    @property
    def hops(self) -> int:
        return len(self.relations)

    @property
    def key(self) -> tuple[tuple[str, ...], tuple[str, ...]]:
        return (self.nodes, self.relations)

    def render(self, name_of: Callable[[str], str] = str) -> str:
        parts = [name_of(self.nodes[0])]
        for rel, direction, node in zip(self.relations, self.directions, self.nodes[1:]):
            arrow = ARROW if direction is Direction.FORWARD else INVERSE_ARROW
            parts.append(f"{arrow}{rel}{arrow}{name_of(node)}")
        return "".join(parts)

    def is_grounded_in(self, store: GraphStore) -> bool:
        for i, (rel, direction) in enumerate(zip(self.relations, self.directions)):
            a, b = self.nodes[i], self.nodes[i + 1]
            if direction is Direction.INVERSE:
                a, b = b, a
            if not store.has_edge(a, rel, b):
                return False
        return True

    def to_dict(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "relations": list(self.relations),
            "directions": [d.value for d in self.directions],
        }


def _known(ids: Iterable[str], store: GraphStore, warnings: list[str] | None, role: str) -> list[str]:
    out = []
    for entity_id in dict.fromkeys(ids):
        if entity_id in store.entities:
            out.append(entity_id)
        else:
            msg = f"unknown {role} entity {entity_id!r}"
            logger.debug(msg)
            if warnings is not None:
                warnings.append(msg)
    return out


def _step(store: GraphStore, node: str, relation: str):
    for t in store.outgoing(node):
        if t.relation == relation:
            yield t.tail, Direction.FORWARD
    for t in store.incoming(node):
        if t.relation == relation:
            yield t.head, Direction.INVERSE


def follow_paths(
    relpaths: Iterable[RelationPath],
    sources: Iterable[str],
    store: GraphStore,
    cap: int = DEFAULT_GROUNDING_CAP,
    warnings: list[str] | None = None,
) -> list[GroundedPath]:
    """Every grounding of each relation chain from each source.

    Breadth-first, one hop per relation label. At most ``cap`` groundings are
    kept per (source, chain); hitting the cap is reported in ``warnings``.
    The partial frontier is bounded by ``64 * cap`` for the same reason.
    """
    relpaths = list(dict.fromkeys(relpaths))
    frontier_limit = 64 * cap
    results: dict[GroundedPath, None] = {}
    for source in _known(sources, store, warnings, "source"):
        for relpath in relpaths:
            partials: list[tuple[tuple[str, ...], tuple[Direction, ...]]] = [((source,), ())]
            truncated = False
            for relation in relpath.relations:
                nxt = []
                for nodes, dirs in partials:
                    for node, direction in _step(store, nodes[-1], relation):
                        nxt.append((nodes + (node,), dirs + (direction,)))
                    if len(nxt) > frontier_limit:
                        truncated = True
                        nxt = nxt[:frontier_limit]
                        break
                partials = nxt
                if not partials:
                    break
            grounded = list(
                dict.fromkeys(GroundedPath(nodes, relpath.relations, dirs) for nodes, dirs in partials)
            )
            if len(grounded) > cap:
                truncated = True
                grounded = grounded[:cap]
            if truncated and warnings is not None:
                warnings.append(f"grounding cap hit for {relpath} from {source!r}")
            for path in grounded:
                results.setdefault(path, None)
    return list(results)


def _bounded_distances(store: GraphStore, origin: str, max_hops: int) -> dict[str, int]:
    dist = {origin: 0}
    queue = deque([origin])
    while queue:
        node = queue.popleft()
        if dist[node] == max_hops:
            continue
        for nb in store.neighbors(node):
            if nb not in dist:
                dist[nb] = dist[node] + 1
                queue.append(nb)
    return dist


def _pick_edge(store: GraphStore, a: str, b: str) -> tuple[str, Direction]:
    options = [(t.relation, 0) for t in store.outgoing(a) if t.tail == b]
    options += [(t.relation, 1) for t in store.incoming(a) if t.head == b]
    rel, flag = min(options)
    return rel, Direction.FORWARD if flag == 0 else Direction.INVERSE


def shortest_paths(
    sources: Iterable[str],
    targets: Iterable[str],
    store: GraphStore,
    max_hops: int = DEFAULT_MAX_HOPS,
    warnings: list[str] | None = None,
) -> list[GroundedPath]:
    """One minimum-hop path per reachable (source, target) pair.

    With unit edge weights Dijkstra reduces to breadth-first search, which is
    what runs here: a bounded search from each target gives hop distances,
    then a greedy walk from the source takes the smallest node id that stays
    on a shortest route. That yields the lexicographically smallest node
    sequence among all shortest paths. Between two chosen nodes the edge
    with the smallest (relation, forward-first) is used.
    """
    targets = _known(targets, store, warnings, "target")
    sources = _known(sources, store, warnings, "source")
    if not targets or not sources:
        return []
    distances = {t: _bounded_distances(store, t, max_hops) for t in targets}
    results: dict[GroundedPath, None] = {}
    for source in sources:
        for target in targets:
            dist = distances[target]
            remaining = dist.get(source)
            if remaining is None:
                continue
            nodes = [source]
            while remaining > 0:
                remaining -= 1
                nodes.append(min(n for n in store.neighbors(nodes[-1]) if dist.get(n) == remaining))
            hops = [_pick_edge(store, a, b) for a, b in zip(nodes, nodes[1:])]
            path = GroundedPath(
                tuple(nodes), tuple(r for r, _ in hops), tuple(d for _, d in hops)
            )
            results.setdefault(path, None)
    return list(results)
