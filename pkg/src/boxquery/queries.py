"""Computation-graph representation of logical queries.

A query is a DAG whose sources are anchor entities and whose unique sink is
the target variable. Edges apply relation projections or set union; a node
with several projection in-edges intersects the projected sets. Templates
carry unbound slots; grounding binds entity ids to anchors and relation ids
to projection edges.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

ANCHOR = "anchor"
VARIABLE = "variable"
TARGET = "target"

PROJECTION = "projection"
UNION = "union"

STRUCTURE_NAMES = ("1p", "2p", "3p", "2i", "3i", "ip", "pi", "2u", "up")
TRAINABLE_NAMES = ("1p", "2p", "3p", "2i", "3i")


@dataclass(frozen=True)
class Node:
    id: int
    kind: str
    slot: int | None = None  # anchor slot index
    entity: int | None = None  # bound entity id (grounded anchors only)


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    op: str
    slot: int | None = None  # relation slot index (projection edges only)
    relation: int | None = None  # bound relation id


@dataclass(frozen=True)
class ComputationGraph:
    nodes: tuple[Node, ...]
    edges: tuple[Edge, ...]

    def node(self, node_id: int) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def in_edges(self, node_id: int) -> tuple[Edge, ...]:
        return tuple(sorted((e for e in self.edges if e.dst == node_id), key=lambda e: e.src))

    def out_degree(self, node_id: int) -> int:
        return sum(1 for e in self.edges if e.src == node_id)

    @property
    def target(self) -> Node:
        targets = [n for n in self.nodes if n.kind == TARGET]
        if len(targets) != 1:
            raise ValueError(f"graph has {len(targets)} target nodes, expected 1")
        return targets[0]

    @property
    def anchors(self) -> tuple[Node, ...]:
        return tuple(n for n in self.nodes if n.kind == ANCHOR)

    def is_grounded(self) -> bool:
        if any(n.kind == ANCHOR and n.entity is None for n in self.nodes):
            return False
        return not any(e.op == PROJECTION and e.relation is None for e in self.edges)

    def topological_order(self) -> list[int]:
        """Node ids sorted so that every edge goes forward. Raises on cycles."""
        indeg = {n.id: 0 for n in self.nodes}
        for e in self.edges:
            indeg[e.dst] += 1
        ready = sorted(i for i, d in indeg.items() if d == 0)
        order: list[int] = []
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for e in sorted(self.edges, key=lambda e: e.dst):
                if e.src == nid:
                    indeg[e.dst] -= 1
                    if indeg[e.dst] == 0:
                        ready.append(e.dst)
            ready.sort()
        if len(order) != len(self.nodes):
            raise ValueError("graph contains a cycle")
        return order


@dataclass(frozen=True)
class QueryStructure:
    name: str
    graph: ComputationGraph
    trainable: bool


def validate_dag(g: ComputationGraph) -> list[str]:
    """Check all structural invariants; returns every violation found."""
    violations: list[str] = []
    ids = [n.id for n in g.nodes]
    if len(set(ids)) != len(ids):
        violations.append("duplicate node ids")
        return violations
    id_set = set(ids)
    for e in g.edges:
        if e.src not in id_set or e.dst not in id_set:
            violations.append(f"edge {e.src}->{e.dst} references unknown node")
            return violations

    try:
        g.topological_order()
    except ValueError:
        violations.append("not acyclic")

    sinks = [n for n in g.nodes if g.out_degree(n.id) == 0]
    if len(sinks) != 1 or sinks[0].kind != TARGET:
        violations.append("unique sink of kind target required")
    if sum(1 for n in g.nodes if n.kind == TARGET) != 1:
        violations.append("exactly one target node required")

    for n in g.nodes:
        in_es = g.in_edges(n.id)
        if not in_es and n.kind != ANCHOR:
            violations.append(f"source node {n.id} is not an anchor")
        if in_es and n.kind == ANCHOR:
            violations.append(f"anchor node {n.id} has in-edges")
        ops = {e.op for e in in_es}
        if len(ops) > 1:
            violations.append(f"node {n.id} mixes projection and union in-edges")
        if ops == {UNION} and len(in_es) < 2:
            violations.append(f"union node {n.id} has fewer than 2 parents")
    return violations


def _mk(nodes, edges) -> ComputationGraph:
    return ComputationGraph(tuple(nodes), tuple(edges))


def _chain(length: int) -> ComputationGraph:
    nodes = [Node(0, ANCHOR, slot=0)]
    nodes += [Node(i, VARIABLE) for i in range(1, length)]
    nodes.append(Node(length, TARGET))
    edges = [Edge(i, i + 1, PROJECTION, slot=i) for i in range(length)]
    return _mk(nodes, edges)


def _intersection(n_branches: int) -> ComputationGraph:
    nodes = [Node(i, ANCHOR, slot=i) for i in range(n_branches)]
    nodes.append(Node(n_branches, TARGET))
    edges = [Edge(i, n_branches, PROJECTION, slot=i) for i in range(n_branches)]
    return _mk(nodes, edges)


def _ip() -> ComputationGraph:
    nodes = [Node(0, ANCHOR, slot=0), Node(1, ANCHOR, slot=1), Node(2, VARIABLE),
             Node(3, TARGET)]
    edges = [Edge(0, 2, PROJECTION, slot=0), Edge(1, 2, PROJECTION, slot=1),
             Edge(2, 3, PROJECTION, slot=2)]
    return _mk(nodes, edges)


def _pi() -> ComputationGraph:
    nodes = [Node(0, ANCHOR, slot=0), Node(1, VARIABLE), Node(2, ANCHOR, slot=1),
             Node(3, TARGET)]
    edges = [Edge(0, 1, PROJECTION, slot=0), Edge(1, 3, PROJECTION, slot=1),
             Edge(2, 3, PROJECTION, slot=2)]
    return _mk(nodes, edges)


def _2u() -> ComputationGraph:
    nodes = [Node(0, ANCHOR, slot=0), Node(1, ANCHOR, slot=1), Node(2, VARIABLE),
             Node(3, VARIABLE), Node(4, TARGET)]
    edges = [Edge(0, 2, PROJECTION, slot=0), Edge(1, 3, PROJECTION, slot=1),
             Edge(2, 4, UNION), Edge(3, 4, UNION)]
    return _mk(nodes, edges)


def _up() -> ComputationGraph:
    nodes = [Node(0, ANCHOR, slot=0), Node(1, ANCHOR, slot=1), Node(2, VARIABLE),
             Node(3, VARIABLE), Node(4, VARIABLE), Node(5, TARGET)]
    edges = [Edge(0, 2, PROJECTION, slot=0), Edge(1, 3, PROJECTION, slot=1),
             Edge(2, 4, UNION), Edge(3, 4, UNION), Edge(4, 5, PROJECTION, slot=2)]
    return _mk(nodes, edges)


_TEMPLATES = {
    "1p": _chain(1),
    "2p": _chain(2),
    "3p": _chain(3),
    "2i": _intersection(2),
    "3i": _intersection(3),
    "ip": _ip(),
    "pi": _pi(),
    "2u": _2u(),
    "up": _up(),
}


def structure_templates() -> tuple[QueryStructure, ...]:
    """The nine fixed query structures, in canonical order."""
    return tuple(
        QueryStructure(name, _TEMPLATES[name], name in TRAINABLE_NAMES)
        for name in STRUCTURE_NAMES
    )


def template(name: str) -> QueryStructure:
    if name not in _TEMPLATES:
        raise KeyError(f"unknown query structure {name!r}")
    return QueryStructure(name, _TEMPLATES[name], name in TRAINABLE_NAMES)


def bind(
    graph: ComputationGraph,
    anchors: dict[int, int],
    relations: dict[int, int],
) -> ComputationGraph:
    """Bind anchor slots to entity ids and relation slots to relation ids."""
    nodes = tuple(
        replace(n, entity=anchors[n.slot]) if n.kind == ANCHOR else n for n in graph.nodes
    )
    edges = tuple(
        replace(e, relation=relations[e.slot]) if e.op == PROJECTION else e
        for e in graph.edges
    )
    return ComputationGraph(nodes, edges)


def to_dnf(g: ComputationGraph) -> tuple[list[ComputationGraph], int]:
    """Rewrite an EPFO graph into union-free conjunctive branches.

    For every assignment choosing one parent per union node, union edges are
    removed and each union node is merged into its chosen parent (the parent
    keeps its id); nodes that no longer reach the target are dropped. The
    answer to the original query is the union of the branch answers. Branches
    are enumerated lexicographically over (union node id, parent id).
    """
    union_nodes = sorted(
        {e.dst for e in g.edges if e.op == UNION}
    )
    if not union_nodes:
        return [g], 1
    parents = {
        v: sorted(e.src for e in g.edges if e.op == UNION and e.dst == v) for v in union_nodes
    }
    n_branches = 1
    for v in union_nodes:
        n_branches *= len(parents[v])

    target_id = g.target.id
    branches: list[ComputationGraph] = []
    for choice in itertools.product(*(parents[v] for v in union_nodes)):
        merged = dict(zip(union_nodes, choice))

        def resolve(nid: int) -> int:
            while nid in merged:
                nid = merged[nid]
            return nid

        new_target = resolve(target_id)
        edges = [
            replace(e, src=resolve(e.src), dst=resolve(e.dst))
            for e in g.edges
            if e.op != UNION
        ]
        # keep only nodes that still reach the target
        keep = {new_target}
        frontier = [new_target]
        while frontier:
            nid = frontier.pop()
            for e in edges:
                if e.dst == nid and e.src not in keep:
                    keep.add(e.src)
                    frontier.append(e.src)
        nodes = []
        for n in g.nodes:
            if n.id not in keep:
                continue
            if n.id == new_target:
                nodes.append(replace(n, kind=TARGET))
            elif n.kind == TARGET:
                nodes.append(replace(n, kind=VARIABLE))
            else:
                nodes.append(n)
        branch = ComputationGraph(
            tuple(nodes), tuple(e for e in edges if e.src in keep and e.dst in keep)
        )
        branches.append(branch)
    return branches, n_branches


def canonical_key(g: ComputationGraph) -> str:
    """Order-independent text key; symmetric branches serialize identically."""

    def describe(nid: int) -> str:
        node = g.node(nid)
        in_es = g.in_edges(nid)
        if not in_es:
            label = node.entity if node.entity is not None else f"s{node.slot}"
            return f"a{label}"
        parts = []
        for e in in_es:
            if e.op == PROJECTION:
                rel = e.relation if e.relation is not None else f"s{e.slot}"
                parts.append(f"p{rel}({describe(e.src)})")
            else:
                parts.append(f"u({describe(e.src)})")
        return "&".join(sorted(parts))

    return describe(g.target.id)


def graph_to_text(g: ComputationGraph) -> str:
    """Compact single-line serialization, deterministic for equal graphs."""
    node_parts = []
    for n in sorted(g.nodes, key=lambda n: n.id):
        if n.kind == ANCHOR:
            ent = "-" if n.entity is None else str(n.entity)
            node_parts.append(f"{n.id}:a:{n.slot}:{ent}")
        elif n.kind == VARIABLE:
            node_parts.append(f"{n.id}:v")
        else:
            node_parts.append(f"{n.id}:t")
    edge_parts = []
    for e in sorted(g.edges, key=lambda e: (e.src, e.dst, e.slot if e.slot is not None else -1)):
        if e.op == PROJECTION:
            rel = "-" if e.relation is None else str(e.relation)
            edge_parts.append(f"{e.src}-{e.dst}:p:{e.slot}:{rel}")
        else:
            edge_parts.append(f"{e.src}-{e.dst}:u")
    return ",".join(node_parts) + ";" + ",".join(edge_parts)


def graph_from_text(text: str) -> ComputationGraph:
    try:
        return _graph_from_text(text)
    except (ValueError, IndexError) as exc:
        raise ValueError(f"malformed graph serialization {text!r}: {exc}") from exc


def _graph_from_text(text: str) -> ComputationGraph:
    node_text, edge_text = text.split(";")
    nodes = []
    for part in node_text.split(","):
        fields = part.split(":")
        nid = int(fields[0])
        if fields[1] == "a":
            entity = None if fields[3] == "-" else int(fields[3])
            nodes.append(Node(nid, ANCHOR, slot=int(fields[2]), entity=entity))
        elif fields[1] == "v":
            nodes.append(Node(nid, VARIABLE))
        elif fields[1] == "t":
            nodes.append(Node(nid, TARGET))
        else:
            raise ValueError(f"unknown node kind {fields[1]!r}")
    edges = []
    for part in edge_text.split(","):
        ends, rest = part.split(":", 1)
        src, dst = (int(x) for x in ends.split("-"))
        fields = rest.split(":")
        if fields[0] == "p":
            relation = None if fields[2] == "-" else int(fields[2])
            edges.append(Edge(src, dst, PROJECTION, slot=int(fields[1]), relation=relation))
        elif fields[0] == "u":
            edges.append(Edge(src, dst, UNION))
        else:
            raise ValueError(f"unknown edge op {fields[0]!r}")
    return ComputationGraph(tuple(nodes), tuple(edges))
