"""Word lattice data model, structural validation and JSONL I/O.

A lattice is a DAG of token nodes whose ids are also their topological
positions. It has a single ``<s>`` source and a single ``</s>`` sink, and each
node carries a forward score: the probability of the node given its parent,
so that the children of any node have forward scores summing to one.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from typing import TextIO

logger = logging.getLogger(__name__)

BOS = "<s>"
EOS = "</s>"
RESERVED = (BOS, EOS)

FORWARD_SUM_TOL = 1e-9
DEFAULT_PATH_CAP = 100_000


class LatticeError(ValueError):
    """Raised for malformed or structurally invalid lattices."""


@dataclass(frozen=True)
class Node:
    id: int
    token: str
    forward: float = 1.0


@dataclass(frozen=True)
class Lattice:
    nodes: tuple[Node, ...]
    edges: tuple[tuple[int, int], ...]
    _parents: tuple[frozenset[int], ...] = field(init=False, repr=False, compare=False)
    _children: tuple[frozenset[int], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple((int(a), int(b)) for a, b in self.edges))
        n = len(self.nodes)
        par: list[set[int]] = [set() for _ in range(n)]
        chi: list[set[int]] = [set() for _ in range(n)]
        for a, b in self.edges:
            if 0 <= a < n and 0 <= b < n:
                chi[a].add(b)
                par[b].add(a)
        object.__setattr__(self, "_parents", tuple(frozenset(p) for p in par))
        object.__setattr__(self, "_children", tuple(frozenset(c) for c in chi))

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def tokens(self) -> list[str]:
        return [node.token for node in self.nodes]

    @property
    def forward(self) -> list[float]:
        return [node.forward for node in self.nodes]

    @property
    def source(self) -> int:
        return 0

    @property
    def sink(self) -> int:
        return len(self.nodes) - 1

    def parents(self, i: int) -> frozenset[int]:
        return self._parents[_check_index(self, i)]

    def children(self, i: int) -> frozenset[int]:
        return self._children[_check_index(self, i)]

    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": nd.id, "token": nd.token, "forward": nd.forward} for nd in self.nodes],
            "edges": [[a, b] for a, b in self.edges],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, separators=(",", ":"))


def _check_index(lat: Lattice, i: int) -> int:
    if not 0 <= i < len(lat.nodes):
        raise LatticeError(f"node id {i} out of range [0, {len(lat.nodes)})")
    return i


def parents(lat: Lattice, i: int) -> frozenset[int]:
    return lat.parents(i)


def children(lat: Lattice, i: int) -> frozenset[int]:
    return lat.children(i)


def make_lattice(tokens: Sequence[str], edges: Iterable[tuple[int, int]],
                 forward: Sequence[float] | None = None) -> Lattice:
    """Build a lattice from parallel token/forward lists and an edge list."""
    if forward is None:
        forward = [1.0] * len(tokens)
    if len(forward) != len(tokens):
        raise LatticeError("tokens and forward scores differ in length")
    nodes = tuple(Node(i, t, float(f)) for i, (t, f) in enumerate(zip(tokens, forward)))
    return Lattice(nodes, tuple(edges))


def from_sequence(tokens: Sequence[str]) -> Lattice:
    """Wrap a plain token sequence as a single-path lattice."""
    tokens = list(tokens)
    if not tokens:
        raise LatticeError("empty sequence")
    for t in tokens:
        if t in RESERVED:
            raise LatticeError(f"reserved token {t!r} inside sequence")
    full = [BOS, *tokens, EOS]
    return make_lattice(full, [(i, i + 1) for i in range(len(full) - 1)])


def validate(lat: Lattice, tol: float = FORWARD_SUM_TOL) -> list[str]:
    """Return a list of violated lattice invariants (empty when valid)."""
    out: list[str] = []
    n = len(lat.nodes)
    if n < 2:
        return [f"lattice needs at least 2 nodes, has {n}"]
    for pos, node in enumerate(lat.nodes):
        if node.id != pos:
            out.append(f"node at position {pos} has id {node.id}")
        if not 0.0 <= node.forward <= 1.0:
            out.append(f"node {pos} forward score {node.forward} outside [0, 1]")

    seen = set()
    for a, b in lat.edges:
        if not (0 <= a < n and 0 <= b < n):
            out.append(f"edge ({a},{b}) references unknown node")
            continue
        if (a, b) in seen:
            out.append(f"duplicate edge ({a},{b})")
        seen.add((a, b))
        if a >= b:
            out.append(f"edge ({a},{b}) not in topological order")
    if any("unknown node" in v for v in out):
        return out

    sources = [i for i in range(n) if not lat.parents(i)]
    sinks = [i for i in range(n) if not lat.children(i)]
    if sources != [0]:
        out.append(f"expected single source node 0, found {sources}")
    if sinks != [n - 1]:
        out.append(f"expected single sink node {n - 1}, found {sinks}")
    if lat.nodes[0].token != BOS:
        out.append(f"source token is {lat.nodes[0].token!r}, expected {BOS!r}")
    if lat.nodes[-1].token != EOS:
        out.append(f"sink token is {lat.nodes[-1].token!r}, expected {EOS!r}")
    for i in range(1, n - 1):
        if lat.nodes[i].token in RESERVED:
            out.append(f"interior node {i} carries reserved token {lat.nodes[i].token!r}")
    if abs(lat.nodes[0].forward - 1.0) > tol:
        out.append(f"source forward score is {lat.nodes[0].forward}, expected 1")

    # reachability both ways (connectivity through sentinels)
    reach = [False] * n
    reach[0] = True
    for i in range(n):
        if reach[i]:
            for c in lat.children(i):
                reach[c] = True
    coreach = [False] * n
    coreach[n - 1] = True
    for i in range(n - 1, -1, -1):
        if coreach[i]:
            for p in lat.parents(i):
                coreach[p] = True
    for i in range(n):
        if not (reach[i] and coreach[i]):
            out.append(f"node {i} is not on any source-to-sink path")

    for i in range(n):
        ch = lat.children(i)
        if not ch:
            continue
        total = sum(lat.nodes[c].forward for c in ch)
        if abs(total - 1.0) > tol:
            out.append(f"children of node {i} forward sum = {total:.12g}")
    return out


def check(lat: Lattice) -> Lattice:
    """Raise LatticeError listing all violations, else return ``lat``."""
    problems = validate(lat)
    if problems:
        raise LatticeError("; ".join(problems))
    return lat


def enumerate_paths(lat: Lattice, cap: int = DEFAULT_PATH_CAP) -> list[list[int]]:
    """All source-to-sink paths, by depth-first search.

    Exponential in general; meant as a test oracle for small lattices.
    """
    sink = len(lat.nodes) - 1
    paths: list[list[int]] = []
    stack: list[tuple[int, list[int]]] = [(0, [0])]
    while stack:
        node, path = stack.pop()
        if node == sink:
            paths.append(path)
            if len(paths) > cap:
                raise LatticeError(f"path explosion: more than {cap} paths")
            continue
        for c in sorted(lat.children(node), reverse=True):
            stack.append((c, path + [c]))
    return paths


def renormalize(lat: Lattice) -> Lattice:
    """Rescale forward scores so every children set sums to one.

    Only defined when the children sets of any two nodes are identical or
    disjoint; otherwise there is no unique per-set rescaling.
    """
    n = len(lat.nodes)
    groups: dict[frozenset[int], None] = {}
    for i in range(n):
        ch = lat.children(i)
        if ch:
            groups.setdefault(ch, None)
    owner: dict[int, frozenset[int]] = {}
    for g in groups:
        for c in g:
            if c in owner and owner[c] != g:
                raise LatticeError(f"node {c} belongs to overlapping children sets; cannot renormalize")
            owner[c] = g
    fwd = [nd.forward for nd in lat.nodes]
    for g in groups:
        total = sum(fwd[c] for c in g)
        if total <= 0.0:
            for c in g:
                fwd[c] = 1.0 / len(g)
        else:
            for c in g:
                fwd[c] = fwd[c] / total
    fwd[0] = 1.0
    return make_lattice(lat.tokens, lat.edges, fwd)


# ---------------------------------------------------------------------------
# JSONL

_NODE_KEYS = {"id", "token", "forward"}
_LATTICE_KEYS = {"nodes", "edges"}


def lattice_from_dict(obj: dict) -> Lattice:
    if not isinstance(obj, dict):
        raise LatticeError("lattice record must be a JSON object")
    extra = set(obj) - _LATTICE_KEYS
    if extra:
        logger.warning("ignoring unknown lattice fields: %s", sorted(extra))
    try:
        raw_nodes = obj["nodes"]
        raw_edges = obj["edges"]
    except KeyError as err:
        raise LatticeError(f"missing field {err.args[0]!r}") from None
    nodes = []
    for pos, rn in enumerate(raw_nodes):
        if not isinstance(rn, dict):
            raise LatticeError(f"node {pos} is not an object")
        extra = set(rn) - _NODE_KEYS
        if extra:
            logger.warning("ignoring unknown node fields: %s", sorted(extra))
        try:
            nodes.append(Node(int(rn["id"]), str(rn["token"]), float(rn.get("forward", 1.0))))
        except (KeyError, TypeError, ValueError) as err:
            raise LatticeError(f"bad node {pos}: {err}") from None
    ids = [nd.id for nd in nodes]
    if ids != list(range(len(nodes))):
        raise LatticeError("node ids must be dense 0..n-1 in order")
    try:
        edges = tuple((int(a), int(b)) for a, b in raw_edges)
    except (TypeError, ValueError) as err:
        raise LatticeError(f"bad edge list: {err}") from None
    return Lattice(tuple(nodes), edges)


def parse_jsonl_line(line: str) -> Lattice:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as err:
        raise LatticeError(f"invalid JSON: {err.msg}") from None
    return lattice_from_dict(obj)


def iter_jsonl(stream: TextIO) -> Iterator[tuple[int, Lattice]]:
    """Yield (line_number, lattice) for non-blank lines; errors carry the line number."""
    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            yield lineno, parse_jsonl_line(line)
        except LatticeError as err:
            raise LatticeError(f"line {lineno}: {err}") from None


def read_jsonl(path) -> list[Lattice]:
    with open(path, encoding="utf-8") as fh:
        return [lat for _, lat in iter_jsonl(fh)]


def write_jsonl(path, lattices: Iterable[Lattice]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lat in lattices:
            fh.write(lat.to_json() + "\n")
