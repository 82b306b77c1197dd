"""Finite descriptions of infinite trees and the geometry of their vertices.

A tree is a finite core (an ordinary finite tree with transition probabilities on
both directions of every edge) plus self-similar tails hanging off core vertices.
Tail vertices are addressed only along each tail's canonical ray.
"""
import json
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Set, Tuple, Union

import networkx as nx

from config import RowSumTolerance
from errors import (
    InvalidSpec,
    NonCoreSupport,
    NonPositiveEdge,
    NotAdjacent,
    NotATree,
    ProbabilitySum,
    SpecIssue,
    UnknownVertex,
)

logger = logging.getLogger(__name__)

RAY = "ray"
HOMOGENEOUS = "homogeneous"
TAIL_KINDS = (RAY, HOMOGENEOUS)
# marks every row as unreliable when a bad entry cannot be placed at a vertex
ANY_ROW = "*"

_ISSUE_ERRORS = {
    "cycle": NotATree,
    "disconnected": NotATree,
    "self_loop": NotATree,
    "row_sum": ProbabilitySum,
    "tail_sum": ProbabilitySum,
    "non_positive": NonPositiveEdge,
}


@dataclass(frozen=True)
class EdgeSpec:
    a: str
    b: str
    p_ab: float
    p_ba: float


@dataclass(frozen=True)
class TailSpec:
    id: str
    attach: str
    kind: str
    entry_p: float
    forward: Optional[float] = None
    back: Optional[float] = None
    branching: int = 1
    child_p: Optional[float] = None
    back_p: Optional[float] = None
    # levels of this tail already unrolled into the core
    offset: int = 0

    @property
    def branches(self) -> int:
        return 1 if self.kind == RAY else self.branching

    @property
    def step_p(self) -> float:
        """Probability of moving to one particular child inside the tail."""
        return self.forward if self.kind == RAY else self.child_p

    @property
    def down_p(self) -> float:
        """Probability of moving back toward the core inside the tail."""
        return self.back if self.kind == RAY else self.back_p

    @property
    def outflow(self) -> float:
        return self.branches * self.entry_p

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "id": self.id,
            "attach": self.attach,
            "kind": self.kind,
            "entry_p": self.entry_p,
        }
        if self.kind == RAY:
            data.update({"forward": self.forward, "back": self.back})
        else:
            data.update({"branching": self.branching, "child_p": self.child_p, "back_p": self.back_p})
        if self.offset:
            data["offset"] = self.offset
        return data


@dataclass(frozen=True, order=True)
class TailAddress:
    tail: str
    depth: int

    def __str__(self) -> str:
        return f"{self.tail}@{self.depth}"


VertexAddress = Union[str, TailAddress]


def address_key(address: VertexAddress) -> Tuple[int, str, int]:
    if isinstance(address, TailAddress):
        return (1, address.tail, address.depth)
    return (0, address, 0)


def format_address(address: VertexAddress) -> str:
    return str(address)


@dataclass(frozen=True)
class TreeSpec:
    root: str
    edges: Tuple[EdgeSpec, ...] = ()
    tails: Tuple[TailSpec, ...] = ()

    @cached_property
    def graph(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_node(self.root)
        for edge in self.edges:
            graph.add_edge(edge.a, edge.b)
        return graph

    @cached_property
    def core_vertices(self) -> FrozenSet[str]:
        return frozenset(self.graph.nodes)

    @cached_property
    def _probabilities(self) -> Dict[Tuple[str, str], float]:
        table: Dict[Tuple[str, str], float] = {}
        for edge in self.edges:
            table[(edge.a, edge.b)] = edge.p_ab
            table[(edge.b, edge.a)] = edge.p_ba
        return table

    @cached_property
    def _tails_by_id(self) -> Dict[str, TailSpec]:
        return {tail.id: tail for tail in self.tails}

    @cached_property
    def _tails_by_vertex(self) -> Dict[str, Tuple[TailSpec, ...]]:
        grouped: Dict[str, List[TailSpec]] = {}
        for tail in self.tails:
            grouped.setdefault(tail.attach, []).append(tail)
        return {vertex: tuple(items) for vertex, items in grouped.items()}

    @cached_property
    def _path_cache(self) -> Dict[str, Dict[str, List[str]]]:
        return {}

    def p(self, x: str, y: str) -> float:
        return self._probabilities.get((x, y), 0.0)

    def core_neighbors(self, x: str) -> List[str]:
        return sorted(self.graph.neighbors(x))

    def tails_at(self, x: str) -> Tuple[TailSpec, ...]:
        return self._tails_by_vertex.get(x, ())

    def tail(self, tail_id: str) -> TailSpec:
        try:
            return self._tails_by_id[tail_id]
        except KeyError:
            raise UnknownVertex(f"unknown tail id '{tail_id}'") from None

    def has_tail(self, tail_id: str) -> bool:
        return tail_id in self._tails_by_id

    def is_core(self, address: VertexAddress) -> bool:
        return isinstance(address, str) and address in self.core_vertices

    def require(self, address: VertexAddress) -> VertexAddress:
        if isinstance(address, TailAddress):
            if address.depth < 1:
                raise UnknownVertex(f"tail depth must be >= 1, got {address}")
            self.tail(address.tail)
            return address
        if address not in self.core_vertices:
            raise UnknownVertex(f"unknown vertex '{address}'")
        return address

    def require_core(self, address: VertexAddress) -> str:
        if isinstance(address, TailAddress):
            raise NonCoreSupport(f"{address} is a tail vertex; unroll the tail to use it here")
        return self.require(address)

    def row_sum(self, x: str) -> float:
        total = sum(self.p(x, y) for y in self.core_neighbors(x))
        return total + sum(tail.outflow for tail in self.tails_at(x))

    def core_path(self, x: str, y: str) -> List[str]:
        paths = self._path_cache.get(x)
        if paths is None:
            paths = nx.single_source_shortest_path(self.graph, x)
            self._path_cache[x] = paths
        return list(paths[y])


@dataclass(frozen=True)
class ExitEdge:
    source: str
    target: VertexAddress
    kind: str
    # first-level child index inside a homogeneous tail (0 is the canonical child)
    sibling: int = 0


@dataclass(frozen=True)
class Hull:
    anchor: str
    vertices: FrozenSet[str]
    edges: Tuple[Tuple[str, str], ...]
    exit_edges: Tuple[ExitEdge, ...]
    exit_vertices: Tuple[str, ...]

    def __contains__(self, vertex: object) -> bool:
        return vertex in self.vertices

    def exits_at(self, vertex: str) -> List[ExitEdge]:
        return [edge for edge in self.exit_edges if edge.source == vertex]


# --- loading and validation -------------------------------------------------

def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _check_probability(issues: List[SpecIssue], value: Any, location: str, allow_one: bool = True) -> bool:
    if not _is_number(value):
        issues.append(SpecIssue("structure", location, f"expected a number, got {value!r}"))
    elif value <= 0:
        issues.append(SpecIssue("non_positive", location, f"probability must be > 0, got {value}"))
    elif value > 1 or (value == 1 and not allow_one):
        issues.append(SpecIssue("range", location, f"probability out of range: {value}"))
    else:
        return True
    return False


def _parse_tail(raw: Any, index: int, issues: List[SpecIssue], bad_rows: Set[str]) -> Optional[TailSpec]:
    """Parse one tail; rows it cannot contribute to reliably are added to ``bad_rows``."""
    where = f"tails[{index}]"
    if not isinstance(raw, dict):
        issues.append(SpecIssue("structure", where, "tail must be an object"))
        bad_rows.add(ANY_ROW)
        return None
    tail_id, attach, kind = raw.get("id"), raw.get("attach"), raw.get("kind")
    if not isinstance(attach, str):
        issues.append(SpecIssue("structure", where, "attach must be a vertex id"))
        bad_rows.add(ANY_ROW)
        return None
    if not isinstance(tail_id, str) or not tail_id:
        issues.append(SpecIssue("structure", where, "tail id must be a non-empty string"))
        bad_rows.add(attach)
        return None
    where = f"tail '{tail_id}'"
    if kind not in TAIL_KINDS:
        issues.append(SpecIssue("structure", where, f"kind must be one of {TAIL_KINDS}, got {kind!r}"))
        bad_rows.add(attach)
        return None

    entry_p = raw.get("entry_p")
    if not _check_probability(issues, entry_p, f"{where}.entry_p"):
        bad_rows.add(attach)
    offset = raw.get("offset", 0)
    if not isinstance(offset, int) or isinstance(offset, bool) or offset < 0:
        issues.append(SpecIssue("structure", f"{where}.offset", "offset must be a non-negative integer"))
        offset = 0

    if kind == RAY:
        forward, back = raw.get("forward"), raw.get("back")
        _check_probability(issues, forward, f"{where}.forward", allow_one=False)
        _check_probability(issues, back, f"{where}.back", allow_one=False)
        if _is_number(forward) and _is_number(back) and abs(forward + back - 1.0) > RowSumTolerance:
            issues.append(SpecIssue("tail_sum", where, f"forward + back = {forward + back}, expected 1"))
        return TailSpec(tail_id, attach, RAY, entry_p, forward=forward, back=back, offset=offset)

    branching, child_p, back_p = raw.get("branching"), raw.get("child_p"), raw.get("back_p")
    if not isinstance(branching, int) or isinstance(branching, bool) or branching < 1:
        issues.append(SpecIssue("structure", f"{where}.branching", "branching must be an integer >= 1"))
        bad_rows.add(attach)
        return None
    _check_probability(issues, child_p, f"{where}.child_p", allow_one=False)
    _check_probability(issues, back_p, f"{where}.back_p", allow_one=False)
    if _is_number(child_p) and _is_number(back_p):
        total = back_p + branching * child_p
        if abs(total - 1.0) > RowSumTolerance:
            issues.append(SpecIssue("tail_sum", where, f"back_p + b*child_p = {total}, expected 1"))
    return TailSpec(
        tail_id, attach, HOMOGENEOUS, entry_p,
        branching=branching, child_p=child_p, back_p=back_p, offset=offset,
    )


def validate_spec(raw: Dict[str, Any]) -> TreeSpec:
    """Validate a raw tree description and build the immutable TreeSpec.

    Every violated invariant is collected; the raised exception is the class of
    the first issue and carries all of them in ``issues``.
    """
    issues: List[SpecIssue] = []
    if not isinstance(raw, dict):
        raise InvalidSpec([SpecIssue("structure", "document", "tree description must be a JSON object")])
    root = raw.get("root")
    if not isinstance(root, str) or not root:
        raise InvalidSpec([SpecIssue("structure", "root", "root must be a non-empty string")])
    raw_edges = raw.get("edges", [])
    raw_tails = raw.get("tails", [])
    if not isinstance(raw_edges, list) or not isinstance(raw_tails, list):
        raise InvalidSpec([SpecIssue("structure", "document", "edges and tails must be lists")])

    edges: List[EdgeSpec] = []
    seen_pairs = set()
    bad_rows: Set[str] = set()
    for index, item in enumerate(raw_edges):
        where = f"edges[{index}]"
        if not isinstance(item, dict) or not isinstance(item.get("a"), str) or not isinstance(item.get("b"), str):
            issues.append(SpecIssue("structure", where, "edge needs string endpoints 'a' and 'b'"))
            bad_rows.add(ANY_ROW)
            continue
        a, b = item["a"], item["b"]
        where = f"edge {a}-{b}"
        if a == b:
            issues.append(SpecIssue("self_loop", where, "an edge cannot join a vertex to itself"))
            bad_rows.add(a)
            continue
        pair = frozenset((a, b))
        if pair in seen_pairs:
            issues.append(SpecIssue("cycle", where, "edge listed twice"))
            bad_rows.update((a, b))
            continue
        seen_pairs.add(pair)
        if not _check_probability(issues, item.get("p_ab"), f"{where}.p_ab"):
            bad_rows.add(a)
        if not _check_probability(issues, item.get("p_ba"), f"{where}.p_ba"):
            bad_rows.add(b)
        edges.append(EdgeSpec(a, b, item.get("p_ab"), item.get("p_ba")))

    tails: List[TailSpec] = []
    tail_ids = set()
    for index, item in enumerate(raw_tails):
        tail = _parse_tail(item, index, issues, bad_rows)
        if tail is None:
            continue
        if tail.id in tail_ids:
            issues.append(SpecIssue("duplicate_tail", f"tail '{tail.id}'", "tail ids must be unique"))
            bad_rows.add(tail.attach)
            continue
        tail_ids.add(tail.id)
        tails.append(tail)

    spec = TreeSpec(root, tuple(edges), tuple(tails))
    graph = spec.graph
    if not nx.is_connected(graph):
        parts = sorted(sorted(component) for component in nx.connected_components(graph))
        issues.append(SpecIssue("disconnected", "core", f"components: {parts}"))
    elif graph.number_of_edges() != graph.number_of_nodes() - 1:
        cycle = [u for u, _ in nx.find_cycle(graph)]
        issues.append(SpecIssue("cycle", "core", f"cycle through {cycle}"))

    for tail in tails:
        if tail.attach not in spec.core_vertices:
            issues.append(SpecIssue("unknown_attach", f"tail '{tail.id}'", f"attach vertex '{tail.attach}' is not a core vertex"))

    # rows holding an invalid entry already have an issue; every other row is summed
    if ANY_ROW not in bad_rows:
        for vertex in sorted(spec.core_vertices - bad_rows):
            total = spec.row_sum(vertex)
            if abs(total - 1.0) > RowSumTolerance:
                issues.append(SpecIssue("row_sum", f"vertex '{vertex}'", f"outgoing probabilities sum to {total!r}"))

    if issues:
        error_class = _ISSUE_ERRORS.get(issues[0].kind, InvalidSpec)
        raise error_class(issues)
    logger.debug("[TREE] validated spec: %d core vertices, %d tails", len(spec.core_vertices), len(tails))
    return spec


def load_spec(path: str) -> TreeSpec:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except json.JSONDecodeError as exc:
        raise InvalidSpec([SpecIssue("structure", path, f"not valid JSON: {exc}")]) from exc
    except OSError as exc:
        raise InvalidSpec([SpecIssue("structure", path, f"cannot read file: {exc}")]) from exc
    return validate_spec(raw)


def spec_to_dict(t: TreeSpec) -> Dict[str, Any]:
    return {
        "root": t.root,
        "edges": [{"a": e.a, "b": e.b, "p_ab": e.p_ab, "p_ba": e.p_ba} for e in t.edges],
        "tails": [tail.to_dict() for tail in t.tails],
    }


def parse_address(t: TreeSpec, text: str) -> VertexAddress:
    if text in t.core_vertices:
        return text
    tail_id, sep, depth = text.rpartition("@")
    if sep and t.has_tail(tail_id) and depth.isdigit() and int(depth) >= 1:
        return TailAddress(tail_id, int(depth))
    raise UnknownVertex(f"unknown vertex '{text}' (tail vertices are written TAIL@DEPTH)")


# --- geometry ---------------------------------------------------------------

def _lift(t: TreeSpec, address: VertexAddress) -> Tuple[str, List[VertexAddress]]:
    """Core vertex nearest to ``address`` and the tail vertices climbed to reach it."""
    if isinstance(address, TailAddress):
        climb: List[VertexAddress] = [TailAddress(address.tail, d) for d in range(address.depth, 0, -1)]
        return t.tail(address.tail).attach, climb
    return address, []


def geodesic(t: TreeSpec, x: VertexAddress, y: VertexAddress) -> List[VertexAddress]:
    t.require(x)
    t.require(y)
    if x == y:
        return [x]
    if isinstance(x, TailAddress) and isinstance(y, TailAddress) and x.tail == y.tail:
        step = 1 if y.depth > x.depth else -1
        return [TailAddress(x.tail, d) for d in range(x.depth, y.depth + step, step)]
    core_x, climb_x = _lift(t, x)
    core_y, climb_y = _lift(t, y)
    return climb_x + t.core_path(core_x, core_y) + list(reversed(climb_y))


def confluent(t: TreeSpec, x: VertexAddress, y: VertexAddress, z: VertexAddress) -> VertexAddress:
    common = set(geodesic(t, x, y)) & set(geodesic(t, y, z)) & set(geodesic(t, z, x))
    if len(common) != 1:
        raise NotATree(f"geodesics of {x}, {y}, {z} meet in {len(common)} vertices")
    return common.pop()


def adjacent(t: TreeSpec, x: VertexAddress, y: VertexAddress) -> bool:
    if isinstance(x, TailAddress) and isinstance(y, TailAddress):
        return x.tail == y.tail and abs(x.depth - y.depth) == 1
    if isinstance(x, TailAddress) or isinstance(y, TailAddress):
        core, deep = (y, x) if isinstance(x, TailAddress) else (x, y)
        return deep.depth == 1 and t.tail(deep.tail).attach == core
    return t.graph.has_edge(x, y)


def _other_side_infinite(t: TreeSpec, tail: TailSpec) -> bool:
    """Whether a tail vertex sees infinitely many vertices when looking toward the core."""
    return tail.branches >= 2 or len(t.tails) > 1


def _core_branch_has_tail(t: TreeSpec, x: str, y: str) -> bool:
    stack, seen = [y], {x, y}
    while stack:
        vertex = stack.pop()
        if t.tails_at(vertex):
            return True
        for neighbor in t.graph.neighbors(vertex):
            if neighbor not in seen:
                seen.add(neighbor)
                stack.append(neighbor)
    return False


def subtree_infinite(t: TreeSpec, x: VertexAddress, y: VertexAddress) -> bool:
    """True iff the branch beyond ``y`` as seen from ``x`` is infinite."""
    t.require(x)
    t.require(y)
    if not adjacent(t, x, y):
        raise NotAdjacent(f"{x} and {y} are not neighbours")
    if isinstance(y, TailAddress):
        if isinstance(x, TailAddress) and y.depth < x.depth:
            return _other_side_infinite(t, t.tail(y.tail))
        return True
    if isinstance(x, TailAddress):
        return _other_side_infinite(t, t.tail(x.tail))
    return _core_branch_has_tail(t, x, y)


def hull(t: TreeSpec, generators: Iterable[VertexAddress], anchor: Optional[str] = None) -> Hull:
    """Geodesic closure of ``generators``, the root and ``anchor``, with its exit edges."""
    anchor = t.require_core(anchor if anchor is not None else t.root)
    members = {t.require_core(vertex) for vertex in generators}
    members.add(t.root)
    vertices = {anchor}
    for vertex in members:
        vertices.update(t.core_path(anchor, vertex))

    ordered = sorted(vertices)
    edges = tuple(sorted(
        (u, v) for u in ordered for v in t.core_neighbors(u) if v in vertices and u < v
    ))
    exits: List[ExitEdge] = []
    for vertex in ordered:
        for neighbor in t.core_neighbors(vertex):
            if neighbor not in vertices:
                exits.append(ExitEdge(vertex, neighbor, "core"))
        for tail in t.tails_at(vertex):
            for child in range(tail.branches):
                exits.append(ExitEdge(vertex, TailAddress(tail.id, 1), "tail", child))
    exit_vertices = tuple(dict.fromkeys(edge.source for edge in exits))
    return Hull(anchor, frozenset(vertices), edges, tuple(exits), exit_vertices)


def end_count(t: TreeSpec) -> float:
    if any(tail.branches >= 2 for tail in t.tails):
        return math.inf
    return float(len(t.tails))


# --- unrolling ----------------------------------------------------------------

def unroll_tail(t: TreeSpec, tail_id: str) -> TreeSpec:
    """Move the first level of a tail into the core; the described walk is unchanged."""
    tail = t.tail(tail_id)
    level = tail.offset + 1
    canonical = f"{tail.id}.{level}"
    children = [canonical] + [f"{canonical}~{i}" for i in range(2, tail.branches + 1)]
    clashes = [name for name in children if name in t.core_vertices]
    if clashes:
        raise InvalidSpec([SpecIssue("name_clash", f"tail '{tail.id}'", f"unrolled names already used: {clashes}")])

    edges = list(t.edges)
    replacement: List[TailSpec] = []
    for index, child in enumerate(children):
        edges.append(EdgeSpec(tail.attach, child, tail.entry_p, tail.down_p))
        child_id = tail.id if index == 0 else f"{tail.id}~{level}.{index + 1}"
        offset = level if index == 0 else 0
        if tail.kind == RAY:
            replacement.append(TailSpec(child_id, child, RAY, tail.forward, forward=tail.forward, back=tail.back, offset=offset))
        else:
            replacement.append(TailSpec(
                child_id, child, HOMOGENEOUS, tail.child_p,
                branching=tail.branching, child_p=tail.child_p, back_p=tail.back_p, offset=offset,
            ))

    tails: List[TailSpec] = []
    for existing in t.tails:
        tails.extend(replacement if existing.id == tail.id else [existing])
    logger.debug("[TREE] unrolled tail %s at level %d into %d core vertices", tail.id, level, len(children))
    return validate_spec(spec_to_dict(TreeSpec(t.root, tuple(edges), tuple(tails))))


def unroll(t: TreeSpec, levels: int) -> TreeSpec:
    for _ in range(levels):
        for tail_id in [tail.id for tail in t.tails]:
            t = unroll_tail(t, tail_id)
    return t
