"""Harmonic measure of boundary cylinders, unit flux, and harmonic extensions.

The cylinder through w (seen from o) is the set of ends whose geodesic from o passes
w. Its harmonic measure follows from two hitting probabilities across the edge from
w to its parent, so no boundary iteration is needed.
"""
import json
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

from errors import BadAntichain, DegenerateCylinder, InvalidMeasure
from hitting_solver import EdgeF, F_between, require_transient
from tree_model import TailAddress, TreeSpec, VertexAddress, geodesic, parse_address

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CylinderFunction:
    cut: Tuple[Tuple[str, float], ...]
    default: float = 0.0
    reference: Optional[str] = None

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "CylinderFunction":
        if not isinstance(raw, dict):
            raise InvalidMeasure("cylinder function must be a JSON object")
        cut = []
        for item in raw.get("cut", []):
            if not isinstance(item, dict) or "vertex" not in item or "value" not in item:
                raise InvalidMeasure(f"cut entries need 'vertex' and 'value': {item!r}")
            cut.append((str(item["vertex"]), float(item["value"])))
        reference = raw.get("reference")
        return cls(tuple(cut), float(raw.get("default", 0.0)), reference)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "cut": [{"vertex": vertex, "value": value} for vertex, value in self.cut],
            "default": self.default,
        }
        if self.reference is not None:
            data["reference"] = self.reference
        return data


@dataclass(frozen=True)
class FluxReport:
    reference: str
    flows: Dict[Tuple[str, str], float]
    tail_flows: Dict[str, float]
    residuals: Dict[str, float]
    total_out: float

    @property
    def max_residual(self) -> float:
        return max(self.residuals.values(), default=0.0)


def in_cylinder(t: TreeSpec, x: VertexAddress, w: VertexAddress, o: str) -> bool:
    return w in geodesic(t, o, x)


def escape_into(t: TreeSpec, ef: EdgeF, w: VertexAddress, o: Optional[str] = None) -> float:
    """nu_w of the cylinder through w: leave toward infinity on w's side of its parent edge."""
    o = t.root if o is None else o
    require_transient(t, ef)
    path = geodesic(t, o, w)
    if len(path) < 2:
        raise DegenerateCylinder("the cylinder vertex must differ from the reference vertex")
    parent = path[-2]
    away = ef.directed(w, parent)
    back = ef.directed(parent, w)
    if ef.is_one(away):
        if ef.is_one(back):
            raise DegenerateCylinder(f"both sides of the edge {parent}-{w} are recurrent")
        return 0.0
    return (1.0 - away) / (1.0 - away * back)


def cylinder_measure(t: TreeSpec, ef: EdgeF, x: VertexAddress, w: VertexAddress, o: Optional[str] = None) -> float:
    """
    Harmonic measure, seen from x, of the ends passing through w.

    Args:
        t: tree description
        ef: solved hitting probabilities
        x: starting vertex
        w: cylinder vertex (different from o)
        o: reference vertex, the root by default

    Returns:
        probability in [0, 1]
    """
    o = t.root if o is None else o
    a = escape_into(t, ef, w, o)
    hit = F_between(t, ef, x, w)
    if in_cylinder(t, x, w, o):
        value = 1.0 - hit * (1.0 - a)
    else:
        value = hit * a
    return min(1.0, max(0.0, value))


def flux(t: TreeSpec, ef: EdgeF, o: Optional[str] = None) -> FluxReport:
    o = t.require_core(t.root if o is None else o)
    require_transient(t, ef)
    flows: Dict[Tuple[str, str], float] = {}
    tail_flows: Dict[str, float] = {}
    parent: Dict[str, Optional[str]] = {o: None}
    order = [o]
    for vertex in order:
        for neighbor in t.core_neighbors(vertex):
            if neighbor not in parent:
                parent[neighbor] = vertex
                order.append(neighbor)
                flows[(vertex, neighbor)] = cylinder_measure(t, ef, o, neighbor, o)
        for tail in t.tails_at(vertex):
            child_mass = cylinder_measure(t, ef, o, TailAddress(tail.id, 1), o)
            tail_flows[tail.id] = tail.branches * child_mass

    residuals: Dict[str, float] = {}
    for vertex in order:
        inflow = 1.0 if parent[vertex] is None else flows[(parent[vertex], vertex)]
        outflow = sum(flows[(vertex, child)] for child in t.core_neighbors(vertex) if parent.get(child) == vertex)
        outflow += sum(tail_flows[tail.id] for tail in t.tails_at(vertex))
        residuals[vertex] = abs(inflow - outflow)

    total_out = sum(flows[(o, child)] for child in t.core_neighbors(o))
    total_out += sum(tail_flows[tail.id] for tail in t.tails_at(o))
    report = FluxReport(o, flows, tail_flows, residuals, total_out)
    logger.debug("[FLUX] total out of %s: %.12f, max residual %.3e", o, total_out, report.max_residual)
    return report


def validate_cylinder_function(t: TreeSpec, phi: CylinderFunction) -> str:
    """Check the cut is an antichain of core vertices; returns the reference vertex."""
    o = t.require_core(parse_address(t, t.root if phi.reference is None else phi.reference))
    vertices = [t.require_core(parse_address(t, vertex)) for vertex, _ in phi.cut]
    if len(set(vertices)) != len(vertices):
        raise BadAntichain("cut vertices must be distinct")
    if o in vertices:
        raise BadAntichain(f"the reference vertex {o} cannot be a cut vertex")
    for value in [phi.default] + [value for _, value in phi.cut]:
        if not math.isfinite(value):
            raise BadAntichain("cylinder function values must be finite")
    for w in vertices:
        for other in vertices:
            if other != w and w in geodesic(t, o, other):
                raise BadAntichain(f"{w} lies on the geodesic from {o} to {other}")
    return o


def load_cylinder_function(path: str, t: TreeSpec) -> CylinderFunction:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            phi = CylinderFunction.from_dict(json.load(handle))
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise InvalidMeasure(f"cannot read cylinder function {path}: {exc}") from exc
    validate_cylinder_function(t, phi)
    return phi


def _extension_value(t: TreeSpec, ef: EdgeF, phi: CylinderFunction, o: str, x: VertexAddress) -> float:
    covered = 0.0
    value = 0.0
    for w, weight in phi.cut:
        mass = cylinder_measure(t, ef, x, w, o)
        covered += mass
        value += weight * mass
    return value + phi.default * (1.0 - covered)


def harmonic_extension(
    t: TreeSpec, ef: EdgeF, phi: CylinderFunction, query: Sequence[VertexAddress]
) -> List[float]:
    o = validate_cylinder_function(t, phi)
    require_transient(t, ef)
    return [_extension_value(t, ef, phi, o, t.require(x)) for x in query]


def harmonicity_residual(t: TreeSpec, ef: EdgeF, phi: CylinderFunction, vertices: Sequence[str]) -> float:
    o = validate_cylinder_function(t, phi)
    require_transient(t, ef)
    worst = 0.0
    for x in vertices:
        t.require_core(x)
        here = _extension_value(t, ef, phi, o, x)
        averaged = sum(t.p(x, y) * _extension_value(t, ef, phi, o, y) for y in t.core_neighbors(x))
        for tail in t.tails_at(x):
            # siblings of the canonical child see the core identically
            averaged += tail.outflow * _extension_value(t, ef, phi, o, TailAddress(tail.id, 1))
        worst = max(worst, abs(here - averaged))
    return worst
