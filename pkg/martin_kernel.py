"""Martin kernels at vertices and at boundary direction classes."""
import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple

from errors import VertexOutsideHull
from harmonic_measure import cylinder_measure
from hitting_solver import EdgeF, F_between, require_transient
from tree_model import ExitEdge, Hull, TreeSpec, VertexAddress, confluent, subtree_infinite

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DirectionClass:
    """All ends leaving a hull through one exit vertex; their kernels agree on the hull."""

    exit_vertex: str
    exit_edges: Tuple[ExitEdge, ...]
    has_infinite_branch: bool
    cylinder_mass: float
    edge_masses: Tuple[float, ...]
    kernel_profile: Mapping[str, float]
    reference: str

    @property
    def max_profile(self) -> float:
        return max(self.kernel_profile.values())


def kernel_vertex(ef: EdgeF, o: VertexAddress, x: VertexAddress, y: VertexAddress) -> float:
    t = ef.spec
    require_transient(t, ef)
    return F_between(t, ef, x, y) / F_between(t, ef, o, y)


def kernel_profile(t: TreeSpec, ef: EdgeF, vertices, exit_vertex: str, o: str) -> Dict[str, float]:
    """k_o(x, xi) for every x in ``vertices`` and any end xi leaving through exit_vertex."""
    profile = {}
    for x in sorted(vertices):
        meet = confluent(t, x, exit_vertex, o)
        profile[x] = F_between(t, ef, x, meet) / F_between(t, ef, o, meet)
    return profile


def direction_classes(t: TreeSpec, ef: EdgeF, h: Hull, o: Optional[str] = None) -> List[DirectionClass]:
    o = h.anchor if o is None else o
    if o not in h:
        raise VertexOutsideHull(f"reference vertex {o} is not in the hull")
    require_transient(t, ef)
    classes = []
    for vertex in h.exit_vertices:
        exits = tuple(edge for edge in h.exits_at(vertex) if subtree_infinite(t, vertex, edge.target))
        if not exits:
            continue
        masses = tuple(cylinder_measure(t, ef, o, edge.target, o) for edge in exits)
        classes.append(DirectionClass(
            exit_vertex=vertex,
            exit_edges=exits,
            has_infinite_branch=True,
            cylinder_mass=sum(masses),
            edge_masses=masses,
            kernel_profile=kernel_profile(t, ef, h.vertices, vertex, o),
            reference=o,
        ))
    logger.debug("[KERNEL] %d direction classes for a hull of %d vertices", len(classes), len(h.vertices))
    return classes


def kernel_boundary(ef: EdgeF, o: str, x: str, c: DirectionClass) -> float:
    if c.reference != o:
        raise VertexOutsideHull(f"class was built for reference {c.reference}, not {o}")
    try:
        return c.kernel_profile[x]
    except KeyError:
        raise VertexOutsideHull(f"{x} is not in the hull of this direction class") from None


def kernel_sup(ef: EdgeF, o: VertexAddress, x: VertexAddress) -> float:
    """sup over vertices and ends of k_o(x, .), attained at y = x: 1 / F(o, x)."""
    require_transient(ef.spec, ef)
    return 1.0 / F_between(ef.spec, ef, o, x)


def kernel_sup_rebased(ef: EdgeF, x: VertexAddress, y: VertexAddress) -> float:
    """sup_z k_x(y, z) = 1 / F(x, y), the same bound after moving the base point to x."""
    return kernel_sup(ef, x, y)
