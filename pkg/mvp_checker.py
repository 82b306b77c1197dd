"""Mean value property checks for signed measures on trees.

A measure mu has the mean value property for a function h (with respect to o) when
L(h, mu)(o) = sum_x mu(x) h(x) - mu(X) h(o) vanishes. Bounded harmonic functions
give the weak property, all integrable harmonic functions the strong one; on a
tree both reduce to Martin kernels evaluated on finitely many direction classes.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from config import MvpSettings
from errors import (
    InconsistentConditions,
    InvalidMeasure,
    MissingValue,
    NotIntegrable,
)
from harmonic_measure import cylinder_measure, flux
from hitting_solver import BranchEntry, EdgeF, F_between, branch_scan, require_transient, solve_hitting
from martin_kernel import DirectionClass, direction_classes, kernel_profile
from tree_model import (
    TailAddress,
    TreeSpec,
    VertexAddress,
    address_key,
    confluent,
    end_count,
    hull,
    parse_address,
    subtree_infinite,
    unroll_tail,
)

logger = logging.getLogger(__name__)

SINGLE_END_WARNING = (
    "the tree has a single end: its Martin boundary is one point, "
    "so weak and strong verdicts are reported without the trees1 equivalence"
)


@dataclass(frozen=True)
class SignedMeasure:
    weights: Mapping[str, float]
    reference: Optional[str] = None

    @property
    def support(self) -> List[str]:
        return sorted(vertex for vertex, weight in self.weights.items() if weight != 0)

    @property
    def total_mass(self) -> float:
        return math.fsum(self.weights.values())

    @property
    def total_variation(self) -> float:
        return math.fsum(abs(weight) for weight in self.weights.values())

    def scaled(self, factor: float) -> "SignedMeasure":
        return SignedMeasure({vertex: factor * weight for vertex, weight in self.weights.items()}, self.reference)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"weights": dict(sorted(self.weights.items()))}
        if self.reference is not None:
            data["reference"] = self.reference
        return data


@dataclass(frozen=True)
class GeometricTailMeasure:
    """A core measure plus weight head * ratio**(n-1) at depth n of a tail's canonical ray."""

    base: SignedMeasure
    tail_id: str
    ratio: float
    head: float

    @property
    def reference(self) -> Optional[str]:
        return self.base.reference

    @property
    def total_mass(self) -> float:
        return self.base.total_mass + self.head / (1.0 - self.ratio)

    @property
    def total_variation(self) -> float:
        return self.base.total_variation + abs(self.head) / (1.0 - abs(self.ratio))

    def weight(self, depth: int) -> float:
        return self.head * self.ratio ** (depth - 1)

    def to_dict(self) -> Dict[str, Any]:
        data = self.base.to_dict()
        data["tail"] = {"id": self.tail_id, "ratio": self.ratio, "head": self.head}
        return data


AnyMeasure = Union[SignedMeasure, GeometricTailMeasure]


@dataclass(frozen=True)
class ClassResidual:
    label: str
    exit_vertex: Optional[VertexAddress]
    residual: float
    cylinder_mass: float
    relevant_for_weak: bool
    relevant_for_strong: bool
    passed: bool
    direction: Optional[DirectionClass] = None


@dataclass(frozen=True)
class MvpVerdict:
    weak: bool
    # None when the strong property is not decided (geometric tail measures)
    strong: Optional[bool]
    classes: Tuple[ClassResidual, ...]
    tolerance: float
    scale: float
    weak_witness: Optional[ClassResidual] = None
    strong_witness: Optional[ClassResidual] = None
    warnings: Tuple[str, ...] = ()


@dataclass(frozen=True)
class CylinderVerdict:
    passed: bool
    residuals: Tuple[Tuple[str, float], ...]
    tolerance: float
    scale: float
    witness: Optional[str] = None


@dataclass(frozen=True)
class Trees1Report:
    verdict: bool
    conditions: Mapping[str, bool]
    branch_witnesses: Tuple[BranchEntry, ...]
    zero_mass_cylinders: Tuple[VertexAddress, ...]
    zero_flux_edges: Tuple[Tuple[str, VertexAddress], ...]
    weak_strong_equivalent: Optional[bool]
    counterexample: Optional[Tuple[TreeSpec, SignedMeasure]] = None
    warnings: Tuple[str, ...] = field(default_factory=tuple)


# --- loading and validation ---------------------------------------------------

def validate_measure(t: TreeSpec, mu: SignedMeasure, allow_empty: bool = False) -> None:
    """Support must sit on core vertices; weights must be finite."""
    for vertex, weight in mu.weights.items():
        t.require_core(parse_address(t, vertex))
        if not isinstance(weight, (int, float)) or not math.isfinite(weight):
            raise InvalidMeasure(f"weight at {vertex} must be a finite number, got {weight!r}")
    if mu.reference is not None:
        t.require_core(parse_address(t, mu.reference))
    if not allow_empty and mu.total_variation <= 0:
        raise InvalidMeasure("the measure has empty support")


def validate_tail_measure(t: TreeSpec, mu: GeometricTailMeasure) -> None:
    validate_measure(t, mu.base, allow_empty=True)
    t.tail(mu.tail_id)
    if not (-1.0 < mu.ratio < 1.0):
        raise InvalidMeasure(f"tail ratio must lie in (-1, 1), got {mu.ratio}")
    if not math.isfinite(mu.head):
        raise InvalidMeasure("tail head weight must be finite")
    if mu.total_variation <= 0:
        raise InvalidMeasure("the measure has empty support")


def measure_from_dict(raw: Dict[str, Any]) -> AnyMeasure:
    if not isinstance(raw, dict) or not isinstance(raw.get("weights", {}), dict):
        raise InvalidMeasure("a measure is an object with a 'weights' map")
    try:
        weights = {str(vertex): float(weight) for vertex, weight in raw.get("weights", {}).items()}
        base = SignedMeasure(weights, raw.get("reference"))
        tail = raw.get("tail")
        if tail is None:
            return base
        return GeometricTailMeasure(base, str(tail["id"]), float(tail["ratio"]), float(tail["head"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidMeasure(f"malformed measure: {exc}") from exc


def load_measure(path: str, t: TreeSpec) -> AnyMeasure:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidMeasure(f"cannot read measure {path}: {exc}") from exc
    mu = measure_from_dict(raw)
    if isinstance(mu, GeometricTailMeasure):
        validate_tail_measure(t, mu)
    else:
        validate_measure(t, mu)
    return mu


# --- the L operator and finite measures -----------------------------------------

def L_value(h: Mapping[str, float], mu: SignedMeasure, o: str) -> float:
    """L(h, mu)(o) = sum_x mu(x) h(x) - mu(X) h(o)."""
    missing = [vertex for vertex in mu.support + [o] if vertex not in h]
    if missing:
        raise MissingValue(f"h is not given at {missing}")
    return math.fsum([mu.weights[x] * h[x] for x in mu.support] + [-mu.total_mass * h[o]])


def _reference(t: TreeSpec, mu: AnyMeasure, o: Optional[str]) -> str:
    chosen = o if o is not None else (mu.reference if mu.reference is not None else t.root)
    return t.require_core(chosen)


def _single_end_warnings(t: TreeSpec) -> Tuple[str, ...]:
    if end_count(t) == 1:
        logger.warning("[MVP] %s", SINGLE_END_WARNING)
        return (SINGLE_END_WARNING,)
    return ()


def _first_failure(classes: Sequence[ClassResidual], relevant: str) -> Optional[ClassResidual]:
    for item in classes:
        if getattr(item, relevant) and not item.passed:
            return item
    return None


def classify_mvp(
    t: TreeSpec, ef: EdgeF, mu: SignedMeasure, o: Optional[str] = None, tol: Optional[float] = None
) -> MvpVerdict:
    """
    Decide the weak and strong mean value properties of a finitely supported measure.

    Each direction class of the hull of supp(mu) and o contributes the residual
    L(k_o(., xi), mu)(o). The strong property needs every class to vanish; the weak
    one only classes of positive harmonic measure.
    """
    tol = MvpSettings["tol"] if tol is None else tol
    validate_measure(t, mu)
    o = _reference(t, mu, o)
    require_transient(t, ef)
    h = hull(t, mu.support, anchor=o)
    classes = direction_classes(t, ef, h, o)
    max_profile = max((c.max_profile for c in classes), default=1.0)
    scale = tol * mu.total_variation * max_profile

    results = []
    for c in classes:
        residual = L_value(c.kernel_profile, mu, o)
        results.append(ClassResidual(
            label=f"exit:{c.exit_vertex}",
            exit_vertex=c.exit_vertex,
            residual=residual,
            cylinder_mass=c.cylinder_mass,
            relevant_for_weak=c.cylinder_mass > MvpSettings["mass_threshold"],
            relevant_for_strong=c.has_infinite_branch,
            passed=abs(residual) <= scale,
            direction=c,
        ))
    weak_witness = _first_failure(results, "relevant_for_weak")
    strong_witness = _first_failure(results, "relevant_for_strong")
    verdict = MvpVerdict(
        weak=weak_witness is None,
        strong=strong_witness is None,
        classes=tuple(results),
        tolerance=tol,
        scale=scale,
        weak_witness=weak_witness,
        strong_witness=strong_witness,
        warnings=_single_end_warnings(t),
    )
    if strong_witness is not None:
        logger.info("[MVP] class %s fails with residual %.6g", strong_witness.label, strong_witness.residual)
    return verdict


def cylinder_mvp(
    t: TreeSpec, ef: EdgeF, mu: SignedMeasure, o: Optional[str] = None, tol: Optional[float] = None
) -> CylinderVerdict:
    """L(nu_.(A), mu)(o) for every cylinder of the hull and every exit child."""
    tol = MvpSettings["tol"] if tol is None else tol
    validate_measure(t, mu)
    o = _reference(t, mu, o)
    require_transient(t, ef)
    h = hull(t, mu.support, anchor=o)
    family: List[VertexAddress] = [vertex for vertex in sorted(h.vertices) if vertex != o]
    family += list(dict.fromkeys(edge.target for edge in h.exit_edges))

    scale = tol * mu.total_variation
    residuals = []
    for w in family:
        values = {x: cylinder_measure(t, ef, x, w, o) for x in set(mu.support) | {o}}
        residuals.append((str(w), L_value(values, mu, o)))
    witness = next((label for label, value in residuals if abs(value) > scale), None)
    return CylinderVerdict(witness is None, tuple(residuals), tol, scale, witness)


# --- the branch / cylinder / flux equivalence ---------------------------------------

def recurrent_branch_counterexample(t: TreeSpec, ef: EdgeF) -> Tuple[TreeSpec, SignedMeasure]:
    """
    Build delta_x - delta_y from an infinite branch T_{x,y} that the walk leaves
    with probability zero; it has the weak mean value property but not the strong one.
    Tail witnesses are unrolled one level first, so the returned tree may differ from t.
    """
    witnesses = branch_scan(t, ef).witnesses
    if not witnesses:
        raise InconsistentConditions("every infinite branch is transient; there is no counterexample")
    core = [w for w in witnesses if t.is_core(w.source) and t.is_core(w.target)]
    if core:
        deepest = max(core, key=lambda w: (len(t.core_path(t.root, w.target)), address_key(w.source)))
        return t, SignedMeasure({deepest.source: 1.0, deepest.target: -1.0}, t.root)

    witness = witnesses[0]
    tail_end = witness.target if isinstance(witness.target, TailAddress) else witness.source
    unrolled = unroll_tail(t, tail_end.tail)
    logger.info("[MVP] unrolled tail %s to expose a core witness", tail_end.tail)
    return recurrent_branch_counterexample(unrolled, solve_hitting(unrolled, tol=ef.tol))


def trees1_equivalence(t: TreeSpec, ef: EdgeF) -> Trees1Report:
    """
    Evaluate the three equivalent conditions on a transient tree:
    every infinite branch is transient, every cylinder with ends has positive
    harmonic measure, and the unit flux from the root charges every such edge.
    """
    scan = branch_scan(t, ef)
    o = t.root
    threshold = MvpSettings["mass_threshold"]

    zero_mass: List[VertexAddress] = []
    for w in sorted(t.core_vertices - {o}):
        parent = t.core_path(o, w)[-2]
        if subtree_infinite(t, parent, w) and cylinder_measure(t, ef, o, w, o) <= threshold:
            zero_mass.append(w)
    for tail in t.tails:
        if cylinder_measure(t, ef, o, TailAddress(tail.id, 1), o) <= threshold:
            zero_mass.append(TailAddress(tail.id, 1))

    report = flux(t, ef, o)
    zero_flux: List[Tuple[str, VertexAddress]] = [
        (x, y) for (x, y), value in sorted(report.flows.items())
        if subtree_infinite(t, x, y) and value <= threshold
    ]
    zero_flux += [
        (tail.attach, TailAddress(tail.id, 1)) for tail in t.tails if report.tail_flows[tail.id] <= threshold
    ]

    conditions = {
        "branches": scan.all_branches_transient,
        "cylinders": not zero_mass,
        "flux": not zero_flux,
    }
    if len(set(conditions.values())) != 1:
        raise InconsistentConditions(f"trees1 conditions disagree: {conditions}")
    verdict = scan.all_branches_transient

    warnings: Tuple[str, ...] = ()
    equivalent: Optional[bool] = None
    if verdict:
        if end_count(t) >= 2:
            equivalent = True
        else:
            warnings = _single_end_warnings(t)
    counterexample = None if verdict else recurrent_branch_counterexample(t, ef)
    return Trees1Report(
        verdict=verdict,
        conditions=conditions,
        branch_witnesses=tuple(scan.witnesses),
        zero_mass_cylinders=tuple(zero_mass),
        zero_flux_edges=tuple(zero_flux),
        weak_strong_equivalent=equivalent,
        counterexample=counterexample,
        warnings=warnings,
    )


# --- geometric tail measures ------------------------------------------------------

def tail_integrability(t: TreeSpec, ef: EdgeF, mu: GeometricTailMeasure, o: Optional[str] = None) -> bool:
    """Whether 1/F(o, .) is integrable against |mu|: |r| below the limiting per-step factor."""
    validate_tail_measure(t, mu)
    _reference(t, mu, o)
    require_transient(t, ef)
    if mu.ratio == 0 or mu.head == 0:
        return True
    g = ef.tail_f(mu.tail_id).f_up_limit
    return abs(mu.ratio) < g - ef.one_threshold


class _CanonicalRay:
    """1/F(o, x_n) along a tail's canonical ray and the geometric sums built from it."""

    def __init__(self, t: TreeSpec, ef: EdgeF, tail_id: str, o: str, depth: int):
        tail_f = ef.tail_f(tail_id)
        self.limit = tail_f.f_up_limit
        self.depth = depth
        value = 1.0 / F_between(t, ef, o, t.tail(tail_id).attach)
        self.inverse = [value]
        for n in range(1, depth + 1):
            value /= tail_f.f_up(n)
            self.inverse.append(value)

    def head_sum(self, head: float, ratio: float, k: int) -> float:
        return math.fsum(head * ratio ** (n - 1) * self.inverse[n] for n in range(1, k + 1))

    def full_sum(self, head: float, ratio: float) -> float:
        m = self.depth
        remainder = head * ratio ** m * self.inverse[m] / (self.limit - ratio)
        return self.head_sum(head, ratio, m) + remainder


def tail_weak_mvp(
    t: TreeSpec,
    ef: EdgeF,
    mu: GeometricTailMeasure,
    o: Optional[str] = None,
    tol: Optional[float] = None,
    classes: Optional[int] = None,
) -> MvpVerdict:
    """
    Weak mean value property of a measure with a geometric tail.

    Ends leaving the hull away from the measure's tail see the tail weights through
    the factor f_down**n, ends on the tail through 1/F(o, x_n); both sums are closed
    form. Ends leaving the canonical ray at depth k get their own class for k up to
    ``classes``; deeper classes agree with the canonical end up to (|r|/g)**classes.
    """
    tol = MvpSettings["tol"] if tol is None else tol
    classes = MvpSettings["tail_classes"] if classes is None else classes
    validate_tail_measure(t, mu)
    o = _reference(t, mu, o)
    if not tail_integrability(t, ef, mu, o):
        raise NotIntegrable(f"1/F(o, .) is not integrable: |ratio| {abs(mu.ratio)} is not below the tail factor")

    tail = t.tail(mu.tail_id)
    attach = tail.attach
    f = ef.tail_f(mu.tail_id).f_down
    w0, r = mu.head, mu.ratio
    base = mu.base
    total = mu.total_mass
    threshold = MvpSettings["mass_threshold"]

    h = hull(t, base.support + [attach], anchor=o)
    ray = _CanonicalRay(t, ef, mu.tail_id, o, max(classes, len(ef.tail_f(mu.tail_id).steps)) + 1)
    attach_profile = kernel_profile(t, ef, h.vertices, attach, o)
    base_on_ray = math.fsum(base.weights[x] * attach_profile[x] for x in base.support)

    bound = math.fsum(abs(base.weights[x]) / F_between(t, ef, o, x) for x in base.support)
    scale = tol * (bound + ray.full_sum(abs(w0), abs(r)) + abs(total))

    results: List[ClassResidual] = []
    canonical_child = TailAddress(mu.tail_id, 1)
    for c in direction_classes(t, ef, h, o):
        kept = [
            (edge, mass) for edge, mass in zip(c.exit_edges, c.edge_masses)
            if not (edge.target == canonical_child and edge.sibling == 0)
        ]
        if not kept:
            continue
        mass = math.fsum(m for _, m in kept)
        tail_part = w0 * f / (1.0 - r * f) * c.kernel_profile[attach]
        residual = math.fsum([base.weights[x] * c.kernel_profile[x] for x in base.support] + [tail_part, -total])
        results.append(ClassResidual(
            f"exit:{c.exit_vertex}", c.exit_vertex, residual, mass,
            mass > threshold, True, abs(residual) <= scale, c,
        ))

    leaves_ray = not ef.is_one(f)
    if tail.branches >= 2:
        for k in range(1, classes + 1):
            rest = w0 * r ** k * f / (1.0 - r * f) * ray.inverse[k]
            residual = math.fsum([base_on_ray, ray.head_sum(w0, r, k), rest, -total])
            inside = cylinder_measure(t, ef, o, TailAddress(mu.tail_id, k), o)
            deeper = cylinder_measure(t, ef, o, TailAddress(mu.tail_id, k + 1), o)
            results.append(ClassResidual(
                f"tail:{mu.tail_id}:{k}", TailAddress(mu.tail_id, k), residual, max(0.0, inside - deeper),
                leaves_ray, True, abs(residual) <= scale,
            ))
    end_mass = cylinder_measure(t, ef, o, canonical_child, o) if tail.branches == 1 else 0.0
    residual = math.fsum([base_on_ray, ray.full_sum(w0, r), -total])
    results.append(ClassResidual(
        f"tail:{mu.tail_id}:end", None, residual, end_mass,
        tail.branches == 1 and leaves_ray, True, abs(residual) <= scale,
    ))

    weak_witness = _first_failure(results, "relevant_for_weak")
    return MvpVerdict(
        weak=weak_witness is None,
        strong=None,
        classes=tuple(results),
        tolerance=tol,
        scale=scale,
        weak_witness=weak_witness,
        warnings=_single_end_warnings(t),
    )


def tail_residuals_truncated(
    t: TreeSpec,
    ef: EdgeF,
    mu: GeometricTailMeasure,
    o: Optional[str] = None,
    depth: Optional[int] = None,
    classes: Optional[int] = None,
) -> Dict[str, float]:
    """Residuals of the tail_weak_mvp classes, summing the tail weights term by term."""
    depth = MvpSettings["truncation_depth"] if depth is None else depth
    classes = MvpSettings["tail_classes"] if classes is None else classes
    validate_tail_measure(t, mu)
    o = _reference(t, mu, o)
    tail = t.tail(mu.tail_id)
    points: List[Tuple[VertexAddress, float]] = [(x, mu.base.weights[x]) for x in mu.base.support]
    points += [(TailAddress(mu.tail_id, n), mu.weight(n)) for n in range(1, depth + 1)]
    total = math.fsum(weight for _, weight in points)

    def residual(exit_vertex: VertexAddress) -> float:
        terms = []
        for x, weight in points:
            meet = confluent(t, x, exit_vertex, o)
            terms.append(weight * F_between(t, ef, x, meet) / F_between(t, ef, o, meet))
        return math.fsum(terms + [-total])

    canonical_child = TailAddress(mu.tail_id, 1)
    h = hull(t, mu.base.support + [tail.attach], anchor=o)
    results: Dict[str, float] = {}
    for vertex in h.exit_vertices:
        exits = [
            edge for edge in h.exits_at(vertex)
            if subtree_infinite(t, vertex, edge.target)
            and not (edge.target == canonical_child and edge.sibling == 0)
        ]
        if exits:
            results[f"exit:{vertex}"] = residual(vertex)
    if tail.branches >= 2:
        for k in range(1, classes + 1):
            results[f"tail:{mu.tail_id}:{k}"] = residual(TailAddress(mu.tail_id, k))
    results[f"tail:{mu.tail_id}:end"] = residual(TailAddress(mu.tail_id, depth))
    return results
