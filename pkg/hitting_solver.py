"""Hitting probabilities F(x, y) for nearest-neighbour walks on finitely described trees.

The unknowns are F on every directed core edge, F from an attach vertex into the
first vertex of each of its tails, and the tail-internal return probability f_down
(constant along a tail by self-similarity). The system is iterated from zero, so the
iteration increases monotonically to the minimal nonnegative solution.
"""
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np
from scipy import sparse

from config import SolverSettings
from errors import (
    InconsistentConditions,
    MartinLabError,
    MaxIterExceeded,
    NotAdjacent,
    NotConverged,
    RecurrentWalk,
    SolverError,
)
from tree_model import TailAddress, TailSpec, TreeSpec, VertexAddress, geodesic, subtree_infinite

logger = logging.getLogger(__name__)

# iterates may lose an ulp or two when seeded exactly on a root
MONOTONE_SLACK = 1e-14


def closed_form_root(back: float, forward_total: float) -> float:
    """Minimal root of f = back + forward_total * f**2 when back + forward_total = 1."""
    return min(1.0, back / forward_total)


@dataclass(frozen=True)
class TailF:
    tail_id: str
    f_down: float
    f_entry: float
    closed_form: float
    steps: Tuple[float, ...]
    f_up_limit: float

    def f_up(self, depth: int) -> float:
        """F from the depth-1 canonical vertex (the attach vertex for depth 1) to depth."""
        if depth <= len(self.steps):
            return self.steps[depth - 1]
        return self.f_up_limit


@dataclass(frozen=True)
class EdgeF:
    spec: TreeSpec
    f: Mapping[Tuple[str, str], float]
    tails: Mapping[str, TailF]
    residual: float
    iterations: int
    converged: bool
    tol: float

    @property
    def one_threshold(self) -> float:
        return 10.0 * self.tol

    def is_one(self, value: float) -> bool:
        return value >= 1.0 - self.one_threshold

    def thresholded(self, value: float) -> float:
        return 1.0 if self.is_one(value) else value

    def tail_f(self, tail_id: str) -> TailF:
        self.spec.tail(tail_id)
        return self.tails[tail_id]

    def directed(self, x: VertexAddress, y: VertexAddress) -> float:
        """F(x -> y) for neighbouring vertices."""
        if isinstance(x, TailAddress) and isinstance(y, TailAddress) and x.tail == y.tail:
            if y.depth == x.depth + 1:
                return self.tails[y.tail].f_up(y.depth)
            if y.depth == x.depth - 1:
                return self.tails[x.tail].f_down
        elif isinstance(y, TailAddress):
            if y.depth == 1 and self.spec.tail(y.tail).attach == x:
                return self.tails[y.tail].f_entry
        elif isinstance(x, TailAddress):
            if x.depth == 1 and self.spec.tail(x.tail).attach == y:
                return self.tails[x.tail].f_down
        elif (x, y) in self.f:
            return self.f[(x, y)]
        raise NotAdjacent(f"{x} and {y} are not neighbours")

    @cached_property
    def return_probabilities(self) -> Dict[str, float]:
        """U(x, x) = sum_y p(x, y) F(y -> x) at every core vertex."""
        t = self.spec
        values = {}
        for x in sorted(t.core_vertices):
            total = sum(t.p(x, y) * self.f[(y, x)] for y in t.core_neighbors(x))
            total += sum(tail.outflow * self.tails[tail.id].f_down for tail in t.tails_at(x))
            values[x] = total
        return values

    def diagnostics(self) -> Dict[str, object]:
        return {
            "iterations": self.iterations,
            "residual": self.residual,
            "converged": self.converged,
            "tol": self.tol,
        }


@dataclass(frozen=True)
class BranchEntry:
    source: VertexAddress
    target: VertexAddress
    infinite: bool
    f_return: float
    f_return_thresholded: float
    # None for finite branches: they carry no ends and no transience claim
    transient_branch: Optional[bool]


@dataclass(frozen=True)
class BranchReport:
    entries: Tuple[BranchEntry, ...]
    all_branches_transient: bool

    @property
    def witnesses(self) -> List[BranchEntry]:
        return [entry for entry in self.entries if entry.infinite and not entry.transient_branch]


class _HittingSystem:
    """Index of unknowns and the coupling between them."""

    def __init__(self, t: TreeSpec):
        self.spec = t
        self.keys: List[Tuple[str, ...]] = []
        for edge in t.edges:
            self.keys.append(("edge", edge.a, edge.b))
            self.keys.append(("edge", edge.b, edge.a))
        for tail in t.tails:
            self.keys.append(("entry", tail.id))
        for tail in t.tails:
            self.keys.append(("down", tail.id))
        self.index = {key: i for i, key in enumerate(self.keys)}
        size = len(self.keys)

        self.numerator = np.zeros(size)
        self.back = np.zeros(size)
        self.forward = np.zeros(size)
        self.seed = np.zeros(size)
        rows: List[int] = []
        cols: List[int] = []
        data: List[float] = []
        linear: List[int] = []
        down: List[int] = []

        for row, key in enumerate(self.keys):
            if key[0] == "down":
                tail = t.tail(key[1])
                forward_total = tail.branches * tail.step_p
                self.back[row] = tail.down_p
                self.forward[row] = forward_total
                self.seed[row] = closed_form_root(tail.down_p, forward_total)
                down.append(row)
                continue
            if key[0] == "edge":
                source, target_vertex, target_tail = key[1], key[2], None
                self.numerator[row] = t.p(source, target_vertex)
            else:
                tail = t.tail(key[1])
                source, target_vertex, target_tail = tail.attach, None, tail.id
                self.numerator[row] = tail.entry_p
            linear.append(row)
            for neighbor in t.core_neighbors(source):
                if neighbor != target_vertex:
                    rows.append(row)
                    cols.append(self.index[("edge", neighbor, source)])
                    data.append(t.p(source, neighbor))
            for other in t.tails_at(source):
                count = other.branches - (1 if other.id == target_tail else 0)
                if count:
                    rows.append(row)
                    cols.append(self.index[("down", other.id)])
                    data.append(count * other.entry_p)

        self.coupling = sparse.csr_matrix((data, (rows, cols)), shape=(size, size))
        self.linear = np.array(linear, dtype=int)
        self.down = np.array(down, dtype=int)

    def initial(self, seed_tails: bool) -> np.ndarray:
        values = np.zeros(len(self.keys))
        if seed_tails:
            values[self.down] = self.seed[self.down]
        return values

    def step(self, values: np.ndarray) -> np.ndarray:
        # linear rows use F(x->y) = p(x,y) / (1 - sum_{z != y} p(x,z) F(z->x)),
        # the solved form of F = p + sum p F F; same fixed points, still monotone
        returned = self.coupling @ values
        out = np.empty_like(values)
        lin, down = self.linear, self.down
        out[lin] = self.numerator[lin] / (1.0 - returned[lin])
        out[down] = self.back[down] + self.forward[down] * values[down] ** 2
        return np.clip(out, 0.0, 1.0)


def _tail_factors(tail: TailSpec, f_entry: float, f_down: float, cap: int) -> Tuple[Tuple[float, ...], float]:
    """Per-depth forward factors g_n along the canonical ray and their limit."""
    c, q = tail.step_p, tail.down_p
    k = 1.0 - (tail.branches - 1) * c * f_down
    root = math.sqrt(max(k * k - 4.0 * q * c, 0.0))
    small = 2.0 * c / (k + root)
    large = (k + root) / (2.0 * q)
    limit = large if f_entry >= large - 1e-12 else small

    g = f_entry
    steps = [g]
    while len(steps) < cap and abs(g - limit) > 1e-15:
        g = min(1.0, c / (k - q * g))
        steps.append(g)
    return tuple(steps), limit


def iterate_hitting(t: TreeSpec, seed_tails: bool = True) -> Iterator[np.ndarray]:
    """Yield the successive iterates of the hitting system, starting with the seed."""
    system = _HittingSystem(t)
    values = system.initial(seed_tails)
    while True:
        yield values
        values = system.step(values)


def solve_hitting(
    t: TreeSpec,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
    seed_tails: Optional[bool] = None,
    strict: bool = False,
) -> EdgeF:
    """
    Solve for all hitting probabilities of the walk described by ``t``.

    Args:
        t: validated tree description
        tol: stop once the sup-norm change between iterates drops below tol
        max_iter: iteration cap; on exhaustion the best iterate is returned flagged
            as not converged (or MaxIterExceeded is raised when strict)
        seed_tails: start tail unknowns at their closed-form minimal roots
        strict: raise instead of returning an unconverged result

    Returns:
        EdgeF with values, residual and iteration count
    """
    tol = SolverSettings["tol"] if tol is None else tol
    max_iter = SolverSettings["max_iter"] if max_iter is None else max_iter
    seed_tails = SolverSettings["seed_tails"] if seed_tails is None else seed_tails
    if tol <= 0 or max_iter < 1:
        raise MartinLabError(f"solver needs tol > 0 and max_iter >= 1 (got {tol}, {max_iter})")

    system = _HittingSystem(t)
    check_every = SolverSettings["monotone_check_every"]
    values = system.initial(seed_tails)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        following = system.step(values)
        if iterations % check_every == 0 and np.any(following < values - MONOTONE_SLACK):
            raise SolverError(f"[SOLVER] iterate decreased at iteration {iterations}")
        change = float(np.max(np.abs(following - values)))
        values = following
        if change < tol:
            converged = True
            break
    residual = float(np.max(np.abs(system.step(values) - values)))

    f: Dict[Tuple[str, str], float] = {}
    entries: Dict[str, float] = {}
    downs: Dict[str, float] = {}
    for key, value in zip(system.keys, values):
        if key[0] == "edge":
            f[(key[1], key[2])] = float(value)
        elif key[0] == "entry":
            entries[key[1]] = float(value)
        else:
            downs[key[1]] = float(value)

    tails: Dict[str, TailF] = {}
    for tail in t.tails:
        steps, limit = _tail_factors(tail, entries[tail.id], downs[tail.id], SolverSettings["tail_steps"])
        closed = closed_form_root(tail.down_p, tail.branches * tail.step_p)
        tails[tail.id] = TailF(tail.id, downs[tail.id], entries[tail.id], closed, steps, limit)

    result = EdgeF(t, f, tails, residual, iterations, converged, tol)
    if converged:
        logger.info("[SOLVER] converged after %d iterations (residual %.3e)", iterations, residual)
    else:
        logger.warning("[SOLVER] no convergence after %d iterations (residual %.3e)", iterations, residual)
        if strict:
            raise MaxIterExceeded(f"hitting system did not converge in {max_iter} iterations", best=result)
    return result


def F_between(t: TreeSpec, ef: EdgeF, x: VertexAddress, y: VertexAddress) -> float:
    if not ef.converged:
        raise NotConverged("hitting probabilities are not converged; rerun with a larger --max-iter")
    path = geodesic(t, x, y)
    value = 1.0
    for u, v in zip(path, path[1:]):
        value *= ef.directed(u, v)
    return value


def walk_is_transient(t: TreeSpec, ef: EdgeF) -> bool:
    if not ef.converged:
        raise NotConverged("hitting probabilities are not converged")
    flags = {x: not ef.is_one(u) for x, u in ef.return_probabilities.items()}
    if len(set(flags.values())) > 1:
        raise InconsistentConditions(f"transience differs between core vertices: {flags}")
    return flags[t.root]


def return_probability(t: TreeSpec, ef: EdgeF, x: str) -> Tuple[float, bool]:
    t.require_core(x)
    transient = walk_is_transient(t, ef)
    return ef.return_probabilities[x], transient


def require_transient(t: TreeSpec, ef: EdgeF) -> None:
    if not walk_is_transient(t, ef):
        raise RecurrentWalk("the walk is recurrent; Martin kernels and harmonic measures need transience")


def branch_scan(t: TreeSpec, ef: EdgeF) -> BranchReport:
    """Check every branch direction: infinite branches must be left with probability > 0."""
    require_transient(t, ef)
    entries: List[BranchEntry] = []

    def add(source: VertexAddress, target: VertexAddress, f_return: float) -> None:
        infinite = subtree_infinite(t, source, target)
        transient = (not ef.is_one(f_return)) if infinite else None
        entries.append(BranchEntry(source, target, infinite, f_return, ef.thresholded(f_return), transient))

    for x, y in sorted(ef.f):
        add(x, y, ef.f[(y, x)])
    for tail in t.tails:
        first = TailAddress(tail.id, 1)
        tail_f = ef.tails[tail.id]
        # deeper tail directions repeat these two by self-similarity
        add(tail.attach, first, tail_f.f_down)
        add(first, tail.attach, tail_f.f_entry)

    verdict = all(entry.transient_branch for entry in entries if entry.infinite)
    report = BranchReport(tuple(entries), verdict)
    for witness in report.witnesses:
        logger.info("[SOLVER] recurrent infinite branch beyond %s seen from %s", witness.target, witness.source)
    return report
