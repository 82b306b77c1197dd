"""Monte Carlo estimates of hitting probabilities and cylinder harmonic measures.

Walkers are simulated in vectorised batches. A walker inside a tail is kept as
(tail, depth, canonical prefix length): siblings of a homogeneous tail are
exchangeable, so only whether the walker still sits on the canonical ray matters.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import OracleSettings
from errors import DegenerateCylinder, InvalidWalkConfig
from hitting_solver import EdgeF, require_transient
from tree_model import TailAddress, TreeSpec, VertexAddress, geodesic

logger = logging.getLogger(__name__)

# walker state: (location, depth, canonical prefix); location >= 0 is a core
# index, location = -1 - k means "inside tail k"
State = Tuple[int, int, int]


@dataclass(frozen=True)
class WalkConfig:
    trials: int = OracleSettings["trials"]
    horizon: int = OracleSettings["horizon"]
    seed: int = OracleSettings["seed"]
    depth: int = OracleSettings["depth"]
    shards: int = OracleSettings["shards"]
    workers: int = OracleSettings["workers"]

    def __post_init__(self) -> None:
        for name in ("trials", "horizon", "depth", "shards", "workers"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise InvalidWalkConfig(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise InvalidWalkConfig(f"seed must be an integer in [0, 2**64), got {self.seed!r}")

    def shard_sizes(self) -> List[int]:
        count = min(self.shards, self.trials)
        base, extra = divmod(self.trials, count)
        return [base + (1 if i < extra else 0) for i in range(count)]


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float
    trials_used: int
    censored: int
    trials: int
    hits: int

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def _estimate(hits: int, used: int, censored: int, trials: int) -> Estimate:
    value = hits / used
    return Estimate(value, math.sqrt(value * (1.0 - value) / used), used, censored, trials, hits)


class _Chain:
    """Transition tables of the walk, indexed for vectorised stepping."""

    def __init__(self, t: TreeSpec):
        self.spec = t
        self.names = sorted(t.core_vertices)
        self.index = {name: i for i, name in enumerate(self.names)}
        self.tails = list(t.tails)
        self.tail_index = {tail.id: k for k, tail in enumerate(self.tails)}

        options = []
        for name in self.names:
            row = [(t.p(name, y), self.index[y]) for y in t.core_neighbors(name)]
            row += [(tail.outflow, -1 - self.tail_index[tail.id]) for tail in t.tails_at(name)]
            options.append(row)
        width = max(len(row) for row in options)
        # padding never satisfies cum <= u, so it is never selected
        self.cum = np.full((len(self.names), width), 2.0)
        self.targets = np.zeros((len(self.names), width), dtype=np.int64)
        self.counts = np.array([len(row) for row in options], dtype=np.int64)
        for i, row in enumerate(options):
            self.cum[i, :len(row)] = np.cumsum([p for p, _ in row])
            self.targets[i, :len(row)] = [target for _, target in row]
            self.targets[i, len(row):] = row[-1][1]

        self.attach = np.array([self.index[tail.attach] for tail in self.tails], dtype=np.int64)
        self.back = np.array([tail.down_p for tail in self.tails], dtype=float)
        self.forward = np.array([tail.step_p for tail in self.tails], dtype=float)
        self.branches = np.array([tail.branches for tail in self.tails], dtype=np.int64)

    def state(self, address: VertexAddress) -> State:
        address = self.spec.require(address)
        if isinstance(address, TailAddress):
            return -1 - self.tail_index[address.tail], address.depth, address.depth
        return self.index[address], 0, 0

    def matches(self, target: State, loc: np.ndarray, depth: np.ndarray, canon: np.ndarray) -> np.ndarray:
        where, level, _ = target
        if where >= 0:
            return loc == where
        return (loc == where) & (depth == level) & (canon == level)

    def step(
        self, rng: np.random.Generator, loc: np.ndarray, depth: np.ndarray, canon: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        u = rng.random(loc.size)
        loc, depth, canon = loc.copy(), depth.copy(), canon.copy()

        at_core = np.flatnonzero(loc >= 0)
        in_tail = np.flatnonzero(loc < 0)

        if in_tail.size:
            k = -1 - loc[in_tail]
            d, c, ut = depth[in_tail], canon[in_tail], u[in_tail]
            up = ut < self.back[k]
            forward_limit = self.back[k] + self.forward[k]
            to_canonical = ~up & (c == d) & ((ut < forward_limit) | (self.branches[k] == 1))
            d_new = np.where(up, d - 1, d + 1)
            c_new = np.where(up, np.minimum(c, d_new), np.where(to_canonical, d_new, c))
            left = d_new == 0
            loc[in_tail] = np.where(left, self.attach[k], loc[in_tail])
            depth[in_tail] = np.where(left, 0, d_new)
            canon[in_tail] = np.where(left, 0, c_new)

        if at_core.size:
            rows = loc[at_core]
            choice = (self.cum[rows] <= u[at_core, None]).sum(axis=1)
            choice = np.minimum(choice, self.counts[rows] - 1)
            dest = self.targets[rows, choice]
            entering = dest < 0
            canonical = np.zeros(dest.size, dtype=bool)
            if entering.any():
                branches = self.branches[-1 - dest[entering]]
                canonical[entering] = rng.random(int(entering.sum())) * branches < 1.0
            loc[at_core] = dest
            depth[at_core] = np.where(entering, 1, 0)
            canon[at_core] = np.where(canonical, 1, 0)
        return loc, depth, canon


def _initial(state: State, trials: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    loc, depth, canon = state
    return (
        np.full(trials, loc, dtype=np.int64),
        np.full(trials, depth, dtype=np.int64),
        np.full(trials, canon, dtype=np.int64),
    )


def _hitting_shard(
    chain: _Chain, start: State, target: State, trials: int, horizon: int, seed: np.random.SeedSequence
) -> Tuple[int, int]:
    rng = np.random.Generator(np.random.PCG64(seed))
    loc, depth, canon = _initial(start, trials)
    active = np.ones(trials, dtype=bool)
    hits = 0
    for _ in range(horizon):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        l, d, c = chain.step(rng, loc[idx], depth[idx], canon[idx])
        loc[idx], depth[idx], canon[idx] = l, d, c
        reached = chain.matches(target, l, d, c)
        hits += int(reached.sum())
        active[idx[reached]] = False
    return hits, int(active.sum())


class _CylinderRule:
    """Marks walkers that are deep inside a tail and remembers on which side of w they are."""

    def __init__(self, t: TreeSpec, chain: _Chain, w: VertexAddress, o: str, depth: int):
        self.depth = depth
        self.chain = chain
        count = len(chain.tails)
        self.clear_level = np.ones(max(count, 1), dtype=np.int64)
        self.inside_tail = np.zeros(max(count, 1), dtype=bool)
        self.prefix_tail = -1
        self.prefix = 0
        if isinstance(w, TailAddress):
            if depth <= w.depth:
                raise InvalidWalkConfig(f"depth {depth} must exceed the depth of the cylinder vertex {w}")
            self.prefix_tail = chain.tail_index[w.tail]
            self.prefix = w.depth
            self.clear_level[self.prefix_tail] = w.depth
        else:
            for tail in chain.tails:
                self.inside_tail[chain.tail_index[tail.id]] = w in geodesic(t, o, tail.attach)

    def update(self, mark: np.ndarray, loc: np.ndarray, depth: np.ndarray, canon: np.ndarray) -> np.ndarray:
        k = np.where(loc < 0, -1 - loc, 0)
        deep = (loc < 0) & (depth >= self.depth)
        if self.prefix_tail >= 0:
            inside = (k == self.prefix_tail) & (canon >= self.prefix)
        else:
            inside = self.inside_tail[k]
        mark = np.where(deep & (mark == 0), np.where(inside, 1, -1), mark)
        cleared = (loc >= 0) | (depth < self.clear_level[k])
        return np.where(cleared, 0, mark).astype(np.int8)

    def settled(self, mark: np.ndarray, loc: np.ndarray, depth: np.ndarray, remaining: int) -> np.ndarray:
        """Marked walkers too deep to climb back before the horizon."""
        k = np.where(loc < 0, -1 - loc, 0)
        return (mark != 0) & (depth - (self.clear_level[k] - 1) > remaining)


def _cylinder_shard(
    chain: _Chain, rule: _CylinderRule, start: State, trials: int, horizon: int, seed: np.random.SeedSequence
) -> Tuple[int, int, int]:
    rng = np.random.Generator(np.random.PCG64(seed))
    loc, depth, canon = _initial(start, trials)
    mark = rule.update(np.zeros(trials, dtype=np.int8), loc, depth, canon)
    active = np.ones(trials, dtype=bool)
    inside = outside = 0
    for step in range(horizon):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        l, d, c = chain.step(rng, loc[idx], depth[idx], canon[idx])
        loc[idx], depth[idx], canon[idx] = l, d, c
        m = rule.update(mark[idx], l, d, c)
        mark[idx] = m
        done = rule.settled(m, l, d, horizon - step - 1)
        inside += int((done & (m == 1)).sum())
        outside += int((done & (m == -1)).sum())
        active[idx[done]] = False

    rest = mark[active]
    inside += int((rest == 1).sum())
    outside += int((rest == -1).sum())
    return inside, outside, int((rest == 0).sum())


def _run_shards(cfg: WalkConfig, work) -> List[tuple]:
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(cfg.shard_sizes()))
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(work, cfg.shard_sizes(), seeds))


def estimate_F(t: TreeSpec, x: VertexAddress, y: VertexAddress, cfg: Optional[WalkConfig] = None) -> Estimate:
    """
    Fraction of walkers started at x that visit y within the horizon.

    Walkers still running at the horizon count as misses, so the estimate is
    biased low by at most censored / trials.
    """
    cfg = cfg or WalkConfig()
    t.require(x)
    t.require(y)
    if x == y:
        return Estimate(1.0, 0.0, cfg.trials, 0, cfg.trials, cfg.trials)
    chain = _Chain(t)
    start, target = chain.state(x), chain.state(y)
    shards = _run_shards(cfg, lambda n, seed: _hitting_shard(chain, start, target, n, cfg.horizon, seed))
    hits = sum(h for h, _ in shards)
    censored = sum(c for _, c in shards)
    estimate = _estimate(hits, cfg.trials, censored, cfg.trials)
    logger.info("[ORACLE] F(%s, %s) ~ %.6f +- %.6f (%d censored)", x, y, estimate.value, estimate.stderr, censored)
    return estimate


def estimate_cylinder(
    t: TreeSpec,
    x: VertexAddress,
    w: VertexAddress,
    o: Optional[str] = None,
    cfg: Optional[WalkConfig] = None,
    ef: Optional[EdgeF] = None,
) -> Estimate:
    """
    Fraction of decided walkers from x whose limit end passes through w (seen from o).

    A walker is decided once it sits at tail depth >= cfg.depth and cannot climb
    back far enough to change sides before the horizon; walkers that are not deep
    at the horizon are censored and left out of the estimate.
    """
    cfg = cfg or WalkConfig()
    o = t.require_core(t.root if o is None else o)
    t.require(x)
    t.require(w)
    if w == o:
        raise DegenerateCylinder("the cylinder vertex must differ from the reference vertex")
    if ef is not None:
        require_transient(t, ef)
    chain = _Chain(t)
    rule = _CylinderRule(t, chain, w, o, cfg.depth)
    start = chain.state(x)
    shards = _run_shards(cfg, lambda n, seed: _cylinder_shard(chain, rule, start, n, cfg.horizon, seed))
    inside = sum(s[0] for s in shards)
    outside = sum(s[1] for s in shards)
    censored = sum(s[2] for s in shards)
    if inside + outside == 0:
        raise InvalidWalkConfig("no trial was decided before the horizon; increase --horizon or lower --depth")
    estimate = _estimate(inside, inside + outside, censored, cfg.trials)
    logger.info(
        "[ORACLE] nu_%s(cylinder %s) ~ %.6f +- %.6f (%d censored)", x, w, estimate.value, estimate.stderr, censored
    )
    return estimate
