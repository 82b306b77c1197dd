import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Add the repository root to the Python path to allow importing the modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from hitting_solver import solve_hitting
from tree_model import unroll, validate_spec

SAMPLES = Path(__file__).resolve().parents[1] / "samples"
THIRD = 1.0 / 3.0


def ct1_raw():
    """Degree-3 homogeneous tree with simple random walk."""
    edges = [{"a": "o", "b": v, "p_ab": THIRD, "p_ba": THIRD} for v in ("a", "b", "c")]
    tails = [
        {"id": f"t{v}", "attach": v, "kind": "homogeneous", "entry_p": THIRD,
         "branching": 2, "child_p": THIRD, "back_p": THIRD}
        for v in ("a", "b", "c")
    ]
    return {"root": "o", "edges": edges, "tails": tails}


def ct2_raw():
    """A transient homogeneous tail at o plus the path o-r1-r2 ending in a symmetric ray."""
    return {
        "root": "o",
        "edges": [
            {"a": "o", "b": "r1", "p_ab": 0.25, "p_ba": 0.5},
            {"a": "r1", "b": "r2", "p_ab": 0.5, "p_ba": 0.5},
        ],
        "tails": [
            {"id": "t", "attach": "o", "kind": "homogeneous", "entry_p": 0.25,
             "branching": 3, "child_p": 0.25, "back_p": 0.25},
            {"id": "ray", "attach": "r2", "kind": "ray", "entry_p": 0.5, "forward": 0.5, "back": 0.5},
        ],
    }


def ray_raw(forward, back):
    return {
        "root": "o",
        "edges": [],
        "tails": [{"id": "ray", "attach": "o", "kind": "ray", "entry_p": 1.0, "forward": forward, "back": back}],
    }


def random_raw(rng, size=None):
    """
    Random finite core with tails. The root always carries a transient homogeneous
    tail, so every generated walk is transient.
    """
    size = int(rng.integers(1, 6)) if size is None else size
    names = [f"v{i}" for i in range(size)]
    parents = {names[i]: names[int(rng.integers(0, i))] for i in range(1, size)}
    neighbours = {name: [] for name in names}
    for child, parent in parents.items():
        neighbours[child].append(parent)
        neighbours[parent].append(child)

    tails = []
    for index, name in enumerate(names):
        if index == 0 or rng.random() < 0.5:
            if index == 0 or rng.random() < 0.6:
                branching = int(rng.integers(2, 4))
                back = float(rng.uniform(0.1, 0.4))
                tails.append({"id": f"T{index}", "attach": name, "kind": "homogeneous",
                              "branching": branching, "child_p": (1.0 - back) / branching, "back_p": back})
            else:
                forward = float(rng.uniform(0.3, 0.8))
                tails.append({"id": f"T{index}", "attach": name, "kind": "ray",
                              "forward": forward, "back": 1.0 - forward})

    rows = {}
    for name in names:
        slots = neighbours[name] + [tail["id"] for tail in tails if tail["attach"] == name]
        weights = rng.uniform(0.2, 1.0, size=len(slots))
        rows[name] = dict(zip(slots, weights / weights.sum()))
    for tail in tails:
        branches = tail.get("branching", 1)
        tail["entry_p"] = float(rows[tail["attach"]][tail["id"]]) / branches
    edges = [
        {"a": parent, "b": child, "p_ab": float(rows[parent][child]), "p_ba": float(rows[child][parent])}
        for child, parent in parents.items()
    ]
    return {"root": names[0], "edges": edges, "tails": tails}


@pytest.fixture(scope="session")
def ct1():
    return validate_spec(ct1_raw())


@pytest.fixture(scope="session")
def ct1_ef(ct1):
    return solve_hitting(ct1)


@pytest.fixture(scope="session")
def ct2():
    return validate_spec(ct2_raw())


@pytest.fixture(scope="session")
def ct2_ef(ct2):
    return solve_hitting(ct2)


@pytest.fixture(scope="session")
def ct1_deep(ct1):
    """CT1 with two tail levels moved into the core: every vertex within distance 3 of o."""
    return unroll(ct1, 2)


@pytest.fixture(scope="session")
def ct1_deep_ef(ct1_deep):
    return solve_hitting(ct1_deep)


@pytest.fixture(scope="session")
def ct2_deep(ct2):
    return unroll(ct2, 1)


@pytest.fixture(scope="session")
def ct2_deep_ef(ct2_deep):
    return solve_hitting(ct2_deep)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
