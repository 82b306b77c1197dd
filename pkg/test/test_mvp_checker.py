import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SAMPLES, ray_raw
from config import MvpSettings
from errors import InconsistentConditions, InvalidMeasure, MissingValue, NonCoreSupport, NotIntegrable, UnknownVertex
from harmonic_measure import CylinderFunction, cylinder_measure, harmonic_extension
from hitting_solver import solve_hitting
from mvp_checker import (
    GeometricTailMeasure,
    SignedMeasure,
    L_value,
    classify_mvp,
    cylinder_mvp,
    load_measure,
    recurrent_branch_counterexample,
    tail_integrability,
    tail_residuals_truncated,
    tail_weak_mvp,
    trees1_equivalence,
)
from tree_model import TailAddress, unroll_tail, validate_spec

EX1 = SignedMeasure({"r1": 1.0, "r2": -1.0}, "o")


def _random_measure(rng, vertices, max_size=6):
    size = int(rng.integers(1, max_size + 1))
    chosen = rng.choice(vertices, size=min(size, len(vertices)), replace=False)
    weights = {str(v): float(rng.uniform(-1.0, 1.0)) for v in chosen}
    return SignedMeasure(weights, "o")


def test_l_value():
    h = {"o": 3.0, "a": 5.0, "b": -1.0}
    assert L_value(h, SignedMeasure({"o": 2.0}), "o") == 0.0
    assert L_value({"o": 1.0, "a": 1.0, "b": 1.0}, SignedMeasure({"a": 0.3, "b": -2.0}), "o") == pytest.approx(0.0)
    assert L_value(h, SignedMeasure({"a": 1.0, "b": 1.0}), "o") == pytest.approx(5.0 - 1.0 - 2 * 3.0)
    with pytest.raises(MissingValue):
        L_value(h, SignedMeasure({"c": 1.0}), "o")


def test_signed_measure_totals():
    mu = SignedMeasure({"a": 0.5, "b": -1.5, "c": 0.0})
    assert mu.total_mass == pytest.approx(-1.0)
    assert mu.total_variation == pytest.approx(2.0)
    assert mu.support == ["a", "b"]


def test_example_one_separates_weak_and_strong(ct2, ct2_ef):
    verdict = classify_mvp(ct2, ct2_ef, EX1)
    assert verdict.weak
    assert verdict.strong is False
    witness = verdict.strong_witness
    assert witness.exit_vertex == "r2"
    expected = (ct2_ef.directed("r1", "r2") - 1.0) / (ct2_ef.directed("o", "r1") * ct2_ef.directed("r1", "r2"))
    assert witness.residual == pytest.approx(expected, abs=1e-10)
    assert witness.residual == pytest.approx(-2.0, abs=1e-9)
    assert abs(witness.residual) >= 1e-3
    assert witness.cylinder_mass == pytest.approx(0.0, abs=1e-9)
    assert verdict.warnings == ()


def test_sample_measure_file(ct2, ct2_ef):
    mu = load_measure(str(SAMPLES / "ex1.json"), ct2)
    assert mu == EX1


def test_point_mass_at_the_reference_passes(ct1, ct1_ef):
    verdict = classify_mvp(ct1, ct1_ef, SignedMeasure({"o": 1.0}))
    assert verdict.weak and verdict.strong
    for item in verdict.classes:
        assert item.residual == pytest.approx(0.0, abs=1e-12)


def test_dipole_on_ct1_fails_both(ct1, ct1_ef):
    verdict = classify_mvp(ct1, ct1_ef, SignedMeasure({"a": 1.0, "b": -1.0}))
    assert not verdict.weak and not verdict.strong
    at_a = next(item for item in verdict.classes if item.exit_vertex == "a")
    assert at_a.residual == pytest.approx(1.5, abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(
    st.dictionaries(st.sampled_from(["o", "r1", "r2"]), st.floats(-5, 5).filter(lambda w: abs(w) > 1e-3), min_size=1),
    st.floats(0.1, 10.0),
    st.booleans(),
)
def test_verdicts_are_scale_invariant(ct2, ct2_ef, weights, factor, flip):
    mu = SignedMeasure(weights, "o")
    base = classify_mvp(ct2, ct2_ef, mu)
    c = -factor if flip else factor
    scaled = classify_mvp(ct2, ct2_ef, mu.scaled(c))
    assert (base.weak, base.strong) == (scaled.weak, scaled.strong)
    assert [item.label for item in scaled.classes] == [item.label for item in base.classes]
    for before, after in zip(base.classes, scaled.classes):
        assert after.residual == pytest.approx(c * before.residual, rel=1e-12, abs=1e-12)
    assert scaled.scale == pytest.approx(factor * base.scale, rel=1e-12)


def test_random_measures_on_ct1_have_equal_verdicts(ct1_deep, ct1_deep_ef):
    rng = np.random.default_rng(7)
    vertices = sorted(ct1_deep.core_vertices)
    for _ in range(200):
        mu = _random_measure(rng, vertices)
        verdict = classify_mvp(ct1_deep, ct1_deep_ef, mu)
        assert verdict.weak == verdict.strong
        assert cylinder_mvp(ct1_deep, ct1_deep_ef, mu).passed == verdict.weak


def test_random_measures_on_ct2_cylinder_check_matches_weak(ct2_deep, ct2_deep_ef):
    rng = np.random.default_rng(11)
    vertices = sorted(ct2_deep.core_vertices)
    for _ in range(200):
        mu = _random_measure(rng, vertices)
        verdict = classify_mvp(ct2_deep, ct2_deep_ef, mu)
        assert cylinder_mvp(ct2_deep, ct2_deep_ef, mu).passed == verdict.weak


def test_cylinder_check_on_example_one(ct2, ct2_ef):
    result = cylinder_mvp(ct2, ct2_ef, EX1)
    assert result.passed
    assert all(abs(value) < 1e-12 for _, value in result.residuals)
    labels = [label for label, _ in result.residuals]
    assert "r1" in labels and "ray@1" in labels and "t@1" in labels


def test_extension_functional_is_linear(ct1_deep, ct1_deep_ef):
    rng = np.random.default_rng(3)
    level_two = sorted(v for v in ct1_deep.core_vertices if len(ct1_deep.core_path("o", v)) == 3)
    vertices = sorted(ct1_deep.core_vertices)
    for _ in range(50):
        cut_size = int(rng.integers(1, len(level_two) + 1))
        cut = tuple((str(v), float(rng.uniform(-2, 2))) for v in rng.choice(level_two, size=cut_size, replace=False))
        default = float(rng.uniform(-1, 1))
        phi = CylinderFunction(cut, default)
        mu = _random_measure(rng, vertices)
        points = sorted(set(mu.support) | {"o"})
        extension = dict(zip(points, harmonic_extension(ct1_deep, ct1_deep_ef, phi, points)))
        expected = 0.0
        for w, value in cut:
            masses = {x: cylinder_measure(ct1_deep, ct1_deep_ef, x, w) for x in points}
            expected += (value - default) * L_value(masses, mu, "o")
        assert L_value(extension, mu, "o") == pytest.approx(expected, abs=1e-10)


def test_measures_must_live_on_the_core(ct1, ct1_ef, tmp_path):
    with pytest.raises(NonCoreSupport):
        classify_mvp(ct1, ct1_ef, SignedMeasure({"ta@1": 1.0}))
    with pytest.raises(UnknownVertex):
        classify_mvp(ct1, ct1_ef, SignedMeasure({"zz": 1.0}))
    with pytest.raises(InvalidMeasure):
        classify_mvp(ct1, ct1_ef, SignedMeasure({"a": 0.0}))
    path = tmp_path / "mu.json"
    path.write_text(json.dumps({"weights": {"a": 1.0}, "tail": {"id": "ta", "ratio": 1.2, "head": 1.0}}))
    with pytest.raises(InvalidMeasure):
        load_measure(str(path), ct1)


def test_trees1_on_ct1(ct1, ct1_ef):
    report = trees1_equivalence(ct1, ct1_ef)
    assert report.verdict
    assert set(report.conditions.values()) == {True}
    assert report.weak_strong_equivalent is True
    assert report.counterexample is None


def test_trees1_on_ct2(ct2, ct2_ef):
    report = trees1_equivalence(ct2, ct2_ef)
    assert not report.verdict
    assert set(report.conditions.values()) == {False}
    assert ("r1", "r2") in {(w.source, w.target) for w in report.branch_witnesses}
    assert {"r1", "r2", TailAddress("ray", 1)} <= set(report.zero_mass_cylinders)
    assert ("r1", "r2") in report.zero_flux_edges
    tree, measure = report.counterexample
    assert tree is ct2
    assert measure.weights == {"r1": 1.0, "r2": -1.0}


def test_trees1_reads_the_mass_threshold(ct1, ct1_ef, monkeypatch):
    # CT1 masses seen from the root are 1/3 at the core and 1/6 per tail branch
    monkeypatch.setitem(MvpSettings, "mass_threshold", 0.5)
    with pytest.raises(InconsistentConditions):
        trees1_equivalence(ct1, ct1_ef)
    monkeypatch.setitem(MvpSettings, "mass_threshold", 0.1)
    assert trees1_equivalence(ct1, ct1_ef).verdict


def test_counterexample_from_a_tail_witness():
    t = validate_spec({
        "root": "o",
        "edges": [],
        "tails": [
            {"id": "h", "attach": "o", "kind": "homogeneous", "entry_p": 0.25,
             "branching": 2, "child_p": 0.375, "back_p": 0.25},
            {"id": "ray", "attach": "o", "kind": "ray", "entry_p": 0.5, "forward": 0.5, "back": 0.5},
        ],
    })
    ef = solve_hitting(t)
    tree, mu = recurrent_branch_counterexample(t, ef)
    assert "ray.1" in tree.core_vertices
    assert mu.weights == {"o": 1.0, "ray.1": -1.0}
    verdict = classify_mvp(tree, solve_hitting(tree), mu)
    assert verdict.weak and not verdict.strong


def test_single_end_trees_warn():
    t = validate_spec(ray_raw(0.6, 0.4))
    ef = solve_hitting(t)
    report = trees1_equivalence(t, ef)
    assert report.verdict
    assert report.weak_strong_equivalent is None
    assert report.warnings
    assert classify_mvp(t, ef, SignedMeasure({"o": 1.0})).warnings


def test_tail_integrability_brackets(ct1, ct1_ef):
    base = SignedMeasure({}, "o")
    assert tail_integrability(ct1, ct1_ef, GeometricTailMeasure(base, "ta", 1 / 3, 1.0))
    assert not tail_integrability(ct1, ct1_ef, GeometricTailMeasure(base, "ta", 0.5, 1.0))
    assert tail_integrability(ct1, ct1_ef, GeometricTailMeasure(base, "ta", 0.0, 1.0))
    with pytest.raises(NotIntegrable):
        tail_weak_mvp(ct1, ct1_ef, GeometricTailMeasure(base, "ta", 0.5, 1.0))


def test_positive_tail_measure_on_ct1(ct1, ct1_ef):
    mu = GeometricTailMeasure(SignedMeasure({}, "o"), "ta", 1 / 3, 1.0)
    verdict = tail_weak_mvp(ct1, ct1_ef, mu, classes=8)
    assert verdict.strong is None
    at_a = next(item for item in verdict.classes if item.label == "exit:a")
    assert at_a.residual == pytest.approx(1.2 - 1.5, abs=1e-10)
    assert not verdict.weak


def test_tail_residuals_match_the_truncated_sums(ct1, ct1_ef):
    rng = np.random.default_rng(5)
    g = ct1_ef.tail_f("ta").f_up_limit
    vertices = sorted(ct1.core_vertices)
    for _ in range(50):
        base = _random_measure(rng, vertices, max_size=3)
        mu = GeometricTailMeasure(base, "ta", float(rng.uniform(-0.6, 0.6)) * g, float(rng.uniform(-1, 1)))
        verdict = tail_weak_mvp(ct1, ct1_ef, mu, classes=8)
        oracle = tail_residuals_truncated(ct1, ct1_ef, mu, depth=60, classes=8)
        closed = {item.label: item.residual for item in verdict.classes}
        assert closed.keys() == oracle.keys()
        for label, value in closed.items():
            assert value == pytest.approx(oracle[label], abs=1e-9)


def test_tail_measure_without_decay_matches_the_unrolled_tree(ct1, ct1_ef):
    base = SignedMeasure({"b": 0.7, "o": -0.2}, "o")
    mu = GeometricTailMeasure(base, "ta", 0.0, 0.9)
    verdict = tail_weak_mvp(ct1, ct1_ef, mu, classes=4)

    unrolled = unroll_tail(ct1, "ta")
    weights = dict(base.weights)
    weights["ta.1"] = 0.9
    plain = classify_mvp(unrolled, solve_hitting(unrolled), SignedMeasure(weights, "o"))
    assert verdict.weak == plain.weak
    child_class = next(item for item in plain.classes if item.exit_vertex == "ta.1")
    first = next(item for item in verdict.classes if item.label == "tail:ta:1")
    assert first.residual == pytest.approx(child_class.residual, abs=1e-10)


def test_tail_sample_file(ct1, ct1_ef):
    mu = load_measure(str(SAMPLES / "ct1_tail.json"), ct1)
    assert isinstance(mu, GeometricTailMeasure)
    assert mu.total_mass == pytest.approx(0.5 + 0.25 * 1.5)
    verdict = tail_weak_mvp(ct1, ct1_ef, mu, classes=4)
    assert verdict.strong is None
