import json

import pytest

from conftest import SAMPLES, ray_raw
from errors import BadAntichain, DegenerateCylinder, InvalidMeasure, NonCoreSupport, RecurrentWalk
from harmonic_measure import (
    CylinderFunction,
    cylinder_measure,
    escape_into,
    flux,
    harmonic_extension,
    harmonicity_residual,
    in_cylinder,
    load_cylinder_function,
)
from hitting_solver import solve_hitting
from martin_kernel import direction_classes, kernel_boundary
from tree_model import TailAddress, hull, validate_spec


def test_ct1_root_cylinders(ct1, ct1_ef):
    assert escape_into(ct1, ct1_ef, "a") == pytest.approx(2 / 3, abs=1e-12)
    for w in ("a", "b", "c"):
        assert cylinder_measure(ct1, ct1_ef, "o", w) == pytest.approx(1 / 3, abs=1e-9)


def test_ct1_sibling_additivity(ct1, ct1_ef):
    child = cylinder_measure(ct1, ct1_ef, "o", TailAddress("ta", 1))
    assert child == pytest.approx(1 / 6, abs=1e-9)
    # the two first-level children of the tail share the value of the canonical one
    assert 2 * child == pytest.approx(cylinder_measure(ct1, ct1_ef, "o", "a"), abs=1e-9)


def test_cut_sums_to_one_from_every_start(ct1, ct1_ef):
    for x in ["o", "a", "b", TailAddress("tc", 3)]:
        total = sum(cylinder_measure(ct1, ct1_ef, x, w) for w in ("a", "b", "c"))
        assert total == pytest.approx(1.0, abs=1e-9)


def test_cylinder_seen_from_inside(ct1, ct1_ef):
    # nu_a(cylinder at a) = 1 - F(a, a) (1 - 2/3)
    assert cylinder_measure(ct1, ct1_ef, "a", "a") == pytest.approx(2 / 3, abs=1e-12)
    assert cylinder_measure(ct1, ct1_ef, "a", "b") == pytest.approx(1 / 6, abs=1e-12)
    assert in_cylinder(ct1, TailAddress("ta", 2), "a", "o")
    assert not in_cylinder(ct1, "o", "a", "o")


def test_ct2_ray_cylinder_is_null(ct2, ct2_ef):
    assert cylinder_measure(ct2, ct2_ef, "o", TailAddress("ray", 1)) == pytest.approx(0.0, abs=1e-9)
    assert cylinder_measure(ct2, ct2_ef, "o", "r1") == pytest.approx(0.0, abs=1e-9)
    assert cylinder_measure(ct2, ct2_ef, "o", TailAddress("t", 1)) == pytest.approx(1 / 3, abs=1e-9)
    assert escape_into(ct2, ct2_ef, TailAddress("t", 1)) == pytest.approx(7 / 9, abs=1e-9)


def test_reference_vertex_is_not_a_cylinder(ct1, ct1_ef):
    with pytest.raises(DegenerateCylinder):
        cylinder_measure(ct1, ct1_ef, "a", "o")


def test_recurrent_walks_have_no_harmonic_measure():
    t = validate_spec(ray_raw(0.5, 0.5))
    ef = solve_hitting(t)
    with pytest.raises(RecurrentWalk):
        cylinder_measure(t, ef, "o", TailAddress("ray", 1))


@pytest.mark.parametrize("tree, ef", [("ct1", "ct1_ef"), ("ct2", "ct2_ef"), ("ct1_deep", "ct1_deep_ef")])
def test_flux_is_conserved(request, tree, ef):
    t, values = request.getfixturevalue(tree), request.getfixturevalue(ef)
    report = flux(t, values)
    assert report.max_residual < 1e-9
    assert report.total_out == pytest.approx(1.0, abs=1e-9)


def test_ct1_flux_values(ct1, ct1_ef):
    report = flux(ct1, ct1_ef)
    assert report.flows[("o", "a")] == pytest.approx(1 / 3, abs=1e-9)
    assert report.tail_flows["ta"] == pytest.approx(1 / 3, abs=1e-9)


@pytest.mark.parametrize("tree, ef, w", [
    ("ct1", "ct1_ef", "a"),
    ("ct2", "ct2_ef", "r1"),
    ("ct1_deep", "ct1_deep_ef", "ta.1~2"),
])
def test_cylinder_measures_are_harmonic(request, tree, ef, w):
    t, values = request.getfixturevalue(tree), request.getfixturevalue(ef)
    phi = CylinderFunction(((w, 1.0),))
    assert harmonicity_residual(t, values, phi, sorted(t.core_vertices)) < 1e-9


def test_harmonic_extension_of_the_sample_function(ct1, ct1_ef):
    phi = load_cylinder_function(str(SAMPLES / "phi_ct1.json"), ct1)
    values = harmonic_extension(ct1, ct1_ef, phi, ["o", "a", "c"])
    assert values[0] == pytest.approx(-1 / 6, abs=1e-12)
    assert values[1] == pytest.approx(5 / 12, abs=1e-12)
    assert harmonicity_residual(ct1, ct1_ef, phi, sorted(ct1.core_vertices)) < 1e-9


def test_constant_functions_extend_to_constants(ct2, ct2_ef):
    phi = CylinderFunction((("r1", 2.0),), default=2.0)
    values = harmonic_extension(ct2, ct2_ef, phi, ["o", "r2", TailAddress("t", 4)])
    assert values == pytest.approx([2.0, 2.0, 2.0], abs=1e-12)
    assert harmonicity_residual(ct2, ct2_ef, phi, ["o", "r1", "r2"]) < 1e-12


def test_cut_must_be_an_antichain(ct1_deep, ct1_deep_ef):
    with pytest.raises(BadAntichain):
        harmonic_extension(ct1_deep, ct1_deep_ef, CylinderFunction((("a", 1.0), ("ta.1", 2.0))), ["o"])
    with pytest.raises(BadAntichain):
        harmonic_extension(ct1_deep, ct1_deep_ef, CylinderFunction((("o", 1.0),)), ["o"])
    with pytest.raises(BadAntichain):
        harmonic_extension(ct1_deep, ct1_deep_ef, CylinderFunction((("a", 1.0), ("a", 2.0))), ["o"])
    with pytest.raises(NonCoreSupport):
        harmonic_extension(ct1_deep, ct1_deep_ef, CylinderFunction((("ta@3", 1.0),)), ["o"])


def test_cylinder_function_round_trip(tmp_path, ct1):
    phi = CylinderFunction((("a", 1.5), ("c", -1.0)), default=0.25, reference="o")
    assert CylinderFunction.from_dict(json.loads(json.dumps(phi.to_dict()))) == phi
    path = tmp_path / "broken.json"
    path.write_text(json.dumps({"cut": [{"vertex": "a"}]}), encoding="utf-8")
    with pytest.raises(InvalidMeasure):
        load_cylinder_function(str(path), ct1)


@pytest.mark.parametrize("tree, ef, generators", [
    ("ct1", "ct1_ef", ["a", "b", "c"]),
    ("ct1", "ct1_ef", ["a"]),
    ("ct2", "ct2_ef", ["r1", "r2"]),
    ("ct1_deep", "ct1_deep_ef", ["ta.1", "b"]),
])
def test_cylinder_ratios_match_boundary_kernels(request, tree, ef, generators):
    t, values = request.getfixturevalue(tree), request.getfixturevalue(ef)
    h = hull(t, generators)
    for c in direction_classes(t, values, h, "o"):
        for edge in c.exit_edges:
            base = cylinder_measure(t, values, "o", edge.target, "o")
            if base <= 1e-12:
                continue
            for x in sorted(h.vertices):
                ratio = cylinder_measure(t, values, x, edge.target, "o") / base
                assert ratio == pytest.approx(kernel_boundary(values, "o", x, c), rel=1e-9)
