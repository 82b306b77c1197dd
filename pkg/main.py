"""martinlab command-line entry point."""
import argparse
import logging
import math
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence

from config import LogSettings, MvpSettings, OracleSettings, ReportSettings, SolverSettings
from errors import InvalidMeasure, InvalidSpec, MartinLabError, MaxIterExceeded
from harmonic_measure import (
    cylinder_measure,
    escape_into,
    harmonic_extension,
    harmonicity_residual,
    load_cylinder_function,
)
from hitting_solver import EdgeF, F_between, solve_hitting, walk_is_transient
from martin_kernel import direction_classes, kernel_boundary, kernel_sup, kernel_vertex
from mc_oracle import WalkConfig, estimate_F, estimate_cylinder
from mvp_checker import (
    ClassResidual,
    GeometricTailMeasure,
    MvpVerdict,
    classify_mvp,
    cylinder_mvp,
    load_measure,
    tail_weak_mvp,
    trees1_equivalence,
)
from report import Report
from tree_model import TreeSpec, end_count, format_address, hull, load_spec, parse_address, spec_to_dict

logger = logging.getLogger(__name__)

VERDICT_FALSE = 1


def _ends(t: TreeSpec) -> Any:
    count = end_count(t)
    return "infinite" if math.isinf(count) else int(count)


def _class_dict(item: ClassResidual) -> Dict[str, Any]:
    return {
        "label": item.label,
        "exit_vertex": None if item.exit_vertex is None else format_address(item.exit_vertex),
        "residual": item.residual,
        "cylinder_mass": item.cylinder_mass,
        "relevant_for_weak": item.relevant_for_weak,
        "relevant_for_strong": item.relevant_for_strong,
        "passed": item.passed,
    }


def _witness(item: Optional[ClassResidual]) -> Optional[str]:
    if item is None or item.exit_vertex is None:
        return None if item is None else item.label
    return format_address(item.exit_vertex)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--tree", required=True, help="tree description (JSON)")
    common.add_argument("--tol", type=float, default=MvpSettings["tol"], help="relative residual tolerance")
    common.add_argument("--solver-tol", type=float, default=SolverSettings["tol"], help="hitting solver tolerance")
    common.add_argument("--max-iter", type=int, default=SolverSettings["max_iter"], help="hitting solver iteration cap")
    common.add_argument("--format", choices=("text", "json"), default=ReportSettings["format"])
    common.add_argument("--output", help="write the report to FILE instead of standard output")
    common.add_argument("--reference", help="reference vertex o (default: the file's reference or the root)")

    parser = argparse.ArgumentParser(
        prog="martinlab",
        description="Hitting probabilities, Martin kernels and mean value properties on trees",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("validate", parents=[common], help="validate a tree description")
    sub.add_parser("solve", parents=[common], help="solve all hitting probabilities")

    kernel = sub.add_parser("kernel", parents=[common], help="Martin kernel k_o(X, Y) or its supremum")
    kernel.add_argument("x")
    kernel.add_argument("y", nargs="?")

    cylinder = sub.add_parser("cylinder", parents=[common], help="harmonic measure nu_X of the cylinder through W")
    cylinder.add_argument("x")
    cylinder.add_argument("w")

    extension = sub.add_parser("extension", parents=[common], help="harmonic extension of a cylinder function")
    extension.add_argument("--function", required=True, help="cylinder function (JSON)")
    extension.add_argument("vertices", nargs="+")

    mvp = sub.add_parser("mvp", parents=[common], help="classify a measure by the mean value property")
    mvp.add_argument("--measure", required=True, help="signed measure (JSON)")
    mvp.add_argument("--mode", choices=("weak", "strong", "both", "cylinder"), default="both")

    sub.add_parser("trees1", parents=[common], help="recurrent-branch / cylinder / flux equivalence")

    simulate = sub.add_parser("simulate", parents=[common], help="Monte Carlo cross-check")
    simulate.add_argument("--estimate", choices=("F", "cylinder"), default="F")
    simulate.add_argument("--from", dest="start", required=True)
    simulate.add_argument("--at", dest="target", required=True)
    simulate.add_argument("--trials", type=int, default=OracleSettings["trials"])
    simulate.add_argument("--horizon", type=int, default=OracleSettings["horizon"])
    simulate.add_argument("--seed", type=int, default=OracleSettings["seed"])
    simulate.add_argument("--depth", type=int, default=OracleSettings["depth"])
    simulate.add_argument("--shards", type=int, default=OracleSettings["shards"])
    return parser


class MartinLabApp:
    def __init__(self, args: argparse.Namespace, argv: Sequence[str]) -> None:
        self.args = args
        handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
        if LogSettings["file"]:
            handlers.append(logging.FileHandler(LogSettings["file"], encoding="utf-8"))
        logging.basicConfig(
            level=getattr(logging, str(LogSettings["level"]).upper(), logging.WARNING),
            format='%(asctime)s - %(levelname)s - %(message)s',
            handlers=handlers,
            force=True,
        )
        self.report = Report(command=list(argv))
        self.report.tolerances = {"mvp": args.tol, "solver": args.solver_tol}
        self.tree: Optional[TreeSpec] = None
        self._ef: Optional[EdgeF] = None

    # --- shared steps ---------------------------------------------------------

    def load_tree(self) -> TreeSpec:
        if self.tree is None:
            self.tree = load_spec(self.args.tree)
            self.report.add_inputs({"tree": self.args.tree})
        return self.tree

    def solve(self) -> EdgeF:
        if self._ef is None:
            ef = solve_hitting(self.load_tree(), tol=self.args.solver_tol, max_iter=self.args.max_iter)
            self.report.solver = ef.diagnostics()
            if not ef.converged:
                raise MaxIterExceeded(
                    f"hitting system did not converge in {self.args.max_iter} iterations", best=ef
                )
            self._ef = ef
        return self._ef

    def reference(self) -> str:
        t = self.load_tree()
        return t.require_core(self.args.reference or t.root)

    def address(self, text: str):
        return parse_address(self.load_tree(), text)

    # --- commands -------------------------------------------------------------

    def cmd_validate(self) -> int:
        t = self.load_tree()
        self.report.payload = {
            "root": t.root,
            "core_vertices": sorted(t.core_vertices),
            "edges": len(t.edges),
            "tails": [tail.id for tail in t.tails],
            "ends": _ends(t),
        }
        return 0

    def cmd_solve(self) -> int:
        t = self.load_tree()
        ef = solve_hitting(t, tol=self.args.solver_tol, max_iter=self.args.max_iter)
        self.report.solver = ef.diagnostics()
        self.report.payload = {
            "edges": [{"from": x, "to": y, "F": value} for (x, y), value in sorted(ef.f.items())],
            "tails": [
                {
                    "id": tail_f.tail_id,
                    "f_down": tail_f.f_down,
                    "f_entry": tail_f.f_entry,
                    "closed_form": tail_f.closed_form,
                    "f_up_limit": tail_f.f_up_limit,
                }
                for tail_f in (ef.tails[tail.id] for tail in t.tails)
            ],
            "return_probabilities": dict(ef.return_probabilities),
        }
        if not ef.converged:
            raise MaxIterExceeded(f"hitting system did not converge in {self.args.max_iter} iterations", best=ef)
        self._ef = ef
        self.report.payload["transient"] = walk_is_transient(t, ef)
        return 0

    def cmd_kernel(self) -> int:
        t, ef, o = self.load_tree(), self.solve(), self.reference()
        x = self.address(self.args.x)
        payload: Dict[str, Any] = {"reference": o, "x": format_address(x), "sup": kernel_sup(ef, o, x)}
        if self.args.y is not None:
            y = self.address(self.args.y)
            payload["y"] = format_address(y)
            payload["value"] = kernel_vertex(ef, o, x, y)
        elif t.is_core(x):
            classes = direction_classes(t, ef, hull(t, [x], anchor=o), o)
            payload["directions"] = [
                {
                    "exit_vertex": c.exit_vertex,
                    "value": kernel_boundary(ef, o, x, c),
                    "cylinder_mass": c.cylinder_mass,
                }
                for c in classes
            ]
        self.report.payload = payload
        return 0

    def cmd_cylinder(self) -> int:
        t, ef, o = self.load_tree(), self.solve(), self.reference()
        x, w = self.address(self.args.x), self.address(self.args.w)
        self.report.payload = {
            "reference": o,
            "x": format_address(x),
            "w": format_address(w),
            "value": cylinder_measure(t, ef, x, w, o),
            "escape": escape_into(t, ef, w, o),
        }
        return 0

    def cmd_extension(self) -> int:
        t = self.load_tree()
        phi = load_cylinder_function(self.args.function, t)
        self.report.add_inputs({"function": self.args.function})
        ef = self.solve()
        query = [self.address(text) for text in self.args.vertices]
        values = harmonic_extension(t, ef, phi, query)
        self.report.payload = {
            "values": [{"vertex": format_address(x), "value": v} for x, v in zip(query, values)],
            "harmonicity_residual": harmonicity_residual(t, ef, phi, sorted(t.core_vertices)),
        }
        return 0

    def _verdict_payload(self, verdict: MvpVerdict, witness: Optional[ClassResidual]) -> Dict[str, Any]:
        self.report.warn(verdict.warnings)
        return {
            "weak": verdict.weak,
            "strong": verdict.strong,
            "witness": _witness(witness),
            "witness_class": None if witness is None else witness.label,
            "scale": verdict.scale,
            "classes": [_class_dict(item) for item in verdict.classes],
        }

    def cmd_mvp(self) -> int:
        t = self.load_tree()
        # support is checked against the core before anything is solved
        mu = load_measure(self.args.measure, t)
        self.report.add_inputs({"measure": self.args.measure})
        mode = self.args.mode
        ef = self.solve()
        o = self.args.reference

        if isinstance(mu, GeometricTailMeasure):
            if mode in ("strong", "cylinder"):
                raise InvalidMeasure(f"--mode {mode} is only decided for finitely supported measures")
            verdict = tail_weak_mvp(t, ef, mu, o, self.args.tol)
            self.report.payload = {"mode": mode, "integrable": True, **self._verdict_payload(verdict, verdict.weak_witness)}
            if mode == "both":
                self.report.warn(["the strong verdict is not decided for measures with a geometric tail"])
            return 0 if verdict.weak else VERDICT_FALSE

        if mode == "cylinder":
            result = cylinder_mvp(t, ef, mu, o, self.args.tol)
            self.report.payload = {
                "mode": mode,
                "passed": result.passed,
                "witness": result.witness,
                "scale": result.scale,
                "residuals": [{"vertex": label, "residual": value} for label, value in result.residuals],
            }
            return 0 if result.passed else VERDICT_FALSE

        verdict = classify_mvp(t, ef, mu, o, self.args.tol)
        if mode == "weak":
            witness, ok = verdict.weak_witness, verdict.weak
        elif mode == "strong":
            witness, ok = verdict.strong_witness, verdict.strong
        else:
            witness = verdict.weak_witness or verdict.strong_witness
            ok = verdict.weak and verdict.strong
        self.report.payload = {"mode": mode, **self._verdict_payload(verdict, witness)}
        if not ok:
            logger.info("[MVP] %s verdict fails at %s", mode, _witness(witness))
        return 0 if ok else VERDICT_FALSE

    def cmd_trees1(self) -> int:
        t, ef = self.load_tree(), self.solve()
        result = trees1_equivalence(t, ef)
        self.report.warn(result.warnings)
        payload: Dict[str, Any] = {
            "verdict": result.verdict,
            "conditions": dict(result.conditions),
            "recurrent_branches": [
                {"from": format_address(w.source), "to": format_address(w.target), "f_return": w.f_return}
                for w in result.branch_witnesses
            ],
            "zero_mass_cylinders": [format_address(w) for w in result.zero_mass_cylinders],
            "zero_flux_edges": [{"from": x, "to": format_address(y)} for x, y in result.zero_flux_edges],
            "weak_strong_equivalent": result.weak_strong_equivalent,
            "counterexample": None,
        }
        if result.counterexample is not None:
            tree, measure = result.counterexample
            payload["counterexample"] = {
                "measure": measure.to_dict(),
                "tree": None if tree is t else spec_to_dict(tree),
            }
        self.report.payload = payload
        return 0 if result.verdict else VERDICT_FALSE

    def cmd_simulate(self) -> int:
        t = self.load_tree()
        cfg = WalkConfig(
            trials=self.args.trials,
            horizon=self.args.horizon,
            seed=self.args.seed,
            depth=self.args.depth,
            shards=self.args.shards,
        )
        start, target = self.address(self.args.start), self.address(self.args.target)
        ef = self.solve()
        if self.args.estimate == "F":
            estimate = estimate_F(t, start, target, cfg)
            exact = F_between(t, ef, start, target)
        else:
            o = self.reference()
            estimate = estimate_cylinder(t, start, target, o, cfg, ef=ef)
            exact = cylinder_measure(t, ef, start, target, o)
        deviation = None
        if estimate.stderr > 0:
            deviation = (estimate.value - exact) / estimate.stderr
        if estimate.censored:
            logger.warning("[ORACLE] %d of %d trials censored at horizon %d", estimate.censored, cfg.trials, cfg.horizon)
        self.report.payload = {
            "estimate": self.args.estimate,
            "from": format_address(start),
            "at": format_address(target),
            "result": estimate.to_dict(),
            "exact": exact,
            "deviation_sigma": deviation,
            "config": {"trials": cfg.trials, "horizon": cfg.horizon, "seed": cfg.seed, "depth": cfg.depth, "shards": cfg.shards},
        }
        return 0

    # --- driver ---------------------------------------------------------------

    def run(self) -> int:
        handler: Callable[[], int] = getattr(self, f"cmd_{self.args.command}")
        try:
            status = handler()
        except MartinLabError as exc:
            logger.error("%s: %s", type(exc).__name__, exc)
            error: Dict[str, Any] = {"type": type(exc).__name__, "message": str(exc)}
            if isinstance(exc, InvalidSpec):
                error["issues"] = [
                    {"kind": issue.kind, "location": issue.location, "message": issue.message} for issue in exc.issues
                ]
            self.report.payload["error"] = error
            status = exc.exit_code
        except Exception as exc:
            logger.exception("Unexpected failure in %s", self.args.command)
            self.report.payload["error"] = {"type": type(exc).__name__, "message": str(exc)}
            status = 2
        self.report.exit_status = status
        self.emit()
        return status

    def emit(self) -> None:
        if self.args.output:
            self.report.write(self.args.output, self.args.format)
        else:
            sys.stdout.write(self.report.render(self.args.format))


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    return MartinLabApp(args, argv).run()


if __name__ == "__main__":
    sys.exit(main())
