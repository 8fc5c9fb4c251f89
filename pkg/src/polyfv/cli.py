"""Command-line driver: configured experiments with checks and artifacts.

A JSON configuration selects a mesh family, a problem, and a scheme;
the subcommand picks the run mode. `run` solves once, runs structural
diagnostics, and writes a one-row summary plus the solution field;
`convergence` refines the mesh and reports errors and observed orders;
`transient` advances an implicit Euler step with a lumped mass term and
tracks solution extrema. Exit code 0 means every requested check
passed, 1 means a check failed, and 2 means a stage errored out.
"""

import argparse
import csv
import json
import logging
import re
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
import scipy.io
import scipy.sparse
import scipy.sparse.linalg

from .diagnostics import DiagnosticsError, convergence_study, run_diagnostics
from .mesh import MeshError, build_cartesian, build_triangular, perturb_random
from .problem import Problem, ProblemError, TensorField, manufactured_case
from .schemes import (
    SchemeError,
    apply_nonlinear_correction,
    assemble_ddfv,
    assemble_hmm,
    assemble_mpfa_l,
    assemble_mpfa_o,
    assemble_tpfa,
    frozen_mmp,
    frozen_monotone_polygonal,
    frozen_monotone_triangular,
    solve_nonlinear,
)
from .schemes.nonlinear import FrozenFluxAssembly
from .sparse_linalg import LinearAlgebraError

log = logging.getLogger(__name__)


class ConfigError(Exception):
    """Raised for malformed or inconsistent experiment configurations."""


class StageError(Exception):
    """Wraps an error with the name of the pipeline stage that raised it."""

    def __init__(self, stage, error):
        super().__init__(f"{stage}: {error}")
        self.stage = stage
        self.error = error


_HANDLED = (ConfigError, MeshError, ProblemError, SchemeError,
            LinearAlgebraError, DiagnosticsError, OSError)


@contextmanager
def _stage(name):
    """Translate library errors into StageError(name, ...)."""
    try:
        yield
    except StageError:
        raise
    except _HANDLED as exc:
        raise StageError(name, exc) from exc


# --------------------------------------------------------------------------
# configuration


_LINEAR_BUILDERS = {
    "tpfa": assemble_tpfa,
    "mpfa_o": assemble_mpfa_o,
    "mpfa_l": assemble_mpfa_l,
    "hmm": assemble_hmm,
    "ddfv": assemble_ddfv,
}

_NONLINEAR_BUILDERS = {
    "mono_tri": frozen_monotone_triangular,
    "mono_poly": frozen_monotone_polygonal,
    "mmp": frozen_mmp,
}

_SCHEME_NAME = (r"^(tpfa|mpfa_o|mpfa_l|hmm|ddfv|mono_tri|mono_poly|mmp|"
                r"corrected\((tpfa|hmm)\))$")

_CORRECTED = re.compile(r"^corrected\((tpfa|hmm)\)$")

# schemes whose assembled matrix acts on cell (and possibly edge) rows and
# stays linear, as implicit Euler with a lumped cell mass requires
TRANSIENT_SCHEMES = ("tpfa", "mpfa_o", "mpfa_l", "hmm")

# configuration check name -> diagnostics report flag
CHECK_FLAGS = {
    "balance": "balanced",
    "conservativity": "conservative",
    "m_matrix": "m_matrix",
    "spd": "spd",
    "positivity": "positive_ok",
    "minmax": "minmax_ok",
    "exactness": "linearly_exact",
    "structure": "symmetric_nonneg_transmissibility",
}

DEFAULT_CHECKS = ("balance", "conservativity")

_DATA_FIELDS = {
    "zero": lambda x, y: 0.0,
    "one": lambda x, y: 1.0,
    "x": lambda x, y: x,
    "y": lambda x, y: y,
    "x+y": lambda x, y: x + y,
}

_DATA_SPEC = {"oneOf": [{"type": "number"},
                        {"type": "string", "enum": sorted(_DATA_FIELDS)}]}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["mesh", "problem", "scheme", "run"],
    "properties": {
        "mesh": {
            "type": "object",
            "additionalProperties": False,
            "required": ["generator", "nx", "ny"],
            "properties": {
                "generator": {"enum": ["cartesian", "triangular"]},
                "nx": {"type": "integer", "minimum": 1},
                "ny": {"type": "integer", "minimum": 1},
                "domain": {"type": "array", "items": {"type": "number"},
                           "minItems": 4, "maxItems": 4},
                "perturbation": {"type": "number", "minimum": 0,
                                 "exclusiveMaximum": 0.5},
                "seed": {"type": "integer", "minimum": 0},
                "cell_point_rule": {"enum": ["barycenter", "incenter",
                                             "lambda_incenter"]},
            },
        },
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "case": {"type": "string"},
                "tensor": {"oneOf": [
                    {"type": "number"},
                    {"type": "array", "minItems": 2, "maxItems": 2,
                     "items": {"type": "array", "minItems": 2, "maxItems": 2,
                               "items": {"type": "number"}}},
                ]},
                "source": _DATA_SPEC,
                "dirichlet": _DATA_SPEC,
            },
        },
        "scheme": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"type": "string", "pattern": _SCHEME_NAME},
                "tolerance": {"type": "number", "exclusiveMinimum": 0},
                "max_iterations": {"type": "integer", "minimum": 1},
                "relaxation": {"type": "number", "exclusiveMinimum": 0,
                               "maximum": 1},
            },
        },
        "run": {
            "type": "object",
            "additionalProperties": False,
            "required": ["mode"],
            "properties": {
                "mode": {"enum": ["solve", "convergence", "transient"]},
                "levels": {"type": "integer", "minimum": 2},
                "min_order": {"type": "number"},
                "min_flux_order": {"type": "number"},
                "final_time": {"type": "number", "exclusiveMinimum": 0},
                "steps": {"type": "integer", "minimum": 1},
                "bounds": {"type": "array", "items": {"type": "number"},
                           "minItems": 2, "maxItems": 2},
            },
        },
        "checks": {"type": "array",
                   "items": {"enum": sorted(CHECK_FLAGS)}},
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"prefix": {"type": "string"}},
        },
    },
}

_MODE_KEYS = {
    "solve": (set(), set()),
    "convergence": ({"levels"}, {"min_order", "min_flux_order"}),
    "transient": ({"final_time", "steps"}, {"bounds"}),
}

_NONLINEAR_KEYS = ("tolerance", "max_iterations", "relaxation")


@dataclass
class ExperimentConfig:
    """Validated experiment description loaded from a JSON file."""

    mesh: dict
    problem: dict
    scheme: dict
    run: dict
    checks: tuple = DEFAULT_CHECKS
    output: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw):
        try:
            jsonschema.validate(raw, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "top level"
            raise ConfigError(f"config invalid at {where}: "
                              f"{exc.message}") from exc
        config = cls(
            mesh=raw["mesh"],
            problem=raw["problem"],
            scheme=raw["scheme"],
            run=raw["run"],
            checks=tuple(raw.get("checks", DEFAULT_CHECKS)),
            output=raw.get("output", {}),
        )
        config._validate_semantics("checks" in raw)
        return config

    def _validate_semantics(self, explicit_checks):
        p = self.problem
        if "case" in p:
            if len(p) > 1:
                raise ConfigError("problem.case excludes explicit tensor, "
                                  "source, and dirichlet entries")
        else:
            missing = sorted({"tensor", "source", "dirichlet"} - p.keys())
            if missing:
                raise ConfigError("explicit problems need tensor, source, "
                                  f"and dirichlet; missing {missing}")
        if (self.mesh.get("cell_point_rule")
                and self.mesh["generator"] != "triangular"):
            raise ConfigError("cell_point_rule applies to the triangular "
                              "generator only")
        mode = self.run["mode"]
        required, optional = _MODE_KEYS[mode]
        present = set(self.run) - {"mode"}
        if not required <= present:
            raise ConfigError(f"run mode {mode!r} needs "
                              f"{sorted(required - present)}")
        stray = present - required - optional
        if stray:
            raise ConfigError(f"run keys {sorted(stray)} do not apply to "
                              f"mode {mode!r}")
        if explicit_checks and mode != "solve":
            raise ConfigError("checks apply to solve mode; convergence uses "
                              "min_order and transient uses bounds")
        bounds = self.run.get("bounds")
        if bounds is not None and not bounds[0] < bounds[1]:
            raise ConfigError("run.bounds must be an increasing pair")
        name = self.scheme["name"]
        if name in _LINEAR_BUILDERS:
            stray = [k for k in _NONLINEAR_KEYS if k in self.scheme]
            if stray:
                raise ConfigError(f"scheme keys {stray} apply to nonlinear "
                                  f"schemes only, not {name!r}")
        elif mode == "convergence" and "relaxation" in self.scheme:
            raise ConfigError("relaxation is not supported in convergence "
                              "mode")
        if mode == "transient" and name not in TRANSIENT_SCHEMES:
            raise ConfigError("transient mode supports the linear schemes "
                              f"{list(TRANSIENT_SCHEMES)}, not {name!r}")

    # -- builders ----------------------------------------------------------

    def build_problem(self):
        p = self.problem
        if "case" in p:
            return manufactured_case(p["case"])
        tensor = p["tensor"]
        if isinstance(tensor, (int, float)):
            tensor_field = TensorField.isotropic(float(tensor))
        else:
            tensor_field = TensorField.constant(tensor)
        return Problem(tensor=tensor_field,
                       source=_data_fn(p["source"]),
                       dirichlet=_data_fn(p["dirichlet"]),
                       name="config")

    def build_mesh(self, problem, level=0):
        spec = self.mesh
        factor = 2 ** level
        nx, ny = spec["nx"] * factor, spec["ny"] * factor
        domain = tuple(spec.get("domain", (0.0, 0.0, 1.0, 1.0)))
        if spec["generator"] == "cartesian":
            mesh = build_cartesian(nx, ny, domain)
        else:
            rule = spec.get("cell_point_rule", "barycenter")
            tensor = problem.tensor if rule == "lambda_incenter" else None
            mesh = build_triangular(nx, ny, cell_point_rule=rule,
                                    tensor=tensor, domain=domain)
        amplitude = spec.get("perturbation", 0.0)
        if amplitude:
            mesh = perturb_random(mesh, amplitude,
                                  spec.get("seed", 0) + level)
        return mesh

    def scheme_builder(self):
        name = self.scheme["name"]
        if name in _LINEAR_BUILDERS:
            return name, _LINEAR_BUILDERS[name]
        if name in _NONLINEAR_BUILDERS:
            return name, _NONLINEAR_BUILDERS[name]
        base = _CORRECTED.match(name).group(1)

        def corrected(mesh, problem):
            return apply_nonlinear_correction(base, mesh, problem)

        return name, corrected

    def solver_params(self, default_tol=1e-8):
        return {
            "tol": self.scheme.get("tolerance", default_tol),
            "maxit": self.scheme.get("max_iterations", 200),
            "omega": self.scheme.get("relaxation", 1.0),
        }

    def artifact(self, filename):
        return self.output.get("prefix", "") + filename

    def failed_checks(self, report):
        """Requested checks whose report flag is not True."""
        failed = []
        for check in self.checks:
            flag = report.flags.get(CHECK_FLAGS[check])
            if flag is not True:
                failed.append((check, flag))
        return failed


def _data_fn(value):
    if isinstance(value, (int, float)):
        constant = float(value)
        return lambda x, y: constant
    return _DATA_FIELDS[value]


# --------------------------------------------------------------------------
# artifact writers


def _write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()),
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    log.info("wrote %s", path)


def _dump_field(path, mesh, values):
    lines = ["# cell_id x y u"]
    for k, ((x, y), v) in enumerate(zip(mesh.cell_points, values)):
        lines.append(f"{k} {x:.17g} {y:.17g} {v:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")
    log.info("wrote %s", path)


def _dump_matrix(path, matrix):
    scipy.io.mmwrite(str(path), matrix.csr if hasattr(matrix, "csr")
                     else matrix)
    log.info("wrote %s", path)


def _render_field(path, mesh, values, title):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.collections import PolyCollection

    polygons = [mesh.vertices[list(loop)] for loop in mesh.cells]
    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    coll = PolyCollection(polygons, array=np.asarray(values, dtype=float),
                          edgecolor="black", linewidth=0.15)
    ax.add_collection(coll)
    ax.autoscale_view()
    ax.set_aspect("equal")
    ax.set_title(title)
    fig.colorbar(coll, ax=ax)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    log.info("wrote %s", path)


def _render_convergence(path, study, title):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    ax.loglog(study.mesh_sizes, study.cell_errors, "o-",
              label="cell error")
    if all(fe is not None for fe in study.flux_errors):
        ax.loglog(study.mesh_sizes, study.flux_errors, "s--",
                  label="flux error")
    ax.set_xlabel("h")
    ax.set_ylabel("error")
    ax.grid(True, which="both", alpha=0.4)
    ax.legend()
    ax.set_title(title)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    log.info("wrote %s", path)


def _render_extrema(path, times, minima, maxima, title):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(times, minima, label="min u")
    ax.plot(times, maxima, label="max u")
    ax.set_xlabel("t")
    ax.set_ylabel("cell extrema")
    ax.grid(True, alpha=0.4)
    ax.legend()
    ax.set_title(title)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    log.info("wrote %s", path)


# --------------------------------------------------------------------------
# run modes


def run_solve(config, out_dir, dump_matrix=False):
    """Solve one configuration, run diagnostics, write the artifacts."""
    with _stage("problem setup"):
        problem = config.build_problem()
    with _stage("mesh generation"):
        mesh = config.build_mesh(problem)
        log.info("mesh: %d cells, h=%.4g", mesh.nc, mesh.h)
    with _stage("scheme assembly"):
        name, builder = config.scheme_builder()
        built = builder(mesh, problem)
    nonlinear = isinstance(built, FrozenFluxAssembly)
    with _stage("nonlinear solve" if nonlinear else "linear solve"):
        if nonlinear:
            solution, result = solve_nonlinear(built,
                                               **config.solver_params())
            iterations = result.iterations
            log.info("%s converged in %d iterations", name, iterations)
        else:
            solution = built.solve()
            iterations = 1
    with _stage("diagnostics"):
        has_exact = problem.exact is not None
        report = run_diagnostics(
            name, mesh, problem, built, solution,
            exactness_builder=builder if has_exact else None,
            exactness_case=problem if has_exact else None,
        )
    report.scalars["iterations"] = iterations
    with _stage("output"):
        row = {"case": problem.name}
        row.update(report.row())
        _write_csv(out_dir / config.artifact("summary.csv"), [row])
        u = solution.cell_values(mesh)
        _dump_field(out_dir / config.artifact("field.txt"), mesh, u)
        with open(out_dir / config.artifact("report.json"), "w") as fh:
            json.dump(report.to_json(), fh, indent=2)
            fh.write("\n")
        _render_field(out_dir / config.artifact("field.png"), mesh, u,
                      title=f"{name}: {report.mesh_descriptor}")
        if dump_matrix:
            matrix = (built.freeze(solution.values).matrix if nonlinear
                      else built.system.matrix)
            _dump_matrix(out_dir / config.artifact("matrix.mtx"), matrix)
    failed = config.failed_checks(report)
    for check, flag in failed:
        log.error("check %r failed (flag %s): %s", check, flag,
                  report.witnesses.get(CHECK_FLAGS[check], ""))
    return 1 if failed else 0


def run_convergence(config, out_dir, dump_matrix=False):
    """Refinement study: error table, plot data, and order checks."""
    with _stage("problem setup"):
        problem = config.build_problem()
    with _stage("configuration"):
        if problem.exact is None:
            raise ConfigError("convergence mode needs a problem with an "
                              "exact solution")
    levels = config.run["levels"]
    with _stage("mesh generation"):
        meshes = [config.build_mesh(problem, level=k)
                  for k in range(levels)]
    name, builder = config.scheme_builder()
    params = config.solver_params(default_tol=1e-10)
    with _stage("convergence study"):
        study = convergence_study(builder, problem, meshes,
                                  tol=params["tol"], maxit=params["maxit"])
    with _stage("output"):
        rows, plot_rows = [], []
        for i, h in enumerate(study.mesh_sizes):
            flux_error = study.flux_errors[i]
            rows.append({
                "h": h,
                "e_u": study.cell_errors[i],
                "order_u": "" if i == 0 else study.cell_orders[i - 1],
                "e_flux": "" if flux_error is None else flux_error,
                "order_flux": "" if i == 0 else study.flux_orders[i - 1],
                "iterations": study.iterations[i],
            })
            plot_rows.append({
                "cell_h": h,
                "cell_error": study.cell_errors[i],
                "flux_h": h,
                "flux_error": "" if flux_error is None else flux_error,
            })
        _write_csv(out_dir / config.artifact("convergence.csv"), rows)
        _write_csv(out_dir / config.artifact("convergence_plot.csv"),
                   plot_rows)
        _render_convergence(out_dir / config.artifact("convergence.png"),
                            study, title=f"{name}: {problem.name}")
        if dump_matrix:
            built = builder(meshes[-1], problem)
            if isinstance(built, FrozenFluxAssembly):
                from .schemes.base import dof_location
                guess = np.array([problem.exact(*dof_location(meshes[-1], d))
                                  for d in built.layout.free_ids])
                matrix = built.freeze(guess).matrix
            else:
                matrix = built.system.matrix
            _dump_matrix(out_dir / config.artifact("matrix.mtx"), matrix)
    failed = []
    if study.exact:
        log.info("study hit rounding level on every mesh; orders are "
                 "undefined and order checks pass vacuously")
    else:
        if ("min_order" in config.run
                and not study.cell_orders[-1] >= config.run["min_order"]):
            failed.append(("min_order", study.cell_orders[-1]))
        if ("min_flux_order" in config.run
                and not study.flux_orders[-1]
                >= config.run["min_flux_order"]):
            failed.append(("min_flux_order", study.flux_orders[-1]))
    for check, value in failed:
        log.error("check %r failed: final observed order %s", check, value)
    return 1 if failed else 0


def run_transient(config, out_dir, dump_matrix=False):
    """Implicit Euler with lumped cell mass; records per-step extrema."""
    with _stage("problem setup"):
        problem = config.build_problem()
    with _stage("configuration"):
        if problem.initial is None:
            raise ConfigError("transient mode needs a problem with an "
                              "initial datum")
    with _stage("mesh generation"):
        mesh = config.build_mesh(problem)
        log.info("mesh: %d cells, h=%.4g", mesh.nc, mesh.h)
    with _stage("scheme assembly"):
        name, builder = config.scheme_builder()
        built = builder(mesh, problem)
    final_time = config.run["final_time"]
    steps = config.run["steps"]
    dt = final_time / steps
    with _stage("transient run"):
        layout = built.layout
        cell_rows = np.array(layout.rows_of_kind("cell"))
        mass = np.zeros(layout.n)
        u = np.zeros(layout.n)
        for i in cell_rows:
            k = layout.free_ids[i][1]
            mass[i] = mesh.cell_areas[k]
            u[i] = problem.initial(*mesh.cell_points[k])
        step_matrix = (built.system.matrix.csr
                       + scipy.sparse.diags(mass / dt)).tocsc()
        lu = scipy.sparse.linalg.splu(step_matrix)
        rhs_base = built.system.rhs
        records = [(0, 0.0, float(u[cell_rows].min()),
                    float(u[cell_rows].max()))]
        for n in range(1, steps + 1):
            u = lu.solve(rhs_base + mass / dt * u)
            cells = u[cell_rows]
            records.append((n, n * dt, float(cells.min()),
                            float(cells.max())))
        log.info("%d steps of dt=%.4g done; final extrema [%.6g, %.6g]",
                 steps, dt, records[-1][2], records[-1][3])
    global_min = min(r[2] for r in records)
    global_max = max(r[3] for r in records)
    with _stage("output"):
        rows = [{"step": s, "t": t, "min_u": lo, "max_u": hi}
                for s, t, lo, hi in records]
        _write_csv(out_dir / config.artifact("transient.csv"), rows)
        _write_csv(out_dir / config.artifact("summary.csv"), [{
            "scheme": name,
            "mesh": f"{mesh.nc} cells, h={mesh.h:.5g}",
            "final_time": final_time,
            "steps": steps,
            "final_min": records[-1][2],
            "final_max": records[-1][3],
            "global_min": global_min,
            "global_max": global_max,
        }])
        _render_extrema(out_dir / config.artifact("transient.png"),
                        [r[1] for r in records], [r[2] for r in records],
                        [r[3] for r in records],
                        title=f"{name}: cell extrema over time")
        _dump_field(out_dir / config.artifact("field.txt"), mesh,
                    u[cell_rows])
        if dump_matrix:
            _dump_matrix(out_dir / config.artifact("matrix.mtx"),
                         step_matrix)
    bounds = config.run.get("bounds")
    if bounds is not None:
        lo, hi = bounds
        violations = [r for r in records if r[2] < lo or r[3] > hi]
        if violations:
            first = violations[0]
            log.error("extrema left [%g, %g] at %d of %d recorded steps, "
                      "first at step %d: [%.6g, %.6g]", lo, hi,
                      len(violations), len(records), first[0], first[2],
                      first[3])
            return 1
        log.info("extrema stayed within [%g, %g] at every step", lo, hi)
    return 0


# --------------------------------------------------------------------------
# entry point


_MODE_OF_COMMAND = {
    "run": "solve",
    "convergence": "convergence",
    "transient": "transient",
}

_RUNNERS = {
    "run": run_solve,
    "convergence": run_convergence,
    "transient": run_transient,
}


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config",
                        help="path to a JSON experiment configuration")
    common.add_argument("--out-dir", default=".",
                        help="directory for output artifacts (default: .)")
    common.add_argument("--dump-matrix", action="store_true",
                        help="also write the assembled matrix in "
                             "MatrixMarket format")
    common.add_argument("--quiet", action="store_true",
                        help="suppress progress logging")
    parser = argparse.ArgumentParser(
        prog="polyfv",
        description="Finite-volume diffusion experiments on polygonal "
                    "meshes with structural checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common],
                   help="solve one configuration and run its checks")
    sub.add_parser("convergence", parents=[common],
                   help="refinement study with observed orders")
    sub.add_parser("transient", parents=[common],
                   help="implicit Euler stepping with extrema tracking")
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        with _stage("configuration"):
            config = ExperimentConfig.from_file(args.config)
            expected = _MODE_OF_COMMAND[args.command]
            if config.run["mode"] != expected:
                raise ConfigError(
                    f"subcommand {args.command!r} expects run.mode "
                    f"{expected!r}, got {config.run['mode']!r}")
        with _stage("output"):
            out_dir = Path(args.out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
        return _RUNNERS[args.command](config, out_dir, args.dump_matrix)
    except StageError as exc:
        print(f"polyfv: error during {exc.stage}: {exc.error}",
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
