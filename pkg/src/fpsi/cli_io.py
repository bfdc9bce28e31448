"""Configuration files, VTK/CSV output and the ``fpsi`` command line."""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import sys
import time as _time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np

from .analysis import TABLE_QUANTITIES, ConvergenceRow, ErrorAccumulator, convergence_orders
from .elements import geometry
from .forms import Assembler, Discretization, ProblemConfig, SolutionState, build_discretization
from .mesh import MeshError, example1_meshes, read_mesh
from .solver import (PicardError, PicardSettings, RunTrace, SolverError, TimeSettings,
                     constraint_residual, discrete_energy_vec, time_loop)
from .viscosity import Law, ViscosityModel, check_monotonicity, nu_darcy, nu_fluid

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is a JSON pointer to the offending value."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# -- configuration --------------------------------------------------------------

def load_schema() -> dict:
    text = resources.files("fpsi").joinpath("data/config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _pointer(parts) -> str:
    return "/" + "/".join(str(p) for p in parts) if len(parts) else "/"


def _fill_defaults(doc: dict, schema: dict, root: dict) -> dict:
    """Copy of ``doc`` with schema defaults applied recursively."""
    if "$ref" in schema:
        name = schema["$ref"].rsplit("/", 1)[-1]
        schema = root["$defs"][name]
    out = copy.deepcopy(doc)
    for key, sub in schema.get("properties", {}).items():
        if key not in out and "default" in sub:
            out[key] = copy.deepcopy(sub["default"])
        if key in out and isinstance(out[key], dict):
            out[key] = _fill_defaults(out[key], sub, root)
    return out


@dataclass
class RunConfig:
    """A validated configuration document and the objects built from it."""

    document: dict
    problem: ProblemConfig
    time: TimeSettings
    picard: PicardSettings
    base_dir: Path = field(default_factory=Path.cwd)

    @property
    def geometry(self) -> dict:
        return self.document["geometry"]

    @property
    def output(self) -> dict:
        return self.document["output"]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.document == other.document


def _model(doc: dict, path: str) -> ViscosityModel:
    law = Law(doc["law"])
    if law in (Law.Carreau, Law.Cross) and not doc["nu_inf"] < doc["nu0"]:
        raise ConfigError(path + "/nu_inf", f"nu_inf ({doc['nu_inf']}) must be below nu0 ({doc['nu0']})")
    try:
        return ViscosityModel(law, doc["nu0"], doc["nu_inf"], doc["K"], doc["r"], doc["m_c"])
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from exc


def build_config(doc: dict, base_dir: Optional[Path] = None) -> RunConfig:
    """Validate a configuration object (already decoded from JSON)."""
    schema = load_schema()
    if not isinstance(doc, dict):
        raise ConfigError("/", "configuration must be a JSON object")
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(doc),
                    key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        e = errors[0]
        raise ConfigError(_pointer(list(e.absolute_path)), e.message)
    doc = _fill_defaults(doc, schema, schema)
    visc = doc["viscosity"]
    law_schema = schema["$defs"]["law"]
    for key in ("fluid", "darcy", "interface"):
        if key in visc:
            visc[key] = _fill_defaults(visc[key], law_schema, schema)
    geo = doc["geometry"]
    if geo["preset"] == "import" and "mesh_files" not in geo:
        raise ConfigError("/geometry/mesh_files", "required when preset is 'import'")
    fluid = _model(visc["fluid"], "/viscosity/fluid")
    darcy = _model(visc["darcy"], "/viscosity/darcy")
    interface = _model(visc["interface"], "/viscosity/interface") if "interface" in visc else None
    ph, bd = doc["physics"], doc["boundary"]
    try:
        problem = ProblemConfig(lambda_p=ph["lambda_p"], mu_p=ph["mu_p"], s0=ph["s0"], alpha_p=ph["alpha_p"],
                                alpha_bjs=ph["alpha_bjs"], kappa=tuple(ph["kappa"]), fluid=fluid, darcy=darcy,
                                interface=interface, bjs_nonlinearity=visc["bjs_nonlinearity"],
                                power_law_eps=visc["power_law_eps"], p_in=bd["p_in"], p_out=bd["p_out"])
    except ValueError as exc:
        raise ConfigError("/physics", str(exc)) from exc
    tm = doc["time"]
    try:
        time = TimeSettings(tm["tau"], tm["t_end"])
    except ValueError as exc:
        raise ConfigError("/time/tau", str(exc)) from exc
    pc = doc["picard"]
    picard = PicardSettings(max_iter=pc["max_iter"], rel_tol=pc["rel_tol"], damping=pc["damping"])
    return RunConfig(doc, problem, time, picard, Path(base_dir) if base_dir else Path.cwd())


def parse_config(text: str, base_dir: Optional[Path] = None) -> RunConfig:
    """Parse and validate a JSON configuration; defaults give the example1 preset."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("/", f"invalid JSON: {exc}") from exc
    return build_config(doc, base_dir)


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.document, indent=2, sort_keys=True)


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), path.parent)


def preset_path(name: str) -> Path:
    """Path of a shipped configuration ('example1' or 'example2')."""
    return Path(str(resources.files("fpsi").joinpath(f"data/{name}.json")))


def build_meshes(cfg: RunConfig, n: Optional[int] = None):
    """Fluid and porous meshes of a configuration; ``n`` overrides all grid counts."""
    geo = cfg.geometry
    if geo["preset"] == "import":
        if n is not None:
            raise ConfigError("/geometry/preset", "refinement levels need the structured example1 preset")
        files = geo["mesh_files"]
        try:
            return (read_mesh(cfg.base_dir / files["fluid"]), read_mesh(cfg.base_dir / files["porous"]))
        except OSError as exc:
            raise ConfigError("/geometry/mesh_files", str(exc)) from exc
    if n is not None:
        return example1_meshes(n, n, n, n)
    return example1_meshes(geo["nx_f"], geo["ny_f"], geo["nx_p"], geo["ny_p"])


# -- VTK ------------------------------------------------------------------------

def _vtk_grid(out, title, nodes, tris, point_data, cell_data):
    out.write("# vtk DataFile Version 2.0\n")
    out.write(f"{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
    out.write(f"POINTS {len(nodes)} double\n")
    for x, y in nodes:
        out.write(f"{x:.9g} {y:.9g} 0\n")
    out.write(f"CELLS {len(tris)} {4 * len(tris)}\n")
    for a, b, c in tris:
        out.write(f"3 {a} {b} {c}\n")
    out.write(f"CELL_TYPES {len(tris)}\n")
    out.write("5\n" * len(tris))
    for header, data, count in (("POINT_DATA", point_data, len(nodes)), ("CELL_DATA", cell_data, len(tris))):
        if not data:
            continue
        out.write(f"{header} {count}\n")
        for name, arr in data.items():
            arr = np.asarray(arr, dtype=float)
            if arr.ndim == 1:
                out.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                out.write("\n".join(f"{v:.9g}" for v in arr) + "\n")
            else:
                out.write(f"VECTORS {name} double\n")
                for vx, vy in arr:
                    out.write(f"{vx:.9g} {vy:.9g} 0\n")


def vtk_fields(state: SolutionState, disc: Discretization, problem: Optional[ProblemConfig] = None):
    """Point and cell arrays of both subdomains, as plain numpy arrays."""
    problem = problem or ProblemConfig()
    f, p = disc.fluid, disc.porous
    nvf, nvp = len(f.nodes), len(p.nodes)
    per = nvf + len(f.triangles)
    # bubbles vanish at vertices, so nodal velocity is the P1 part
    uf = np.column_stack([state.uf[:nvf], state.uf[per:per + nvf]])
    eta = np.column_stack([state.eta[:nvp], state.eta[nvp:]])
    gp = geometry(p)
    centroid = gp.vertices.mean(axis=1)
    sign = p.edge_signs
    phi = sign[:, :, None] * (centroid[:, None, :] - gp.vertices) / (2.0 * gp.area[:, None, None])
    up = np.einsum("tk,tkc->tc", state.up[p.tri_edges], phi)
    speed = np.linalg.norm(up, axis=1)
    # fluid viscosity at barycenters
    from .analysis import eval_uf
    bary = np.full((len(f.triangles), 3), 1.0 / 3.0)
    _, grad = eval_uf(disc, state.uf, np.arange(len(f.triangles)), bary)
    dmag = np.linalg.norm(0.5 * (grad + np.transpose(grad, (0, 2, 1))), axis=(1, 2))
    nu_f = nu_fluid(problem.fluid, dmag, problem.power_law_eps)
    nu_p = nu_darcy(problem.darcy, speed, float(np.sqrt(problem.kappa[0] * problem.kappa[1])),
                    problem.power_law_eps)
    fluid = ({"velocity": uf, "pressure": state.pf}, {"viscosity": nu_f})
    porous = ({"displacement": eta},
              {"pressure": state.pp, "darcy_velocity": up, "darcy_speed": speed, "viscosity": nu_p})
    return fluid, porous


def write_vtk(state: SolutionState, disc: Discretization, path, problem: Optional[ProblemConfig] = None):
    """Write ``<path>_fluid.vtk`` and ``<path>_porous.vtk``; returns both paths."""
    path = Path(path)
    fluid, porous = vtk_fields(state, disc, problem)
    out = []
    for tag, mesh, (pdata, cdata) in (("fluid", disc.fluid, fluid), ("porous", disc.porous, porous)):
        target = path.with_name(f"{path.name}_{tag}.vtk")
        buf = io.StringIO()
        _vtk_grid(buf, f"fpsi {tag} t={state.time:.9g}", mesh.nodes, mesh.triangles, pdata, cdata)
        target.write_text(buf.getvalue(), encoding="ascii")
        out.append(target)
    return out


def read_vtk(path) -> dict:
    """Read a file written by :func:`write_vtk` into ``{"points", "cells", "point_data", "cell_data"}``."""
    tokens = Path(path).read_text(encoding="ascii").split("\n")
    if not tokens[0].startswith("# vtk DataFile"):
        raise ValueError("not a legacy VTK file")
    words = " ".join(tokens[4:]).split()
    res = {"title": tokens[1], "point_data": {}, "cell_data": {}}
    i, section = 0, None
    while i < len(words):
        w = words[i]
        if w == "POINTS":
            n = int(words[i + 1])
            res["points"] = np.array(words[i + 3:i + 3 + 3 * n], float).reshape(n, 3)
            i += 3 + 3 * n
        elif w == "CELLS":
            n = int(words[i + 1])
            res["cells"] = np.array(words[i + 3:i + 3 + 4 * n], int).reshape(n, 4)[:, 1:]
            i += 3 + 4 * n
        elif w == "CELL_TYPES":
            n = int(words[i + 1])
            res["cell_types"] = np.array(words[i + 2:i + 2 + n], int)
            i += 2 + n
        elif w in ("POINT_DATA", "CELL_DATA"):
            section = "point_data" if w == "POINT_DATA" else "cell_data"
            count = int(words[i + 1])
            i += 2
        elif w == "SCALARS":
            name = words[i + 1]
            res[section][name] = np.array(words[i + 6:i + 6 + count], float)
            i += 6 + count
        elif w == "VECTORS":
            name = words[i + 1]
            res[section][name] = np.array(words[i + 3:i + 3 + 3 * count], float).reshape(count, 3)[:, :2]
            i += 3 + 3 * count
        else:
            raise ValueError(f"unexpected token {w!r}")
    return res


# -- CSV ------------------------------------------------------------------------

def write_trace_csv(trace: RunTrace, path):
    """Columns: step, time, picard_iterations, final_increment, linear_residual, energy, converged."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RunTrace.FIELDS)
        for r in trace.records:
            w.writerow([r.step, repr(r.time), r.picard_iterations, repr(r.final_increment),
                        repr(r.linear_residual), repr(r.energy), int(r.converged)])


@dataclass
class ConvergenceReport:
    """Rows ordered by decreasing h, plus run metadata."""

    rows: list
    metadata: dict

    @property
    def quantities(self) -> list:
        return list(TABLE_QUANTITIES)

    def orders(self, key: str) -> list:
        return [r.orders[key] for r in self.rows[1:]]

    def errors(self, key: str) -> list:
        return [r.errors[key] for r in self.rows]

    def header(self) -> list:
        cols = ["h"]
        for q in self.quantities:
            cols += [f"{q}_error", f"{q}_order"]
        return cols

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(self.header())
        for r in self.rows:
            line = [repr(r.h)]
            for q in self.quantities:
                o = r.orders.get(q)
                line += [repr(r.errors[q]), "" if o is None else repr(o)]
            w.writerow(line)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, newline="")
        return text

    def table(self) -> str:
        names = self.quantities
        head = f"{'h':>8} " + " ".join(f"{q:>19}" for q in names)
        lines = [head, "-" * len(head)]
        for r in self.rows:
            cells = []
            for q in names:
                o = r.orders.get(q)
                cells.append(f"{r.errors[q]:.2e}" + ("       " if o is None else f" ({o:4.2f})"))
            lines.append(f"1/{round(1 / r.h):<6d} " + " ".join(f"{c:>19}" for c in cells))
        return "\n".join(lines)


def convergence_study(cfg: RunConfig, levels: Sequence[int], reference: int,
                      progress=None) -> ConvergenceReport:
    """Relative errors of each level against a finer reference run on nested grids.

    Coarse levels keep every snapshot; the reference run streams its states
    into the error accumulators so it never stores its own history.
    """
    levels = sorted(set(int(n) for n in levels))
    if len(levels) < 1:
        raise ValueError("need at least one level")
    if reference <= levels[-1]:
        raise ValueError("reference must be strictly finer than every level")
    for n in levels:
        ratio = reference // n
        if reference % n or ratio & (ratio - 1):
            raise ValueError(f"level {n} is not nested in reference {reference} by a power of two")
    if cfg.geometry["preset"] != "example1":
        raise ConfigError("/geometry/preset", "convergence studies need the structured example1 preset")
    picard = PicardSettings(max_iter=cfg.picard.max_iter, rel_tol=cfg.picard.rel_tol,
                            damping=cfg.picard.damping, warm_start="extrapolate")
    say = progress or (lambda msg: None)
    t0 = _time.time()
    worst = [0.0]

    def track(step, state, result):
        r, b = constraint_residual(result.system, state)
        worst[0] = max(worst[0], r / b if b > 0 else r)

    runs = []
    for n in levels:
        disc = build_discretization(*build_meshes(cfg, n))
        asm = Assembler(disc, cfg.problem)
        _, trace, snaps = time_loop(asm, cfg.time, picard, snapshot_every=1, callback=track)
        runs.append((disc, snaps))
        say(f"level 1/{n}: {len(trace)} steps, {int(trace.column('picard_iterations').sum())} Picard "
            f"iterations, {_time.time() - t0:.0f}s")
    ref_disc = build_discretization(*build_meshes(cfg, reference))
    accs = []
    for d, _ in runs:
        accs.append(ErrorAccumulator(d, ref_disc, TABLE_QUANTITIES, share=accs[0] if accs else None))

    def compare(step, state, result):
        track(step, state, result)
        for acc, (_, snaps) in zip(accs, runs):
            acc.add(snaps[step], state)
        if step % 10 == 0:
            say(f"reference 1/{reference}: step {step}, {_time.time() - t0:.0f}s")

    _, ref_trace, _ = time_loop(Assembler(ref_disc, cfg.problem), cfg.time, picard,
                                snapshot_every=None, callback=compare)
    errors = [acc.result() for acc in accs]
    rows = []
    for k, n in enumerate(levels):
        orders = {}
        if k > 0:
            for q in TABLE_QUANTITIES:
                h = [1.0 / levels[k - 1], 1.0 / n]
                orders[q] = convergence_orders([errors[k - 1][q], errors[k][q]], h)[0]
        rows.append(ConvergenceRow(1.0 / n, errors[k], orders))
    meta = {"reference_h": 1.0 / reference, "tau": cfg.time.tau, "t_end": cfg.time.t_end,
            "preset": cfg.geometry["preset"], "max_constraint_residual": worst[0],
            "reference_picard_iterations": int(ref_trace.column("picard_iterations").sum()),
            "seconds": _time.time() - t0}
    return ConvergenceReport(rows, meta)


# -- property checks -------------------------------------------------------------

def example1_laws() -> dict:
    return {"carreau": ViscosityModel(Law.Carreau), "cross": ViscosityModel(Law.Cross),
            "power_law": ViscosityModel(Law.PowerLaw)}


def monotonicity_checks(models: Optional[dict] = None, seed: int = 0, n_samples: int = 100_000,
                        c: Optional[float] = None) -> list:
    """(name, passed, detail) for each law: (A) for bounded laws, (B) for the power law."""
    models = example1_laws() if models is None else models
    out = []
    for name, model in models.items():
        rep = check_monotonicity(model, n_samples=n_samples, rng_seed=seed, c=c)
        if model.law is Law.PowerLaw:
            ok = rep.holds_B()
            detail = f"B1 min {rep.min_quotient_B1:.3e}, sweep min {rep.sweep_min_B1:.3e}"
        else:
            ok = rep.holds_A()
            detail = f"A1 min {rep.min_quotient_A1:.3e}, sweep min {rep.sweep_min_A1:.3e}"
        out.append((name, ok, detail))
    return out


def energy_problem() -> ProblemConfig:
    """Zero sources and boundary data, no BJS friction, a unit pressure patch in the porous center."""
    def patch(x, y, t):
        return ((np.abs(x - 1.5) < 0.25) & (np.abs(y - 0.5) < 0.25)).astype(float)
    return ProblemConfig(alpha_bjs=0.0, p_in=0.0, p_out=0.0, p_p0=patch)


def energy_check(n: int = 20, steps: int = 100, tau: float = 0.01, rtol: float = 1e-12):
    """Run the dissipation problem; returns (passed, energies including the initial one)."""
    disc = build_discretization(*example1_meshes(n))
    asm = Assembler(disc, energy_problem())
    init = asm.initial_state(0.0)
    energies = [discrete_energy_vec(asm, init)]
    _, trace, _ = time_loop(asm, TimeSettings(tau, steps * tau), snapshot_every=None, initial=init)
    energies += list(trace.column("energy"))
    e = np.asarray(energies)
    return bool(np.all(e[1:] <= e[:-1] * (1 + rtol))), e


# -- commands --------------------------------------------------------------------

def cmd_run(config_path, out=sys.stdout, err=sys.stderr) -> int:
    try:
        cfg = load_config(config_path)
    except FileNotFoundError:
        print(f"error: config file not found: {config_path}", file=err)
        return 2
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=err)
        return 2
    try:
        disc = build_discretization(*build_meshes(cfg))
    except (MeshError, ConfigError) as exc:
        print(f"error: {exc}", file=err)
        return 2
    outdir = Path(cfg.output["directory"])
    outdir.mkdir(parents=True, exist_ok=True)
    formats = cfg.output["formats"]
    every = cfg.output["snapshot_every"]
    asm = Assembler(disc, cfg.problem)
    n_steps = cfg.time.n_steps

    def dump(step, state):
        if "vtk" in formats:
            write_vtk(state, disc, outdir / f"state_{step:05d}", cfg.problem)

    init = asm.initial_state(0.0)
    dump(0, init)

    def cb(step, state, result):
        if step % every == 0 or step == n_steps:
            dump(step, state)

    try:
        _, trace, _ = time_loop(asm, cfg.time, cfg.picard, snapshot_every=None, callback=cb, initial=init)
    except (PicardError, SolverError) as exc:
        print(f"error: {exc}", file=err)
        return 1
    if "csv" in formats:
        write_trace_csv(trace, outdir / "trace.csv")
    its = trace.column("picard_iterations")
    print(f"{n_steps} steps, Picard iterations {its.min()}-{its.max()}, output in {outdir}", file=out)
    return 0


def cmd_convergence(config_path, levels, reference, out=sys.stdout, err=sys.stderr) -> int:
    try:
        cfg = load_config(config_path)
    except FileNotFoundError:
        print(f"error: config file not found: {config_path}", file=err)
        return 2
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=err)
        return 2
    try:
        report = convergence_study(cfg, levels, reference, progress=lambda m: print(m, file=err, flush=True))
    except (ValueError, PicardError, SolverError) as exc:
        print(f"error: {exc}", file=err)
        return 1
    outdir = Path(cfg.output["directory"])
    outdir.mkdir(parents=True, exist_ok=True)
    report.to_csv(outdir / "convergence.csv")
    print(report.table(), file=out)
    print(f"reference h=1/{reference}, tau={cfg.time.tau:g}; csv in {outdir / 'convergence.csv'}", file=out)
    return 0


def cmd_check(seed: int = 0, out=sys.stdout, models: Optional[dict] = None, c: Optional[float] = None,
              energy: bool = True) -> int:
    failed = []
    for name, ok, detail in monotonicity_checks(models, seed, c=c):
        print(f"{'PASS' if ok else 'FAIL'} monotonicity {name}: {detail}", file=out)
        if not ok:
            failed.append(f"monotonicity {name}")
    if energy:
        ok, e = energy_check()
        print(f"{'PASS' if ok else 'FAIL'} energy decay: E0={e[0]:.4e} -> E{len(e) - 1}={e[-1]:.4e}", file=out)
        if not ok:
            failed.append("energy decay")
    if failed:
        print("failed: " + ", ".join(failed), file=out)
        return 1
    return 0


def _levels(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must be comma-separated integers, got {text!r}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fpsi", description="Non-Newtonian Stokes-Biot solver")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run one simulation")
    p.add_argument("config")
    p = sub.add_parser("convergence", help="relative errors and orders against a reference grid")
    p.add_argument("config")
    p.add_argument("--levels", type=_levels, default=[10, 20, 40])
    p.add_argument("--reference", type=int, default=160)
    p = sub.add_parser("check", help="viscosity monotonicity and energy decay checks")
    p.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return cmd_run(args.config)
    if args.command == "convergence":
        return cmd_convergence(args.config, args.levels, args.reference)
    return cmd_check(args.seed)


if __name__ == "__main__":
    sys.exit(main())
