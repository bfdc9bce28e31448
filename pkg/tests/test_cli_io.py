import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from fpsi.cli_io import (ConfigError, build_meshes, cmd_check, cmd_run, convergence_study, energy_check,
                         load_config, main, monotonicity_checks, parse_config, preset_path, read_vtk,
                         serialize_config, write_vtk)
from fpsi.forms import SolutionState, build_discretization
from fpsi.viscosity import Law, ViscosityModel

REPO = Path(__file__).resolve().parents[1]
SMALL = {"geometry": {"nx_f": 2, "ny_f": 2, "nx_p": 2, "ny_p": 2}, "time": {"tau": 0.05, "t_end": 0.1}}


def test_empty_document_is_example1():
    a, b = parse_config("{}").document, load_config(preset_path("example1")).document
    a.pop("output"), b.pop("output")  # only the output directory differs
    assert a == b


def test_preset_example1_values():
    cfg = parse_config("{}")
    p = cfg.problem
    assert p.fluid.law is Law.Cross and (p.fluid.nu0, p.fluid.nu_inf, p.fluid.K, p.fluid.r) == (10, 1, 1, 1.35)
    assert (p.lambda_p, p.mu_p, p.s0, p.alpha_p, p.alpha_bjs, p.kappa) == (1, 1, 1, 1, 1, (1.0, 1.0))
    assert (p.p_in, p.p_out, cfg.time.tau, cfg.time.t_end) == (1, 0, 0.01, 1)


def test_shipped_configs_match_package_data():
    for name in ("example1", "example2"):
        assert json.loads((REPO / "configs" / f"{name}.json").read_text()) == \
            json.loads(preset_path(name).read_text())


def test_example2_requires_mesh_files():
    cfg = load_config(preset_path("example2"))
    assert cfg.geometry["preset"] == "import"
    with pytest.raises(ConfigError) as info:
        build_meshes(cfg)
    assert info.value.path == "/geometry/mesh_files"


def test_negative_storage_reports_path():
    with pytest.raises(ConfigError) as info:
        parse_config('{"physics": {"s0": -1}}')
    assert info.value.path == "/physics/s0"


@pytest.mark.parametrize("text,path", [
    ('{"physics": {"bogus": 1}}', "/physics"),
    ('{"viscosity": {"fluid": {"law": "cross", "nu0": 1, "nu_inf": 2}}}', "/viscosity/fluid/nu_inf"),
    ('{"time": {"tau": 0}}', "/time/tau"),
    ("[1, 2", "/"),
])
def test_invalid_documents(text, path):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.path == path


def test_roundtrip_serialization():
    cfg = parse_config(json.dumps({"physics": {"kappa": [2.0, 0.5]}, "picard": {"max_iter": 7}}))
    again = parse_config(serialize_config(cfg))
    assert again == cfg and again.picard.max_iter == 7 and again.problem.kappa == (2.0, 0.5)


def test_vtk_roundtrip(tmp_path):
    cfg = parse_config(json.dumps(SMALL))
    d = build_discretization(*build_meshes(cfg))
    rng = np.random.default_rng(0)
    s = SolutionState(*(rng.normal(size=d.sizes[b]) for b in d.sizes), time=0.25)
    f, p = write_vtk(s, d, tmp_path / "snap", cfg.problem)
    vf, vp = read_vtk(f), read_vtk(p)
    assert vf["points"].shape == (d.fluid.n_nodes, 3) and np.array_equal(vf["cells"], d.fluid.triangles)
    assert np.all(vf["cell_types"] == 5)
    n = d.fluid.n_nodes
    nv = n + d.fluid.n_triangles
    assert np.allclose(vf["point_data"]["velocity"], np.column_stack([s.uf[:n], s.uf[nv:nv + n]]), rtol=1e-8)
    assert np.allclose(vf["point_data"]["pressure"], s.pf, rtol=1e-8)
    assert np.allclose(vp["cell_data"]["pressure"], s.pp, rtol=1e-8)
    m = d.porous.n_nodes
    assert np.allclose(vp["point_data"]["displacement"], np.column_stack([s.eta[:m], s.eta[m:]]), rtol=1e-8)
    assert len(vp["cell_data"]["darcy_velocity"]) == d.porous.n_triangles
    assert "t=0.25" in vf["title"]


def test_run_missing_config_exits_2(tmp_path):
    err = io.StringIO()
    assert cmd_run(tmp_path / "nope.json", err=err) == 2
    assert "not found" in err.getvalue()
    assert main(["run", str(tmp_path / "nope.json")]) == 2


def test_run_writes_outputs(tmp_path):
    doc = dict(SMALL, output={"directory": str(tmp_path / "out"), "snapshot_every": 1})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    assert cmd_run(path, out=io.StringIO()) == 0
    files = sorted(p.name for p in (tmp_path / "out").iterdir())
    assert "trace.csv" in files and "state_00002_porous.vtk" in files and "state_00000_fluid.vtk" in files
    rows = list(csv.reader((tmp_path / "out" / "trace.csv").open()))
    assert rows[0][:3] == ["step", "time", "picard_iterations"] and len(rows) == 3


def test_zero_data_run_gives_zero_fields(tmp_path):
    doc = dict(SMALL, boundary={"p_in": 0.0, "p_out": 0.0},
               output={"directory": str(tmp_path / "o"), "snapshot_every": 2})
    path = tmp_path / "z.json"
    path.write_text(json.dumps(doc))
    assert cmd_run(path, out=io.StringIO()) == 0
    v = read_vtk(tmp_path / "o" / "state_00002_fluid.vtk")
    assert np.all(v["point_data"]["velocity"] == 0)


def test_small_convergence_study(tmp_path):
    cfg = parse_config(json.dumps({"time": {"tau": 0.05, "t_end": 0.1}}))
    rep = convergence_study(cfg, [2, 4], 8)
    assert [r.h for r in rep.rows] == [0.5, 0.25]
    for q in rep.quantities:
        e = rep.errors(q)
        assert all(v > 0 for v in e) and e[1] < e[0]
    assert rep.metadata["max_constraint_residual"] <= 1e-8
    text = rep.to_csv(tmp_path / "c.csv")
    assert text.splitlines()[0].startswith("h,uf_l2H1_error,uf_l2H1_order") and "\r\n" in text
    assert len(list(csv.reader(io.StringIO(text)))) == 3
    with pytest.raises(ValueError):
        convergence_study(cfg, [2, 4], 4)
    with pytest.raises(ValueError):
        convergence_study(cfg, [3], 8)


def test_check_passes_by_default():
    out = io.StringIO()
    assert cmd_check(0, out=out, energy=False) == 0
    assert out.getvalue().count("PASS") == 3


def test_check_flags_cross_without_floor():
    models = {"cross_nu_inf_0": ViscosityModel(Law.Cross, nu0=10.0, nu_inf=0.0)}
    res = monotonicity_checks(models, n_samples=10_000)
    assert [ok for _, ok, _ in res] == [False]
    assert cmd_check(0, out=io.StringIO(), models=models, energy=False) == 1


def test_energy_check_small():
    ok, e = energy_check(n=4, steps=10)
    assert ok and len(e) == 11 and e[0] > e[-1] > 0
