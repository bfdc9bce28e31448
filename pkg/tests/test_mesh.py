import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fpsi.mesh import (BoundaryLabel, GeometryMismatchError, MeshError, build_structured_mesh,
                       example1_meshes, export_mesh, import_mesh, interface_length, pair_interface,
                       read_mesh, total_area, write_mesh)


def test_smallest_grid():
    m = build_structured_mesh((0, 1, 0, 1), 1, 1, "fluid")
    assert (m.n_nodes, m.n_triangles, len(m.boundary_edges)) == (4, 2, 4)


def test_counts_20():
    m = build_structured_mesh((0, 1, 0, 1), 20, 20, "fluid")
    assert m.n_nodes == 441 and m.n_triangles == 800


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.floats(-3, 3), st.floats(0.1, 4), st.floats(0.1, 4))
def test_area_partition(nx, ny, x0, w, h):
    m = build_structured_mesh((x0, x0 + w, 0.0, h), nx, ny, "porous")
    assert abs(total_area(m) - w * h) <= 1e-12 * w * h
    assert np.all(m.areas > 0)


def test_nonpositive_counts():
    with pytest.raises(ValueError):
        build_structured_mesh((0, 1, 0, 1), 0, 3, "fluid")


def test_example1_labels():
    f, p = example1_meshes(4)
    assert set(f.boundary_labels) == {BoundaryLabel.InletF, BoundaryLabel.Interface, BoundaryLabel.GammaF}
    assert set(p.boundary_labels) == {BoundaryLabel.Interface, BoundaryLabel.OutletP, BoundaryLabel.GammaPNeumann}
    inlet = f.nodes[f.labelled_nodes(BoundaryLabel.InletF)]
    assert np.allclose(inlet[:, 0], 0.0)


def test_outward_normals_on_boundary():
    m = build_structured_mesh((0, 2, 0, 1), 3, 2, "fluid")
    ids = m.boundary_edge_ids()
    mid = m.nodes[m.edges[ids]].mean(axis=1)
    centre = np.array([1.0, 0.5])
    assert np.all(np.einsum("ij,ij->i", m.edge_normals[ids], mid - centre) > 0)


TWO_TRIANGLES = """fpsi-mesh 1
fluid 4 2 4
0.0 0.0
1.0 0.0
0.0 1.0
1.0 1.0
0 1 3
0 3 2
0 1 GAMMA_F
1 3 GAMMA_F
3 2 GAMMA_F
2 0 GAMMA_F
"""


def test_hand_written_file_matches_structured():
    m = import_mesh(TWO_TRIANGLES)
    ref = build_structured_mesh((0, 1, 0, 1), 1, 1, "fluid")
    assert np.array_equal(m.nodes, ref.nodes)
    assert np.array_equal(m.triangles, ref.triangles)
    assert sorted(map(tuple, np.sort(m.boundary_edges, axis=1))) == \
        sorted(map(tuple, np.sort(ref.boundary_edges, axis=1)))


def test_clockwise_triangle_rejected():
    bad = TWO_TRIANGLES.replace("0 1 3\n", "0 3 1\n")
    with pytest.raises(MeshError, match="negative area") as info:
        import_mesh(bad)
    assert info.value.line == 7


@pytest.mark.parametrize("text,pattern", [
    ("nonsense\n", "header"),
    (TWO_TRIANGLES.replace("fluid 4 2 4", "fluid 4 2"), "size line"),
    (TWO_TRIANGLES.replace("2 0 GAMMA_F", "2 0 NOWHERE"), "label"),
    (TWO_TRIANGLES.replace("0 3 2\n", "0 3 7\n"), None),
])
def test_malformed_files(text, pattern):
    with pytest.raises(MeshError, match=pattern):
        import_mesh(text)


def test_export_import_roundtrip_random():
    rng = np.random.default_rng(5)
    for _ in range(5):
        nx, ny = rng.integers(1, 9, 2)
        x0, y0 = rng.uniform(-1, 1, 2)
        m = build_structured_mesh((x0, x0 + rng.uniform(0.5, 2), y0, y0 + rng.uniform(0.5, 2)),
                                  int(nx), int(ny), "porous")
        text = export_mesh(m)
        assert export_mesh(import_mesh(text)) == text
        assert export_mesh(import_mesh(text.replace(" ", "   "))) == text


def test_read_write(tmp_path):
    f, _ = example1_meshes(3)
    write_mesh(f, tmp_path / "f.mesh")
    g = read_mesh(tmp_path / "f.mesh")
    assert np.array_equal(g.nodes, f.nodes) and g.boundary_labels == f.boundary_labels


def test_matching_interface():
    f, p = example1_meshes(20)
    it = pair_interface(f, p)
    assert it.n_segments == 20 and it.n_multipliers == 20
    assert len(set(it.fluid_edge.tolist())) == 20 and len(set(it.porous_edge.tolist())) == 20
    assert np.allclose(it.n_p, [-1.0, 0.0])
    assert abs(it.lengths.sum() - 1.0) < 1e-12


def _overlap_count(n, m):
    # brute force: merge breakpoints of the two uniform partitions of [0, 1]
    pts = sorted({i / n for i in range(n + 1)} | {j / m for j in range(m + 1)})
    merged = [pts[0]]
    for x in pts[1:]:
        if x - merged[-1] > 1e-12:
            merged.append(x)
    return len(merged) - 1


def test_nonmatching_interface_segments():
    f, _ = example1_meshes(20)
    p = build_structured_mesh((1, 2, 0, 1), 30, 30, "porous",
                              labels={"left": BoundaryLabel.Interface, "right": BoundaryLabel.OutletP,
                                      "bottom": BoundaryLabel.GammaPNeumann, "top": BoundaryLabel.GammaPNeumann})
    it = pair_interface(f, p)
    assert it.n_segments == _overlap_count(20, 30) == 20 + 30 - math.gcd(20, 30)
    assert abs(it.lengths.sum() - interface_length(p)) < 1e-12
    assert it.n_multipliers == 30
    # every segment lies inside its owning edges
    for k in range(it.n_segments):
        for mesh, e in ((f, it.fluid_edge[k]), (p, it.porous_edge[k])):
            y = np.sort(mesh.nodes[mesh.edges[e], 1])
            assert y[0] - 1e-12 <= min(it.a[k, 1], it.b[k, 1]) and max(it.a[k, 1], it.b[k, 1]) <= y[1] + 1e-12


def test_mismatched_interface_rejected():
    f, _ = example1_meshes(4)
    p = build_structured_mesh((1, 2, 0, 1.5), 4, 4, "porous",
                              labels={"left": BoundaryLabel.Interface, "right": BoundaryLabel.OutletP,
                                      "bottom": BoundaryLabel.GammaPNeumann, "top": BoundaryLabel.GammaPNeumann})
    with pytest.raises(GeometryMismatchError):
        pair_interface(f, p)


def test_locate_structured():
    m = build_structured_mesh((1, 2, 0, 1), 5, 4, "porous")
    rng = np.random.default_rng(2)
    pts = rng.uniform([1, 0], [2, 1], (200, 2))
    tri = m.locate_structured(pts)
    v = m.nodes[m.triangles[tri]]
    from fpsi.elements import barycentric
    assert barycentric(v, pts).min() > -1e-12
