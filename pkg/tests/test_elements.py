import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fpsi.elements import (Space, SpaceKind, barycentric, build_dofmap, eval_bubble, eval_p1, eval_rt0,
                           line_rule, monomial_error, quadrature_rule)
from fpsi.mesh import BoundaryLabel, build_structured_mesh, example1_meshes, pair_interface

def random_triangle(rng):
    while True:
        v = rng.uniform(-2, 2, (3, 2))
        a = 0.5 * ((v[1, 0] - v[0, 0]) * (v[2, 1] - v[0, 1]) - (v[2, 0] - v[0, 0]) * (v[1, 1] - v[0, 1]))
        if abs(a) > 0.1:
            return v if a > 0 else v[[0, 2, 1]]


def exact_monomial(i, j):
    # integral of x^i y^j over the reference triangle
    return math.factorial(i) * math.factorial(j) / math.factorial(i + j + 2)


@pytest.mark.parametrize("degree", range(1, 7))
def test_quadrature_exactness(degree):
    rule = quadrature_rule(degree)
    assert np.all(rule.weights > 0)
    assert abs(rule.weights.sum() - 0.5) < 1e-15
    assert monomial_error(rule) < 1e-12
    # independent check against factorial formula, points in (lambda1, lambda2) = (x, y)
    x, y = rule.points[:, 1], rule.points[:, 2]
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            assert abs(rule.weights @ (x ** i * y ** j) - exact_monomial(i, j)) < 1e-12


def test_midpoint_rule():
    rule = quadrature_rule(1)
    assert rule.n_points == 1
    assert np.allclose(rule.points, 1 / 3) and rule.weights[0] == 0.5


def test_lambda_product_integral():
    rule = quadrature_rule(3)
    l1, l2 = rule.points[:, 0], rule.points[:, 1]
    assert abs(rule.weights @ (l1 ** 2 * l2) - 1 / 60) < 1e-15


def test_unsupported_degree():
    with pytest.raises(ValueError):
        quadrature_rule(7)


def test_line_rule():
    s, w = line_rule(3)
    for k in range(6):
        assert abs(w @ s ** k - 1 / (k + 1)) < 1e-15


def test_p1_lagrange_property():
    v = random_triangle(np.random.default_rng(0))
    for i in range(3):
        vals, _ = eval_p1(np.eye(3)[i], v)
        assert np.array_equal(vals, np.eye(3)[i])
    vals, _ = eval_p1(np.full(3, 1 / 3), v)
    assert np.allclose(vals, 1 / 3, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0, 1), st.floats(0, 1))
def test_p1_partition_of_unity(seed, a, b):
    v = random_triangle(np.random.default_rng(seed))
    bary = np.array([1 - a * (1 - b) - b * a, a * (1 - b), b * a])
    vals, g = eval_p1(bary, v)
    assert abs(vals.sum() - 1) < 1e-12
    assert np.abs(g.sum(axis=0)).max() < 1e-12
    # gradients reproduce the affine map: sum_i x_i grad_i = I
    assert np.allclose(v.T @ g, np.eye(2), atol=1e-12)


def test_bubble_values():
    v = random_triangle(np.random.default_rng(1))
    val, grad = eval_bubble(np.full(3, 1 / 3), v)
    assert abs(val - 1) < 1e-15
    assert np.abs(grad).max() < 1e-12
    for mid in ([0.5, 0.5, 0], [0, 0.5, 0.5], [0.5, 0, 0.5]):
        assert eval_bubble(np.array(mid))[0] == 0.0


def test_bubble_integral():
    v = random_triangle(np.random.default_rng(3))
    d1, d2 = v[1] - v[0], v[2] - v[0]
    area = 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0])
    rule = quadrature_rule(6)
    val, _ = eval_bubble(rule.points)
    assert abs(2 * area * (rule.weights @ val) - 9 / 20 * area) < 1e-13


def test_bubble_gradient_finite_difference():
    v = random_triangle(np.random.default_rng(4))
    bary = np.array([0.2, 0.3, 0.5])
    x = bary @ v
    _, grad = eval_bubble(bary, v)
    h = 1e-6
    fd = []
    for e in np.eye(2):
        bp = barycentric(v[None], (x + h * e)[None])[0]
        bm = barycentric(v[None], (x - h * e)[None])[0]
        fd.append((eval_bubble(bp)[0] - eval_bubble(bm)[0]) / (2 * h))
    assert np.allclose(grad, fd, atol=1e-8)


def _edge_flux(vertices, signs, k_edge, n_gauss=4):
    """Flux of every local RT0 function through local edge ``k_edge`` along its outward normal."""
    a, b = vertices[(k_edge + 1) % 3], vertices[(k_edge + 2) % 3]
    s, w = line_rule(n_gauss)
    pts = a + s[:, None] * (b - a)
    L = np.linalg.norm(b - a)
    t = (b - a) / L
    n = np.array([t[1], -t[0]])  # outward for counterclockwise vertices
    vals, _ = eval_rt0(vertices, signs, pts)
    return L * np.einsum("q,qkc,c->k", w, vals, n)


def test_rt0_edge_flux_duality():
    rng = np.random.default_rng(7)
    for _ in range(20):
        v = random_triangle(rng)
        signs = rng.choice([-1.0, 1.0], 3)
        flux = np.array([_edge_flux(v, signs, e) for e in range(3)])  # [edge, function]
        # along the global normal (outward times sign) the flux is the Kronecker delta
        assert np.abs(flux * signs[:, None] - np.eye(3)).max() < 1e-12


def test_rt0_divergence_constant():
    rng = np.random.default_rng(8)
    v = random_triangle(rng)
    signs = np.array([1.0, -1.0, 1.0])
    _, div = eval_rt0(v, signs, v.mean(axis=0))
    # divergence by finite differences at two interior points
    for p in (v.mean(axis=0), 0.6 * v[0] + 0.3 * v[1] + 0.1 * v[2]):
        h = 1e-6
        fd = np.zeros(3)
        for c in range(2):
            e = np.eye(2)[c]
            vp, _ = eval_rt0(v, signs, p + h * e)
            vm, _ = eval_rt0(v, signs, p - h * e)
            fd += (vp[0, :, c] - vm[0, :, c]) / (2 * h)
        assert np.allclose(fd, div, atol=1e-8)


def test_rt0_normal_trace_continuity():
    m = build_structured_mesh((0, 1, 0, 1), 1, 1, "porous")
    # the diagonal is shared by both triangles
    shared = [e for e in range(m.n_edges) if m.edge_triangles[e, 1] >= 0][0]
    n = m.edge_normals[shared]
    a, b = m.nodes[m.edges[shared]]
    pts = a + np.array([0.2, 0.5, 0.9])[:, None] * (b - a)
    traces = []
    for t in m.edge_triangles[shared]:
        verts = m.nodes[m.triangles[t]]
        k = list(m.tri_edges[t]).index(shared)
        vals, _ = eval_rt0(verts, m.edge_signs[t], pts)
        traces.append(vals[:, k] @ n)
    assert np.allclose(traces[0], traces[1], atol=1e-14)
    assert np.allclose(traces[0] * np.linalg.norm(b - a), 1.0)


def test_essential_stokes_dofs_count():
    f, _ = example1_meshes(20)
    dm = build_dofmap(Space(SpaceKind.VectorP1Bubble, f))
    assert len(dm.essential) == 84
    nodes = f.nodes
    nv = f.n_nodes + f.n_triangles
    x_ess = dm.essential[dm.essential < nv]
    assert np.all(x_ess < f.n_nodes)  # no bubble constrained
    assert np.all(np.isin(nodes[x_ess, 1], [0.0, 1.0]))


def test_multiplier_count_and_interior_dofs():
    f, p = example1_meshes(20)
    it = pair_interface(f, p)
    assert Space(SpaceKind.InterfaceP0, p, it).dof_count == 20
    dm = build_dofmap(Space(SpaceKind.VectorP1, p))
    interior = np.flatnonzero((p.nodes[:, 0] > 1) & (p.nodes[:, 0] < 2) & (p.nodes[:, 1] > 0) & (p.nodes[:, 1] < 1))
    assert not np.any(np.isin(interior, dm.essential % p.n_nodes))
    rt = build_dofmap(Space(SpaceKind.RT0, p))
    bottom_top = p.labelled_edges(BoundaryLabel.GammaPNeumann)
    assert len(rt.essential) == len(bottom_top) == 40
