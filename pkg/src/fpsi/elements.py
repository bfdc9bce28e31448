"""Reference bases, quadrature and degree-of-freedom bookkeeping.

Spaces used by the coupled discretization:

==============  ==========================  ======================
kind            field                       dofs
==============  ==========================  ======================
VectorP1Bubble  Stokes velocity             2 (n_nodes + n_tris)
ScalarP1        Stokes pressure             n_nodes
RT0             Darcy velocity              n_edges
ScalarP0        Darcy pressure              n_tris
VectorP1        displacement                2 n_nodes
InterfaceP0     interface multiplier        porous interface edges
==============  ==========================  ======================

Vector spaces store all x components first, then all y components.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .mesh import BoundaryLabel, InterfaceGeometry, SubMesh


# -- quadrature ---------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Triangle rule in barycentric coordinates; weights sum to 1/2."""

    points: np.ndarray
    weights: np.ndarray
    degree: int

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be positive")
        if abs(self.weights.sum() - 0.5) > 1e-13:
            raise ValueError("quadrature weights must sum to the reference area 1/2")
        err = monomial_error(self)
        if err > 1e-13:
            raise ValueError(f"rule is not exact to degree {self.degree} (error {err:.2e})")

    @property
    def n_points(self) -> int:
        return len(self.weights)


def monomial_error(rule: QuadratureRule, degree: Optional[int] = None) -> float:
    """Worst absolute error over x^i y^j, i + j <= degree, on the reference triangle."""
    degree = rule.degree if degree is None else degree
    x = rule.points[:, 1]
    y = rule.points[:, 2]
    worst = 0.0
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            exact = math.factorial(i) * math.factorial(j) / math.factorial(i + j + 2)
            worst = max(worst, abs(float(rule.weights @ (x ** i * y ** j)) - exact))
    return worst


def _orbit3(a, w):
    b = 1.0 - 2.0 * a
    return [(b, a, a), (a, b, a), (a, a, b)], [w] * 3


def _orbit6(a, b, w):
    c = 1.0 - a - b
    pts = [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]
    return pts, [w] * 6


def _rule(orbits, degree):
    pts, wts = [], []
    for p, w in orbits:
        pts += p
        wts += w
    return QuadratureRule(np.array(pts), 0.5 * np.array(wts), degree)


@lru_cache(maxsize=None)
def quadrature_rule(degree: int) -> QuadratureRule:
    """Positive-weight triangle rule exact for polynomials of ``degree``."""
    if degree not in range(1, 7):
        raise ValueError(f"unsupported quadrature degree {degree}; expected 1..6")
    if degree == 1:
        return _rule([([(1 / 3, 1 / 3, 1 / 3)], [1.0])], 1)
    if degree == 2:
        return _rule([_orbit3(1 / 6, 1 / 3)], 2)
    if degree in (3, 4):
        # Dunavant 6-point rule
        return _rule([_orbit3(0.445948490915965, 0.223381589678011),
                      _orbit3(0.091576213509771, 0.109951743655322)], degree)
    if degree == 5:
        s = math.sqrt(15.0)
        return _rule([([(1 / 3, 1 / 3, 1 / 3)], [9 / 40]),
                      _orbit3((6 - s) / 21, (155 - s) / 1200),
                      _orbit3((6 + s) / 21, (155 + s) / 1200)], 5)
    # Dunavant 12-point rule
    return _rule([_orbit3(0.249286745170910, 0.116786275726379),
                  _orbit3(0.063089014491502, 0.050844906370207),
                  _orbit6(0.053145049844817, 0.310352451033784, 0.082851075618374)], 6)


def line_rule(n_points: int = 3):
    """Gauss-Legendre points on [0, 1] with weights summing to 1."""
    x, w = np.polynomial.legendre.leggauss(n_points)
    return 0.5 * (x + 1.0), 0.5 * w


# -- element geometry and bases -------------------------------------------------

@dataclass(frozen=True)
class ElementGeometry:
    """Affine-map data of every triangle in a mesh."""

    vertices: np.ndarray  # (nt, 3, 2)
    area: np.ndarray  # (nt,)
    grad_lambda: np.ndarray  # (nt, 3, 2)

    @classmethod
    def of(cls, mesh: SubMesh) -> "ElementGeometry":
        return geometry(mesh)

    def to_physical(self, bary: np.ndarray) -> np.ndarray:
        """Physical coordinates, shape (nt, nq, 2), of barycentric points (nq, 3)."""
        return np.einsum("qk,tkc->tqc", bary, self.vertices)


def p1_gradients(vertices: np.ndarray):
    """Areas and constant barycentric gradients for triangles (nt, 3, 2)."""
    x = vertices[..., 0]
    y = vertices[..., 1]
    area = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    g = np.empty(vertices.shape)
    for k in range(3):
        i, j = (k + 1) % 3, (k + 2) % 3
        g[:, k, 0] = (y[:, i] - y[:, j]) / (2 * area)
        g[:, k, 1] = (x[:, j] - x[:, i]) / (2 * area)
    return area, g


_GEOMETRY_CACHE: dict = {}


def geometry(mesh: SubMesh) -> ElementGeometry:
    key = id(mesh)
    hit = _GEOMETRY_CACHE.get(key)
    if hit is not None and hit[0] is mesh:
        return hit[1]
    verts = mesh.nodes[mesh.triangles]
    area, g = p1_gradients(verts)
    geo = ElementGeometry(verts, area, g)
    _GEOMETRY_CACHE[key] = (mesh, geo)
    return geo


def barycentric(vertices: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of ``points`` (n, 2) in triangles ``vertices`` (n, 3, 2)."""
    _, g = p1_gradients(vertices)
    lam = np.einsum("nkc,nc->nk", g, points - vertices[:, 0, :])
    lam[:, 0] = 1.0 - lam[:, 1] - lam[:, 2]
    return lam


def eval_p1(bary, vertices=None):
    """Values and physical gradients of the three P1 shape functions.

    ``bary`` is a barycentric point (3,) or array (..., 3). Gradients need the
    triangle ``vertices`` (3, 2); they are constant over the element.
    """
    bary = np.asarray(bary, dtype=float)
    values = bary.copy()
    if vertices is None:
        return values, None
    _, g = p1_gradients(np.asarray(vertices, dtype=float)[None])
    return values, g[0]


def eval_bubble(bary, vertices=None):
    """Cubic bubble 27 l1 l2 l3 (equal to 1 at the barycenter) and its gradient."""
    lam = np.asarray(bary, dtype=float)
    l1, l2, l3 = lam[..., 0], lam[..., 1], lam[..., 2]
    value = 27.0 * l1 * l2 * l3
    if vertices is None:
        return value, None
    _, g = p1_gradients(np.asarray(vertices, dtype=float)[None])
    g = g[0]
    d = 27.0 * (np.multiply.outer(l2 * l3, g[0]) + np.multiply.outer(l1 * l3, g[1])
                + np.multiply.outer(l1 * l2, g[2]))
    return value, d


def bubble_gradients(bary: np.ndarray, grad_lambda: np.ndarray) -> np.ndarray:
    """Bubble gradients for all triangles at barycentric points: (nt, nq, 2)."""
    l1, l2, l3 = bary[:, 0], bary[:, 1], bary[:, 2]
    coef = 27.0 * np.column_stack([l2 * l3, l1 * l3, l1 * l2])  # (nq, 3)
    return np.einsum("qk,tkc->tqc", coef, grad_lambda)


def eval_rt0(vertices, signs, points):
    """Lowest-order Raviart-Thomas basis on one triangle.

    Local function k belongs to the edge opposite vertex k and is scaled so
    that its flux through that edge, along the global edge normal, is 1.
    ``signs[k]`` is +1 when the global normal is outward for this triangle.

    Returns values (npts, 3, 2) at ``points`` (npts, 2) and the constant
    divergences (3,).
    """
    vertices = np.asarray(vertices, dtype=float)
    signs = np.asarray(signs, dtype=float)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    area, _ = p1_gradients(vertices[None])
    area = area[0]
    vals = signs[None, :, None] * (points[:, None, :] - vertices[None, :, :]) / (2.0 * area)
    div = signs / area
    return vals, div


# -- spaces and dof maps ----------------------------------------------------

class SpaceKind(enum.Enum):
    VectorP1Bubble = "VectorP1Bubble"
    ScalarP1 = "ScalarP1"
    RT0 = "RT0"
    ScalarP0 = "ScalarP0"
    VectorP1 = "VectorP1"
    InterfaceP0 = "InterfaceP0"


@dataclass(frozen=True, eq=False)
class Space:
    kind: SpaceKind
    mesh: SubMesh
    interface: Optional[InterfaceGeometry] = None

    @property
    def dof_count(self) -> int:
        m = self.mesh
        k = self.kind
        if k is SpaceKind.VectorP1Bubble:
            return 2 * (m.n_nodes + m.n_triangles)
        if k is SpaceKind.ScalarP1:
            return m.n_nodes
        if k is SpaceKind.RT0:
            return m.n_edges
        if k is SpaceKind.ScalarP0:
            return m.n_triangles
        if k is SpaceKind.VectorP1:
            return 2 * m.n_nodes
        if self.interface is None:
            raise ValueError("InterfaceP0 needs the interface geometry")
        return self.interface.n_multipliers

    def cell_dofs(self) -> np.ndarray:
        """Local-to-global table: per triangle, or per porous interface edge."""
        m = self.mesh
        k = self.kind
        nn, nt = m.n_nodes, m.n_triangles
        tri = m.triangles
        bub = np.arange(nt)[:, None]
        if k is SpaceKind.VectorP1Bubble:
            # local order: (v0, v1, v2, bubble) x-component, then y-component
            scalar = np.hstack([tri, nn + bub])
            return np.hstack([scalar, scalar + nn + nt])
        if k is SpaceKind.ScalarP1:
            return tri.copy()
        if k is SpaceKind.RT0:
            return m.tri_edges.copy()
        if k is SpaceKind.ScalarP0:
            return bub.copy()
        if k is SpaceKind.VectorP1:
            return np.hstack([tri, tri + nn])
        return np.arange(self.dof_count)[:, None]


@dataclass(frozen=True, eq=False)
class DofMap:
    space: Space
    cell_dofs: np.ndarray
    essential: np.ndarray  # sorted global indices
    essential_values: np.ndarray

    @property
    def n_dofs(self) -> int:
        return self.space.dof_count

    @property
    def free(self) -> np.ndarray:
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.essential] = False
        return np.flatnonzero(mask)

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.n_dofs, dtype=bool)
        m[self.essential] = True
        return m


def _essential_indices(space: Space, rules: dict) -> np.ndarray:
    m = space.mesh
    k = space.kind
    labels = rules.get(k, ())
    if not labels:
        return np.zeros(0, dtype=np.int64)
    if k in (SpaceKind.VectorP1Bubble, SpaceKind.VectorP1):
        nodes = m.labelled_nodes(*labels)
        shift = m.n_nodes + (m.n_triangles if k is SpaceKind.VectorP1Bubble else 0)
        return np.concatenate([nodes, nodes + shift])
    if k is SpaceKind.ScalarP1:
        return m.labelled_nodes(*labels)
    if k is SpaceKind.RT0:
        idx = m.labelled_edges(*labels)
        return np.unique(m.boundary_edge_ids()[idx]) if len(idx) else np.zeros(0, dtype=np.int64)
    return np.zeros(0, dtype=np.int64)


POROUS_EXTERNAL = (BoundaryLabel.GammaPDirichlet, BoundaryLabel.GammaPNeumann, BoundaryLabel.OutletP)

DEFAULT_ESSENTIAL = {
    SpaceKind.VectorP1Bubble: (BoundaryLabel.GammaF,),
    SpaceKind.RT0: (BoundaryLabel.GammaPNeumann,),
    SpaceKind.VectorP1: POROUS_EXTERNAL,
}


def build_dofmap(space: Space, essential_rules: Optional[dict] = None, values=None) -> DofMap:
    """Dof tables plus the essential (constrained) index set of ``space``.

    By default: Stokes vertex dofs on GammaF (bubbles never constrained),
    RT0 fluxes on GammaPNeumann edges, displacement on the whole external
    porous boundary.
    """
    rules = DEFAULT_ESSENTIAL if essential_rules is None else essential_rules
    ess = np.unique(_essential_indices(space, rules)).astype(np.int64)
    if values is None:
        vals = np.zeros(len(ess))
    else:
        vals = np.broadcast_to(np.asarray(values, dtype=float), ess.shape).copy()
    cells = space.cell_dofs()
    if len(ess) and (ess.min() < 0 or ess.max() >= space.dof_count):
        raise ValueError("essential index out of range")
    return DofMap(space, cells, ess, vals)
