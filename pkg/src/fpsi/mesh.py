"""Triangulations of the fluid and poroelastic subdomains.

Each subdomain is an independent :class:`SubMesh`; the two are tied
together only through :func:`pair_interface`, which builds the common
refinement of their interface traces so that grids need not match.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

FORMAT_HEADER = "fpsi-mesh 1"
REGIONS = ("fluid", "porous")
DEFAULT_TOL = 1e-10


class MeshError(ValueError):
    """Invalid mesh data. ``line`` is the 1-based source line when parsing."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class GeometryMismatchError(MeshError):
    pass


class BoundaryLabel(enum.Enum):
    GammaF = "GAMMA_F"
    GammaPDirichlet = "GAMMA_P_D"
    GammaPNeumann = "GAMMA_P_N"
    Interface = "INTERFACE"
    InletF = "INLET_F"
    OutletP = "OUTLET_P"

    @classmethod
    def parse(cls, token: str) -> "BoundaryLabel":
        return cls(token)


@dataclass(frozen=True)
class StructuredInfo:
    """Generation parameters kept so nested meshes can be point-located."""

    x0: float
    x1: float
    y0: float
    y1: float
    nx: int
    ny: int


@dataclass(frozen=True, eq=False)
class SubMesh:
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_labels: tuple
    region_tag: str
    structured: Optional[StructuredInfo] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.ascontiguousarray(self.nodes, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "triangles", np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "boundary_edges",
                           np.ascontiguousarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2))
        object.__setattr__(self, "boundary_labels", tuple(self.boundary_labels))
        for a in (self.nodes, self.triangles, self.boundary_edges):
            a.setflags(write=False)
        if self.region_tag not in REGIONS:
            raise MeshError(f"unknown region tag {self.region_tag!r}")
        if len(self.boundary_labels) != len(self.boundary_edges):
            raise MeshError("one label is required per boundary edge")
        self.validate()

    # -- counts -----------------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    # -- geometry ---------------------------------------------------------
    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return self.signed_areas

    @cached_property
    def diameter(self) -> float:
        lo = self.nodes.min(axis=0)
        hi = self.nodes.max(axis=0)
        return float(np.hypot(*(hi - lo)))

    @cached_property
    def _edge_tables(self):
        # local edge k is opposite local vertex k
        loc = np.array([[1, 2], [2, 0], [0, 1]])
        pairs = self.triangles[:, loc]  # (nt, 3, 2)
        srt = np.sort(pairs.reshape(-1, 2), axis=1)
        edges, inverse = np.unique(srt, axis=0, return_inverse=True)
        tri_edges = inverse.reshape(-1, 3)
        edge_tris = -np.ones((len(edges), 2), dtype=np.int64)
        counts = np.zeros(len(edges), dtype=np.int64)
        for t, e in zip(np.repeat(np.arange(self.n_triangles), 3), inverse):
            if counts[e] >= 2:
                raise MeshError(f"edge {tuple(edges[e])} is shared by more than two triangles")
            edge_tris[e, counts[e]] = t
            counts[e] += 1
        return edges, tri_edges, edge_tris

    @property
    def edges(self) -> np.ndarray:
        """Unique edges as sorted node pairs."""
        return self._edge_tables[0]

    @property
    def tri_edges(self) -> np.ndarray:
        """Global edge id of each local edge (local edge k opposite vertex k)."""
        return self._edge_tables[1]

    @property
    def edge_triangles(self) -> np.ndarray:
        """Adjacent triangles per edge, second entry -1 on the boundary."""
        return self._edge_tables[2]

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        d = self.nodes[self.edges[:, 1]] - self.nodes[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    @cached_property
    def edge_normals(self) -> np.ndarray:
        """One fixed unit normal per edge; outward on boundary edges."""
        a = self.nodes[self.edges[:, 0]]
        b = self.nodes[self.edges[:, 1]]
        d = b - a
        n = np.column_stack([d[:, 1], -d[:, 0]]) / self.edge_lengths[:, None]
        boundary = self.edge_triangles[:, 1] < 0
        t = self.edge_triangles[boundary, 0]
        centroid = self.nodes[self.triangles[t]].mean(axis=1)
        mid = 0.5 * (a[boundary] + b[boundary])
        flip = np.einsum("ij,ij->i", n[boundary], mid - centroid) < 0
        idx = np.flatnonzero(boundary)[flip]
        n[idx] *= -1.0
        return n

    @cached_property
    def edge_signs(self) -> np.ndarray:
        """+1 where the global edge normal is outward for the triangle, else -1."""
        p = self.nodes[self.triangles]
        v1 = np.roll(p, -1, axis=1)  # vertex k+1
        v2 = np.roll(p, -2, axis=1)  # vertex k+2
        d = v2 - v1
        outward = np.stack([d[..., 1], -d[..., 0]], axis=-1)
        n = self.edge_normals[self.tri_edges]
        return np.where(np.einsum("tkc,tkc->tk", outward, n) > 0, 1.0, -1.0)

    def boundary_edge_ids(self) -> np.ndarray:
        """Global edge id of each entry in ``boundary_edges``."""
        lookup = {tuple(e): i for i, e in enumerate(self.edges.tolist())}
        return np.array([lookup[tuple(sorted(e))] for e in self.boundary_edges.tolist()], dtype=np.int64)

    def labelled_edges(self, *labels: BoundaryLabel) -> np.ndarray:
        """Indices into ``boundary_edges`` carrying any of ``labels``."""
        return np.array([i for i, lab in enumerate(self.boundary_labels) if lab in labels], dtype=np.int64)

    def labelled_nodes(self, *labels: BoundaryLabel) -> np.ndarray:
        idx = self.labelled_edges(*labels)
        if len(idx) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.unique(self.boundary_edges[idx].ravel())

    def validate(self):
        if self.n_triangles == 0:
            raise MeshError("mesh has no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= self.n_nodes:
            raise MeshError("triangle references a missing node")
        bad = np.flatnonzero(self.signed_areas <= 0)
        if len(bad):
            raise MeshError(f"negative area in triangle {int(bad[0])}")
        edges, _, edge_tris = self._edge_tables
        topo = {tuple(e) for e in edges[edge_tris[:, 1] < 0].tolist()}
        given = [tuple(sorted(e)) for e in self.boundary_edges.tolist()]
        if len(set(given)) != len(given):
            raise MeshError("duplicate boundary edge")
        for i, e in enumerate(given):
            if e not in topo:
                raise MeshError(f"boundary edge {i} {e} does not belong to exactly one triangle")
        if len(topo) != len(given):
            raise MeshError("boundary edges do not cover the topological boundary")

    def locate_structured(self, points: np.ndarray) -> np.ndarray:
        """Containing triangle of each point, by index arithmetic on a structured grid."""
        s = self.structured
        if s is None:
            raise MeshError("point location requires a structured mesh")
        hx = (s.x1 - s.x0) / s.nx
        hy = (s.y1 - s.y0) / s.ny
        fx = (points[:, 0] - s.x0) / hx
        fy = (points[:, 1] - s.y0) / hy
        i = np.clip(np.floor(fx).astype(np.int64), 0, s.nx - 1)
        j = np.clip(np.floor(fy).astype(np.int64), 0, s.ny - 1)
        upper = (fy - j) > (fx - i)
        return 2 * (j * s.nx + i) + upper.astype(np.int64)


def _side_labels(labels, default):
    sides = {"left": default, "right": default, "bottom": default, "top": default}
    if labels:
        sides.update(labels)
    return sides


def build_structured_mesh(rect: Sequence[float], nx: int, ny: int, region_tag: str,
                          labels: Optional[dict] = None) -> SubMesh:
    """Uniform ``nx`` x ``ny`` grid on ``rect = (x0, x1, y0, y1)``.

    Every cell is cut by its lower-left to upper-right diagonal. ``labels``
    maps the sides ``left/right/bottom/top`` to a :class:`BoundaryLabel`.
    """
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ValueError(f"cell counts must be positive integers, got nx={nx}, ny={ny}")
    nx, ny = int(nx), int(ny)
    x0, x1, y0, y1 = map(float, rect)
    if not (x1 > x0 and y1 > y0):
        raise ValueError("rectangle must have positive extent")
    default = BoundaryLabel.GammaF if region_tag == "fluid" else BoundaryLabel.GammaPDirichlet
    sides = _side_labels(labels, default)

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)  # x fastest after ravel
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    j, i = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    ll = (j * (nx + 1) + i).ravel()
    lr, ul, ur = ll + 1, ll + nx + 1, ll + nx + 2
    tris = np.empty((2 * nx * ny, 3), dtype=np.int64)
    tris[0::2] = np.column_stack([ll, lr, ur])
    tris[1::2] = np.column_stack([ll, ur, ul])

    bedges, blabels = [], []
    for k in range(nx):
        bedges.append((k, k + 1))
        blabels.append(sides["bottom"])
    for k in range(ny):
        a = k * (nx + 1) + nx
        bedges.append((a, a + nx + 1))
        blabels.append(sides["right"])
    top = ny * (nx + 1)
    for k in range(nx):
        bedges.append((top + k + 1, top + k))
        blabels.append(sides["top"])
    for k in range(ny):
        a = k * (nx + 1)
        bedges.append((a + nx + 1, a))
        blabels.append(sides["left"])
    info = StructuredInfo(x0, x1, y0, y1, nx, ny)
    return SubMesh(nodes, tris, np.array(bedges), blabels, region_tag, info)


def example1_meshes(nx_f: int, ny_f: Optional[int] = None, nx_p: Optional[int] = None,
                    ny_p: Optional[int] = None) -> tuple[SubMesh, SubMesh]:
    """Filter geometry: fluid (0,1)x(0,1) left of the porous block (1,2)x(0,1)."""
    ny_f = nx_f if ny_f is None else ny_f
    nx_p = nx_f if nx_p is None else nx_p
    ny_p = nx_p if ny_p is None else ny_p
    fluid = build_structured_mesh((0.0, 1.0, 0.0, 1.0), nx_f, ny_f, "fluid", {
        "left": BoundaryLabel.InletF, "right": BoundaryLabel.Interface,
        "bottom": BoundaryLabel.GammaF, "top": BoundaryLabel.GammaF})
    porous = build_structured_mesh((1.0, 2.0, 0.0, 1.0), nx_p, ny_p, "porous", {
        "left": BoundaryLabel.Interface, "right": BoundaryLabel.OutletP,
        "bottom": BoundaryLabel.GammaPNeumann, "top": BoundaryLabel.GammaPNeumann})
    return fluid, porous


# -- ASCII format -----------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def export_mesh(mesh: SubMesh) -> str:
    """Canonical text form: one space between tokens, floats in shortest repr."""
    out = [FORMAT_HEADER,
           f"{mesh.region_tag} {mesh.n_nodes} {mesh.n_triangles} {len(mesh.boundary_edges)}"]
    out += [f"{_fmt(x)} {_fmt(y)}" for x, y in mesh.nodes.tolist()]
    out += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    out += [f"{i} {j} {lab.value}" for (i, j), lab in zip(mesh.boundary_edges.tolist(), mesh.boundary_labels)]
    return "\n".join(out) + "\n"


def import_mesh(text: str) -> SubMesh:
    lines = [(n + 1, ln.split()) for n, ln in enumerate(text.splitlines())]
    lines = [(n, tok) for n, tok in lines if tok]
    if not lines or " ".join(lines[0][1]) != FORMAT_HEADER:
        raise MeshError(f"expected header {FORMAT_HEADER!r}", lines[0][0] if lines else 1)
    if len(lines) < 2:
        raise MeshError("missing size line", lines[0][0] + 1)
    n, tok = lines[1]
    if len(tok) != 4 or tok[0] not in REGIONS:
        raise MeshError("size line must be '<region_tag> <n_nodes> <n_tris> <n_bedges>'", n)
    try:
        nn, nt, nb = (int(t) for t in tok[1:])
    except ValueError:
        raise MeshError("malformed counts", n) from None
    if min(nn, nt, nb) < 0:
        raise MeshError("malformed counts", n)
    body = lines[2:]
    if len(body) != nn + nt + nb:
        at = body[min(len(body), nn + nt + nb) - 1][0] if body else n
        raise MeshError(f"malformed counts: expected {nn + nt + nb} records, found {len(body)}", at)
    region = tok[0]

    nodes = np.empty((nn, 2))
    for k, (n, tok) in enumerate(body[:nn]):
        try:
            if len(tok) != 2:
                raise ValueError
            nodes[k] = [float(tok[0]), float(tok[1])]
        except ValueError:
            raise MeshError("node record must be 'x y'", n) from None

    def ints(tok, n, count, what):
        try:
            if len(tok) < count:
                raise ValueError
            vals = [int(t) for t in tok[:count]]
        except ValueError:
            raise MeshError(f"malformed {what} record", n) from None
        if any(v < 0 or v >= nn for v in vals):
            raise MeshError(f"{what} references missing node", n)
        return vals

    tris = np.empty((nt, 3), dtype=np.int64)
    tri_lines = []
    for k, (n, tok) in enumerate(body[nn:nn + nt]):
        if len(tok) != 3:
            raise MeshError("triangle record must be 'i j k'", n)
        tris[k] = ints(tok, n, 3, "triangle")
        tri_lines.append(n)
    p = nodes[tris]
    area = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                  - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    for k in np.flatnonzero(area <= 0):
        raise MeshError("negative area (triangle must be counterclockwise)", tri_lines[k])

    bedges = np.empty((nb, 2), dtype=np.int64)
    labels = []
    edge_lines = []
    for k, (n, tok) in enumerate(body[nn + nt:]):
        if len(tok) != 3:
            raise MeshError("boundary record must be 'i j LABEL'", n)
        bedges[k] = ints(tok, n, 2, "boundary edge")
        try:
            labels.append(BoundaryLabel.parse(tok[2]))
        except ValueError:
            raise MeshError(f"unknown boundary label {tok[2]!r}", n) from None
        edge_lines.append(n)

    # dangling edges are reported with their source line before the full check
    if nt:
        loc = np.array([[1, 2], [2, 0], [0, 1]])
        srt = np.sort(tris[:, loc].reshape(-1, 2), axis=1)
        uniq, counts = np.unique(srt, axis=0, return_counts=True)
        boundary = {tuple(e) for e in uniq[counts == 1].tolist()}
        for k, e in enumerate(bedges.tolist()):
            if tuple(sorted(e)) not in boundary:
                raise MeshError(f"dangling boundary edge {tuple(e)}", edge_lines[k])
    return SubMesh(nodes, tris, bedges, labels, region)


def read_mesh(path) -> SubMesh:
    with open(path, encoding="utf-8") as fh:
        return import_mesh(fh.read())


def write_mesh(mesh: SubMesh, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(export_mesh(mesh))


# -- interface pairing ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class InterfaceGeometry:
    """Common refinement of the fluid and porous interface traces.

    Per segment ``s``: endpoints ``a[s]``, ``b[s]``; owning fluid triangle and
    edge; owning porous triangle and edge; ``lam_index`` into the multiplier
    space (one dof per porous interface edge); unit ``n_p`` (outward from the
    porous side, so ``n_f = -n_p``) and tangent ``t``. Quadrature points and
    weights are physical (weights include the segment length).
    """

    a: np.ndarray
    b: np.ndarray
    fluid_triangle: np.ndarray
    fluid_edge: np.ndarray
    porous_triangle: np.ndarray
    porous_edge: np.ndarray
    lam_index: np.ndarray
    n_p: np.ndarray
    t: np.ndarray
    qpoints: np.ndarray
    qweights: np.ndarray
    porous_interface_edges: np.ndarray

    @property
    def n_segments(self) -> int:
        return len(self.a)

    @property
    def n_f(self) -> np.ndarray:
        return -self.n_p

    @property
    def lengths(self) -> np.ndarray:
        d = self.b - self.a
        return np.hypot(d[:, 0], d[:, 1])

    @property
    def n_multipliers(self) -> int:
        return len(self.porous_interface_edges)


def _interface_edges(mesh: SubMesh):
    idx = mesh.labelled_edges(BoundaryLabel.Interface)
    if len(idx) == 0:
        raise GeometryMismatchError(f"{mesh.region_tag} mesh has no interface edges")
    gids = mesh.boundary_edge_ids()[idx]
    return gids


def _segment_rule(a, b, npts=3):
    x, w = np.polynomial.legendre.leggauss(npts)
    s = 0.5 * (x + 1.0)
    L = np.hypot(*(b - a).T)
    pts = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
    return pts, 0.5 * w[None, :] * L[:, None]


def pair_interface(fluid: SubMesh, porous: SubMesh, tol: float = DEFAULT_TOL,
                   quad_points: int = 3) -> InterfaceGeometry:
    """Common refinement of the two interface traces.

    Matching traces of any shape are accepted. Non-matching traces must be
    collinear; ``tol`` is relative to the larger mesh diameter.
    """
    if fluid.region_tag != "fluid" or porous.region_tag != "porous":
        raise ValueError("pair_interface expects (fluid, porous) meshes")
    diam = max(fluid.diameter, porous.diameter)
    atol = tol * diam
    fe = _interface_edges(fluid)
    pe = _interface_edges(porous)
    fe_nodes = fluid.nodes[fluid.edges[fe]]  # (nf, 2, 2)
    pe_nodes = porous.nodes[porous.edges[pe]]

    # porous edges sorted along the curve give the multiplier ordering
    order = np.lexsort((pe_nodes.mean(axis=1)[:, 0], pe_nodes.mean(axis=1)[:, 1]))
    pe = pe[order]
    pe_nodes = pe_nodes[order]

    segments = _match_edges(fe_nodes, pe_nodes, atol)
    if segments is None:
        segments = _refine_collinear(fe_nodes, pe_nodes, atol)

    a = np.array([s[0] for s in segments])
    b = np.array([s[1] for s in segments])
    fi = np.array([s[2] for s in segments], dtype=np.int64)
    pi = np.array([s[3] for s in segments], dtype=np.int64)
    f_edge = fe[fi]
    p_edge = pe[pi]
    f_tri = fluid.edge_triangles[f_edge, 0]
    p_tri = porous.edge_triangles[p_edge, 0]
    n_p = porous.edge_normals[p_edge].copy()
    n_f_check = fluid.edge_normals[f_edge]
    if np.any(np.einsum("ij,ij->i", n_p, n_f_check) > -1.0 + 1e-8):
        raise GeometryMismatchError("fluid and porous interface normals are not opposite")
    t = np.column_stack([n_p[:, 1], -n_p[:, 0]])  # tangent of n_f = -n_p rotated
    qp, qw = _segment_rule(a, b, quad_points)
    return InterfaceGeometry(a, b, f_tri, f_edge, p_tri, p_edge, pi, n_p, t, qp, qw, pe)


def _match_edges(fe_nodes, pe_nodes, atol):
    if len(fe_nodes) != len(pe_nodes):
        return None
    tree = cKDTree(pe_nodes.mean(axis=1))
    dist, idx = tree.query(fe_nodes.mean(axis=1))
    if np.any(dist > atol) or len(np.unique(idx)) != len(idx):
        return None
    out = []
    for k, j in enumerate(idx.tolist()):
        e = np.sort(fe_nodes[k], axis=0)
        p = pe_nodes[j]
        if np.abs(e - np.sort(p, axis=0)).max() > atol:
            return None
        out.append((p[0].copy(), p[1].copy(), k, j))
    out.sort(key=lambda s: s[3])
    return out


def _refine_collinear(fe_nodes, pe_nodes, atol):
    pts = np.concatenate([fe_nodes.reshape(-1, 2), pe_nodes.reshape(-1, 2)])
    origin = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - origin)
    direction = vt[0]
    normal = vt[1]
    if np.abs((pts - origin) @ normal).max() > atol:
        raise GeometryMismatchError("non-matching interface traces must be straight (collinear)")
    sf = (fe_nodes - origin) @ direction  # (nf, 2)
    sp = (pe_nodes - origin) @ direction
    sf.sort(axis=1)
    sp.sort(axis=1)
    for s in (sf, sp):
        o = np.argsort(s[:, 0])
        s[:] = s[o]
        if np.any(np.abs(s[1:, 0] - s[:-1, 1]) > atol):
            raise GeometryMismatchError("interface trace has gaps or overlaps")
    f_order = np.argsort(((fe_nodes - origin) @ direction).min(axis=1))
    p_order = np.argsort(((pe_nodes - origin) @ direction).min(axis=1))
    if abs(sf[0, 0] - sp[0, 0]) > atol or abs(sf[-1, 1] - sp[-1, 1]) > atol:
        raise GeometryMismatchError("fluid and porous interface curves differ beyond tolerance")
    breaks = np.sort(np.concatenate([sf.ravel(), sp.ravel()]))
    merged = [breaks[0]]
    for s in breaks[1:]:
        if s - merged[-1] > atol:
            merged.append(s)
    merged = np.array(merged)
    mids = 0.5 * (merged[1:] + merged[:-1])
    fk = np.searchsorted(sf[:, 1], mids)
    pk = np.searchsorted(sp[:, 1], mids)
    out = []
    for k in range(len(mids)):
        a = origin + merged[k] * direction
        b = origin + merged[k + 1] * direction
        out.append((a, b, int(f_order[fk[k]]), int(p_order[pk[k]])))
    out.sort(key=lambda s: (s[3], float((s[0] - origin) @ direction)))
    return out


def interface_length(mesh: SubMesh) -> float:
    gids = _interface_edges(mesh)
    return float(mesh.edge_lengths[gids].sum())


def mesh_size(mesh: SubMesh) -> float:
    return float(mesh.edge_lengths.max())


def total_area(mesh: SubMesh) -> float:
    return float(math.fsum(mesh.areas))
