"""Norms, errors against a reference run, observed orders and energy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .elements import barycentric, geometry, quadrature_rule
from .forms import Discretization, ProblemConfig, SolutionState
from .mesh import SubMesh

QUANTITIES = ("uf_W1r", "up_Lr", "pf_Lr'", "pp_Lr'", "pp_Linf_L2", "eta_H1", "bjs_seminorm")
AGGREGATIONS = ("l2_in_time", "linf_in_time")


class UnsupportedPairError(ValueError):
    pass


@dataclass(frozen=True)
class NormSpec:
    quantity: str
    r: float = 2.0
    aggregation: str = "l2_in_time"

    def __post_init__(self):
        if self.quantity not in QUANTITIES:
            raise ValueError(f"unknown quantity {self.quantity!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown time aggregation {self.aggregation!r}")
        if not self.r > 1:
            raise ValueError("r must exceed 1")
        if self.r != 2:
            raise NotImplementedError("only r = 2 norms are implemented")
        if self.quantity == "pp_Linf_L2" and self.aggregation != "linf_in_time":
            object.__setattr__(self, "aggregation", "linf_in_time")


# Column order of the convergence table.
TABLE_QUANTITIES = {
    "uf_l2H1": NormSpec("uf_W1r", aggregation="l2_in_time"),
    "up_l2L2": NormSpec("up_Lr", aggregation="l2_in_time"),
    "pf_l2L2": NormSpec("pf_Lr'", aggregation="l2_in_time"),
    "pp_l2L2": NormSpec("pp_Lr'", aggregation="l2_in_time"),
    "pp_linfL2": NormSpec("pp_Linf_L2", aggregation="linf_in_time"),
    "eta_linfH1": NormSpec("eta_H1", aggregation="linf_in_time"),
}


@dataclass(frozen=True)
class ConvergenceRow:
    h: float
    errors: dict
    orders: dict


# -- pointwise evaluation -------------------------------------------------------

def _bary_at(mesh: SubMesh, tri: np.ndarray, points: np.ndarray) -> np.ndarray:
    return barycentric(mesh.nodes[mesh.triangles[tri]], points)


def eval_uf(disc: Discretization, uf: np.ndarray, tri: np.ndarray, bary: np.ndarray):
    """Stokes velocity values (n, 2) and gradients (n, 2, 2) at points in ``tri``."""
    m = disc.fluid
    g = geometry(m).grad_lambda[tri]  # (n, 3, 2)
    dofs = disc.dofmaps["uf"].cell_dofs[tri]
    U = uf[dofs].reshape(-1, 2, 4)
    l1, l2, l3 = bary[:, 0], bary[:, 1], bary[:, 2]
    phi = np.column_stack([bary, 27.0 * l1 * l2 * l3])
    gb = 27.0 * (np.einsum("n,nc->nc", l2 * l3, g[:, 0]) + np.einsum("n,nc->nc", l1 * l3, g[:, 1])
                 + np.einsum("n,nc->nc", l1 * l2, g[:, 2]))
    grads = np.concatenate([g, gb[:, None, :]], axis=1)  # (n, 4, 2)
    return np.einsum("nca,na->nc", U, phi), np.einsum("nca,nai->nci", U, grads)


def eval_pf(disc: Discretization, pf: np.ndarray, tri: np.ndarray, bary: np.ndarray):
    dofs = disc.dofmaps["pf"].cell_dofs[tri]
    return np.einsum("na,na->n", pf[dofs], bary)


def eval_up(disc: Discretization, up: np.ndarray, tri: np.ndarray, points: np.ndarray):
    m = disc.porous
    verts = m.nodes[m.triangles[tri]]
    area = geometry(m).area[tri]
    sign = m.edge_signs[tri]
    phi = sign[:, :, None] * (points[:, None, :] - verts) / (2.0 * area[:, None, None])
    return np.einsum("nk,nkc->nc", up[m.tri_edges[tri]], phi)


def eval_pp(disc: Discretization, pp: np.ndarray, tri: np.ndarray):
    return pp[tri]


def eval_eta(disc: Discretization, eta: np.ndarray, tri: np.ndarray, bary: np.ndarray):
    m = disc.porous
    g = geometry(m).grad_lambda[tri]
    dofs = disc.dofmaps["eta"].cell_dofs[tri]
    E = eta[dofs].reshape(-1, 2, 3)
    return np.einsum("nca,na->nc", E, bary), np.einsum("nca,nai->nci", E, g)


class _Sampler:
    """Quadrature points of a target mesh, located inside a source mesh.

    Basis tables of each field are built on first use, so repeated
    evaluations only gather coefficients. The fields of the most recent
    state are kept, which lets several accumulators share one reference.
    """

    def __init__(self, target: SubMesh, source: SubMesh, degree: int, nested: bool):
        rule = quadrature_rule(degree)
        geo = geometry(target)
        nq = rule.n_points
        self.points = geo.to_physical(rule.points).reshape(-1, 2)
        self.weights = (2.0 * rule.weights[None, :] * geo.area[:, None]).ravel()
        if source is target:
            self.tri = np.repeat(np.arange(target.n_triangles), nq)
            self.bary = np.tile(rule.points, (target.n_triangles, 1))
        else:
            centroids = geo.vertices.mean(axis=1)
            self.tri = np.repeat(source.locate_structured(centroids), nq)
            self.bary = _bary_at(source, self.tri, self.points)
            if nested and self.bary.min() < -1e-9:
                raise UnsupportedPairError("reference mesh does not refine the coarse mesh")
        self._tables = {}
        self._last = {}

    def table(self, disc: Discretization, what: str):
        """(dofs, values, gradients) of the ``what`` basis at the sample points."""
        if what in self._tables:
            return self._tables[what]
        tri, bary = self.tri, self.bary
        if what in ("uf", "pf"):
            m = disc.fluid
            g = geometry(m).grad_lambda[tri]
            if what == "pf":
                out = (disc.dofmaps["pf"].cell_dofs[tri], bary, None)
            else:
                l1, l2, l3 = bary.T
                gb = 27.0 * ((l2 * l3)[:, None] * g[:, 0] + (l1 * l3)[:, None] * g[:, 1]
                             + (l1 * l2)[:, None] * g[:, 2])
                phi = np.column_stack([bary, 27.0 * l1 * l2 * l3])
                out = (disc.dofmaps["uf"].cell_dofs[tri].reshape(-1, 2, 4), phi,
                       np.concatenate([g, gb[:, None, :]], axis=1))
        else:
            m = disc.porous
            if what == "up":
                verts = m.nodes[m.triangles[tri]]
                area = geometry(m).area[tri]
                phi = m.edge_signs[tri][:, :, None] * (self.points[:, None, :] - verts) / (2.0 * area[:, None, None])
                out = (m.tri_edges[tri], phi, None)
            elif what == "pp":
                out = (tri, None, None)
            else:
                out = (disc.dofmaps["eta"].cell_dofs[tri].reshape(-1, 2, 3), bary, geometry(m).grad_lambda[tri])
        self._tables[what] = out
        return out

    def fields(self, disc: Discretization, state: SolutionState, what: str):
        """Values (and gradients for H1 fields) of ``state.<what>`` at the sample points."""
        x = getattr(state, what)
        hit = self._last.get(what)
        if hit is not None and hit[0] is x:
            return hit[1]
        dofs, phi, dphi = self.table(disc, what)
        X = x[dofs]
        if what == "pp":
            res = (X, None)
        elif what == "up":
            res = ((X[:, :, None] * phi).sum(axis=1), None)
        elif what == "pf":
            res = ((X * phi).sum(axis=1), None)
        else:
            vals = (X * phi[:, None, :]).sum(axis=2)
            grads = np.einsum("nca,nai->nci", X, dphi, optimize=True)
            res = (vals, grads)
        self._last[what] = (x, res)
        return res


def _fluid_fields(disc, state, smp, what):
    return smp.fields(disc, state, what)


def _porous_fields(disc, state, smp, what):
    return smp.fields(disc, state, what)


_FIELD_OF = {"uf_W1r": ("uf", True), "up_Lr": ("up", False), "pf_Lr'": ("pf", False),
             "pp_Lr'": ("pp", False), "pp_Linf_L2": ("pp", False), "eta_H1": ("eta", True)}


def _sq_norm(values, grads, weights):
    v = values.reshape(len(weights), -1)
    out = float(weights @ (v ** 2).sum(axis=1))
    if grads is not None:
        out += float(weights @ (grads.reshape(len(weights), -1) ** 2).sum(axis=1))
    return out


class FieldNorms:
    """Squared spatial norms of one discretization's fields."""

    def __init__(self, disc: Discretization, degree: int = 6):
        self.disc = disc
        self.fluid = _Sampler(disc.fluid, disc.fluid, degree, False)
        self.porous = _Sampler(disc.porous, disc.porous, degree, False)

    def fields(self, state: SolutionState, quantity: str):
        name, _ = _FIELD_OF[quantity]
        if name in ("uf", "pf"):
            return _fluid_fields(self.disc, state, self.fluid, name), self.fluid.weights
        return _porous_fields(self.disc, state, self.porous, name), self.porous.weights

    def squared(self, state: SolutionState, quantity: str) -> float:
        (v, g), w = self.fields(state, quantity)
        return _sq_norm(v, g, w)


def bjs_seminorm(disc: Discretization, state: SolutionState, config: ProblemConfig,
                 structure_velocity: Optional[np.ndarray] = None, n_points: int = 3) -> float:
    """alpha_BJS || (u_f - u_s) . t ||_{L2(interface)}; u_s defaults to ``state.eta``."""
    from .forms import Assembler

    asm = Assembler(disc, config, interface_points=n_points)
    us = state.eta if structure_velocity is None else structure_velocity
    slip = asm.interface_slip(state.uf, us)
    return float(config.alpha_bjs * np.sqrt((asm.i_w * slip ** 2).sum()))


def _aggregate(values: Sequence[float], aggregation: str, tau: Optional[float]) -> float:
    vals = np.asarray(values, dtype=float)
    if aggregation == "linf_in_time":
        return float(np.sqrt(vals.max())) if len(vals) else 0.0
    scale = 1.0 if tau is None else tau
    return float(np.sqrt(scale * vals.sum()))


def compute_norm(states, spec: NormSpec, disc: Discretization, tau: Optional[float] = None,
                 config: Optional[ProblemConfig] = None) -> float:
    """Norm of one state, or time-aggregated norm of a sequence of states.

    For sequences, l2 in time is sqrt(tau * sum_n ||.||^2) and linf is the
    maximum over the sequence.
    """
    single = isinstance(states, SolutionState)
    seq = [states] if single else list(states)
    if spec.quantity == "bjs_seminorm":
        if config is None:
            raise ValueError("bjs_seminorm needs the problem config")
        sq = []
        for k, s in enumerate(seq):
            if single or k == 0 or tau is None:
                us = None if single else np.zeros_like(s.eta)
            else:
                us = (s.eta - seq[k - 1].eta) / tau
            sq.append(bjs_seminorm(disc, s, config, us) ** 2)
    else:
        norms = FieldNorms(disc)
        sq = [norms.squared(s, spec.quantity) for s in seq]
    if single:
        return float(np.sqrt(sq[0]))
    return _aggregate(sq, spec.aggregation, tau)


def check_nested(coarse: SubMesh, fine: SubMesh):
    c, f = coarse.structured, fine.structured
    if c is None or f is None:
        raise UnsupportedPairError("relative errors need structured meshes on both levels")
    same_box = np.allclose([c.x0, c.x1, c.y0, c.y1], [f.x0, f.x1, f.y0, f.y1], rtol=0, atol=1e-12)
    if not same_box:
        raise UnsupportedPairError("meshes cover different rectangles")
    for a, b in ((c.nx, f.nx), (c.ny, f.ny)):
        if b % a or (b // a) & (b // a - 1):
            raise UnsupportedPairError("reference must refine the coarse mesh by a power of two")


class ErrorAccumulator:
    """Streams (coarse, reference) state pairs and forms relative errors.

    Coarse fields are evaluated at the reference mesh's quadrature points
    after locating each reference triangle in the coarse structured grid.
    """

    def __init__(self, coarse: Discretization, reference: Discretization, specs: dict, degree: int = 6,
                 share: Optional["ErrorAccumulator"] = None):
        check_nested(coarse.fluid, reference.fluid)
        check_nested(coarse.porous, reference.porous)
        self.coarse = coarse
        self.reference = reference
        self.specs = dict(specs)
        if share is not None and share.reference is reference and share.degree == degree:
            # reuse the reference sampling (and its per-state field cache)
            self.ref_fluid, self.ref_porous = share.ref_fluid, share.ref_porous
        else:
            self.ref_fluid = _Sampler(reference.fluid, reference.fluid, degree, False)
            self.ref_porous = _Sampler(reference.porous, reference.porous, degree, False)
        self.degree = degree
        self.c_fluid = _Sampler(reference.fluid, coarse.fluid, degree, True)
        self.c_porous = _Sampler(reference.porous, coarse.porous, degree, True)
        self.err = {k: [] for k in self.specs}
        self.ref = {k: [] for k in self.specs}

    def _pair(self, name, coarse_state, ref_state):
        if name in ("uf", "pf"):
            rv, rg = _fluid_fields(self.reference, ref_state, self.ref_fluid, name)
            cv, cg = _fluid_fields(self.coarse, coarse_state, self.c_fluid, name)
            w = self.ref_fluid.weights
        else:
            rv, rg = _porous_fields(self.reference, ref_state, self.ref_porous, name)
            cv, cg = _porous_fields(self.coarse, coarse_state, self.c_porous, name)
            w = self.ref_porous.weights
        dg = None if rg is None else rg - cg
        return _sq_norm(rv - cv, dg, w), _sq_norm(rv, rg, w)

    def add(self, coarse_state: SolutionState, ref_state: SolutionState):
        cache = {}
        for key, spec in self.specs.items():
            name, _ = _FIELD_OF[spec.quantity]
            if name not in cache:
                cache[name] = self._pair(name, coarse_state, ref_state)
            e, r = cache[name]
            self.err[key].append(e)
            self.ref[key].append(r)

    def result(self) -> dict:
        out = {}
        for key, spec in self.specs.items():
            num = _aggregate(self.err[key], spec.aggregation, None)
            den = _aggregate(self.ref[key], spec.aggregation, None)
            if den == 0:
                if num == 0:
                    out[key] = 0.0
                    continue
                raise ValueError(f"reference norm of {key} vanishes")
            out[key] = num / den
        return out


def relative_error(coarse_states, reference_states, spec: NormSpec, coarse: Discretization,
                   reference: Discretization) -> float:
    """||ref - coarse|| / ||ref|| over aligned snapshot sequences (or single states)."""
    if spec.quantity == "bjs_seminorm":
        raise NotImplementedError("relative errors are not defined for the BJS seminorm")
    if isinstance(coarse_states, SolutionState):
        coarse_states, reference_states = [coarse_states], [reference_states]
    if len(coarse_states) != len(reference_states):
        raise ValueError("snapshot sequences are not aligned")
    acc = ErrorAccumulator(coarse, reference, {"q": spec})
    for c, r in zip(coarse_states, reference_states):
        if abs(c.time - r.time) > 1e-9 * max(1.0, abs(r.time)):
            raise ValueError(f"snapshot times differ: {c.time} vs {r.time}")
        acc.add(c, r)
    return acc.result()["q"]


def convergence_orders(errors: Sequence[float], h: Optional[Sequence[float]] = None) -> list:
    """Observed orders log(e_{k-1}/e_k) / log(h_{k-1}/h_k); halving by default."""
    e = np.asarray(errors, dtype=float)
    if len(e) < 2:
        raise ValueError("need at least two errors")
    if np.any(~(e > 0)):
        raise ValueError("errors must be strictly positive")
    ratio = np.full(len(e) - 1, 2.0) if h is None else np.asarray(h[:-1], float) / np.asarray(h[1:], float)
    return list(np.log(e[:-1] / e[1:]) / np.log(ratio))


def discrete_energy(state: SolutionState, disc: Discretization, config: ProblemConfig) -> float:
    """s0 ||p_p||^2 + a_p^e(eta, eta), by quadrature over the porous mesh."""
    m = disc.porous
    geo = geometry(m)
    pp_term = config.s0 * float(geo.area @ state.pp ** 2)
    E = state.eta[disc.dofmaps["eta"].cell_dofs].reshape(-1, 2, 3)
    grad = np.einsum("tca,tai->tci", E, geo.grad_lambda)  # constant per triangle
    D = 0.5 * (grad + np.transpose(grad, (0, 2, 1)))
    div = grad[:, 0, 0] + grad[:, 1, 1]
    dens = 2 * config.mu_p * (D ** 2).sum(axis=(1, 2)) + config.lambda_p * div ** 2
    return pp_term + float(geo.area @ dens)
