"""Assembly of the coupled Stokes-Biot system for one Picard iterate.

Unknowns, in block order: Stokes velocity ``uf`` (P1+bubble), Stokes
pressure ``pf`` (P1), Darcy velocity ``up`` (RT0), Darcy pressure ``pp``
(P0), displacement ``eta`` (P1) and interface multiplier ``lam`` (P0 on
porous interface edges).

One Backward Euler step with frozen (lagged) viscosities reads, in block
rows (v_f, v_p, xi | w_f, w_p | mu)::

    a_f + a_pd + a_pe + a_bjs + b_f + b_p + alpha b_p(xi, .) + b_gamma = F
    s0/tau (p, w) - alpha/tau b_p(eta, w) - b_p(u_p, w) - b_f(u_f, w) = Q + lag
    b_gamma(u_f, u_p, eta/tau; mu) = lag

Every term containing ``1/tau`` is collected in a separate "time" matrix
``T``; the previous step contributes ``T @ x_old`` to the right-hand side.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp

from .elements import (Space, SpaceKind, barycentric, bubble_gradients, build_dofmap,
                       geometry, line_rule, quadrature_rule)
from .mesh import BoundaryLabel, InterfaceGeometry, SubMesh, pair_interface
from .viscosity import Law, ViscosityModel, nu_darcy, nu_fluid, nu_interface, DEFAULT_EPS

BLOCKS = ("uf", "pf", "up", "pp", "eta", "lam")

Field = Union[float, Callable]


def as_field(value, ncomp: int = 1):
    """Wrap a constant or callable ``f(x, y, t)`` as a vectorized callable."""
    if value is None:
        return None
    if callable(value):
        def f(x, y, t):
            out = np.asarray(value(x, y, t), dtype=float)
            shape = (ncomp,) + x.shape if ncomp > 1 else x.shape
            return np.broadcast_to(out, shape)
        return f
    const = np.asarray(value, dtype=float)

    def g(x, y, t):
        if ncomp > 1:
            return np.broadcast_to(const.reshape((ncomp,) + (1,) * x.ndim), (ncomp,) + x.shape)
        return np.broadcast_to(const, x.shape)
    return g


@dataclass
class ProblemConfig:
    lambda_p: float = 1.0
    mu_p: float = 1.0
    s0: float = 1.0
    alpha_p: float = 1.0
    alpha_bjs: float = 1.0
    kappa: tuple = (1.0, 1.0)
    fluid: ViscosityModel = field(default_factory=lambda: ViscosityModel(Law.Cross))
    darcy: ViscosityModel = field(default_factory=lambda: ViscosityModel(Law.Cross))
    interface: Optional[ViscosityModel] = None
    bjs_nonlinearity: str = "constant"
    power_law_eps: float = DEFAULT_EPS
    f_f: Optional[Field] = None
    f_p: Optional[Field] = None
    q_f: Optional[Field] = None
    q_p: Optional[Field] = None
    p_in: Field = 1.0
    p_out: Field = 0.0
    p_p0: Optional[Field] = None
    eta_p0: Optional[Field] = None

    def __post_init__(self):
        self.kappa = tuple(float(k) for k in np.broadcast_to(np.asarray(self.kappa, dtype=float), (2,)))
        if self.interface is None:
            self.interface = self.darcy
        checks = [
            (self.lambda_p >= 0, "lambda_p must be >= 0"),
            (self.mu_p > 0, "mu_p must be > 0"),
            (self.s0 > 0, "s0 must be > 0"),
            (0 < self.alpha_p <= 1, "alpha_p must lie in (0, 1]"),
            (self.alpha_bjs >= 0, "alpha_bjs must be >= 0"),
            (min(self.kappa) > 0, "kappa entries must be > 0"),
            (self.bjs_nonlinearity in ("frozen", "constant"), "bjs_nonlinearity must be 'frozen' or 'constant'"),
            (self.power_law_eps > 0, "power_law_eps must be > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @property
    def is_linear(self) -> bool:
        bjs_linear = (self.bjs_nonlinearity == "constant" or self.interface.is_linear
                      or self.alpha_bjs == 0)
        return self.fluid.is_linear and self.darcy.is_linear and bjs_linear

    def with_(self, **kw) -> "ProblemConfig":
        return replace(self, **kw)


@dataclass(eq=False)
class Discretization:
    """Meshes, interface pairing, spaces and dof maps of one problem."""

    fluid: SubMesh
    porous: SubMesh
    interface: InterfaceGeometry
    spaces: dict
    dofmaps: dict

    @property
    def sizes(self) -> dict:
        return {b: self.spaces[b].dof_count for b in BLOCKS}

    @property
    def offsets(self) -> dict:
        out, k = {}, 0
        for b in BLOCKS:
            out[b] = k
            k += self.spaces[b].dof_count
        return out

    @property
    def n_dofs(self) -> int:
        return sum(self.sizes.values())

    def block_slice(self, name: str) -> slice:
        o = self.offsets[name]
        return slice(o, o + self.sizes[name])

    @property
    def essential(self) -> np.ndarray:
        off = self.offsets
        return np.concatenate([off[b] + self.dofmaps[b].essential for b in BLOCKS])

    @property
    def essential_values(self) -> np.ndarray:
        return np.concatenate([self.dofmaps[b].essential_values for b in BLOCKS])

    @property
    def free(self) -> np.ndarray:
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.essential] = False
        return np.flatnonzero(mask)


def build_discretization(fluid: SubMesh, porous: SubMesh, tol: float = 1e-10,
                         essential_rules: Optional[dict] = None) -> Discretization:
    iface = pair_interface(fluid, porous, tol)
    spaces = {
        "uf": Space(SpaceKind.VectorP1Bubble, fluid),
        "pf": Space(SpaceKind.ScalarP1, fluid),
        "up": Space(SpaceKind.RT0, porous),
        "pp": Space(SpaceKind.ScalarP0, porous),
        "eta": Space(SpaceKind.VectorP1, porous),
        "lam": Space(SpaceKind.InterfaceP0, porous, iface),
    }
    dofmaps = {b: build_dofmap(s, essential_rules) for b, s in spaces.items()}
    return Discretization(fluid, porous, iface, spaces, dofmaps)


@dataclass
class SolutionState:
    uf: np.ndarray
    pf: np.ndarray
    up: np.ndarray
    pp: np.ndarray
    eta: np.ndarray
    lam: np.ndarray
    time: float = 0.0

    @classmethod
    def zeros(cls, disc: Discretization, time: float = 0.0) -> "SolutionState":
        return cls(*(np.zeros(disc.sizes[b]) for b in BLOCKS), time=time)

    @classmethod
    def from_vector(cls, disc: Discretization, x: np.ndarray, time: float = 0.0) -> "SolutionState":
        return cls(*(np.array(x[disc.block_slice(b)]) for b in BLOCKS), time=time)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, b) for b in BLOCKS])

    def check(self, disc: Discretization):
        for b in BLOCKS:
            if len(getattr(self, b)) != disc.sizes[b]:
                raise ValueError(f"state block {b!r} has length {len(getattr(self, b))}, "
                                 f"expected {disc.sizes[b]}")

    def scaled(self, c: float) -> "SolutionState":
        return SolutionState(*(c * getattr(self, b) for b in BLOCKS), time=self.time)


@dataclass
class CoupledSystem:
    """Reduced (essential dofs eliminated) linear system of one Picard iterate.

    ``matrix`` acts on the free dofs ``free`` of the full vector. ``offsets``
    gives, per block, the start of that block within the reduced ordering.
    """

    matrix: sp.csc_matrix
    rhs: np.ndarray
    offsets: dict
    free: np.ndarray
    essential: np.ndarray
    essential_values: np.ndarray
    n_full: int
    # unreduced operator, only kept by the reference assembly path
    full_matrix: Optional[sp.csr_matrix] = None
    full_rhs: Optional[np.ndarray] = None

    def expand(self, x_free: np.ndarray) -> np.ndarray:
        x = np.zeros(self.n_full)
        x[self.free] = x_free
        x[self.essential] = self.essential_values
        return x

    def block_rows(self, name: str) -> slice:
        names = list(self.offsets)
        i = names.index(name)
        stop = self.offsets[names[i + 1]] if i + 1 < len(names) else self.matrix.shape[0]
        return slice(self.offsets[name], stop)


# -- helpers -----------------------------------------------------------------

def _coo(rows, cols, vals, shape):
    return sp.coo_matrix((np.ravel(vals), (np.ravel(rows), np.ravel(cols))), shape=shape).tocsr()


def _local_to_global(dofs_r, dofs_c, local, shape):
    """Scatter per-cell dense blocks (n, nr, nc) into a sparse matrix."""
    n, nr, nc = local.shape
    rows = np.broadcast_to(dofs_r[:, :, None], (n, nr, nc))
    cols = np.broadcast_to(dofs_c[:, None, :], (n, nr, nc))
    return _coo(rows, cols, local, shape)


def _acc(blocks: dict, key, m):
    blocks[key] = m if key not in blocks else blocks[key] + m


def _scatter_vec(dofs, local, size):
    out = np.zeros(size)
    np.add.at(out, dofs.ravel(), np.ravel(local))
    return out


def _sym_frobenius(grad):
    """|D(u)| for gradients (..., 2, 2) with grad[..., c, i] = d u_c / d x_i."""
    dxx = grad[..., 0, 0]
    dyy = grad[..., 1, 1]
    dxy = 0.5 * (grad[..., 0, 1] + grad[..., 1, 0])
    return np.sqrt(dxx ** 2 + dyy ** 2 + 2 * dxy ** 2)


class Assembler:
    """Precomputed element data and the individual (bi)linear forms.

    Block methods return sparse matrices sized (rows of the test space,
    columns of the trial space); :meth:`assemble_system` composes them.
    """

    def __init__(self, disc: Discretization, config: ProblemConfig, degree: int = 5,
                 interface_points: int = 3):
        self.disc = disc
        self.config = config
        self.rule = quadrature_rule(degree)
        bary, w = self.rule.points, self.rule.weights
        nq = len(w)

        # fluid element data
        fm = disc.fluid
        gf = geometry(fm)
        self.f_area = gf.area
        self.f_x = gf.to_physical(bary)
        self.f_wA = 2.0 * w[None, :] * gf.area[:, None]  # (nt, nq); weights sum to 1/2
        gb = bubble_gradients(bary, gf.grad_lambda)  # (nt, nq, 2)
        self.f_grad = np.concatenate(
            [np.broadcast_to(gf.grad_lambda[:, None], (fm.n_triangles, nq, 3, 2)), gb[:, :, None, :]], axis=2)
        self.f_val = np.column_stack([bary, 27.0 * bary.prod(axis=1)])  # (nq, 4)
        self.uf_dofs = disc.dofmaps["uf"].cell_dofs
        self.pf_dofs = disc.dofmaps["pf"].cell_dofs
        self.p1_val = bary

        # porous element data
        pm = disc.porous
        gp = geometry(pm)
        self.p_area = gp.area
        self.p_grad = gp.grad_lambda
        self.p_x = gp.to_physical(bary)
        self.p_wA = 2.0 * w[None, :] * gp.area[:, None]
        self.rt_sign = pm.edge_signs
        self.rt_val = (self.rt_sign[:, None, :, None]
                       * (self.p_x[:, :, None, :] - gp.vertices[:, None, :, :])
                       / (2.0 * gp.area[:, None, None, None]))  # (nt, nq, 3, 2)
        self.up_dofs = disc.dofmaps["up"].cell_dofs
        self.pp_dofs = disc.dofmaps["pp"].cell_dofs
        self.eta_dofs = disc.dofmaps["eta"].cell_dofs

        # interface data: basis traces at segment quadrature points
        it = disc.interface
        s, wl = line_rule(interface_points)
        self.i_x = it.a[:, None, :] + s[None, :, None] * (it.b - it.a)[:, None, :]
        self.i_w = wl[None, :] * it.lengths[:, None]
        S = it.n_segments
        flat = self.i_x.reshape(-1, 2)
        fv = np.repeat(fm.nodes[fm.triangles[it.fluid_triangle]], len(s), axis=0)
        lam_f = barycentric(fv, flat).reshape(S, len(s), 3)
        self.i_fval = np.concatenate([lam_f, 27.0 * lam_f.prod(axis=2)[..., None]], axis=2)  # (S, nq, 4)
        pv = np.repeat(pm.nodes[pm.triangles[it.porous_triangle]], len(s), axis=0)
        self.i_pval = barycentric(pv, flat).reshape(S, len(s), 3)
        pverts = pm.nodes[pm.triangles[it.porous_triangle]]
        parea = self.p_area[it.porous_triangle]
        self.i_rt = (self.rt_sign[it.porous_triangle][:, None, :, None]
                     * (self.i_x[:, :, None, :] - pverts[:, None, :, :]) / (2.0 * parea[:, None, None, None]))
        self.i_uf_dofs = self.uf_dofs[it.fluid_triangle]
        self.i_eta_dofs = self.eta_dofs[it.porous_triangle]
        self.i_up_dofs = self.up_dofs[it.porous_triangle]
        self.i_lam = it.lam_index

        self._cache = {}

    # -- shapes ---------------------------------------------------------------
    def _shape(self, r, c):
        return (self.disc.sizes[r], self.disc.sizes[c])

    # -- field evaluation at quadrature points ------------------------------
    def fluid_gradient(self, uf: np.ndarray, points: Optional[tuple] = None) -> np.ndarray:
        """Velocity gradient (nt, nq, 2, 2) at the volume quadrature points."""
        U = uf[self.uf_dofs].reshape(-1, 2, 4)  # (nt, comp, local)
        return np.einsum("tca,tqai->tqci", U, self.f_grad)

    def darcy_velocity(self, up: np.ndarray) -> np.ndarray:
        return np.einsum("tk,tqkc->tqc", up[self.up_dofs], self.rt_val)

    def fluid_viscosity(self, uf):
        cfg = self.config
        if cfg.fluid.is_linear:
            return np.full(self.f_wA.shape, cfg.fluid.nu0)
        d = _sym_frobenius(self.fluid_gradient(uf))
        return nu_fluid(cfg.fluid, d, cfg.power_law_eps)

    def darcy_viscosity(self, up):
        cfg = self.config
        if cfg.darcy.is_linear:
            return np.full(self.p_wA.shape, cfg.darcy.nu0)
        u = np.linalg.norm(self.darcy_velocity(up), axis=-1)
        return nu_darcy(cfg.darcy, u, self._kappa_scalar(), cfg.power_law_eps)

    def _kappa_scalar(self):
        k = self.config.kappa
        return float(np.sqrt(k[0] * k[1]))

    def interface_coefficient(self, lagged: Optional["SolutionState"] = None,
                              eta_old: Optional[np.ndarray] = None, tau: float = 1.0) -> np.ndarray:
        """nu_I alpha_BJS / sqrt(kappa_t) at interface quadrature points."""
        cfg = self.config
        t = self.disc.interface.t
        kt = cfg.kappa[0] * t[:, 0] ** 2 + cfg.kappa[1] * t[:, 1] ** 2
        base = cfg.alpha_bjs / np.sqrt(kt)[:, None] * np.ones_like(self.i_w)
        model = cfg.interface
        if cfg.bjs_nonlinearity == "constant" or model.is_linear or lagged is None:
            return base * model.nu0
        if eta_old is None:
            eta_old = np.zeros_like(lagged.eta)
        slip = self.interface_slip(lagged.uf, (lagged.eta - eta_old) / tau)
        return base * nu_interface(model, np.abs(slip), kt[:, None], cfg.power_law_eps)

    def interface_slip(self, uf, structure_velocity):
        """Tangential slip (u_f - u_s) . t at interface quadrature points."""
        t = self.disc.interface.t
        U = uf[self.i_uf_dofs].reshape(-1, 2, 4)
        E = structure_velocity[self.i_eta_dofs].reshape(-1, 2, 3)
        vf = np.einsum("sca,sqa->sqc", U, self.i_fval)
        vs = np.einsum("sca,sqa->sqc", E, self.i_pval)
        return np.einsum("sqc,sc->sq", vf - vs, t)

    # -- bilinear forms -------------------------------------------------------
    def af_local(self, lagged: Optional["SolutionState"] = None, nu: Optional[np.ndarray] = None):
        """Element matrices (nt, 8, 8) of (2 nu D(u), D(v))."""
        if nu is None:
            uf = lagged.uf if lagged is not None else np.zeros(self.disc.sizes["uf"])
            nu = self.fluid_viscosity(uf)
        W = self.f_wA * nu
        G = self.f_grad
        WG = W[:, :, None, None] * G
        S = np.einsum("tqai,tqbi->tab", WG, G)
        T2 = np.einsum("tqad,tqbc->tcadb", WG, G)  # [(c,a),(d,b)] = sum W G[a,d] G[b,c]
        T2[:, 0, :, 0, :] += S
        T2[:, 1, :, 1, :] += S
        return T2.reshape(len(W), 8, 8)

    def assemble_af(self, lagged: Optional["SolutionState"] = None, nu: Optional[np.ndarray] = None):
        """(2 nu D(u), D(v)) over the fluid, nu frozen at ``lagged``."""
        return _local_to_global(self.uf_dofs, self.uf_dofs, self.af_local(lagged, nu), self._shape("uf", "uf"))

    def apd_local(self, lagged: Optional["SolutionState"] = None, nu: Optional[np.ndarray] = None):
        """Element matrices (nt, 3, 3) of (nu_eff kappa^-1 u_p, v_p)."""
        if nu is None:
            up = lagged.up if lagged is not None else np.zeros(self.disc.sizes["up"])
            nu = self.darcy_viscosity(up)
        kinv = 1.0 / np.asarray(self.config.kappa)
        WV = (self.p_wA * nu)[:, :, None, None] * self.rt_val * kinv
        return np.einsum("tqkc,tqlc->tkl", WV, self.rt_val)

    def assemble_apd(self, lagged: Optional["SolutionState"] = None, nu: Optional[np.ndarray] = None):
        """(nu_eff kappa^-1 u_p, v_p) over the porous region."""
        return _local_to_global(self.up_dofs, self.up_dofs, self.apd_local(lagged, nu), self._shape("up", "up"))

    def assemble_ape(self):
        """(2 mu D(eta), D(xi)) + (lambda div eta, div xi)."""
        if "ape" in self._cache:
            return self._cache["ape"]
        mu, lam = self.config.mu_p, self.config.lambda_p
        g = self.p_grad
        A = self.p_area
        S = np.einsum("t,tai,tbi->tab", A, g, g)
        K = mu * np.einsum("t,tad,tbc->tcadb", A, g, g)
        K += lam * np.einsum("t,tac,tbd->tcadb", A, g, g)
        K[:, 0, :, 0, :] += mu * S
        K[:, 1, :, 1, :] += mu * S
        nt = len(A)
        M = _local_to_global(self.eta_dofs, self.eta_dofs, K.reshape(nt, 6, 6), self._shape("eta", "eta"))
        self._cache["ape"] = M
        return M

    def assemble_bf(self):
        """b_f(v, w) = -(div v, w); returns the (uf, pf) block."""
        W = self.f_wA
        B = -np.einsum("tq,tqac,qk->tcak", W, self.f_grad, self.p1_val)
        nt = len(W)
        return _local_to_global(self.uf_dofs, self.pf_dofs, B.reshape(nt, 8, 3), self._shape("uf", "pf"))

    def assemble_bp(self):
        """b_p(v, w) = -(div v, w) for RT0 x P0; returns the (up, pp) block."""
        B = -self.rt_sign[:, :, None]  # div phi_k = sign/area, integrated against 1_T
        return _local_to_global(self.up_dofs, self.pp_dofs, B, self._shape("up", "pp"))

    def assemble_bp_eta(self):
        """b_p(xi, w) = -(div xi, w) for P1 displacement; returns the (eta, pp) block."""
        B = -self.p_area[:, None, None] * np.transpose(self.p_grad, (0, 2, 1))  # (nt, c, a)
        nt = len(B)
        return _local_to_global(self.eta_dofs, self.pp_dofs, B.reshape(nt, 6, 1), self._shape("eta", "pp"))

    def assemble_pp_mass(self):
        return sp.diags(self.p_area).tocsr()

    def assemble_time_mass(self, tau: float):
        """Backward Euler mass-row terms: returns ((pp, pp), (pp, eta)) blocks."""
        cfg = self.config
        mpp = (cfg.s0 / tau) * self.assemble_pp_mass()
        mpe = (-cfg.alpha_p / tau) * self.assemble_bp_eta().T.tocsr()
        return mpp, mpe

    def assemble_bgamma(self):
        """Blocks (uf, lam), (up, lam), (eta, lam) of <v_f.n_f + (xi + v_p).n_p, mu>."""
        it = self.disc.interface
        w = self.i_w
        S = it.n_segments
        lam = self.i_lam[:, None]
        Bf = np.einsum("sq,sqa,sc->sca", w, self.i_fval, it.n_f).reshape(S, 8, 1)
        Bu = np.einsum("sq,sqkc,sc->sk", w, self.i_rt, it.n_p)[:, :, None]
        Be = np.einsum("sq,sqa,sc->sca", w, self.i_pval, it.n_p).reshape(S, 6, 1)
        return (_local_to_global(self.i_uf_dofs, lam, Bf, self._shape("uf", "lam")),
                _local_to_global(self.i_up_dofs, lam, Bu, self._shape("up", "lam")),
                _local_to_global(self.i_eta_dofs, lam, Be, self._shape("eta", "lam")))

    def assemble_abjs(self, coefficient: np.ndarray):
        """Tangential-trace blocks of the BJS form with pointwise ``coefficient``.

        Returns (K_ff, K_fe, K_ef, K_ee) for the bilinear form
        sum c (u.t - e.t)(v.t - xi.t); the caller applies the 1/tau factor to
        the displacement columns.
        """
        t = self.disc.interface.t
        W = self.i_w * coefficient
        S = len(W)
        tf = np.einsum("sqa,sc->sqca", self.i_fval, t).reshape(S, -1, 8)
        te = np.einsum("sqa,sc->sqca", self.i_pval, t).reshape(S, -1, 6)
        Kff = np.einsum("sq,sqi,sqj->sij", W, tf, tf)
        Kfe = -np.einsum("sq,sqi,sqj->sij", W, tf, te)
        Kee = np.einsum("sq,sqi,sqj->sij", W, te, te)
        return (_local_to_global(self.i_uf_dofs, self.i_uf_dofs, Kff, self._shape("uf", "uf")),
                _local_to_global(self.i_uf_dofs, self.i_eta_dofs, Kfe, self._shape("uf", "eta")),
                _local_to_global(self.i_eta_dofs, self.i_uf_dofs, np.transpose(Kfe, (0, 2, 1)),
                                 self._shape("eta", "uf")),
                _local_to_global(self.i_eta_dofs, self.i_eta_dofs, Kee, self._shape("eta", "eta")))

    # -- right-hand sides -----------------------------------------------------
    def load_vector(self, t: float) -> dict:
        """Sources and natural boundary pressures at time ``t``, per block."""
        cfg = self.config
        d = self.disc
        out = {b: np.zeros(d.sizes[b]) for b in BLOCKS}
        x, y = self.f_x[..., 0], self.f_x[..., 1]
        if cfg.f_f is not None:
            f = as_field(cfg.f_f, 2)(x, y, t)  # (2, nt, nq)
            loc = np.einsum("tq,ctq,qa->tca", self.f_wA, f, self.f_val)
            out["uf"] += _scatter_vec(self.uf_dofs, loc.reshape(len(loc), 8), d.sizes["uf"])
        if cfg.q_f is not None:
            q = as_field(cfg.q_f)(x, y, t)
            loc = np.einsum("tq,tq,qk->tk", self.f_wA, q, self.p1_val)
            out["pf"] += _scatter_vec(self.pf_dofs, loc, d.sizes["pf"])
        x, y = self.p_x[..., 0], self.p_x[..., 1]
        if cfg.f_p is not None:
            f = as_field(cfg.f_p, 2)(x, y, t)
            loc = np.einsum("tq,ctq,qa->tca", self.p_wA, f, self.p1_val)
            out["eta"] += _scatter_vec(self.eta_dofs, loc.reshape(len(loc), 6), d.sizes["eta"])
        if cfg.q_p is not None:
            q = as_field(cfg.q_p)(x, y, t)
            out["pp"] += (self.p_wA * q).sum(axis=1)
        self._boundary_pressure(out, BoundaryLabel.InletF, cfg.p_in, t)
        self._boundary_pressure(out, BoundaryLabel.OutletP, cfg.p_out, t)
        return out

    def _boundary_pressure(self, out, label, value, t):
        if value is None:
            return
        fluid = label is BoundaryLabel.InletF
        mesh = self.disc.fluid if fluid else self.disc.porous
        idx = mesh.labelled_edges(label)
        if len(idx) == 0:
            return
        gid = mesh.boundary_edge_ids()[idx]
        tri = mesh.edge_triangles[gid, 0]
        a = mesh.nodes[mesh.edges[gid, 0]]
        b = mesh.nodes[mesh.edges[gid, 1]]
        n = mesh.edge_normals[gid]
        s, wl = line_rule(3)
        xq = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
        wq = wl[None, :] * mesh.edge_lengths[gid][:, None]
        p = as_field(value)(xq[..., 0], xq[..., 1], t)
        verts = mesh.nodes[mesh.triangles[tri]]
        flat = xq.reshape(-1, 2)
        lam = barycentric(np.repeat(verts, len(s), axis=0), flat).reshape(len(gid), len(s), 3)
        if fluid:
            vals = np.concatenate([lam, 27.0 * lam.prod(axis=2)[..., None]], axis=2)
            loc = -np.einsum("eq,eq,eqa,ec->eca", wq, p, vals, n).reshape(len(gid), 8)
            out["uf"] += _scatter_vec(self.uf_dofs[tri], loc, len(out["uf"]))
        else:
            area = self.p_area[tri]
            phi = (self.rt_sign[tri][:, None, :, None] * (xq[:, :, None, :] - verts[:, None, :, :])
                   / (2.0 * area[:, None, None, None]))
            loc = -np.einsum("eq,eq,eqkc,ec->ek", wq, p, phi, n)
            out["up"] += _scatter_vec(self.up_dofs[tri], loc, len(out["up"]))

    # -- initial data ---------------------------------------------------------
    def initial_state(self, t0: float = 0.0) -> SolutionState:
        """P0 cell means of p_p0 and vertex interpolation of eta_p0."""
        state = SolutionState.zeros(self.disc, t0)
        cfg = self.config
        if cfg.p_p0 is not None:
            x, y = self.p_x[..., 0], self.p_x[..., 1]
            p = as_field(cfg.p_p0)(x, y, t0)
            state.pp = (self.p_wA * p).sum(axis=1) / self.p_area
        if cfg.eta_p0 is not None:
            nodes = self.disc.porous.nodes
            e = as_field(cfg.eta_p0, 2)(nodes[:, 0], nodes[:, 1], t0)
            state.eta = np.concatenate([e[0], e[1]])
        dm = self.disc.dofmaps["eta"]
        state.eta[dm.essential] = dm.essential_values
        return state

    # -- system composition ----------------------------------------------------
    def _constant_parts(self, tau):
        key = ("const", tau)
        if key in self._cache:
            return self._cache[key]
        cfg = self.config
        d = self.disc
        sz = d.sizes
        bf = self.assemble_bf()
        bp = self.assemble_bp()
        bpe = self.assemble_bp_eta()
        gf, gu, ge = self.assemble_bgamma()
        mpp, mpe = self.assemble_time_mass(tau)

        steady = {
            ("uf", "pf"): bf, ("pf", "uf"): -bf.T,
            ("up", "pp"): bp, ("pp", "up"): -bp.T,
            ("eta", "eta"): self.assemble_ape(),
            ("eta", "pp"): cfg.alpha_p * bpe,
            ("uf", "lam"): gf, ("lam", "uf"): gf.T,
            ("up", "lam"): gu, ("lam", "up"): gu.T,
            ("eta", "lam"): ge,
        }
        time = {
            ("pp", "pp"): mpp, ("pp", "eta"): mpe,
            ("lam", "eta"): ge.T / tau,
        }
        linear_bjs = self.config.bjs_nonlinearity == "constant" or self.config.interface.is_linear
        if linear_bjs:
            self._add_bjs(steady, time, self.interface_coefficient(), tau)
        if cfg.fluid.is_linear:
            _acc(steady, ("uf", "uf"), self.assemble_af())
        if cfg.darcy.is_linear:
            steady[("up", "up")] = self.assemble_apd()
        S = self._compose(steady)
        T = self._compose(time)
        self._cache[key] = (S, T)
        return S, T

    def _add_bjs(self, steady, time, coef, tau):
        kff, kfe, kef, kee = self.assemble_abjs(coef)
        _acc(steady, ("uf", "uf"), kff)
        _acc(steady, ("eta", "uf"), kef)
        _acc(time, ("uf", "eta"), kfe / tau)
        _acc(time, ("eta", "eta"), kee / tau)

    def _compose(self, blocks: dict):
        rows = []
        for r in BLOCKS:
            row = []
            for c in BLOCKS:
                m = blocks.get((r, c))
                row.append(m)
            rows.append(row)
        # make sure every block row/col has a defined size
        for i, b in enumerate(BLOCKS):
            if rows[i][i] is None:
                rows[i][i] = sp.csr_matrix(self._shape(b, b))
        return sp.bmat(rows, format="csr")

    def nonlinear_part(self, lagged: SolutionState, eta_old: np.ndarray, tau: float):
        """Steady and time blocks that depend on the lagged iterate."""
        cfg = self.config
        steady, time = {}, {}
        if not cfg.fluid.is_linear:
            steady[("uf", "uf")] = self.assemble_af(lagged)
        if not cfg.darcy.is_linear:
            steady[("up", "up")] = self.assemble_apd(lagged)
        if not (cfg.bjs_nonlinearity == "constant" or cfg.interface.is_linear):
            self._add_bjs(steady, time, self.interface_coefficient(lagged, eta_old, tau), tau)
        if not steady and not time:
            return None, None
        return self._compose(steady), self._compose(time)

    def assemble_full(self, prev_time: SolutionState, lagged: SolutionState, t_new: float, tau: float):
        """Unreduced Backward Euler operator and right-hand side."""
        if tau <= 0:
            raise ValueError("time step must be positive")
        S, T = self._constant_parts(tau)
        Sn, Tn = self.nonlinear_part(lagged, prev_time.eta, tau)
        if Sn is not None:
            S = S + Sn
            T = T + Tn
        b = self._load(t_new) + T @ prev_time.to_vector()
        return (S + T).tocsr(), b

    def _load(self, t):
        key = ("load", t)
        if key not in self._cache:
            self._cache = {k: v for k, v in self._cache.items() if k[0] != "load"}
            load = self.load_vector(t)
            self._cache[key] = np.concatenate([load[k] for k in BLOCKS])
        return self._cache[key]

    def _pattern(self, tau):
        key = ("pattern", tau)
        if key not in self._cache:
            self._cache[key] = _FixedPattern(self, tau)
        return self._cache[key]

    def assemble_system(self, prev_time: SolutionState, lagged: SolutionState, t_new: float,
                        tau: float, keep_full: bool = False) -> CoupledSystem:
        """Backward Euler system at ``t_new`` with viscosities frozen at ``lagged``.

        When only the fluid and Darcy viscosities vary, the reduced matrix is
        filled directly into a fixed sparsity pattern; otherwise (or with
        ``keep_full``) the full operator is built and reduced.
        """
        if tau <= 0:
            raise ValueError("time step must be positive")
        prev_time.check(self.disc)
        lagged.check(self.disc)
        cfg = self.config
        linear_bjs = cfg.bjs_nonlinearity == "constant" or cfg.interface.is_linear
        if keep_full or not linear_bjs:
            A, b = self.assemble_full(prev_time, lagged, t_new, tau)
            return reduce_system(self.disc, A, b)
        pat = self._pattern(tau)
        _, T = self._constant_parts(tau)
        b = self._load(t_new) + T @ prev_time.to_vector()
        local = []
        if not cfg.fluid.is_linear:
            local.append(self.af_local(lagged))
        if not cfg.darcy.is_linear:
            local.append(self.apd_local(lagged))
        A, corr = pat.fill(local)
        rhs = b[pat.free] - pat.const_corr - corr
        return CoupledSystem(A, rhs, pat.offsets, pat.free, pat.essential, pat.values, pat.n)


class _FixedPattern:
    """Sparsity pattern of the reduced operator with the lagged blocks scattered in.

    The constant part is reduced once; each Picard iterate only adds the
    element matrices of the viscosity-dependent blocks through precomputed
    positions, plus their essential-column contribution to the right side.
    """

    def __init__(self, asm: "Assembler", tau: float):
        d = asm.disc
        cfg = asm.config
        self.n = d.n_dofs
        self.free = d.free
        self.essential = d.essential
        self.values = d.essential_values
        nF = len(self.free)
        g2f = np.full(self.n, -1)
        g2f[self.free] = np.arange(nF)
        gfull = np.zeros(self.n)
        gfull[self.essential] = self.values
        S, T = asm._constant_parts(tau)
        rows = (S + T).tocsr()[self.free]
        self.const_corr = rows[:, self.essential] @ self.values if len(self.essential) else np.zeros(nF)
        C = rows[:, self.free].tocoo()
        off = d.offsets
        blocks = []
        if not cfg.fluid.is_linear:
            blocks.append(off["uf"] + asm.uf_dofs)
        if not cfg.darcy.is_linear:
            blocks.append(off["up"] + asm.up_dofs)
        keys = [C.col.astype(np.int64) * nF + C.row]
        self.blocks = []
        for dofs in blocks:
            k = dofs.shape[1]
            r = np.repeat(dofs, k, axis=1).ravel()
            c = np.tile(dofs, (1, k)).ravel()
            fr, fc = g2f[r], g2f[c]
            inner = (fr >= 0) & (fc >= 0)
            to_rhs = (fr >= 0) & (fc < 0)
            keys.append(fc[inner].astype(np.int64) * nF + fr[inner])
            self.blocks.append([inner, to_rhs, fr[to_rhs], gfull[c[to_rhs]]])
        uniq, inv = np.unique(np.concatenate(keys), return_inverse=True)
        self.nnz = len(uniq)
        self.indices = (uniq % nF).astype(np.int32)
        self.indptr = np.searchsorted(uniq // nF, np.arange(nF + 1)).astype(np.int32)
        self.shape = (nF, nF)
        start = len(keys[0])
        self.const_data = np.bincount(inv[:start], weights=C.data, minlength=self.nnz)
        for blk, kk in zip(self.blocks, keys[1:]):
            blk.insert(0, inv[start:start + len(kk)])
            start += len(kk)
        offsets, k = {}, 0
        for name in BLOCKS:
            offsets[name] = k
            k += d.sizes[name] - len(d.dofmaps[name].essential)
        self.offsets = offsets

    def fill(self, local: list):
        data = self.const_data.copy()
        corr = np.zeros(self.shape[0])
        for (pos, inner, to_rhs, rrows, gvals), K in zip(self.blocks, local):
            flat = K.ravel()
            data += np.bincount(pos, weights=flat[inner], minlength=self.nnz)
            if len(rrows):
                corr += np.bincount(rrows, weights=flat[to_rhs] * gvals, minlength=self.shape[0])
        A = sp.csc_matrix((data, self.indices, self.indptr), shape=self.shape)
        return A, corr


def reduce_system(disc: Discretization, A: sp.csr_matrix, b: np.ndarray) -> CoupledSystem:
    """Eliminate essential dofs: A_FF x_F = b_F - A_FE g."""
    free = disc.free
    ess = disc.essential
    g = disc.essential_values
    rows = A[free]
    Aff = rows[:, free].tocsc()
    rhs = b[free] - (rows[:, ess] @ g if len(ess) else 0.0)
    offsets, k = {}, 0
    for name in BLOCKS:
        offsets[name] = k
        k += disc.sizes[name] - len(disc.dofmaps[name].essential)
    return CoupledSystem(Aff, np.asarray(rhs, dtype=float), offsets, free, ess, g, A.shape[0], A, b)


def assemble_system(disc: Discretization, config: ProblemConfig, prev_time: SolutionState,
                    lagged: SolutionState, t_new: float, tau: float) -> CoupledSystem:
    return Assembler(disc, config).assemble_system(prev_time, lagged, t_new, tau)
