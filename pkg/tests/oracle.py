"""Dense brute-force assembly of the coupled operator, used as a test oracle.

Basis functions are evaluated pointwise from their definitions and every
form is integrated with a collapsed Gauss-Legendre rule, sharing nothing
with the vectorized assembler except the dof numbering and edge signs.
"""

import numpy as np

from fpsi.forms import BLOCKS


def duffy_rule(n=8):
    g, w = np.polynomial.legendre.leggauss(n)
    g, w = 0.5 * (g + 1), 0.5 * w
    pts, wts = [], []
    for a, wa in zip(g, w):
        for b, wb in zip(g, w):
            pts.append((a * (1 - b), b))
            wts.append(wa * wb * (1 - b))
    return np.array(pts), np.array(wts)  # reference triangle (0,0),(1,0),(0,1); weights sum to 1/2


def bary_map(V):
    M = np.vstack([np.ones(3), V.T])
    Minv = np.linalg.inv(M)
    return (lambda x: Minv @ np.array([1.0, x[0], x[1]])), Minv[:, 1:]


def vector_basis(V, bubble):
    """List of (value(x) -> (2,), grad(x) -> (2,2)) in local order comp-major."""
    lam, G = bary_map(V)
    scal = []
    for a in range(3):
        scal.append((lambda x, a=a: lam(x)[a], lambda x, a=a: G[a]))
    if bubble:
        def bv(x):
            l = lam(x)
            return 27 * l[0] * l[1] * l[2]

        def bg(x):
            l = lam(x)
            return 27 * (G[0] * l[1] * l[2] + G[1] * l[0] * l[2] + G[2] * l[0] * l[1])
        scal.append((bv, bg))
    out = []
    for c in range(2):
        for f, g in scal:
            e = np.eye(2)[c]
            out.append((lambda x, f=f, e=e: f(x) * e, lambda x, g=g, e=e: np.outer(e, g(x))))
    return out


def rt_basis(V, signs):
    area = 0.5 * abs((V[1, 0] - V[0, 0]) * (V[2, 1] - V[0, 1]) - (V[2, 0] - V[0, 0]) * (V[1, 1] - V[0, 1]))
    return [(lambda x, k=k: signs[k] * (np.asarray(x) - V[k]) / (2 * area), signs[k] / area) for k in range(3)]


def volume_points(V, rule):
    pts, wts = rule
    area = 0.5 * abs((V[1, 0] - V[0, 0]) * (V[2, 1] - V[0, 1]) - (V[2, 0] - V[0, 0]) * (V[1, 1] - V[0, 1]))
    X = V[0] + pts[:, :1] * (V[1] - V[0]) + pts[:, 1:] * (V[2] - V[0])
    return X, 2 * area * wts


def sym(g):
    return 0.5 * (g + g.T)


def dense_operator(disc, cfg, tau, n_quad=8):
    """Full (unreduced) Backward Euler matrix for Newtonian laws."""
    sizes = [disc.sizes[b] for b in BLOCKS]
    off = dict(zip(BLOCKS, np.cumsum([0] + sizes[:-1])))
    A = np.zeros((sum(sizes), sum(sizes)))
    rule = duffy_rule(n_quad)
    fm, pm = disc.fluid, disc.porous
    nu_f, nu_p, nu_i = cfg.fluid.nu0, cfg.darcy.nu0, cfg.interface.nu0
    kinv = 1 / np.array(cfg.kappa)

    def add(rb, cb, rd, cd, val):
        A[off[rb] + rd, off[cb] + cd] += val

    for t in range(fm.n_triangles):
        V = fm.nodes[fm.triangles[t]]
        U = vector_basis(V, True)
        lam, G = bary_map(V)
        ud = disc.dofmaps["uf"].cell_dofs[t]
        pd = disc.dofmaps["pf"].cell_dofs[t]
        for x, w in zip(*volume_points(V, rule)):
            l = lam(x)
            for i, (_, gi) in enumerate(U):
                for j, (_, gj) in enumerate(U):
                    add("uf", "uf", ud[i], ud[j], w * 2 * nu_f * np.sum(sym(gj(x)) * sym(gi(x))))
                for k in range(3):
                    div = np.trace(gi(x))
                    add("uf", "pf", ud[i], pd[k], -w * div * l[k])
                    add("pf", "uf", pd[k], ud[i], w * div * l[k])

    for t in range(pm.n_triangles):
        V = pm.nodes[pm.triangles[t]]
        R = rt_basis(V, pm.edge_signs[t])
        E = vector_basis(V, False)
        upd = disc.dofmaps["up"].cell_dofs[t]
        ppd = disc.dofmaps["pp"].cell_dofs[t][0]
        ed = disc.dofmaps["eta"].cell_dofs[t]
        for x, w in zip(*volume_points(V, rule)):
            for i, (fi, di) in enumerate(R):
                for j, (fj, _) in enumerate(R):
                    add("up", "up", upd[i], upd[j], w * nu_p * np.sum(kinv * fj(x) * fi(x)))
                add("up", "pp", upd[i], ppd, -w * di)
                add("pp", "up", ppd, upd[i], w * di)
            add("pp", "pp", ppd, ppd, w * cfg.s0 / tau)
            for i, (_, gi) in enumerate(E):
                for j, (_, gj) in enumerate(E):
                    val = 2 * cfg.mu_p * np.sum(sym(gj(x)) * sym(gi(x))) + cfg.lambda_p * np.trace(gj(x)) * np.trace(gi(x))
                    add("eta", "eta", ed[i], ed[j], w * val)
                div = np.trace(gi(x))
                add("eta", "pp", ed[i], ppd, -w * cfg.alpha_p * div)
                add("pp", "eta", ppd, ed[i], w * cfg.alpha_p * div / tau)

    it = disc.interface
    g, gw = np.polynomial.legendre.leggauss(6)
    for s in range(it.n_segments):
        a, b = it.a[s], it.b[s]
        L = np.linalg.norm(b - a)
        tvec = (b - a) / L
        n_p = np.array([tvec[1], -tvec[0]])
        if n_p @ (pm.nodes[pm.triangles[it.porous_triangle[s]]].mean(axis=0) - a) > 0:
            n_p = -n_p
        n_f = -n_p
        kt = cfg.kappa[0] * tvec[0] ** 2 + cfg.kappa[1] * tvec[1] ** 2
        c = nu_i * cfg.alpha_bjs / np.sqrt(kt)
        tf, tp = it.fluid_triangle[s], it.porous_triangle[s]
        U = vector_basis(fm.nodes[fm.triangles[tf]], True)
        E = vector_basis(pm.nodes[pm.triangles[tp]], False)
        R = rt_basis(pm.nodes[pm.triangles[tp]], pm.edge_signs[tp])
        ud = disc.dofmaps["uf"].cell_dofs[tf]
        ed = disc.dofmaps["eta"].cell_dofs[tp]
        upd = disc.dofmaps["up"].cell_dofs[tp]
        m = it.lam_index[s]
        for gq, wq in zip(g, gw):
            x = a + 0.5 * (gq + 1) * (b - a)
            w = 0.5 * wq * L
            for i, (fi, _) in enumerate(U):
                add("uf", "lam", ud[i], m, w * fi(x) @ n_f)
                add("lam", "uf", m, ud[i], w * fi(x) @ n_f)
                for j, (fj, _) in enumerate(U):
                    add("uf", "uf", ud[i], ud[j], w * c * (fj(x) @ tvec) * (fi(x) @ tvec))
                for j, (ej, _) in enumerate(E):
                    add("uf", "eta", ud[i], ed[j], -w * c / tau * (ej(x) @ tvec) * (fi(x) @ tvec))
                    add("eta", "uf", ed[j], ud[i], -w * c * (ej(x) @ tvec) * (fi(x) @ tvec))
            for i, (ei, _) in enumerate(E):
                add("eta", "lam", ed[i], m, w * ei(x) @ n_p)
                add("lam", "eta", m, ed[i], w * ei(x) @ n_p / tau)
                for j, (ej, _) in enumerate(E):
                    add("eta", "eta", ed[i], ed[j], w * c / tau * (ej(x) @ tvec) * (ei(x) @ tvec))
            for i, (ri, _) in enumerate(R):
                add("up", "lam", upd[i], m, w * ri(x) @ n_p)
                add("lam", "up", m, upd[i], w * ri(x) @ n_p)
    return A
