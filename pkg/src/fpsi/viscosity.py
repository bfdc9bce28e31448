"""Shear-thinning viscosity laws and sampled checks of their structure.

The same four laws serve the free fluid (argument ``|D(u_f)|``), the
Darcy effective viscosity (argument ``|u_p|``) and the interface slip
viscosity (argument ``|tangential slip|``).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

DEFAULT_EPS = 1e-8


class Law(enum.Enum):
    Carreau = "carreau"
    Cross = "cross"
    PowerLaw = "power_law"
    Newtonian = "newtonian"


@dataclass(frozen=True)
class ViscosityModel:
    law: Law
    nu0: float = 10.0
    nu_inf: float = 1.0
    K: float = 1.0
    r: float = 1.35
    m_c: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "law", Law(self.law))
        if self.law is Law.Newtonian:
            if self.nu0 <= 0:
                raise ValueError("Newtonian viscosity nu0 must be positive")
            return
        if self.K <= 0:
            raise ValueError("K must be positive")
        if not 1.0 < self.r < 2.0:
            raise ValueError("r must lie in (1, 2)")
        if self.law in (Law.Carreau, Law.Cross) and not 0.0 <= self.nu_inf < self.nu0:
            raise ValueError("need 0 <= nu_inf < nu0")
        if self.law is Law.PowerLaw and self.m_c <= 0:
            raise ValueError("m_c must be positive")

    @property
    def is_linear(self) -> bool:
        return self.law is Law.Newtonian

    def as_dict(self) -> dict:
        d = asdict(self)
        d["law"] = self.law.value
        return d


def newtonian(nu: float) -> ViscosityModel:
    return ViscosityModel(Law.Newtonian, nu0=nu, nu_inf=nu)


def _law(model: ViscosityModel, x):
    x = np.asarray(x, dtype=float)
    law = model.law
    if law is Law.Newtonian:
        return np.full_like(x, model.nu0)
    if law is Law.Carreau:
        return model.nu_inf + (model.nu0 - model.nu_inf) / (1.0 + model.K * x ** 2) ** ((2.0 - model.r) / 2.0)
    if law is Law.Cross:
        return model.nu_inf + (model.nu0 - model.nu_inf) / (1.0 + model.K * x ** (2.0 - model.r))
    with np.errstate(divide="ignore"):
        return model.K * x ** (model.r - 2.0)


def _regularize(model, x, eps):
    if eps is not None and model.law is Law.PowerLaw:
        return np.maximum(x, eps)
    return x


def nu_fluid(model: ViscosityModel, d, eps: Optional[float] = None):
    """Fluid viscosity at deformation magnitude ``d`` (Frobenius norm of D(u)).

    The power law is infinite at ``d = 0`` unless ``eps`` is given, in which
    case ``max(d, eps)`` is used.
    """
    d = _regularize(model, np.asarray(d, dtype=float), eps)
    if model.law is Law.PowerLaw and eps is None:
        with np.errstate(divide="ignore"):
            out = _law(model, d)
        return out
    return _law(model, d)


def nu_darcy(model: ViscosityModel, u, kappa: float = 1.0, eps: Optional[float] = None):
    """Effective Darcy viscosity at speed ``u``; the power law uses u / (sqrt(kappa) m_c)."""
    u = np.asarray(u, dtype=float)
    if model.law is Law.PowerLaw:
        if np.any(np.asarray(kappa) <= 0):
            raise ValueError("permeability must be positive")
        u = u / (np.sqrt(kappa) * model.m_c)
        u = _regularize(model, u, eps)
    return _law(model, u)


def nu_interface(model: ViscosityModel, s, kappa: float = 1.0, eps: Optional[float] = None):
    """Interface (slip) viscosity; same closed forms as :func:`nu_darcy`."""
    return nu_darcy(model, s, kappa, eps)


# -- sampled assumption checks --------------------------------------------------

@dataclass
class MonotonicityReport:
    law: str
    n_samples: int
    c: float
    min_quotient_A1: float
    min_quotient_B1: float
    max_ratio_A2: float
    max_ratio_B2: float
    # extreme values over the scale sweep, used to judge uniformity
    sweep_min_A1: float
    sweep_max_A2: float
    sweep_min_B1: float
    sweep_max_B2: float

    def holds_A(self) -> bool:
        """Uniform positive A1 constant and bounded A2 constant across scales."""
        return (self.min_quotient_A1 > 0 and self.sweep_min_A1 >= 1e-2 * self.min_quotient_A1
                and np.isfinite(self.sweep_max_A2) and self.sweep_max_A2 <= 1e2 * self.max_ratio_A2)

    def holds_B(self) -> bool:
        return (self.min_quotient_B1 > 0 and self.sweep_min_B1 >= 1e-2 * self.min_quotient_B1
                and np.isfinite(self.sweep_max_B2) and self.sweep_max_B2 <= 1e2 * self.max_ratio_B2)


def G(model: ViscosityModel, x: np.ndarray) -> np.ndarray:
    """G(x) = g(|x|) x for rows of ``x``, with G(0) = 0."""
    mag = np.linalg.norm(x, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = nu_fluid(model, mag)
        out = g[..., None] * x
    out[mag == 0] = 0.0
    return out


def default_c(model: ViscosityModel) -> float:
    return 0.0 if model.law in (Law.PowerLaw, Law.Newtonian) else 1.0


def _quotients(model, x, h, c):
    dG = G(model, x + h) - G(model, x)
    hh = np.einsum("ij,ij->i", h, h)
    hn = np.sqrt(hh)
    inner = np.einsum("ij,ij->i", dG, h)
    dGn = np.linalg.norm(dG, axis=1)
    r = model.r if model.law is not Law.Newtonian else 2.0
    w = c + np.linalg.norm(x, axis=1) ** (2 - r) + np.linalg.norm(x + h, axis=1) ** (2 - r)
    return inner / hh, inner * w / hh, dGn / hn, dGn * w / hn


def check_monotonicity(model: ViscosityModel, n_samples: int = 100_000, rng_seed: int = 0,
                       c: Optional[float] = None, scale: float = 10.0,
                       sweep=(1e-6, 1e-3, 1e3, 1e6)) -> MonotonicityReport:
    """Sample the (A1)/(A2) and (B1)/(B2) quotients of G(x) = g(|x|) x.

    Components of x and h are uniform on [-scale, scale]. The same samples
    rescaled by each factor in ``sweep`` expose constants that degenerate at
    small or large arguments (e.g. the A1 constant of a law with nu_inf = 0).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    c = default_c(model) if c is None else float(c)
    rng = np.random.default_rng(rng_seed)
    x = rng.uniform(-scale, scale, (n_samples, 2))
    h = rng.uniform(-scale, scale, (n_samples, 2))
    keep = np.einsum("ij,ij->i", h, h) > 0
    x, h = x[keep], h[keep]
    a1, b1, a2, b2 = _quotients(model, x, h, c)
    s_a1, s_b1, s_a2, s_b2 = a1.min(), b1.min(), a2.max(), b2.max()
    for f in sweep:
        q = _quotients(model, f * x, f * h, c)
        s_a1 = min(s_a1, q[0].min())
        s_b1 = min(s_b1, q[1].min())
        s_a2 = max(s_a2, q[2].max())
        s_b2 = max(s_b2, q[3].max())
    return MonotonicityReport(model.law.value, int(keep.sum()), c,
                              float(a1.min()), float(b1.min()), float(a2.max()), float(b2.max()),
                              float(s_a1), float(s_a2), float(s_b1), float(s_b2))
