"""Non-dimensional Bingham, Casson and Herschel-Bulkley models.

All pointwise maps act on arrays of stored tensor components ``(..., 3)``
and are applied elementwise; integrals take the element areas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fem import frobenius

BINGHAM = "bingham"
CASSON = "casson"
HERSCHEL_BULKLEY = "herschel_bulkley"
KINDS = (BINGHAM, CASSON, HERSCHEL_BULKLEY)


class ProxError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConstitutiveModel:
    kind: str
    Bi: float
    r: float = 2.0

    def __post_init__(self):
        kind = str(self.kind).lower().replace("-", "_")
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValueError(f"unknown constitutive model {self.kind!r}; expected one of {KINDS}")
        if not (self.Bi >= 0 and math.isfinite(self.Bi)):
            raise ValueError(f"Bingham number must be finite and >= 0, got {self.Bi}")
        if kind == HERSCHEL_BULKLEY:
            if not 1.0 < self.r < 2.0:
                raise ValueError(f"Herschel-Bulkley exponent must satisfy 1 < r < 2, got {self.r}")
        else:
            object.__setattr__(self, "r", 2.0)

    @property
    def r_star(self) -> float:
        return self.r / (self.r - 1.0)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "Bi": self.Bi}
        if self.kind == HERSCHEL_BULKLEY:
            d["r"] = self.r
        return d


def _direction(t: np.ndarray, norm: np.ndarray) -> np.ndarray:
    # t/|t| with the convention 0/0 = 0
    safe = np.where(norm > 0, norm, 1.0)
    return np.where((norm > 0)[..., None], t / safe[..., None], 0.0)


def potential_density(model: ConstitutiveModel, s: np.ndarray) -> np.ndarray:
    """Pointwise integrand of F as a function of the stress magnitude."""
    Bi = model.Bi
    if model.kind == BINGHAM:
        return 0.25 * np.maximum(s - Bi, 0.0) ** 2
    if model.kind == CASSON:
        rs, rb = np.sqrt(s), math.sqrt(Bi)
        return 0.25 * np.maximum(rs - rb, 0.0) ** 3 * (rs + rb / 3.0)
    return np.maximum(s - Bi, 0.0) ** model.r_star / (2.0 * model.r_star)


def strain_magnitude(model: ConstitutiveModel, s: np.ndarray) -> np.ndarray:
    """|grad F| as a function of the stress magnitude."""
    Bi = model.Bi
    if model.kind == BINGHAM:
        return 0.5 * np.maximum(s - Bi, 0.0)
    if model.kind == CASSON:
        return 0.5 * np.maximum(np.sqrt(s) - math.sqrt(Bi), 0.0) ** 2
    return 0.5 * np.maximum(s - Bi, 0.0) ** (model.r_star - 1.0)


def dual_potential(model: ConstitutiveModel, tau: np.ndarray, areas: np.ndarray) -> float:
    """F(tau) = sum over elements of area * phi(|tau|)."""
    return float(np.dot(areas, potential_density(model, frobenius(tau))))


def dual_gradient(model: ConstitutiveModel, tau: np.ndarray) -> np.ndarray:
    """Strain rate recovered from the stress: the gradient of F."""
    tau = np.asarray(tau, dtype=float)
    s = frobenius(tau)
    return strain_magnitude(model, s)[..., None] * _direction(tau, s)


def stress_from_strain(model: ConstitutiveModel, gamma: np.ndarray) -> np.ndarray:
    """Forward constitutive law for nonzero strain rates."""
    gamma = np.asarray(gamma, dtype=float)
    m = frobenius(gamma)
    Bi = model.Bi
    if model.kind == BINGHAM:
        mag = 2.0 * m + Bi
    elif model.kind == CASSON:
        mag = (np.sqrt(2.0 * m) + math.sqrt(Bi)) ** 2
    else:
        mag = 2.0 ** (model.r - 1.0) * m ** (model.r - 1.0) + Bi
    return mag[..., None] * _direction(gamma, m)


def prox_alg2(model: ConstitutiveModel, tau: np.ndarray, Du: np.ndarray, rho: float,
              max_iter: int = 100) -> np.ndarray:
    """Elementwise minimiser over g of

        b(g) + Bi|g| - tau:g + rho/2 |Du - g|^2.

    The minimiser is parallel to w = tau + rho Du; its magnitude m solves a
    scalar monotone equation.
    """
    if rho < 0:
        raise ValueError("penalty parameter must be >= 0")
    tau = np.asarray(tau, dtype=float)
    w = tau + rho * np.asarray(Du, dtype=float)
    s = frobenius(w)
    excess = np.maximum(s - model.Bi, 0.0)
    if model.kind == BINGHAM:
        m = excess / (2.0 + rho)
    elif model.kind == CASSON:
        # (2 + rho) x^2 + 2 sqrt(2 Bi) x - excess = 0 with x = sqrt(m)
        a, c = 2.0 + rho, 2.0 * math.sqrt(2.0 * model.Bi)
        denom = c + np.sqrt(c * c + 4.0 * a * excess)
        x = 2.0 * excess / np.where(denom > 0, denom, 1.0)
        m = x * x
    else:
        m = _hb_magnitude(model.r, rho, excess, max_iter)
    return m[..., None] * _direction(w, s)


def _hb_magnitude(r: float, rho: float, excess: np.ndarray, max_iter: int) -> np.ndarray:
    """Solve 2^{r-1} m^{r-1} + rho m = excess for m >= 0, elementwise."""
    c = 2.0 ** (r - 1.0)
    exact = (excess / c) ** (1.0 / (r - 1.0))  # rho = 0 solution, an upper bound
    if rho == 0:
        return exact
    lo = np.zeros_like(excess)
    hi = np.minimum(exact, excess / rho)
    m = hi.copy()
    active = excess > 0
    for _ in range(max_iter):
        if not active.any():
            return m
        ma = m[active]
        g = c * ma ** (r - 1.0) + rho * ma - excess[active]
        dg = c * (r - 1.0) * ma ** (r - 2.0) + rho
        pos = g > 0
        hi_a, lo_a = hi[active], lo[active]
        hi_a = np.where(pos, ma, hi_a)
        lo_a = np.where(pos, lo_a, ma)
        step = ma - g / dg
        bad = ~((step > lo_a) & (step < hi_a)) | ~np.isfinite(step)
        new = np.where(bad, 0.5 * (lo_a + hi_a), step)
        done = np.abs(new - ma) <= 1e-15 * np.maximum(1.0, ma)
        hi[active], lo[active], m[active] = hi_a, lo_a, new
        idx = np.nonzero(active)[0]
        active[idx[done]] = False
    raise ProxError(f"scalar Herschel-Bulkley prox did not converge in {max_iter} iterations")


def viscous_density(model: ConstitutiveModel, m: np.ndarray) -> np.ndarray:
    """Integrand of b as a function of the strain-rate magnitude."""
    if model.kind == BINGHAM:
        return m * m
    if model.kind == CASSON:
        return m * m + 4.0 * math.sqrt(2.0 * model.Bi) / 3.0 * m ** 1.5
    return 2.0 ** (model.r - 1.0) / model.r * m ** model.r


def primal_energy(model: ConstitutiveModel, u: np.ndarray, gamma: np.ndarray,
                  load: np.ndarray, areas: np.ndarray) -> float:
    """b(gamma) + j(gamma) - <f, u>."""
    m = frobenius(gamma)
    return float(np.dot(areas, viscous_density(model, m) + model.Bi * m)
                 - np.dot(load, np.asarray(u).reshape(-1)))


def lipschitz(model: ConstitutiveModel) -> float | None:
    """Global Lipschitz constant of grad F, or None if it has to be estimated."""
    if model.kind in (BINGHAM, CASSON):
        return 0.5
    return None
