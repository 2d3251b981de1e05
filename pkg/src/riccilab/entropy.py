"""Entropy functionals on the symmetric ansatze.

The scale-tau entropy of a metric g and potential f is

    W(g, f, tau) = int [tau(|grad f|^2 + R) + f - n] (4 pi tau)^{-n/2} e^{-f} dg,

minimized over potentials with unit weighted mass to produce mu(g, tau), and
over a scale grid to produce nu.  All quadrature happens in the substitution
w = (4 pi tau)^{-n/4} e^{-f/2}, in which the constraint is the unit L^2(dg)
sphere and the energy is a convex-plus-entropy form

    W = 4 tau int |grad w|^2 + int (tau R - 2 ln w) w^2 dg - (n/2) ln(4 pi tau) - n.

The discrete energy is assembled once (flux-form stiffness on cell edges,
trapezoid masses on nodes) and the minimizer runs projected gradient descent
with Barzilai-Borwein trial steps and backtracking, started from the
constant profile.  On homogeneous inputs the constant is exact and the
closed form is used directly; such values are flagged ``restricted``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MinimizerFailureError, NumericError, ValidationError
from .geom import (
    HomogeneousMetric,
    Metric,
    WarpedMetric,
    curvature,
    curvature_hom,
    ddx,
    volume_measure,
)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PotentialProfile:
    """Potential f with its Gaussian-weight substitution w at scale tau."""

    f: np.ndarray
    w: np.ndarray
    tau: float
    iterations: int = 0
    residual: float = 0.0
    restricted: bool = False   # True when the value is the constant-potential closed form
    converged: bool = True

    @staticmethod
    def from_f(g: Metric, f_values: np.ndarray, tau: float) -> "PotentialProfile":
        f_values = np.asarray(f_values, dtype=float)
        w = (4.0 * math.pi * tau) ** (-g.n / 4.0) * np.exp(-f_values / 2.0)
        return PotentialProfile(f=f_values, w=w, tau=tau)

    @staticmethod
    def from_density(g: Metric, v: np.ndarray, tau: float) -> "PotentialProfile":
        """Profile whose weighted density (4 pi tau)^{-n/2} e^{-f} equals v."""
        v = np.asarray(v, dtype=float)
        if np.any(v <= 0):
            raise ValidationError("density must be positive to define a potential")
        f_values = -np.log(v) - (g.n / 2.0) * math.log(4.0 * math.pi * tau)
        return PotentialProfile(f=f_values, w=np.sqrt(v), tau=tau)

    @staticmethod
    def constant(g: Metric, tau: float) -> "PotentialProfile":
        total, _ = volume_measure(g)
        f_c = math.log(total) - (g.n / 2.0) * math.log(4.0 * math.pi * tau)
        if isinstance(g, HomogeneousMetric):
            f_values = np.array([f_c])
        else:
            f_values = np.full(g.u.shape, f_c)
        return PotentialProfile.from_f(g, f_values, tau)


@dataclass(frozen=True)
class EntropyReport:
    """Scalar entropy statistics of one metric (and optionally one kernel slice)."""

    W: float
    mu: float
    nu: float
    nash: float | None
    tau_grid: list[float]
    minimizer: PotentialProfile
    iterations: int
    residual: float

    def to_dict(self) -> dict:
        return {
            "format": 1,
            "W": self.W,
            "mu": self.mu,
            "nu": self.nu,
            "nash": self.nash,
            "tau_grid": list(self.tau_grid),
            "iterations": self.iterations,
            "residual": self.residual,
        }


@dataclass(frozen=True)
class GradientProfile:
    """Eigencomponents of the entropy gradient tensor -2(Ric + Hess f - g/2)."""

    rad: np.ndarray
    sph: np.ndarray
    l2_norm: float


@dataclass(frozen=True)
class ResidualReport:
    sup: float
    l2: float


# ---------------------------------------------------------------------------
# discrete energy assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Assembly:
    n: int
    vol: np.ndarray          # nodal masses (trapezoid cells)
    edge: np.ndarray         # flux coefficients omega phi_e^{n-1} / (u_e dx)
    R: np.ndarray
    total: float


def _assemble(g: WarpedMetric) -> _Assembly:
    total, vol = volume_measure(g)
    from .geom import unit_sphere_area

    phi_e = 0.5 * (g.phi[1:] + g.phi[:-1])
    u_e = 0.5 * (g.u[1:] + g.u[:-1])
    edge = unit_sphere_area(g.n - 1) * phi_e ** (g.n - 1) / (u_e * g.dx)
    R = curvature(g).R
    return _Assembly(n=g.n, vol=vol, edge=edge, R=R, total=total)


def _energy(a: _Assembly, w: np.ndarray, tau: float) -> float:
    dw = np.diff(w)
    stiff = 4.0 * tau * np.dot(a.edge, dw * dw)
    mass = np.dot((tau * a.R - 2.0 * np.log(w)) * w, w * a.vol)
    return stiff + mass


def _energy_grad(a: _Assembly, w: np.ndarray, tau: float) -> np.ndarray:
    dw = np.diff(w)
    flux = a.edge * dw
    grad = np.zeros_like(w)
    grad[:-1] -= 8.0 * tau * flux
    grad[1:] += 8.0 * tau * flux
    grad += (2.0 * tau * a.R - 4.0 * np.log(w) - 2.0) * w * a.vol
    return grad


def _w_value(a: _Assembly, w: np.ndarray, tau: float, n: int) -> float:
    return _energy(a, w, tau) - (n / 2.0) * math.log(4.0 * math.pi * tau) - n


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def mu_constant(g: Metric, tau: float) -> float:
    """Entropy of the constraint-normalized constant potential (closed form)."""
    total, vol = volume_measure(g)
    if isinstance(g, HomogeneousMetric):
        R_avg = curvature_hom(g).R
    else:
        R_avg = float(np.dot(curvature(g).R, vol) / total)
    f_c = math.log(total) - (g.n / 2.0) * math.log(4.0 * math.pi * tau)
    return tau * R_avg + f_c - g.n


def w_functional(g: Metric, potential: PotentialProfile, tau: float,
                 constraint_tol: float = 1e-6) -> float:
    """Evaluate W(g, f, tau) by the module quadrature.

    The potential must satisfy the unit-mass constraint within
    ``constraint_tol``; violating inputs are rejected rather than silently
    renormalized.
    """
    if abs(potential.tau - tau) > 1e-12 * max(1.0, tau):
        raise ValidationError("potential was built at a different scale tau")
    if isinstance(g, HomogeneousMetric):
        # only constant potentials are representable on the homogeneous path
        total, _ = volume_measure(g)
        mass = float((4.0 * math.pi * tau) ** (-g.n / 2.0)
                     * np.exp(-potential.f[0]) * total)
        if abs(mass - 1.0) > constraint_tol:
            raise ValidationError(f"potential mass {mass} violates the unit constraint")
        return tau * curvature_hom(g).R + float(potential.f[0]) - g.n
    a = _assemble(g)
    w = potential.w
    if w.shape != g.u.shape:
        raise ValidationError("potential grid does not match the metric grid")
    mass = float(np.dot(w * w, a.vol))
    if abs(mass - 1.0) > constraint_tol:
        raise ValidationError(f"potential mass {mass} violates the unit constraint")
    if np.any(w <= 0):
        raise ValidationError("w must be positive")
    return _w_value(a, w, tau, g.n)


def mu_minimize(g: Metric, tau: float, *, grad_tol: float = 1e-8,
                max_iter: int = 100_000, soft_fail: bool = False
                ) -> tuple[PotentialProfile, float]:
    """Minimize W(g, . , tau) over unit-mass potentials.

    Projected gradient descent in w on the unit L^2(dg) sphere, deterministic
    from the constant initialization.  Homogeneous inputs use the constant
    closed form directly (flagged ``restricted``).  Non-convergence raises
    MinimizerFailureError unless ``soft_fail``; flows treat that as the state
    leaving the regular neighborhood.
    """
    if tau <= 0:
        raise ValidationError("tau must be positive")
    if isinstance(g, HomogeneousMetric):
        pot = PotentialProfile.constant(g, tau)
        pot = PotentialProfile(f=pot.f, w=pot.w, tau=tau, iterations=0,
                               residual=0.0, restricted=True)
        return pot, mu_constant(g, tau)

    a = _assemble(g)
    vol = a.vol

    def normalize(w):
        return w / math.sqrt(np.dot(w * w, vol))

    def projected(w, grad):
        normal = vol * w
        return grad - (np.dot(grad, normal) / np.dot(normal, normal)) * normal

    lipschitz = (8.0 * tau * float(np.max(a.edge))
                 + float(np.max(np.abs(2.0 * tau * a.R + 10.0) * vol)) + 1e-30)
    w = normalize(np.ones_like(g.u))
    E = _energy(a, w, tau)
    gtan = projected(w, _energy_grad(a, w, tau))
    res = float(np.linalg.norm(gtan))
    eta = 1.0 / lipschitz
    recent = [E]            # nonmonotone (GLL) reference window
    prev_w = prev_gtan = None
    it = 0
    stalled = False
    while res > grad_tol and it < max_iter:
        if prev_w is not None:
            s = w - prev_w
            y = gtan - prev_gtan
            sy = float(np.dot(s, y))
            eta = float(np.dot(s, s)) / sy if sy > 1e-300 else 1.0 / lipschitz
        step = min(max(eta, 1e-30), 1e30)
        E_ref = max(recent)
        accepted = False
        for _ in range(80):
            cand = w - step * gtan
            if np.all(cand > 0):
                cand = normalize(cand)
                E_cand = _energy(a, cand, tau)
                if E_cand <= E_ref - 1e-4 * step * res * res:
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            stalled = True
            break
        prev_w, prev_gtan = w, gtan
        w, E = cand, E_cand
        recent.append(E)
        if len(recent) > 10:
            recent.pop(0)
        gtan = projected(w, _energy_grad(a, w, tau))
        res = float(np.linalg.norm(gtan))
        it += 1

    # a line search exhausted at the rounding floor of the energy is treated
    # as converged only when the residual is already at quadrature-noise level
    floor = 1e-10 * lipschitz * math.sqrt(float(np.mean(vol ** 2)))
    converged = res <= grad_tol or (stalled and res <= max(grad_tol, floor))
    if not converged and not soft_fail:
        raise MinimizerFailureError(
            f"mu minimizer stopped at residual {res:.3e} after {it} iterations")
    value = _w_value(a, w, tau, g.n)
    f_values = -2.0 * np.log(w) - (g.n / 2.0) * math.log(4.0 * math.pi * tau)
    pot = PotentialProfile(f=f_values, w=w, tau=tau, iterations=it,
                           residual=res, restricted=False, converged=converged)
    return pot, float(value)


def nu_tau_grid(tau_hat: float = 1.0, span: float = 100.0, num: int = 33) -> np.ndarray:
    """Default geometric scale grid [tau_hat/span, tau_hat*span]."""
    return tau_hat * np.logspace(-math.log10(span), math.log10(span), num)


@dataclass(frozen=True)
class NuReport:
    value: float
    argmin_tau: float
    taus: np.ndarray
    mus: np.ndarray
    failed: list[int]


def nu_functional(g: Metric, tau_grid: np.ndarray | None = None, *,
                  tau_hat: float = 1.0, max_failure_fraction: float = 0.2,
                  grad_tol: float = 1e-8) -> NuReport:
    """Infimum of mu over a scale grid, with the argmin scale reported.

    Per-scale minimizer failures are tolerated up to a configured fraction of
    the grid; the failing scales are listed in the report.
    """
    taus = np.asarray(tau_grid if tau_grid is not None else nu_tau_grid(tau_hat))
    if np.any(taus <= 0) or not np.all(np.isfinite(taus)):
        raise ValidationError("tau grid must be positive and finite")
    mus = np.full(taus.shape, np.nan)
    failed: list[int] = []
    for i, tau in enumerate(taus):
        try:
            _, mus[i] = mu_minimize(g, float(tau), grad_tol=grad_tol)
        except MinimizerFailureError:
            failed.append(i)
    if len(failed) > max_failure_fraction * taus.size:
        raise MinimizerFailureError(
            f"{len(failed)}/{taus.size} scales failed to minimize")
    ok = np.isfinite(mus)
    idx = int(np.flatnonzero(ok)[np.argmin(mus[ok])])
    return NuReport(value=float(mus[idx]), argmin_tau=float(taus[idx]),
                    taus=taus, mus=mus, failed=failed)


def _radial_hessian(g: WarpedMetric, f_values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigencomponents (f_ss, (phi_s/phi) f_s) of the Hessian of a radial f."""
    from .geom import _pole_extrapolate, d2dx

    h = g.dx
    u_x = ddx(g.u, h, "even")
    f_x = ddx(f_values, h, "even")
    f_xx = d2dx(f_values, h, "even")
    f_s = f_x / g.u
    f_ss = (f_xx * g.u - f_x * u_x) / g.u ** 3
    phi_x = ddx(g.phi, h, "odd")
    phi_s = phi_x / g.u
    sph = np.zeros_like(f_values)
    sph[1:-1] = phi_s[1:-1] / g.phi[1:-1] * f_s[1:-1]
    sph = _pole_extrapolate(sph, g.arclength())
    return f_ss, sph


def mu_gradient(g: WarpedMetric, *, potential: PotentialProfile | None = None,
                grad_tol: float = 1e-8) -> GradientProfile:
    """L^2 gradient of mu(., 1): the tensor -2(Ric + Hess f_g - g/2).

    Returns the radial/spherical eigenvalue profiles and the L^2(dg) norm.
    The minimizer is recomputed at tau = 1 unless supplied.
    """
    if potential is None:
        potential, _ = mu_minimize(g, 1.0, grad_tol=grad_tol)
    curv = curvature(g)
    f_ss, hess_sph = _radial_hessian(g, potential.f)
    rad = -2.0 * (curv.ric_rad + f_ss - 0.5)
    sph = -2.0 * (curv.ric_sph + hess_sph - 0.5)
    _, vol = volume_measure(g)
    l2 = math.sqrt(float(np.dot(rad * rad + (g.n - 1) * sph * sph, vol)))
    return GradientProfile(rad=rad, sph=sph, l2_norm=l2)


def shrinker_residual(g: Metric, potential: PotentialProfile | None,
                      tau: float) -> ResidualReport:
    """Sup and L^2(dg) norms of Ric + Hess f - g/(2 tau).

    A vanishing residual is the defining identity of a shrinker normalized at
    scale tau.  ``potential=None`` means the constant potential.
    """
    if isinstance(g, HomogeneousMetric):
        ric = curvature_hom(g).ric_factors
        dev = ric - 1.0 / (2.0 * tau)
        dims = np.array([f.dim for f in g.factors], dtype=float)
        total = g.volume()
        sup = float(np.max(np.abs(dev)))
        l2 = math.sqrt(float(np.dot(dims, dev * dev)) * total)
        return ResidualReport(sup=sup, l2=l2)
    if potential is None:
        potential = PotentialProfile.constant(g, tau)
    curv = curvature(g)
    f_ss, hess_sph = _radial_hessian(g, potential.f)
    t_rad = curv.ric_rad + f_ss - 1.0 / (2.0 * tau)
    t_sph = curv.ric_sph + hess_sph - 1.0 / (2.0 * tau)
    _, vol = volume_measure(g)
    sup = float(max(np.max(np.abs(t_rad)), np.max(np.abs(t_sph))))
    l2 = math.sqrt(float(np.dot(t_rad * t_rad + (g.n - 1) * t_sph * t_sph, vol)))
    return ResidualReport(sup=sup, l2=l2)


def nash_entropy(g: Metric, density: np.ndarray, tau: float) -> float:
    """Nash entropy int f dnu - n/2 of a unit-mass conjugate density on g."""
    _, vol = volume_measure(g)
    v = np.asarray(density, dtype=float)
    mass = float(np.dot(v, vol))
    if abs(mass - 1.0) > 1e-6:
        raise ValidationError(f"density mass {mass} is not 1")
    pos = v > 0
    f_values = np.zeros_like(v)
    f_values[pos] = -np.log(v[pos]) - (g.n / 2.0) * math.log(4.0 * math.pi * tau)
    if not np.all(np.isfinite(f_values)):
        raise NumericError("nash entropy hit a non-finite potential")
    return float(np.dot(f_values * v, vol)) - g.n / 2.0


def w_of_density(g: Metric, density: np.ndarray, tau: float) -> float:
    """W(g, f, tau) for the potential defined by a positive unit-mass density."""
    pot = PotentialProfile.from_density(g, np.asarray(density, dtype=float), tau)
    return w_functional(g, pot, tau)


def dissipation(g: WarpedMetric, density: np.ndarray, tau: float) -> float:
    """Monotonicity dissipation -2 tau int |Ric + Hess f - g/(2 tau)|^2 dnu."""
    pot = PotentialProfile.from_density(g, np.asarray(density, dtype=float), tau)
    curv = curvature(g)
    f_ss, hess_sph = _radial_hessian(g, pot.f)
    t_rad = curv.ric_rad + f_ss - 1.0 / (2.0 * tau)
    t_sph = curv.ric_sph + hess_sph - 1.0 / (2.0 * tau)
    _, vol = volume_measure(g)
    integrand = t_rad ** 2 + (g.n - 1) * t_sph ** 2
    return -2.0 * tau * float(np.dot(integrand * density, vol))


def entropy_report(g: Metric, tau: float = 1.0, *, density: np.ndarray | None = None,
                   tau_grid: np.ndarray | None = None) -> EntropyReport:
    """Assemble the standard entropy statistics of one metric."""
    pot, mu = mu_minimize(g, tau)
    nu = nu_functional(g, tau_grid, tau_hat=tau)
    if density is not None:
        W = w_of_density(g, density, tau)
        nash = nash_entropy(g, density, tau)
    else:
        W = w_functional(g, pot, tau)
        nash = None
    return EntropyReport(W=W, mu=mu, nu=nu.value, nash=nash,
                         tau_grid=[float(t) for t in nu.taus],
                         minimizer=pot, iterations=pot.iterations,
                         residual=pot.residual)
