"""Theorem-level diagnostics: blow-up scaling products, shrinker/Ricci-flat
classification, rate fits, noncollapsing margins, and the positive-scalar
Sobolev entropy floor.

Every check reports measured statistics; no theorem constant is hardcoded.
Rate exponents come out of least-squares fits, and the inequality form of
the gradient bound is certified by taking the worst constant over the data
window rather than assumed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ValidationError
from .flow import FlowTrajectory, RescalingSequence
from .geom import (
    Factor,
    HomogeneousMetric,
    Metric,
    WarpedMetric,
    curvature,
    curvature_hom,
    metric_distance,
    unit_sphere_area,
    volume_measure,
)


# ---------------------------------------------------------------------------
# rate fits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LojasiewiczFit:
    """Power-law fit of a decay series or a gradient-gap inequality."""

    alpha: float
    C: float
    beta: float
    residual: float
    window: tuple[float, float]
    n_points: int
    floor_flagged: bool = False
    certified_C: float | None = None

    @property
    def alpha_in_range(self) -> bool:
        return 0.5 <= self.alpha < 1.0


def _loglog_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = float(np.sqrt(np.mean((ly - (slope * lx + intercept)) ** 2)))
    return float(slope), float(math.exp(intercept)), resid


def lojasiewicz_fit(values: np.ndarray, axis: np.ndarray, *,
                    kind: str = "decay", floor: float = 0.0) -> LojasiewiczFit:
    """Least-squares power-law fit on log-log data.

    kind "decay": values ~ C axis^{-beta} (a mu-gap or norm series against a
    time axis); the implied gradient exponent is alpha = (1 + 1/beta)/2.

    kind "gradient": values are gradient norms against gap values in
    ``axis``; the fitted slope is alpha, beta = 1/(2 alpha - 1) is implied,
    and certified_C is the largest constant for which the lower bound
    values >= C axis^alpha holds on the whole window.

    Entries at or below ``floor`` truncate the window and set the floor
    flag.  At least 8 surviving points are required.
    """
    values = np.asarray(values, dtype=float)
    axis = np.asarray(axis, dtype=float)
    keep = (values > floor) & (axis > 0) & np.isfinite(values) & np.isfinite(axis)
    flagged = bool(np.any(~keep))
    values, axis = values[keep], axis[keep]
    if values.size < 8:
        raise ValidationError("rate fits need at least 8 usable points")
    if kind == "decay":
        slope, C, resid = _loglog_fit(axis, values)
        beta = -slope
        alpha = 0.5 * (1.0 + 1.0 / beta) if beta > 0 else math.inf
        cert = None
    elif kind == "gradient":
        alpha, C, resid = _loglog_fit(axis, values)
        beta = 1.0 / (2.0 * alpha - 1.0) if alpha > 0.5 else math.inf
        alpha_eff = max(alpha, 0.5)
        cert = float(np.min(values / axis ** alpha_eff))
    else:
        raise ValidationError(f"unknown fit kind {kind!r}")
    return LojasiewiczFit(alpha=float(alpha), C=float(C), beta=float(beta),
                          residual=resid,
                          window=(float(np.min(axis)), float(np.max(axis))),
                          n_points=int(values.size), floor_flagged=flagged,
                          certified_C=cert)


# ---------------------------------------------------------------------------
# Type I products
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TypeOneReport:
    sequence: RescalingSequence
    products_min: float
    products_max: float
    lower_bound_ok: bool          # |t| max|Rm| >= 1/8 at all samples (singular flows)
    inv_rm_margin: float          # Eq-style bound margin for (max|Rm|)^{-1}


def type_one_report(traj: FlowTrajectory, Q: np.ndarray | None = None,
                    *, tol: float = 1e-3) -> TypeOneReport:
    """Blow-up products |t| Q with the maximum-principle sanity bound.

    Q defaults to max|Rm| at the stored times; times are measured from the
    singular time when the run detected one.
    """
    max_rm = traj.monitors["max_rm"]
    t_ref = traj.singular_time_estimate
    times = traj.times - (t_ref if t_ref is not None else 0.0)
    if t_ref is None and np.any(times >= 0):
        # ancient-style input expected at negative times already
        pass
    keep = np.abs(times) > 1e-12
    times = times[keep]
    Q_used = (max_rm[keep] if Q is None else np.asarray(Q, dtype=float)[keep])
    seq = RescalingSequence(t_i=times, Q_i=Q_used)
    products = seq.products
    singular = t_ref is not None
    lower_ok = bool(np.all(products >= 1.0 / 8.0 - tol)) if singular else True
    inv = 1.0 / max_rm[keep]
    c0_inv = 0.0 if singular else float(inv[-1])
    margin = float(np.min(c0_inv + 8.0 * np.abs(times) - inv))
    return TypeOneReport(sequence=seq, products_min=float(np.min(products)),
                         products_max=float(np.max(products)),
                         lower_bound_ok=lower_ok, inv_rm_margin=margin)


# ---------------------------------------------------------------------------
# ball volumes (pole-centered / homogeneous lower bounds)
# ---------------------------------------------------------------------------

def _sphere_cap_volume(p: int, a: float, radius: float) -> float:
    theta = min(radius / a, math.pi)
    grid = np.linspace(0.0, theta, 513)
    return unit_sphere_area(p - 1) * a ** p * float(np.trapz(np.sin(grid) ** (p - 1), grid))


def ball_volume_lower(g: Metric, radius: float, center_offset: float = 0.0) -> float:
    """Lower bound for the volume of a metric ball of the given radius.

    Warped metrics: the exact pole ball, shrunk by the center's distance to
    the pole.  Homogeneous products: the product of per-factor balls of
    radius r/sqrt(#factors) (a subset of the true ball).
    """
    r = radius - center_offset
    if r <= 0:
        return 0.0
    if isinstance(g, HomogeneousMetric):
        k = len(g.factors)
        out = 1.0
        for f in g.factors:
            rf = r / math.sqrt(k)
            if f.kind == "round-sphere":
                out *= _sphere_cap_volume(f.dim, f.scale, rf)
            else:
                out *= min(2.0 * rf / math.sqrt(f.dim), f.scale) ** f.dim
        return out
    s = g.arclength()
    _, w = volume_measure(g)
    return float(np.sum(w[s <= r]))


# ---------------------------------------------------------------------------
# dichotomy classification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DichotomyVerdict:
    kind: str                     # "Shrinker" | "RicciFlat" | "Undetermined"
    qt_products: np.ndarray
    residual: float
    ric_limit: float
    nash_floor: float | None
    nash_floor_stable: bool | None
    strong_noncollapse_margin: float | None
    diam_over_sqrt_t: float | None
    vol_over_t_half_n: float | None
    converged: bool
    exclusivity_ok: bool


def _rescaled_state(g: Metric, Q: float) -> Metric:
    return g.scaled(math.sqrt(Q))


def _uniform_nash(g: HomogeneousMetric, tau: float) -> float:
    """Nash entropy of the uniform conjugate heat flow on a homogeneous slice."""
    return math.log(g.volume()) - (g.n / 2.0) * math.log(4.0 * math.pi * tau) - g.n / 2.0


def classify_dichotomy(traj: FlowTrajectory, sequence: RescalingSequence, *,
                       residual_tol: float | None = None, ric_tol: float = 1e-3,
                       convergence_tol: float = 1e-6,
                       nash_taus: np.ndarray | None = None) -> DichotomyVerdict:
    """Shrinker / Ricci-flat verdict for a rescaled backward sequence.

    Bounded products with a vanishing shrinker residual select the shrinker
    branch; diverging products with a flat limit the Ricci-flat branch.  The
    shrinker branch additionally reports the Nash-entropy floor (with a 4x
    range-extension stability check) and the diameter/volume scaling
    constants; both branches report the strong-noncollapsing margin of the
    limit.  The two branch criteria are asserted mutually exclusive.
    """
    from .entropy import mu_minimize, shrinker_residual

    states = [traj.state_at(float(t)) for t in sequence.t_i]
    rescaled = [_rescaled_state(g, float(Q)) for g, Q in zip(states, sequence.Q_i)]
    hom = isinstance(rescaled[0], HomogeneousMetric)
    if residual_tol is None:
        residual_tol = 1e-9 if hom else 1e-3
    dists = [metric_distance(a, b, 2).value for a, b in zip(rescaled[:-1], rescaled[1:])]
    scale = max(1.0, float(np.max(np.abs(rescaled[-1].factors[0].scale
                                         if hom else rescaled[-1].u))))
    converged = len(dists) >= 1 and dists[-1] <= convergence_tol * scale
    if not converged:
        raise NumericError(
            f"rescaled sequence did not converge: last step distance {dists[-1]:.3e}")
    limit = rescaled[-1]
    products = sequence.products
    # the trend is read toward the blow-up limit, i.e. along increasing |t|
    toward_limit = products[np.argsort(np.abs(sequence.t_i))]
    ratio = float(np.max(products) / max(np.min(products), 1e-300))
    increasing = bool(np.all(np.diff(toward_limit) >= -1e-12))
    unbounded = increasing and ratio > 10.0
    bounded = ratio <= 10.0

    if hom:
        residual = shrinker_residual(limit, None, 1.0).sup
        ric_limit = float(np.max(np.abs(curvature_hom(limit).ric_factors)))
    else:
        pot, _ = mu_minimize(limit, 1.0)
        residual = shrinker_residual(limit, pot, 1.0).sup
        curv = curvature(limit)
        ric_limit = float(max(np.max(np.abs(curv.ric_rad)), np.max(np.abs(curv.ric_sph))))

    shrinker_crit = bounded and residual <= residual_tol
    flat_crit = unbounded and ric_limit <= ric_tol
    exclusivity_ok = not (shrinker_crit and flat_crit)
    if not exclusivity_ok:
        raise NumericError("dichotomy branches were satisfied simultaneously")

    nash_floor = nash_stable = None
    diam_c = vol_c = None
    margin = _strong_noncollapse_margin(limit)
    if shrinker_crit:
        if hom:
            # Nash entropy of the uniform conjugate heat flow along the run,
            # based at the singular time; the floor must be stable under a
            # 4x extension of the scale range
            t0 = traj.singular_time_estimate if traj.singular_time_estimate \
                is not None else 0.0
            tau_lo = max(t0 - float(traj.times[-1]), 1e-12)
            tau_hi = t0 - float(traj.times[0])
            if nash_taus is None:
                nash_taus = np.geomspace(tau_lo * 4.0, tau_hi / 4.0, 9)

            def nash_at(tau: float) -> float:
                return _uniform_nash(traj.state_at(t0 - tau), tau)

            vals = [nash_at(float(tau)) for tau in nash_taus]
            vals_ext = [nash_at(float(tau)) for tau in
                        np.geomspace(max(nash_taus[0] / 4.0, tau_lo),
                                     min(nash_taus[-1] * 4.0, tau_hi), 17)]
            nash_floor = float(np.min(vals))
            nash_stable = bool(np.min(vals_ext)
                               > nash_floor - 0.25 * abs(nash_floor) - 1e-9)
        diam = traj.monitor("diameter") if "diameter" in traj.monitors else None
        if diam is not None:
            t_abs = np.abs(traj.times - (traj.singular_time_estimate or 0.0))
            ok = t_abs > 1e-12
            diam_c = float(np.max(diam[ok] / np.sqrt(t_abs[ok])))
            vol = traj.monitor("volume")
            vol_c = float(np.min(vol[ok] / t_abs[ok] ** (traj.n / 2.0)))
        kind = "Shrinker"
    elif flat_crit:
        kind = "RicciFlat"
    else:
        kind = "Undetermined"
    return DichotomyVerdict(kind=kind, qt_products=products, residual=residual,
                            ric_limit=ric_limit, nash_floor=nash_floor,
                            nash_floor_stable=nash_stable,
                            strong_noncollapse_margin=margin,
                            diam_over_sqrt_t=diam_c, vol_over_t_half_n=vol_c,
                            converged=converged, exclusivity_ok=exclusivity_ok)


def _strong_noncollapse_margin(g: Metric, radii: np.ndarray | None = None) -> float:
    """min over admissible radii of Vol(B(r))/r^n where sup R <= r^{-2}."""
    R_sup = curvature_hom(g).R if isinstance(g, HomogeneousMetric) \
        else float(np.max(curvature(g).R))
    if isinstance(g, HomogeneousMetric):
        size = g.diameter()
    else:
        size = g.total_length()
    r_max = 1.0 / math.sqrt(R_sup) if R_sup > 0 else 4.0 * size
    if radii is None:
        radii = np.geomspace(max(r_max / 64.0, 1e-8), r_max, 9)
    margins = [ball_volume_lower(g, float(r)) / float(r) ** g.n for r in radii]
    return float(np.min(margins))


# ---------------------------------------------------------------------------
# noncollapsing inequality probes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoncollapseProbe:
    t: float
    r_sq: float
    center: int
    center_offset: float
    vol_ball: float
    nash: float
    c_factor: float
    rhs: float
    margin: float


def noncollapse_check(traj: FlowTrajectory, kernels: dict, probes: list[tuple[float, float]],
                      *, tol: float = 1e-6) -> list[NoncollapseProbe]:
    """Volume lower bound at kernel centers, in the conservative c(n)=1 form.

    Each probe (t, r^2) uses the kernel based at (pole, t): the center is the
    concentration center of its slice at t - r^2, the ball radius is
    sqrt(2 H_n) r, and the bound is exp(-2 sqrt(n - 2 R_min r^2)) exp(N(r^2)) r^n.
    Ball volumes are exact pole balls shrunk by the center's pole offset, so
    margins are conservative.
    """
    from .entropy import nash_entropy
    from .heat import hn_center, quotient_dist

    out = []
    n = traj.n
    H_n = (n - 1) * math.pi ** 2 / 2.0 + 4.0
    for t, r_sq in probes:
        kern = kernels[t]
        t_base = t - r_sq
        idx = kern.index_of(t_base)
        v = kern.densities[idx]
        g_slice = traj.state_at(t_base)
        _, w = volume_measure(g_slice)
        mu = v * w
        mu = mu / mu.sum()
        dist = quotient_dist(g_slice)
        conc = hn_center(mu, dist, t, t_base, n)
        s = g_slice.arclength()
        offset = float(min(s[conc.center], s[-1] - s[conc.center]))
        radius = math.sqrt(2.0 * H_n) * math.sqrt(r_sq)
        vol_ball = ball_volume_lower(g_slice, radius, center_offset=offset)
        R_min = float(np.min(curvature(g_slice).R))
        arg = n - 2.0 * R_min * r_sq
        c_factor = math.exp(-2.0 * math.sqrt(max(arg, 0.0)))
        nash = nash_entropy(g_slice, v, r_sq)
        rhs = c_factor * math.exp(nash) * r_sq ** (n / 2.0)
        out.append(NoncollapseProbe(t=float(t), r_sq=float(r_sq),
                                    center=conc.center, center_offset=offset,
                                    vol_ball=vol_ball, nash=nash,
                                    c_factor=c_factor, rhs=rhs,
                                    margin=vol_ball / rhs))
    return out


# ---------------------------------------------------------------------------
# Sobolev entropy floor
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SobolevFloorReport:
    A: float
    B: float
    A_enlarged: bool
    c0: float
    C: float
    taus: np.ndarray
    mus: np.ndarray
    passed: bool


def _sobolev_constants(g: WarpedMetric) -> tuple[float, float]:
    """(A, B) sampled from a dictionary of radial bump test functions.

    B is pinned by constant functions (B = V^{-2/n}); A is the largest value
    a dictionary member requires.  The constants are reported per geometry
    and never reused silently.
    """
    n = g.n
    q = 2.0 * n / (n - 2.0)
    total, w = volume_measure(g)
    s = g.arclength()
    L = s[-1]
    B = total ** (-2.0 / n)
    from .geom import ddx

    A_needed = 1e-6
    for width in (1.0, 0.5, 0.25, 0.125, 0.0625):
        for center in (0.0, 0.25, 0.5):
            u = np.exp(-((s / L - center) / width) ** 2)
            u_s = ddx(u, g.dx, "even") / g.u
            num = float(np.dot(np.abs(u) ** q, w)) ** (2.0 / q)
            den_b = B * float(np.dot(u * u, w))
            den_a = float(np.dot(u_s * u_s, w))
            if den_a > 1e-14 and num > den_b:
                A_needed = max(A_needed, (num - den_b) / den_a)
    return A_needed, B


def sobolev_floor_constant(n: int, A: float) -> float:
    """Floor constant C(n, A) of the positive-scalar-curvature entropy bound."""
    return n + (n / 2.0) * math.log(n * A * math.pi / (2.0 * math.e))


def sobolev_nu_bound(g: Metric, tau_grid: np.ndarray, *, A: float | None = None,
                     B: float | None = None) -> SobolevFloorReport:
    """Entropy floor from a Sobolev inequality plus positive scalar curvature.

    Requires min R = c0 > 0 (flat inputs are rejected).  A is enlarged to
    4B/c0 when needed, which only weakens the floor; the floor
    -C(n, A) is then checked against mu(g, tau) on the whole scale grid.
    """
    from .entropy import mu_minimize

    if isinstance(g, HomogeneousMetric):
        c0 = curvature_hom(g).R
        if c0 <= 0:
            raise ValidationError("Sobolev floor requires strictly positive scalar curvature")
        if A is None or B is None:
            B = g.volume() ** (-2.0 / g.n)
            A = 1e-3
    else:
        c0 = float(np.min(curvature(g).R))
        if c0 <= 0:
            raise ValidationError("Sobolev floor requires strictly positive scalar curvature")
        if A is None or B is None:
            A, B = _sobolev_constants(g)
    enlarged = False
    if 4.0 * B / (A * c0) > 1.0:
        A = 4.0 * B / c0
        enlarged = True
    C = sobolev_floor_constant(g.n, A)
    taus = np.asarray(tau_grid, dtype=float)
    # any feasible potential upper-bounds mu, so a solver value obtained at
    # its iteration cap still certifies the floor comparison
    mus = np.array([
        mu_minimize(g, float(tau), max_iter=20_000, soft_fail=True)[1]
        for tau in taus
    ])
    passed = bool(np.all(mus >= -C - 1e-9))
    return SobolevFloorReport(A=A, B=B, A_enlarged=enlarged, c0=c0, C=C,
                              taus=taus, mus=mus, passed=passed)


# ---------------------------------------------------------------------------
# gauge-invariant comparison
# ---------------------------------------------------------------------------

def gauge_compare(g1: Metric, g2: Metric, samples: int = 129) -> float:
    """Sup distance of scalar curvature as a function of volume fraction.

    The profile R(volume fraction) is invariant under radial
    reparametrization, so two metrics differing by a gauge map compare to
    zero within interpolation error.
    """
    def profile(g: Metric) -> np.ndarray:
        grid = np.linspace(0.0, 1.0, samples)
        if isinstance(g, HomogeneousMetric):
            return np.full(samples, curvature_hom(g).R)
        _, w = volume_measure(g)
        frac = np.cumsum(w) / np.sum(w)
        R = curvature(g).R
        return np.interp(grid, frac, R)

    return float(np.max(np.abs(profile(g1) - profile(g2))))
