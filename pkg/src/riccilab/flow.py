"""Time integrators: Ricci flow on the warped ansatz, exact homogeneous flows,
dynamic rescalings, and the gauged forward/backward modified flows.

All explicit stepping is Heun (RK2) with step size

    dt <= 0.25 * min( (min arclength spacing)^2, 1 / max|Rm| ),

the diffusion bound capped by the reaction rate where curvature is extreme.
A run is strictly sequential; trajectories are immutable once produced.

Singularities are signalled, not raised: a run stops when an interior neck
drops under the resolution floor or curvature passes 1/(10 dt_base), and the
singular time is estimated by extrapolating 1/max|Rm| linearly to zero, the
shape the maximum-principle bound dictates.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    MinimizerFailureError,
    NumericError,
    RangeError,
    StepSizeError,
    ValidationError,
)
from .geom import (
    CurvatureProfile,
    Factor,
    HomogeneousMetric,
    Metric,
    WarpedMetric,
    curvature,
    curvature_hom,
    ddx,
    volume_measure,
)


# ---------------------------------------------------------------------------
# step-size policy and single steps
# ---------------------------------------------------------------------------

def cfl_dt(g: WarpedMetric, curv: CurvatureProfile | None = None) -> float:
    """Stability bound for explicit stepping on g."""
    if curv is None:
        curv = curvature(g)
    min_ds = float(np.min(0.5 * (g.u[1:] + g.u[:-1])) * g.dx)
    return 0.25 * min(min_ds ** 2, 1.0 / max(curv.max_rm, 1e-300))


class SingularitySignal(Exception):
    """Internal signal: the stepped state degenerated (not a user error)."""


def _stabilized_k_rad(k_rad: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Replace the cancellation-poisoned pole entries of K_rad.

    The radial sectional curvature -phi_ss/phi amplifies grid noise like
    1/h^3 at the nodes nearest the poles; fed unfiltered into the reaction
    equation for u it drives a gauge-mode instability.  An even function of
    arclength is recovered near each pole by quadratic extrapolation from
    the first stable nodes.
    """
    out = k_rad.copy()
    for idx, src in (((0, 1, 2), (3, 4, 5)), ((-1, -2, -3), (-4, -5, -6))):
        pole = s[0] if idx[0] == 0 else s[-1]
        xs = (s[list(src)] - pole) ** 2
        coeff = np.polyfit(xs, k_rad[list(src)], 1)
        out[list(idx)] = np.polyval(coeff, (s[list(idx)] - pole) ** 2)
    return out


def _ricci_rhs(g: WarpedMetric, sign: float = -1.0, normalized: bool = False
               ) -> tuple[np.ndarray, np.ndarray]:
    """Profile derivatives (du, drho), rho = phi^2, for the gauge-fixed flow
    dg/dt = sign * 2 Ric (+ normalization term).

    Two reformulations make the stepping stable where the raw (u, phi)
    coordinate system is not (its linearization at the round sphere carries
    pole-localized modes with large positive spectrum):

    * the radial density is evolved through the diffeomorphism gauge that
      freezes its spatial shape, u(x, t) = c(t) u(x, 0), turning the weakly
      parabolic u equation into one stable scalar and adding the smooth
      advection w rho_x to the angular profile, with
      w = (1/u) int_0^x (<A>_u - A) u dx' and A the unmodified d(ln u)/dt;

    * the angular profile is evolved as rho = phi^2, in which the Ricci-flow
      right side is polynomial in (rho_ss, phi_s^2) with no pole-singular
      advection: rho_t = rho_ss - 2(n-2) + 2(n-3) phi_s^2 for the plain flow.

    The result is Ricci flow composed with a radial diffeomorphism; every
    monitored quantity of the artifact is diffeomorphism-invariant.
    """
    from .geom import _pole_extrapolate, d2dx

    n, dx = g.n, g.dx
    s = g.arclength()
    curv = curvature(g)
    k_rad = _stabilized_k_rad(curv.k_rad, s)
    A = sign * (n - 1) * k_rad
    if normalized:
        A = A - sign * 0.5

    rho = g.phi ** 2
    u_x = ddx(g.u, dx, "even")
    rho_x = ddx(rho, dx, "even")
    rho_xx = d2dx(rho, dx, "even")
    rho_ss = (rho_xx * g.u - rho_x * u_x) / g.u ** 3

    # drho for dphi = sign * ric_sph * phi:  2 sign (rho_ss/2 - (n-2) + (n-3) q)
    # with q = phi_s^2; q is only needed away from n = 3
    drho = sign * (-rho_ss + 2.0 * (n - 2))
    if n != 3:
        q = np.ones_like(rho)
        q[1:-1] = (rho_x[1:-1] / g.u[1:-1]) ** 2 / (4.0 * rho[1:-1])
        q = _pole_extrapolate(q, s)
        q = _stabilized_k_rad(q, s)     # same smooth pole repair as K_rad
        drho = drho - sign * 2.0 * (n - 3) * q
    if normalized:
        drho = drho - sign * rho

    length = float(np.sum(0.5 * (g.u[1:] + g.u[:-1])) * dx)
    A_mean = float(np.sum(0.5 * ((A * g.u)[1:] + (A * g.u)[:-1])) * dx) / length
    integrand = (A_mean - A) * g.u
    cum = np.zeros_like(g.u)
    cum[1:] = np.cumsum(0.5 * (integrand[1:] + integrand[:-1]) * dx)
    w = cum / g.u
    w[0] = w[-1] = 0.0
    du = A_mean * g.u
    drho = drho + w * rho_x
    return du, drho


def _heun_profiles(g: WarpedMetric, dt: float, rhs) -> WarpedMetric:
    """Heun step in the (u, rho = phi^2) variables; degeneracy signals."""

    def advance(base: WarpedMetric, u_new, rho_new) -> WarpedMetric:
        rho_new = rho_new.copy()
        rho_new[0] = rho_new[-1] = 0.0
        if np.any(u_new <= 0) or np.any(rho_new[1:-1] <= 0):
            raise SingularitySignal
        return replace(base, u=u_new, phi=np.sqrt(rho_new),
                       pole_slope_tol=max(base.pole_slope_tol, 0.05))

    rho = g.phi ** 2
    du1, drho1 = rhs(g)
    mid = advance(g, g.u + dt * du1, rho + dt * drho1)
    du2, drho2 = rhs(mid)
    out = advance(g, g.u + 0.5 * dt * (du1 + du2),
                  rho + 0.5 * dt * (drho1 + drho2))
    # re-enforce the pole conditions |dphi/ds| = 1: the residual coupled
    # modes of the discrete system are slow drifts of u against the
    # arclength of phi (one even, one odd); blending a per-pole rescaling
    # linearly across the domain projects both away each step
    sl0, sl1 = out.pole_slopes()
    f0, f1 = abs(sl0), abs(sl1)
    if not (0.5 < f0 < 2.0 and 0.5 < f1 < 2.0):
        raise SingularitySignal
    x = out.x
    return replace(out, u=out.u * (f0 * (1.0 - x) + f1 * x))


def _pin_poles(phi: np.ndarray) -> None:
    phi[0] = 0.0
    phi[-1] = 0.0


def step_ricci(g: WarpedMetric, dt: float) -> WarpedMetric:
    """One explicit step of dg/dt = -2 Ric in the (u, phi) profiles.

    Raises StepSizeError above the CFL bound and SingularitySignal when the
    stepped state degenerates; run() turns the latter into a singular-time
    estimate rather than an error.
    """
    if dt <= 0:
        raise ValidationError("dt must be positive")
    bound = cfl_dt(g)
    if dt > bound * (1 + 1e-12):
        raise StepSizeError(f"dt={dt:.3e} exceeds CFL bound {bound:.3e}")
    return _heun_profiles(g, dt, lambda m: _ricci_rhs(m, sign=-1.0))


def step_normalized(g: WarpedMetric, dt: float, direction: str) -> WarpedMetric:
    """One step of the static-rescaled flow dg/ds = -+2(Ric - g/2).

    direction "backward" is dg/ds = +2(Ric - g/2) (the rescaled backward
    flow); "forward" the opposite sign.
    """
    sign = +1.0 if direction == "backward" else -1.0
    bound = cfl_dt(g)
    if dt > bound * (1 + 1e-12):
        raise StepSizeError(f"dt={dt:.3e} exceeds CFL bound {bound:.3e}")
    return _heun_profiles(g, dt, lambda m: _ricci_rhs(m, sign=sign, normalized=True))


def spectral_project(g: WarpedMetric, modes: int) -> WarpedMetric:
    """Project phi onto its first ``modes`` sine harmonics and re-enforce poles.

    The backward (rescaled/modified) flows are anti-parabolic: grid-frequency
    content grows like exp(s/ds^2) and any explicit integration of them blows
    up immediately.  Restricting each step to a resolved smooth subspace is
    the standard quasi-reversibility regularization; pole-odd profiles are
    exactly sine series in x, and the round profiles occupy mode 1 alone, so
    the projection is exact on the self-similar states.
    """
    from scipy.fft import dst, idst

    coeffs = dst(g.phi[1:-1], type=1, norm="ortho")
    coeffs[modes:] = 0.0
    phi = np.zeros_like(g.phi)
    phi[1:-1] = idst(coeffs, type=1, norm="ortho")
    out = replace(g, phi=phi, pole_slope_tol=10.0)
    sl0, sl1 = out.pole_slopes()
    f0, f1 = abs(sl0), abs(sl1)
    if not (0.5 < f0 < 2.0 and 0.5 < f1 < 2.0):
        raise SingularitySignal
    x = out.x
    return replace(out, u=out.u * (f0 * (1.0 - x) + f1 * x),
                   pole_slope_tol=max(g.pole_slope_tol, 0.05))


def backward_mode_budget(span: float, seed: float = 1e-13) -> int:
    """Largest sine mode whose backward amplification over ``span`` stays
    below 1/seed; modes above this cannot be trusted in a backward run."""
    return max(2, int(math.sqrt(4.0 * math.log(1.0 / seed) / max(span, 1e-9))))


class FactorExtinction(Exception):
    """A homogeneous factor reached zero scale inside the step."""

    def __init__(self, time_to_extinction: float):
        super().__init__(f"factor extinct after {time_to_extinction}")
        self.time_to_extinction = time_to_extinction


def step_hom(g: HomogeneousMetric, dt: float) -> HomogeneousMetric:
    """Exact Ricci-flow step on a homogeneous product.

    Sphere factors follow a^2(t+dt) = a^2(t) - 2(p-1) dt exactly; torus
    factors are static.  Extinction inside the step raises FactorExtinction
    carrying the exact extinction time offset.
    """
    new_factors = []
    for f in g.factors:
        if f.kind == "flat-torus" or f.dim == 1:
            new_factors.append(f)
            continue
        a_sq = f.scale ** 2 - 2.0 * (f.dim - 1) * dt
        if a_sq <= 0:
            raise FactorExtinction(f.scale ** 2 / (2.0 * (f.dim - 1)))
        new_factors.append(replace(f, scale=math.sqrt(a_sq)))
    return HomogeneousMetric(tuple(new_factors))


def hom_extinction_time(g: HomogeneousMetric) -> float:
    """Exact first extinction time of a homogeneous product (inf for tori)."""
    times = [f.scale ** 2 / (2.0 * (f.dim - 1))
             for f in g.factors if f.kind == "round-sphere" and f.dim >= 2]
    return min(times) if times else math.inf


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

@dataclass
class FlowTrajectory:
    """Stored states of one run, with monitor series at the stored times."""

    times: np.ndarray
    states: list[Metric]
    direction: str = "forward"
    singular_time_estimate: float | None = None
    dt_base: float | None = None
    monitors: dict[str, np.ndarray] = field(default_factory=dict)
    hom_exact: bool = False
    extendability_violations: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.times.size != len(self.states):
            raise ValidationError("times and states disagree in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError("times must be strictly increasing")

    @property
    def n(self) -> int:
        return self.states[0].n

    def state_at(self, t: float) -> Metric:
        """State at time t: exact law (homogeneous), else linear in t on profiles."""
        ts = self.times
        if t < ts[0] - 1e-9 * max(1.0, abs(ts[0])) or \
           t > ts[-1] + 1e-9 * max(1.0, abs(ts[-1])):
            raise RangeError(f"time {t} outside stored range [{ts[0]}, {ts[-1]}]")
        if self.hom_exact:
            g0: HomogeneousMetric = self.states[0]  # type: ignore[assignment]
            dt = t - ts[0]
            factors = []
            for f in g0.factors:
                if f.kind == "flat-torus" or f.dim == 1:
                    factors.append(f)
                else:
                    a_sq = f.scale ** 2 - 2.0 * (f.dim - 1) * dt
                    if a_sq <= 0:
                        raise RangeError(f"factor extinct before time {t}")
                    factors.append(replace(f, scale=math.sqrt(a_sq)))
            return HomogeneousMetric(tuple(factors))
        t = min(max(t, ts[0]), ts[-1])
        j = min(max(bisect_right(ts, t) - 1, 0), ts.size - 2)
        lam = (t - ts[j]) / (ts[j + 1] - ts[j])
        a, b = self.states[j], self.states[j + 1]
        if isinstance(a, HomogeneousMetric):
            factors = tuple(
                replace(fa, scale=(1 - lam) * fa.scale + lam * fb.scale)
                for fa, fb in zip(a.factors, b.factors))
            return HomogeneousMetric(factors)
        u = (1 - lam) * a.u + lam * b.u
        phi = (1 - lam) * a.phi + lam * b.phi
        return replace(a, u=u, phi=phi, pole_slope_tol=max(a.pole_slope_tol, 0.05))

    def heat_dt(self, t: float) -> float:
        from .heat import heat_cfl

        g = self.state_at(t)
        bound = heat_cfl(g)
        return min(self.dt_base, bound) if self.dt_base else bound

    def monitor(self, key: str) -> np.ndarray:
        return self.monitors[key]


@dataclass
class GaugedTrajectory:
    """Gauged modified flow: rescaled states, gauge maps, and the mu series."""

    s_times: np.ndarray
    gbar: list[WarpedMetric]
    psi: list[np.ndarray]
    mu_series: np.ndarray
    gtilde: list[WarpedMetric]
    direction: str = "backward"
    grad_norms: np.ndarray | None = None

    def __post_init__(self):
        self.s_times = np.asarray(self.s_times, dtype=float)
        self.mu_series = np.asarray(self.mu_series, dtype=float)
        for p in self.psi:
            if np.any(np.diff(p) < -1e-12):
                raise ValidationError("gauge map psi must stay monotone")


@dataclass(frozen=True)
class RescalingSequence:
    """Blow-up times with their scale factors and the Type I products."""

    t_i: np.ndarray
    Q_i: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t_i", np.asarray(self.t_i, dtype=float))
        object.__setattr__(self, "Q_i", np.asarray(self.Q_i, dtype=float))
        d = np.diff(self.t_i)
        if not (np.all(d > 0) or np.all(d < 0)):
            raise ValidationError("t_i must be strictly monotone")
        if np.any(self.Q_i <= 0):
            raise ValidationError("scale factors must be positive")

    @property
    def products(self) -> np.ndarray:
        return np.abs(self.t_i) * self.Q_i


# ---------------------------------------------------------------------------
# dynamic rescaling
# ---------------------------------------------------------------------------

def dynamic_rescale(traj: FlowTrajectory, mode: str,
                    s_grid: np.ndarray) -> FlowTrajectory:
    """Trajectory in rescaled time s.

    mode "ancient" maps s to the state e^{-s} g(-e^s) (times unbounded below,
    self-similar ancient flows become static); mode "singular" to
    e^{s} g(-e^{-s}) for flows whose singular time was shifted to 0.
    """
    s_grid = np.asarray(s_grid, dtype=float)
    if mode not in ("ancient", "singular"):
        raise ValidationError("mode must be 'ancient' or 'singular'")
    states = []
    for s in s_grid:
        t = -math.exp(s) if mode == "ancient" else -math.exp(-s)
        length_factor = math.exp(-s / 2.0) if mode == "ancient" else math.exp(s / 2.0)
        g = traj.state_at(t)          # RangeError if the window is not covered
        states.append(g.scaled(length_factor))
    if mode == "singular" and traj.singular_time_estimate is None:
        raise ValidationError("singular mode needs a trajectory with a singular time")
    return FlowTrajectory(times=s_grid, states=states, direction="backward-rescaled",
                          hom_exact=False)


# ---------------------------------------------------------------------------
# gauge machinery for the modified flows
# ---------------------------------------------------------------------------

def gauge_velocity(g: WarpedMetric, f_values: np.ndarray) -> np.ndarray:
    """x-coordinate velocity of grad f: V = f_x / u^2 (radial potentials)."""
    return ddx(f_values, g.dx, "even") / g.u ** 2


def _interp_velocity(x: np.ndarray, v: np.ndarray, at: np.ndarray) -> np.ndarray:
    return np.interp(np.clip(at, 0.0, 1.0), x, v)


def advance_gauge(psi: np.ndarray, x: np.ndarray, v_now: np.ndarray,
                  v_next: np.ndarray, dt: float) -> np.ndarray:
    """RK2 step of dpsi/ds = V(psi, s) with sort-and-clip monotone repair."""
    k1 = _interp_velocity(x, v_now, psi)
    k2 = _interp_velocity(x, v_next, psi + dt * k1)
    out = psi + 0.5 * dt * (k1 + k2)
    out[0], out[-1] = 0.0, 1.0
    out = np.clip(np.sort(out), 0.0, 1.0)
    return out


def pullback_radial(g: WarpedMetric, psi: np.ndarray) -> WarpedMetric:
    """Pull a warped metric back by a radial reparametrization x -> psi(x).

    New profiles are phi(psi(x)) and u(psi(x)) psi'(x); monotone cubic
    interpolation keeps the map a diffeomorphism proxy.
    """
    from scipy.interpolate import PchipInterpolator

    x = g.x
    if abs(psi[0]) > 1e-12 or abs(psi[-1] - 1.0) > 1e-12:
        raise ValidationError("gauge map must fix the poles")
    phi_new = PchipInterpolator(x, g.phi)(psi)
    u_interp = PchipInterpolator(x, g.u)(psi)
    dpsi = 1.0 + ddx(psi - x, g.dx, "odd")
    if np.any(dpsi <= 0):
        raise NumericError("gauge map lost monotonicity beyond repair")
    phi_new = np.asarray(phi_new)
    _pin_poles(phi_new)
    return replace(g, u=np.asarray(u_interp) * dpsi, phi=np.maximum(phi_new, 0.0),
                   pole_slope_tol=max(g.pole_slope_tol, 0.05))


def step_modified(g: WarpedMetric, direction: str, dt: float,
                  solver: dict | None = None
                  ) -> tuple[WarpedMetric, np.ndarray, float]:
    """One step of the modified flow dg/dt = -+2(Ric + Hess f_g - g/2).

    Realized as a static-rescaled Ricci-flow step composed with the radial
    pullback along +-grad f_g; returns the stepped metric, the gauge-map
    increment (values of the displacement map on the grid), and mu(g, 1).
    Minimizer failure propagates as the gauge being undefined.
    """
    from .entropy import mu_minimize

    solver = solver or {}
    pot, mu = mu_minimize(g, 1.0, **solver)
    sign = +1.0 if direction == "backward" else -1.0
    v = sign * gauge_velocity(g, pot.f)
    g_half = step_normalized(g, dt, direction)
    x = g.x
    psi_inc = advance_gauge(x.copy(), x, v, v, dt)
    g_new = pullback_radial(g_half, psi_inc)
    return g_new, psi_inc, mu


# ---------------------------------------------------------------------------
# run orchestration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunSpec:
    """Declarative description of one run; deterministic and seed-free."""

    kind: str                     # "ricci" | "hom" | "gauged"
    g0: Metric
    t0: float = 0.0
    t_end: float | None = None    # ricci/hom: target time (may stop earlier)
    s_end: float | None = None    # gauged: rescaled-time span
    direction: str = "forward"    # gauged: "backward" | "forward"
    dt_base: float | None = None
    dt_policy: str = "cfl_capped"  # "cfl_capped" | "fixed"
    store_every: int = 10
    extendability_bound: float | None = None
    solver: dict = field(default_factory=dict)
    filter_modes: int | None = None   # spectral projection per step (backward runs)

    def validate(self) -> None:
        if self.kind not in ("ricci", "hom", "gauged"):
            raise ValidationError(f"unknown run kind {self.kind!r}")
        if self.kind == "gauged" and self.s_end is None:
            raise ValidationError("gauged runs need s_end")
        if self.kind in ("ricci", "hom") and self.t_end is None:
            raise ValidationError("time runs need t_end")
        if self.dt_policy not in ("cfl_capped", "fixed"):
            raise ValidationError(f"unknown dt policy {self.dt_policy!r}")
        if self.store_every < 1:
            raise ValidationError("store_every must be >= 1")


def _estimate_singular_time(ts: list[float], inv_rm: list[float]) -> float:
    """Extrapolate 1/max|Rm| linearly to zero over the last few samples."""
    k = min(len(ts), 6)
    t_arr = np.array(ts[-k:])
    y_arr = np.array(inv_rm[-k:])
    if k >= 2:
        slope = np.polyfit(t_arr, y_arr, 1)[0]
        if slope < 0:
            return float(t_arr[-1] - y_arr[-1] / slope)
    return float(t_arr[-1])


def _neck_pinched(g: WarpedMetric) -> bool:
    """Interior local minimum of phi below five local grid spacings."""
    phi = g.phi
    interior = np.arange(1, phi.size - 1)
    is_min = (phi[interior] <= phi[interior - 1]) & (phi[interior] <= phi[interior + 1])
    necks = interior[is_min]
    if necks.size == 0:
        return False
    local_ds = g.u[necks] * g.dx
    return bool(np.any(phi[necks] < 5.0 * local_ds))


def run(spec: RunSpec) -> FlowTrajectory | GaugedTrajectory:
    """Execute a run spec; deterministic given the spec.

    Step errors propagate annotated with the failure time.  For Ricci runs
    the monitors record max|Rm|, min R, volume, diameter, and the neck
    radius at every stored time; a Type I extendability bound, when given,
    is checked against max|Rm| of the stored states and violations recorded.
    """
    spec.validate()
    if spec.kind == "hom":
        return _run_hom(spec)
    if spec.kind == "ricci":
        return _run_ricci(spec)
    return _run_gauged(spec)


def _run_hom(spec: RunSpec) -> FlowTrajectory:
    g0: HomogeneousMetric = spec.g0  # type: ignore[assignment]
    if not isinstance(g0, HomogeneousMetric):
        raise ValidationError("hom runs need a homogeneous metric")
    t_ext = hom_extinction_time(g0)
    t_stop = min(spec.t_end, spec.t0 + 0.999999 * t_ext) if t_ext < math.inf \
        else spec.t_end
    times = np.linspace(spec.t0, t_stop, max(2, spec.store_every + 1))
    traj = FlowTrajectory(times=times, states=[g0] * times.size, hom_exact=True,
                          direction="forward", dt_base=spec.dt_base)
    traj.states = [traj.state_at(float(t)) for t in times]
    if t_ext < math.inf:
        traj.singular_time_estimate = spec.t0 + t_ext
    for key, fn in (("max_rm", lambda g: curvature_hom(g).max_rm),
                    ("r_min", lambda g: curvature_hom(g).R),
                    ("volume", lambda g: g.volume()),
                    ("diameter", lambda g: g.diameter())):
        traj.monitors[key] = np.array([fn(s) for s in traj.states])
    return traj


def _run_ricci(spec: RunSpec) -> FlowTrajectory:
    g: WarpedMetric = spec.g0  # type: ignore[assignment]
    if not isinstance(g, WarpedMetric):
        raise ValidationError("ricci runs need a warped metric")
    t = spec.t0
    curv = curvature(g)
    times = [t]
    states = [g]
    mon = {k: [] for k in ("max_rm", "r_min", "volume", "diameter", "neck_phi")}

    def record(gi, ci):
        mon["max_rm"].append(ci.max_rm)
        mon["r_min"].append(float(np.min(ci.R)))
        mon["volume"].append(volume_measure(gi)[0])
        mon["diameter"].append(gi.total_length())
        mon["neck_phi"].append(float(np.min(gi.phi[1:-1])))

    record(g, curv)
    singular = None
    rm_cap = 1.0 / (10.0 * spec.dt_base) if spec.dt_base else math.inf
    step_index = 0
    inv_rm_hist = [(t, 1.0 / curv.max_rm)]
    while t < spec.t_end - 1e-14:
        bound = cfl_dt(g, curv)
        if spec.dt_policy == "fixed":
            dt = spec.dt_base
            if dt > bound * (1 + 1e-12):
                raise StepSizeError(
                    f"fixed dt={dt:.3e} exceeds CFL bound {bound:.3e} at t={t:.6f}")
        else:
            dt = min(spec.dt_base, bound) if spec.dt_base else bound
        dt = min(dt, spec.t_end - t)
        try:
            g_new = _heun_profiles(g, dt, lambda m: _ricci_rhs(m, sign=-1.0))
        except SingularitySignal:
            singular = _estimate_singular_time(*zip(*inv_rm_hist))
            break
        t += dt
        g = g_new
        curv = curvature(g)
        if not np.isfinite(curv.max_rm):
            raise NumericError(f"curvature blew up non-finitely at t={t:.6f}")
        step_index += 1
        inv_rm_hist.append((t, 1.0 / curv.max_rm))
        if len(inv_rm_hist) > 8:
            inv_rm_hist.pop(0)
        if step_index % spec.store_every == 0 or t >= spec.t_end - 1e-14:
            times.append(t)
            states.append(g)
            record(g, curv)
        if curv.max_rm > rm_cap or _neck_pinched(g):
            singular = _estimate_singular_time(*zip(*inv_rm_hist))
            if times[-1] != t:
                times.append(t)
                states.append(g)
                record(g, curv)
            break
    traj = FlowTrajectory(times=np.array(times), states=states,
                          direction="forward", dt_base=spec.dt_base,
                          singular_time_estimate=singular,
                          monitors={k: np.array(v) for k, v in mon.items()})
    if spec.extendability_bound is not None:
        bad = traj.times[traj.monitors["max_rm"] > spec.extendability_bound]
        traj.extendability_violations = [float(b) for b in bad]
    return traj


def _run_gauged(spec: RunSpec) -> GaugedTrajectory:
    from .entropy import mu_gradient, mu_minimize

    g: WarpedMetric = spec.g0  # type: ignore[assignment]
    if not isinstance(g, WarpedMetric):
        raise ValidationError("gauged runs need a warped metric")
    if spec.direction not in ("backward", "forward"):
        raise ValidationError("gauged direction must be 'backward' or 'forward'")
    sign_gauge = +1.0 if spec.direction == "backward" else -1.0
    x = g.x
    psi = x.copy()
    s = 0.0
    try:
        pot, mu = mu_minimize(g, 1.0, **spec.solver)
    except MinimizerFailureError as e:
        raise MinimizerFailureError(f"gauge undefined at s=0: {e}") from e
    v_cur = sign_gauge * gauge_velocity(g, pot.f)

    s_times, gbar_list, psi_list, gtilde_list, mu_list, grad_list = \
        [], [], [], [], [], []

    def record():
        s_times.append(s)
        gtilde_list.append(g)
        psi_list.append(psi.copy())
        gbar_list.append(pullback_radial(g, psi))
        mu_list.append(mu)
        grad_list.append(mu_gradient(g, potential=pot).l2_norm)

    record()
    step_index = 0
    while s < spec.s_end - 1e-12:
        dt = min(cfl_dt(g), spec.s_end - s)
        if spec.dt_base:
            dt = min(dt, spec.dt_base)
        try:
            g_next = step_normalized(g, dt, spec.direction)
            if spec.filter_modes:
                g_next = spectral_project(g_next, spec.filter_modes)
        except SingularitySignal:
            break
        try:
            pot_next, mu_next = mu_minimize(g_next, 1.0, **spec.solver)
        except MinimizerFailureError as e:
            raise MinimizerFailureError(
                f"gauge undefined at s={s + dt:.4f}: {e}") from e
        v_next = sign_gauge * gauge_velocity(g_next, pot_next.f)
        psi = advance_gauge(psi, x, v_cur, v_next, dt)
        g, pot, mu, v_cur = g_next, pot_next, mu_next, v_next
        s += dt
        step_index += 1
        if step_index % spec.store_every == 0 or s >= spec.s_end - 1e-12:
            record()
    return GaugedTrajectory(s_times=np.array(s_times), gbar=gbar_list,
                            psi=psi_list, mu_series=np.array(mu_list),
                            gtilde=gtilde_list, direction=spec.direction,
                            grad_norms=np.array(grad_list))


# ---------------------------------------------------------------------------
# convenience builders
# ---------------------------------------------------------------------------

def hom_trajectory(g0: HomogeneousMetric, times: np.ndarray,
                   t_ref: float | None = None) -> FlowTrajectory:
    """Exact homogeneous trajectory sampled on an arbitrary increasing grid.

    ``t_ref`` is the time at which g0 is the state (defaults to times[0]).
    """
    times = np.asarray(times, dtype=float)
    t_ref = float(times[0]) if t_ref is None else float(t_ref)
    states = []
    for t in times:
        dt = float(t) - t_ref
        factors = []
        for f in g0.factors:
            if f.kind == "flat-torus" or f.dim == 1:
                factors.append(f)
                continue
            a_sq = f.scale ** 2 - 2.0 * (f.dim - 1) * dt
            if a_sq <= 0:
                raise RangeError(f"factor extinct before time {t}")
            factors.append(replace(f, scale=math.sqrt(a_sq)))
        states.append(HomogeneousMetric(tuple(factors)))
    ext = hom_extinction_time(g0)
    traj = FlowTrajectory(times=times, states=states, hom_exact=True)
    if ext < math.inf:
        traj.singular_time_estimate = t_ref + ext
    for key, fn in (("max_rm", lambda g: curvature_hom(g).max_rm),
                    ("r_min", lambda g: curvature_hom(g).R),
                    ("volume", lambda g: g.volume()),
                    ("diameter", lambda g: g.diameter())):
        traj.monitors[key] = np.array([fn(s) for s in states])
    return traj


def shrinker_sphere_trajectory(n: int, times: np.ndarray,
                               grid_size: int = 64) -> FlowTrajectory:
    """Exact round-shrinker flow a^2(t) = 2(n-1)|t| on the warped grid.

    States are closed-form (no integration error); the flow becomes extinct
    at t = 0.
    """
    times = np.asarray(times, dtype=float)
    if np.any(times >= 0):
        raise ValidationError("the round shrinker lives at negative times")
    from .geom import round_sphere

    states = [round_sphere(n, math.sqrt(2.0 * (n - 1) * (-t)), grid_size)
              for t in times]
    traj = FlowTrajectory(times=times, states=states, direction="forward")
    traj.singular_time_estimate = 0.0
    return traj
