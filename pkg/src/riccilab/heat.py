"""Conjugate heat equation machinery on warped trajectories.

Densities v evolve backward in time by dv/dtau = Lap v - R v (tau measured
backward from the base time), discretized by a flux-form Laplacian on the
radial quotient with lumped half-cell masses at the poles and a Heun step
between metric slices.  Every step renormalizes total mass against the
evolving volume form and logs the drift it removed; the metric-flow export
machinery requires exact probability measures.

Kernels are restricted to pole base points: an off-pole delta breaks the
rotational symmetry that the whole ansatz relies on.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import dataclass, field

import numpy as np

from .errors import RangeError, StepSizeError, ValidationError
from .geom import WarpedMetric, unit_sphere_area, volume_measure


def concentration_constant(n: int) -> float:
    """Dimensional constant H_n = (n-1) pi^2 / 2 + 4 of kernel concentration."""
    return (n - 1) * math.pi ** 2 / 2.0 + 4.0


# ---------------------------------------------------------------------------
# radial quotient helpers
# ---------------------------------------------------------------------------

def quotient_coords(g: WarpedMetric) -> np.ndarray:
    """Arclength coordinates of the grid points (the radial quotient of g)."""
    return g.arclength()

def quotient_dist(g: WarpedMetric) -> np.ndarray:
    s = g.arclength()
    return np.abs(s[:, None] - s[None, :])


# ---------------------------------------------------------------------------
# discrete operator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _HeatOperator:
    edge: np.ndarray      # flux coefficients per edge
    mass: np.ndarray      # lumped positive half-cell masses per node
    R: np.ndarray
    min_ds: float

    def apply(self, v: np.ndarray) -> np.ndarray:
        edge = self.edge if v.ndim == 1 else self.edge[:, None]
        flux = edge * np.diff(v, axis=0)
        lap = np.zeros_like(v)
        lap[:-1] += flux
        lap[1:] -= flux
        lap /= self.mass if v.ndim == 1 else self.mass[:, None]
        Rv = self.R * v if v.ndim == 1 else self.R[:, None] * v
        return lap - Rv


def _operator(g: WarpedMetric) -> _HeatOperator:
    from .geom import curvature

    omega = unit_sphere_area(g.n - 1)
    phi_e = 0.5 * (g.phi[1:] + g.phi[:-1])
    u_e = 0.5 * (g.u[1:] + g.u[:-1])
    edge = omega * phi_e ** (g.n - 1) / (u_e * g.dx)
    edge_vol = omega * phi_e ** (g.n - 1) * u_e * g.dx
    mass = np.zeros_like(g.u)
    mass[:-1] += 0.5 * edge_vol
    mass[1:] += 0.5 * edge_vol
    R = curvature(g).R
    return _HeatOperator(edge=edge, mass=mass, R=R,
                         min_ds=float(np.min(u_e) * g.dx))


def heat_cfl(g: WarpedMetric) -> float:
    """Largest stable explicit step for the conjugate/heat operator on g."""
    return 0.25 * (float(np.min(0.5 * (g.u[1:] + g.u[:-1])) * g.dx)) ** 2


# ---------------------------------------------------------------------------
# conjugate heat flow container
# ---------------------------------------------------------------------------

@dataclass
class ConjugateHeatFlow:
    """Unit-mass nonnegative density per time slice, times decreasing from base."""

    times: list[float]
    densities: list[np.ndarray]
    base: tuple[str | int, float] | str
    n: int
    k0: int = 0
    renorm_log: list[float] = field(default_factory=list)
    clip_count: int = 0

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        # times are stored decreasing
        for i, ti in enumerate(self.times):
            if abs(ti - t) <= tol * max(1.0, abs(t)):
                return i
        raise RangeError(f"no kernel slice at t = {t}")

    def density_at(self, t: float) -> np.ndarray:
        return self.densities[self.index_of(t)]


def conjugate_step(v: np.ndarray, g_at_t: WarpedMetric, g_next: WarpedMetric,
                   dt: float) -> tuple[np.ndarray, float, int]:
    """One backward conjugate-heat step from the slice of g_at_t to g_next.

    Returns the renormalized density on the g_next slice, the mass drift the
    renormalization removed, and the count of clipped negative values beyond
    -1e-10.
    """
    if dt <= 0:
        raise ValidationError("dt must be positive")
    cfl = min(heat_cfl(g_at_t), heat_cfl(g_next))
    if dt > cfl * (1 + 1e-12):
        raise StepSizeError(f"conjugate step dt={dt:.3e} exceeds CFL {cfl:.3e}")
    op_a = _operator(g_at_t)
    op_b = _operator(g_next)
    k1 = op_a.apply(v)
    k2 = op_b.apply(v + dt * k1)
    v_new = v + 0.5 * dt * (k1 + k2)
    clip = int(np.sum(v_new < -1e-10))
    v_new = np.maximum(v_new, 0.0)
    _, vol = volume_measure(g_next)
    mass = float(np.dot(v_new, vol))
    if mass <= 0:
        raise ValidationError("conjugate step lost all mass")
    return v_new / mass, mass - 1.0, clip


def _smoothed_delta(g: WarpedMetric, index: int, k0: int, dt: float) -> np.ndarray:
    """Grid delta at a node, mollified by k0 fixed-metric heat steps."""
    op = _operator(g)
    v = np.zeros_like(g.u)
    v[index] = 1.0 / op.mass[index]
    for _ in range(k0):
        # plain heat (no -Rv) at the frozen base metric, Heun
        def heat(w):
            flux = op.edge * np.diff(w)
            lap = np.zeros_like(w)
            lap[:-1] += flux
            lap[1:] -= flux
            return lap / op.mass
        k1 = heat(v)
        k2 = heat(v + dt * k1)
        v = np.maximum(v + 0.5 * dt * (k1 + k2), 0.0)
    _, vol = volume_measure(g)
    mass = float(np.dot(v, vol))
    if mass <= 0:
        # the pole cells carry no quadrature volume; fall back to lumped mass
        mass = float(np.dot(v, op.mass))
    return v / mass


def kernel_from_point(traj, base_pole: str, t0: float, *, k0: int = 10,
                      store_times: list[float] | None = None,
                      t_stop: float | None = None) -> ConjugateHeatFlow:
    """Conjugate heat kernel based at a pole of the trajectory at time t0.

    The initial delta is smoothed by ``k0`` heat steps at the base-time
    metric, then integrated down the trajectory.  Substeps are sized by the
    heat CFL of the current state and chopped so the integration lands
    exactly on every requested store time; by default every waypoint slice
    is kept.
    """
    if base_pole not in ("south", "north", 0, -1):
        raise ValidationError("kernels are restricted to pole base points")
    index = 0 if base_pole in ("south", 0) else -1
    if t0 < traj.times[0] - 1e-12 or t0 > traj.times[-1] + 1e-12:
        raise RangeError(f"base time {t0} outside trajectory range")
    g0 = traj.state_at(t0)
    v = _smoothed_delta(g0, 0 if index == 0 else g0.u.shape[0] - 1, k0, heat_cfl(g0))

    t_min = float(traj.times[0]) if t_stop is None else float(t_stop)
    if t_min >= t0:
        raise RangeError("nothing to integrate: t_stop is not below the base time")
    waypoints = {t_min}
    if store_times is not None:
        waypoints |= {float(t) for t in store_times if t_min - 1e-12 <= t < t0}
    waypoints = sorted(waypoints, reverse=True)

    flow_times = [float(t0)]
    densities = [v.copy()]
    renorm_log: list[float] = []
    clip_count = 0
    t = float(t0)
    g_cur = g0
    for tb in waypoints:
        while t > tb + 1e-14:
            dt_max = traj.heat_dt(t)
            m = max(1, math.ceil((t - tb) / dt_max - 1e-12))
            step = (t - tb) / m
            g_next = traj.state_at(t - step)
            v, drift, clip = conjugate_step(v, g_cur, g_next, step)
            renorm_log.append(drift)
            clip_count += clip
            t -= step
            g_cur = g_next
        t = tb
        flow_times.append(t)
        densities.append(v.copy())
    return ConjugateHeatFlow(times=flow_times, densities=densities,
                             base=(base_pole, float(t0)), n=traj.n, k0=k0,
                             renorm_log=renorm_log, clip_count=clip_count)


@dataclass(frozen=True)
class SingularKernelReport:
    kernel: ConjugateHeatFlow
    base_times: list[float]
    cauchy_stats: list[float]
    converged: bool


def singular_kernel(traj, base_times: list[float], *, window_t: float | None = None,
                    tol: float = 1e-2, k0: int = 10) -> SingularKernelReport:
    """Kernels based at times approaching the singular time, compared pairwise.

    Returns the last iterate plus the sup-differences of consecutive kernel
    densities on a fixed earlier comparison slice.  A non-Cauchy sequence is
    reported, not raised: the limiting kernel need not be unique.
    """
    if traj.singular_time_estimate is None:
        raise ValidationError("trajectory carries no singular time estimate")
    ts = sorted(float(t) for t in base_times)
    if len(ts) < 2:
        raise ValidationError("need at least two base times")
    if window_t is None:
        window_t = float(traj.times[0])
    kernels = [kernel_from_point(traj, "south", t, k0=k0, store_times=[window_t])
               for t in ts]
    slices = []
    for k in kernels:
        i = min(range(len(k.times)), key=lambda j: abs(k.times[j] - window_t))
        slices.append(k.densities[i])
    stats = [float(np.max(np.abs(a - b))) for a, b in zip(slices, slices[1:])]
    rel = max(stats) / max(float(np.max(np.abs(slices[-1]))), 1e-300)
    return SingularKernelReport(kernel=kernels[-1], base_times=ts,
                                cauchy_stats=stats, converged=rel <= tol)


# ---------------------------------------------------------------------------
# variance and concentration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConcentrationReport:
    center: int
    var_to_center: float
    hn_bound: float
    margin: float


def variance(mu1: np.ndarray, mu2: np.ndarray, dist: np.ndarray) -> float:
    """Var(mu1, mu2) = double integral of d^2 against the product measure."""
    mu1 = np.asarray(mu1, dtype=float)
    mu2 = np.asarray(mu2, dtype=float)
    for m in (mu1, mu2):
        if abs(float(np.sum(m)) - 1.0) > 1e-6:
            raise ValidationError("variance needs normalized measures")
    return float(mu1 @ (dist ** 2) @ mu2)


def hn_center(mu: np.ndarray, dist: np.ndarray, t0: float, t: float,
              n: int) -> ConcentrationReport:
    """Point minimizing Var(delta_z, mu), with its H_n concentration margin.

    Ties break toward the smaller radial index.
    """
    if t >= t0:
        raise ValidationError("concentration compares a strictly earlier slice")
    mu = np.asarray(mu, dtype=float)
    vars_to_points = (dist ** 2) @ mu
    z = int(np.argmin(vars_to_points))
    var = float(vars_to_points[z])
    bound = concentration_constant(n) * (t0 - t)
    return ConcentrationReport(center=z, var_to_center=var, hn_bound=bound,
                               margin=bound - var)
