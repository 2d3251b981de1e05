"""Synthetic exact flows and PDE-to-discrete exports.

Three fixture families back the metric-flow machinery with closed-form
oracles: the trivial one-point flow, the static 1-d heat flow on a segment
(concentration constant H = 4, kernels are matrix exponentials of the
Neumann walk generator), and the quotient export of the exact round-shrinker
trajectory (kernels built by substepped conjugate-heat transition matrices).

Exports use the radial quotient: points are the grid radii, distances are
arclength differences, and the measure is the lumped half-cell volume (kept
strictly positive at the poles so deltas based there stay meaningful).  The
quotient contracts true manifold distances; concentration checks on exports
therefore carry a configurable slack.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import expm

from .errors import ValidationError
from .flow import FlowTrajectory
from .heat import _operator, concentration_constant, heat_cfl
from .mflow import ConjugateHeatFlowDiscrete, FiniteMetricFlow


def one_point_flow(times: np.ndarray, H: float = 4.0) -> FiniteMetricFlow:
    """The trivial flow: a single point at every time."""
    times = np.asarray(times, dtype=float)
    m = times.size
    return FiniteMetricFlow(
        times=times,
        dists=[np.zeros((1, 1))] * m,
        weights=[np.ones(1)] * m,
        step_kernels=[np.ones((1, 1))] * (m - 1),
        H=H,
        coords=[np.zeros(1)] * m)


def _segment_generator(n_points: int, length: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.linspace(0.0, length, n_points)
    h = x[1] - x[0]
    mass = np.full(n_points, h)
    mass[0] = mass[-1] = h / 2.0
    L = np.zeros((n_points, n_points))
    for i in range(n_points - 1):
        c = 1.0 / h
        L[i, i + 1] += c / mass[i]
        L[i, i] -= c / mass[i]
        L[i + 1, i] += c / mass[i + 1]
        L[i + 1, i + 1] -= c / mass[i + 1]
    return x, mass, L


def heat_flow_1d(n_points: int = 64, t_min: float = -2.5, t_max: float = 0.0,
                 n_times: int = 41, extra_times: list[float] | None = None,
                 length: float = 1.0) -> FiniteMetricFlow:
    """Static segment with discrete heat-semigroup kernels; H = 4 exactly.

    The time grid is uniform with any requested extra times merged in, so
    shift experiments can hit exact slice times.  Step kernels are matrix
    exponentials of the Neumann walk generator conjugated to mass
    coordinates; rows are renormalized to kill the ~1e-15 expm drift.
    """
    x, mass, L = _segment_generator(n_points, length)
    times = np.linspace(t_min, t_max, n_times)
    if extra_times:
        times = np.unique(np.concatenate([times, np.asarray(extra_times, dtype=float)]))
    times = times[(times >= t_min - 1e-12) & (times <= t_max + 1e-12)]
    gaps = np.diff(times)
    cache: dict[float, np.ndarray] = {}
    steps = []
    for gap in gaps:
        key = round(float(gap), 15)
        if key not in cache:
            # transition on masses: K = (M expm(gap L) M^{-1})^T, rows stochastic
            P = expm(gap * L)
            K = (mass[:, None] * P / mass[None, :]).T
            K = np.maximum(K, 0.0)
            K /= K.sum(axis=1, keepdims=True)
            cache[key] = K
        steps.append(cache[key])
    dist = np.abs(x[:, None] - x[None, :])
    weights = mass / mass.sum()
    m = times.size
    return FiniteMetricFlow(times=times, dists=[dist] * m, weights=[weights] * m,
                            step_kernels=steps, H=4.0, coords=[x] * m)


def center_kernel_flow(flow: FiniteMetricFlow, top_index: int | None = None
                       ) -> ConjugateHeatFlowDiscrete:
    """Conjugate heat flow from a delta at the middle point of the top slice."""
    if top_index is None:
        top_index = flow.size - 1
    n = flow.points(top_index)
    mu_top = np.zeros(n)
    mu_top[n // 2] = 1.0
    return ConjugateHeatFlowDiscrete.from_top(flow, mu_top, top_index)


# ---------------------------------------------------------------------------
# PDE exports
# ---------------------------------------------------------------------------

def _conjugate_matrix_interval(traj: FlowTrajectory, t_a: float, t_b: float
                               ) -> np.ndarray:
    """Row-stochastic transition matrix from the t_a slice to the t_b slice."""
    g = traj.state_at(t_a)
    op = _operator(g)
    n = g.u.size
    V = np.eye(n) / op.mass[:, None]      # columns: delta densities
    t = t_a
    while t > t_b + 1e-14:
        dt_max = min(heat_cfl(traj.state_at(t)), heat_cfl(traj.state_at(max(t_b, t - heat_cfl(g)))))
        m = max(1, math.ceil((t - t_b) / dt_max - 1e-12))
        dt = (t - t_b) / m
        g_now = traj.state_at(t)
        g_next = traj.state_at(t - dt)
        op_a = _operator(g_now)
        op_b = _operator(g_next)
        k1 = op_a.apply(V)
        k2 = op_b.apply(V + dt * k1)
        V = np.maximum(V + 0.5 * dt * (k1 + k2), 0.0)
        V /= (op_b.mass @ V)[None, :]
        t -= dt
        g = g_next
    op_b = _operator(traj.state_at(t_b))
    K = (V * op_b.mass[:, None]).T
    K = np.maximum(K, 0.0)
    K /= K.sum(axis=1, keepdims=True)
    return K


def export_from_trajectory(traj: FlowTrajectory, export_times: np.ndarray,
                           *, slack_H: float = 1.0) -> FiniteMetricFlow:
    """Radial quotient of a warped trajectory as a finite metric flow.

    Per slice: points are the grid radii, distances the arclength
    differences, and the measure the lumped half-cell volume normalized to a
    probability vector.  Kernels between consecutive export times are
    substepped conjugate-heat transition matrices; longer spans compose
    exactly as products.
    """
    export_times = np.asarray(export_times, dtype=float)
    if np.any(np.diff(export_times) <= 0):
        raise ValidationError("export times must be strictly increasing")
    dists, weights, coords = [], [], []
    n_dim = traj.n
    for t in export_times:
        g = traj.state_at(float(t))
        s = g.arclength()
        coords.append(s)
        dists.append(np.abs(s[:, None] - s[None, :]))
        mass = _operator(g).mass
        weights.append(mass / mass.sum())
    steps = [
        _conjugate_matrix_interval(traj, float(export_times[k + 1]),
                                   float(export_times[k]))
        for k in range(export_times.size - 1)
    ]
    return FiniteMetricFlow(times=export_times, dists=dists, weights=weights,
                            step_kernels=steps,
                            H=slack_H * concentration_constant(n_dim),
                            coords=coords)


def shrinker_export(n: int = 3, grid_size: int = 48, t_top: float = -0.015625,
                    depth_factor: float = 4096.0, slices_per_octave: int = 8
                    ) -> FiniteMetricFlow:
    """Quotient export of the exact round-shrinker flow on a geometric grid.

    Times run from t_top * depth_factor up to t_top with ``slices_per_octave``
    slices per doubling of |t|; states are closed-form round spheres of
    radius sqrt(2(n-1)|t|).
    """
    from .flow import shrinker_sphere_trajectory

    octaves = math.log2(depth_factor)
    count = int(octaves * slices_per_octave) + 1
    times = -np.logspace(math.log10(-t_top * depth_factor), math.log10(-t_top), count)
    times = np.unique(times)
    traj = shrinker_sphere_trajectory(n, times, grid_size)
    return export_from_trajectory(traj, times)
