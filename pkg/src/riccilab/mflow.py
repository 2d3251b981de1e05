"""Finite metric flows: W1 transport, concentration checks, couplings, glued
spaces, and the distance estimator for comparing flow pairs.

A finite metric flow is a time grid, one finite metric-measure space per
time, and backward probability kernels between slices.  Kernels are stored
as per-interval row-stochastic matrices and longer spans are their products,
so the reproduction identity nu_{x|r} = sum nu_{x|s} nu_{.|r} holds by
construction.

The flow-pair distance estimator is an upper bound by design: it evaluates
one concrete correspondence (glued spaces + couplings + exception set) and
certifies the smallest r that correspondence supports.  No lower bounds are
attempted anywhere.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import RangeError, ShapeMismatchError, ValidationError

W1_EXACT_LIMIT = 512


# ---------------------------------------------------------------------------
# exact W1 transport
# ---------------------------------------------------------------------------

def _line_embedding(dist: np.ndarray, tol: float = 1e-10) -> np.ndarray | None:
    """Coordinates z with |z_i - z_j| = dist_ij if the space is a line subset."""
    anchor = int(np.argmax(dist[0]))
    z = dist[anchor]
    scale = max(float(np.max(dist)), 1.0)
    if np.max(np.abs(np.abs(z[:, None] - z[None, :]) - dist)) <= tol * scale:
        return z
    return None


def _w1_line(z: np.ndarray, mu1: np.ndarray, mu2: np.ndarray,
             want_coupling: bool) -> tuple[float, np.ndarray | None]:
    """W1 on the line: integral of |CDF difference|; monotone coupling."""
    order = np.argsort(z, kind="stable")
    zs = z[order]
    d1, d2 = mu1[order], mu2[order]
    cdf = np.cumsum(d1 - d2)[:-1]
    value = float(np.sum(np.abs(cdf) * np.diff(zs)))
    if not want_coupling:
        return value, None
    # monotone (quantile) coupling assembled by merging the two CDFs
    n = z.size
    plan = np.zeros((n, n))
    i = j = 0
    a, b = d1.copy(), d2.copy()
    while i < n and j < n:
        m = min(a[i], b[j])
        if m > 0:
            plan[order[i], order[j]] += m
        a[i] -= m
        b[j] -= m
        advanced = False
        if a[i] <= 1e-18:
            i += 1
            advanced = True
        if j < n and b[j] <= 1e-18:
            j += 1
            advanced = True
        if not advanced:   # defensive: cannot occur with exact arithmetic
            i += 1
    return value, plan


def _w1_network(dist: np.ndarray, mu1: np.ndarray, mu2: np.ndarray
                ) -> tuple[float, np.ndarray]:
    """Exact transportation LP solved by the HiGHS dual simplex.

    Only the positive-mass rows and columns enter the program; the optimal
    basis is deterministic for fixed inputs.
    """
    from scipy.optimize import linprog
    from scipy.sparse import lil_matrix

    supply_idx = np.flatnonzero(mu1 > 0)
    demand_idx = np.flatnonzero(mu2 > 0)
    m, k = supply_idx.size, demand_idx.size
    cost = dist[np.ix_(supply_idx, demand_idx)]
    A = lil_matrix((m + k, m * k))
    for i in range(m):
        A[i, i * k:(i + 1) * k] = 1.0
    for j in range(k):
        A[m + j, j::k] = 1.0
    rhs = np.concatenate([mu1[supply_idx], mu2[demand_idx]])
    res = linprog(cost.ravel(), A_eq=A.tocsr(), b_eq=rhs, method="highs-ds",
                  bounds=(0, None))
    if not res.success:
        raise ValidationError(f"transportation LP failed: {res.message}")
    plan = np.zeros_like(dist)
    plan[np.ix_(supply_idx, demand_idx)] = res.x.reshape(m, k)
    return float(res.fun), plan


def w1(dist: np.ndarray, mu1: np.ndarray, mu2: np.ndarray,
       return_coupling: bool = False):
    """Exact first Wasserstein distance on a finite metric space.

    Uses the closed CDF form when the space embeds isometrically in a line,
    otherwise an exact network-flow solve.  Slices beyond 512 points are
    refused rather than approximated.
    """
    dist = np.asarray(dist, dtype=float)
    mu1 = np.asarray(mu1, dtype=float)
    mu2 = np.asarray(mu2, dtype=float)
    n = dist.shape[0]
    if dist.shape != (n, n) or mu1.shape != (n,) or mu2.shape != (n,):
        raise ShapeMismatchError("distance matrix and measures must share one point set")
    if n > W1_EXACT_LIMIT:
        raise ValidationError(f"slice has {n} > {W1_EXACT_LIMIT} points; "
                              "exact transport refused")
    for mu in (mu1, mu2):
        if abs(float(np.sum(mu)) - 1.0) > 1e-8 or np.any(mu < -1e-12):
            raise ValidationError("w1 needs normalized nonnegative measures")
    z = _line_embedding(dist)
    if z is not None:
        value, plan = _w1_line(z, mu1, mu2, return_coupling)
        if not return_coupling:
            return value
        return value, plan
    value, plan = _w1_network(dist, mu1, mu2)
    return (value, plan) if return_coupling else value


def _w1_line_batch(z: np.ndarray, rows1: np.ndarray, rows2: np.ndarray) -> np.ndarray:
    """All-pairs W1 on a common line between two stacks of measures."""
    order = np.argsort(z, kind="stable")
    gaps = np.diff(z[order])
    c1 = np.cumsum(rows1[:, order], axis=1)[:, :-1]
    c2 = np.cumsum(rows2[:, order], axis=1)[:, :-1]
    return np.einsum("aik,k->ai", np.abs(c1[:, None, :] - c2[None, :, :]), gaps,
                     optimize=True)


# ---------------------------------------------------------------------------
# Monge-structured bipartite transport (for glued cross-space batches)
# ---------------------------------------------------------------------------

def _is_monge(cost: np.ndarray, tol: float = 1e-9) -> bool:
    """Adjacent quadrangle inequality; sufficient for NW-corner optimality."""
    q = cost[:-1, :-1] + cost[1:, 1:] - cost[:-1, 1:] - cost[1:, :-1]
    return bool(np.all(q <= tol * max(float(np.max(np.abs(cost))), 1.0)))


def _rowwise_searchsorted(sorted_rows: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """searchsorted per row via the offset-flattening trick.

    Rows must take values in [0, 1]; each row is shifted into a disjoint
    window so one flat search answers all rows at once.
    """
    r, c = sorted_rows.shape
    off = 4.0 * np.arange(r)[:, None]
    flat = (sorted_rows + off).ravel()
    idx = np.searchsorted(flat, (queries + off).ravel())
    return (idx.reshape(queries.shape) - np.arange(r)[:, None] * c)


def _w1_monge_batch(cost: np.ndarray, rows1: np.ndarray, rows2: np.ndarray
                    ) -> np.ndarray:
    """All-pairs optimal transport cost for a Monge cost matrix.

    For submodular costs the monotone (quantile) coupling is optimal, so
    each pair cost is an integral over merged CDF levels; fully vectorized
    over both families of measures.
    """
    p, m = rows1.shape
    q, k = rows2.shape
    eps = 1e-15
    c1 = np.cumsum(rows1, axis=1)
    c1[:, -1] = 1.0
    c2 = np.cumsum(rows2, axis=1)
    c2[:, -1] = 1.0
    merged = np.empty((p, q, m + k))
    merged[:, :, :m] = c1[:, None, :]
    merged[:, :, m:] = c2[None, :, :]
    merged.sort(axis=2)
    dl = np.diff(merged, axis=2, prepend=0.0)
    mids = merged - 0.5 * dl
    flat_mids = mids.reshape(p * q, m + k)
    i_idx = _rowwise_searchsorted(
        np.repeat(c1, q, axis=0), flat_mids - eps).reshape(p, q, m + k)
    j_idx = _rowwise_searchsorted(
        np.tile(c2, (p, 1)), flat_mids - eps).reshape(p, q, m + k)
    np.clip(i_idx, 0, m - 1, out=i_idx)
    np.clip(j_idx, 0, k - 1, out=j_idx)
    return np.sum(cost[i_idx, j_idx] * dl, axis=2)


# ---------------------------------------------------------------------------
# the flow container
# ---------------------------------------------------------------------------

@dataclass
class FiniteMetricFlow:
    """Finite metric-measure spaces on a time grid with backward kernels.

    ``step_kernels[k]`` transports the slice at times[k+1] to times[k]
    (row-stochastic, rows indexed by the later slice).  All slices share a
    point count here; spans are products of the per-interval matrices, so
    kernel composition is exact by construction.
    """

    times: np.ndarray
    dists: list[np.ndarray]
    weights: list[np.ndarray]
    step_kernels: list[np.ndarray]
    H: float
    coords: list[np.ndarray] | None = None   # line coordinates when slices are 1-d
    _kernel_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError("times must be strictly increasing")
        if len(self.dists) != self.times.size or len(self.weights) != self.times.size:
            raise ValidationError("one metric-measure space per time is required")
        if len(self.step_kernels) != self.times.size - 1:
            raise ValidationError("need exactly one step kernel per interval")

    @property
    def size(self) -> int:
        return self.times.size

    def points(self, i: int) -> int:
        return self.dists[i].shape[0]

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        i = bisect_left(self.times, t - tol * max(1.0, abs(t)))
        if i >= self.times.size or abs(self.times[i] - t) > tol * max(1.0, abs(t)):
            raise RangeError(f"no slice at time {t}")
        return i

    def nearest_index(self, t: float) -> int:
        return int(np.argmin(np.abs(self.times - t)))

    def kernel(self, i_later: int, i_earlier: int) -> np.ndarray:
        """Backward kernel matrix from slice i_later to slice i_earlier."""
        if i_earlier > i_later:
            raise ValidationError("kernels run backward in time")
        if i_earlier == i_later:
            return np.eye(self.points(i_later))
        key = (i_later, i_earlier)
        if key not in self._kernel_cache:
            prev = self.kernel(i_later, i_earlier + 1)
            self._kernel_cache[key] = prev @ self.step_kernels[i_earlier]
        return self._kernel_cache[key]

    def validate(self, *, metric_tol: float = 1e-9, kernel_tol: float = 1e-6,
                 max_checks: int = 12) -> None:
        """Metric axioms per slice, row-stochasticity, and composition."""
        for i, d in enumerate(self.dists):
            if d.shape[0] != d.shape[1]:
                raise ValidationError(f"slice {i}: distance matrix not square")
            scale = max(float(np.max(d)), 1.0)
            if np.max(np.abs(d - d.T)) > metric_tol * scale:
                raise ValidationError(f"slice {i}: asymmetric distances")
            if np.max(np.abs(np.diag(d))) > metric_tol * scale:
                raise ValidationError(f"slice {i}: nonzero diagonal")
            if np.min(d + d[:, :, None] - d[:, None, :]) < -metric_tol * scale:
                raise ValidationError(f"slice {i}: triangle inequality violated")
            w = self.weights[i]
            if abs(float(np.sum(w)) - 1.0) > 1e-9 or np.any(w < 0):
                raise ValidationError(f"slice {i}: weights are not a probability vector")
        for k, K in enumerate(self.step_kernels):
            if np.max(np.abs(K.sum(axis=1) - 1.0)) > kernel_tol or np.any(K < -1e-12):
                raise ValidationError(f"interval {k}: kernel rows are not stochastic")
        rng = np.random.default_rng(7)
        n = self.size
        for _ in range(min(max_checks, max(0, n - 2))):
            r, s, t = sorted(rng.choice(n, size=3, replace=False))
            if r == s or s == t:
                continue
            lhs = self.kernel(t, r)
            rhs = self.kernel(t, s) @ self.kernel(s, r)
            if np.max(np.abs(lhs - rhs)) > kernel_tol:
                raise ValidationError("kernel composition consistency failed")

    def to_dict(self) -> dict:
        return {
            "format": 1,
            "H": self.H,
            "times": self.times.tolist(),
            "points": [int(self.points(i)) for i in range(self.size)],
            "dists": [d.ravel().tolist() for d in self.dists],
            "weights": [w.tolist() for w in self.weights],
            "step_kernels": [k.ravel().tolist() for k in self.step_kernels],
            "coords": None if self.coords is None else [c.tolist() for c in self.coords],
        }

    @staticmethod
    def from_dict(doc: dict) -> "FiniteMetricFlow":
        from .errors import FormatVersionError

        if doc.get("format") != 1:
            raise FormatVersionError(f"unsupported flow format {doc.get('format')!r}")
        times = np.asarray(doc["times"], dtype=float)
        pts = doc["points"]
        dists = [np.asarray(v, dtype=float).reshape(p, p)
                 for v, p in zip(doc["dists"], pts)]
        weights = [np.asarray(w, dtype=float) for w in doc["weights"]]
        steps = [np.asarray(v, dtype=float).reshape(pts[k + 1], pts[k])
                 for k, v in enumerate(doc["step_kernels"])]
        coords = doc.get("coords")
        if coords is not None:
            coords = [np.asarray(c, dtype=float) for c in coords]
        return FiniteMetricFlow(times=times, dists=dists, weights=weights,
                                step_kernels=steps, H=float(doc["H"]), coords=coords)


@dataclass
class ConjugateHeatFlowDiscrete:
    """Probability vector per slice, propagated by the flow's own kernels."""

    flow: FiniteMetricFlow
    top_index: int
    mus: list[np.ndarray | None]

    @staticmethod
    def from_top(flow: FiniteMetricFlow, mu_top: np.ndarray,
                 top_index: int | None = None) -> "ConjugateHeatFlowDiscrete":
        if top_index is None:
            top_index = flow.size - 1
        mus: list[np.ndarray | None] = [None] * flow.size
        mus[top_index] = np.asarray(mu_top, dtype=float)
        for j in range(top_index - 1, -1, -1):
            mus[j] = mus[j + 1] @ flow.step_kernels[j]
        return ConjugateHeatFlowDiscrete(flow=flow, top_index=top_index, mus=mus)

    def mu(self, i: int) -> np.ndarray:
        if self.mus[i] is None:
            raise RangeError(f"conjugate heat flow undefined at slice {i}")
        return self.mus[i]

    def var_series(self) -> np.ndarray:
        out = np.full(self.flow.size, np.nan)
        for i in range(self.top_index + 1):
            m = self.mus[i]
            out[i] = float(m @ (self.flow.dists[i] ** 2) @ m)
        return out


# ---------------------------------------------------------------------------
# concentration and variance machinery
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HConcentrationReport:
    worst_margin: float
    worst_case: tuple[int, int, int, int] | None
    pairs_checked: int
    passed: bool


def check_h_concentration(flow: FiniteMetricFlow, *, slack: float = 1.0,
                          tol: float = 1e-9, max_time_pairs: int = 64
                          ) -> HConcentrationReport:
    """Var(nu_x, nu_y) <= slack (dist_t(x,y)^2 + H (t-s)) over sampled pairs.

    All point pairs are checked on every sampled (s, t) time pair; the time
    pairs are subsampled deterministically when the grid is large.
    """
    n = flow.size
    pairs = [(s, t) for t in range(n) for s in range(t)]
    if len(pairs) > max_time_pairs:
        stride = len(pairs) // max_time_pairs + 1
        pairs = pairs[::stride]
    worst = math.inf
    worst_case = None
    checked = 0
    for s, t in pairs:
        K = flow.kernel(t, s)
        d2 = flow.dists[s] ** 2
        var = K @ d2 @ K.T
        bound = slack * (flow.dists[t] ** 2 + flow.H * (flow.times[t] - flow.times[s]))
        margin = bound - var
        checked += margin.size
        idx = np.unravel_index(np.argmin(margin), margin.shape)
        if margin[idx] < worst:
            worst = float(margin[idx])
            worst_case = (int(idx[0]), int(idx[1]), s, t)
    return HConcentrationReport(worst_margin=worst, worst_case=worst_case,
                                pairs_checked=checked, passed=worst >= -tol)


def variance_plus_ht(flow: FiniteMetricFlow, mu_flow: ConjugateHeatFlowDiscrete,
                     *, slack: float = 1.0) -> np.ndarray:
    """Series Var(mu_t) + slack * H * t at the defined slices."""
    var = mu_flow.var_series()
    return var + slack * flow.H * flow.times


def w1_monotone_margin(flow: FiniteMetricFlow, *, samples: int = 200) -> float:
    """Worst violation of W1 contraction under the kernels.

    For s' < s <= t the kernelled measures must not move apart going further
    back; returns min over sampled (x, y, s', s) of the allowed slack
    (nonnegative means monotone).
    """
    rng = np.random.default_rng(11)
    worst = math.inf
    n = flow.size
    for _ in range(samples):
        if n < 3:
            break
        sp, s, t = sorted(rng.choice(n, size=3, replace=False))
        x, y = rng.integers(0, flow.points(t), size=2)
        Ks = flow.kernel(t, s)
        Ksp = flow.kernel(t, sp)
        z_s = flow.coords[s] if flow.coords else _line_embedding(flow.dists[s])
        z_sp = flow.coords[sp] if flow.coords else _line_embedding(flow.dists[sp])
        if z_s is None or z_sp is None:
            w_s = w1(flow.dists[s], Ks[x], Ks[y])
            w_sp = w1(flow.dists[sp], Ksp[x], Ksp[y])
        else:
            w_s = float(_w1_line_batch(z_s, Ks[x:x + 1], Ks[y:y + 1])[0, 0])
            w_sp = float(_w1_line_batch(z_sp, Ksp[x:x + 1], Ksp[y:y + 1])[0, 0])
        worst = min(worst, w_s - w_sp)
    return worst


def mass_distribution(dist: np.ndarray, mu: np.ndarray, r: float,
                      eps: float) -> float:
    """Largest mass any closed eps*r-ball carries (mass distribution at scale r)."""
    if not 0 < eps <= 1:
        raise ValidationError("eps must lie in (0, 1]")
    within = dist <= eps * r + 1e-15
    return float(np.max(within @ mu))


def gaussian_cdf_quarter(x: float) -> float:
    """Phi with Phi'(x) = (4 pi)^{-1/2} exp(-x^2/4), Phi(-inf)=0, Phi(inf)=1."""
    return 0.5 * (1.0 + erf(x / 2.0))


def b_lower(eps: float, V: float, H: float) -> float:
    """Lower bound for the mass distribution function of H-concentrated flows.

    Piecewise in eps with breakpoints 2^{-j} inherited from the scale ladder
    tau_j = 2^{-3(j+1)}/H.
    """
    if not 0 < eps <= 1:
        raise ValidationError("eps must lie in (0, 1]")
    if V <= 0 or H <= 0:
        raise ValidationError("V and H must be positive")
    j = max(1, math.floor(-math.log2(eps)) + 1)
    if eps <= 2.0 ** (-j) or eps > 2.0 ** (-j + 1):   # guard rounding at breakpoints
        while eps <= 2.0 ** (-j):
            j += 1
        while eps > 2.0 ** (-j + 1):
            j -= 1
    tau_j = 2.0 ** (-3 * (j + 1)) / H
    return 0.5 * gaussian_cdf_quarter(-math.sqrt(8.0 * V / (eps * tau_j)))


@dataclass(frozen=True)
class BadSet:
    """Times where the drift-corrected variance jumps by more than beta."""

    delta: float
    beta: float
    E: np.ndarray              # member times
    measure: float
    measure_bound: float       # 2 A delta / beta with A = V + H * span


def _grid_cell_widths(times: np.ndarray) -> np.ndarray:
    w = np.zeros_like(times)
    w[1:] += 0.5 * np.diff(times)
    w[:-1] += 0.5 * np.diff(times)
    return w


def bad_set(flow: FiniteMetricFlow, mu_flow: ConjugateHeatFlowDiscrete,
            delta: float, beta: float) -> BadSet:
    """E = {t : v(t) - v(t - delta) >= beta} with v = Var(mu_t) + H t."""
    if not (0 < delta < 0.5 and 0 < beta < 0.5):
        raise ValidationError("delta and beta must lie in (0, 1/2)")
    idx = [i for i in range(flow.size) if mu_flow.mus[i] is not None]
    times = flow.times[idx]
    v = variance_plus_ht(flow, mu_flow)[idx]
    V_sup = float(np.max(v - flow.H * times))
    span = float(times[-1] - times[0])
    A = V_sup + flow.H * span
    members = []
    for k, t in enumerate(times):
        tm = t - delta
        if tm < times[0]:
            continue
        v_tm = float(np.interp(tm, times, v))
        if v[k] - v_tm >= beta:
            members.append(k)
    widths = _grid_cell_widths(times)
    measure = float(np.sum(widths[members]))
    bound = 2.0 * A * delta / beta
    if measure > bound + 1e-12:
        raise ValidationError(
            f"bad set measure {measure} exceeds its bound {bound}")
    return BadSet(delta=delta, beta=beta, E=times[members], measure=measure,
                  measure_bound=bound)


def build_coupling(flow: FiniteMetricFlow, mu_flow: ConjugateHeatFlowDiscrete,
                   t: float, t_prime: float) -> np.ndarray:
    """Kernel coupling q[x, y] = mu_t(y) nu_{y|t'}(x) between mu_{t'} and mu_t.

    Rows index the earlier slice, columns the later one; both marginals are
    exact by construction.
    """
    i_t = flow.index_of(t)
    i_p = flow.index_of(t_prime)
    if i_p > i_t:
        raise ValidationError("t' must not exceed t")
    mu_t = mu_flow.mu(i_t)
    K = flow.kernel(i_t, i_p)
    return (K * mu_t[:, None]).T


@dataclass(frozen=True)
class GluedSpace:
    """Two slices joined across kernel-derived distances, repaired to a metric."""

    n_first: int               # points of the earlier slice (t')
    n_second: int              # points of the joined subset W_t
    dist: np.ndarray
    repair_magnitude: float
    second_subset: np.ndarray  # indices of W_t inside the t-slice


def glue(flow: FiniteMetricFlow, t: float, t_prime: float,
         W_t: np.ndarray | None = None) -> GluedSpace:
    """Glue the t' slice with W_t (a subset of the t slice).

    Candidate cross-distances are W1(delta_x, nu_{y|t'}) = E_{nu_y} d(x, .);
    triangle violations are repaired by shortest-path completion and the
    largest correction is reported.
    """
    from scipy.sparse.csgraph import shortest_path

    i_t = flow.index_of(t)
    i_p = flow.index_of(t_prime)
    if i_p > i_t:
        raise ValidationError("t' must not exceed t")
    n_t = flow.points(i_t)
    W = np.arange(n_t) if W_t is None else np.asarray(W_t, dtype=int)
    K = flow.kernel(i_t, i_p)[W]               # |W| x n_{t'}
    cross = K @ flow.dists[i_p]                # E d(., x); transpose to (x, w)
    cross = cross.T
    n1 = flow.points(i_p)
    big = np.empty((n1 + W.size, n1 + W.size))
    big[:n1, :n1] = flow.dists[i_p]
    big[n1:, n1:] = flow.dists[i_t][np.ix_(W, W)]
    big[:n1, n1:] = cross
    big[n1:, :n1] = cross.T
    repaired = shortest_path(big, method="J", directed=False)
    return GluedSpace(n_first=n1, n_second=W.size, dist=repaired,
                      repair_magnitude=float(np.max(big - repaired)),
                      second_subset=W)


# ---------------------------------------------------------------------------
# flow transformations
# ---------------------------------------------------------------------------

def time_shift(flow: FiniteMetricFlow, sigma: float) -> FiniteMetricFlow:
    """Shifted flow whose slice at time t is the original slice at t + sigma."""
    return FiniteMetricFlow(times=flow.times + sigma, dists=flow.dists,
                            weights=flow.weights, step_kernels=flow.step_kernels,
                            H=flow.H, coords=flow.coords)


def rescale(flow: FiniteMetricFlow, lam: float, t0: float = 0.0) -> FiniteMetricFlow:
    """Parabolic rescaling: first shift time by -t0, then scale.

    Distances multiply by lam, times map to lam^2 (t - t0); kernels are
    reindexed unchanged.
    """
    if lam <= 0:
        raise ValidationError("scale factor must be positive")
    return FiniteMetricFlow(times=lam ** 2 * (flow.times - t0),
                            dists=[lam * d for d in flow.dists],
                            weights=flow.weights, step_kernels=flow.step_kernels,
                            H=flow.H,
                            coords=None if flow.coords is None
                            else [lam * c for c in flow.coords])


def parabolic_ball(flow: FiniteMetricFlow, x0: tuple[float, int], r: float
                   ) -> list[tuple[float, int]]:
    """W1 parabolic neighborhood: points y within r^2 in time whose kernels at
    the base slice t0 - r^2 are W1-closer than r to the base kernel."""
    t0, p0 = x0
    i0 = flow.index_of(t0)
    i_base = flow.nearest_index(t0 - r * r)
    if flow.times[i_base] >= t0:
        raise RangeError("no slice below the parabolic base time")
    base = flow.kernel(i0, i_base)[p0]
    z = flow.coords[i_base] if flow.coords else _line_embedding(flow.dists[i_base])
    out = []
    for i in range(flow.size):
        if abs(flow.times[i] - t0) >= r * r or i < i_base:
            continue
        K = flow.kernel(i, i_base)
        if z is not None:
            vals = _w1_line_batch(z, K, base[None, :])[:, 0]
        else:
            vals = np.array([w1(flow.dists[i_base], K[y], base)
                             for y in range(flow.points(i))])
        for y in np.flatnonzero(vals < r):
            out.append((float(flow.times[i]), int(y)))
    return out

# ---------------------------------------------------------------------------
# flow-pair distance estimation
# ---------------------------------------------------------------------------

@dataclass
class Correspondence:
    """Concrete comparison data for a flow pair on a shared evaluation grid.

    Per evaluation time: the slice index in each flow, a coupling between the
    two conjugate-heat-flow measures there, and the cross-distance matrix of
    the glued space (None means both sides share one slice: the gluing is the
    identity and the slice metric itself is used).

    ``fast`` optionally carries per-time data (j_early, late_is_side1,
    scale_early, e) for correspondences whose two sides are slices of one
    underlying flow: the glued-space W1 is then bounded by pushing the later
    side's kernels down through the flow's own kernel (exact composition)
    plus the expected cross displacement e, turning every pair integrand
    into same-slice line transports.
    """

    eval_times: np.ndarray
    idx1: list[int]
    idx2: list[int]
    couplings: list[np.ndarray]          # q_t[a, b]: a in flow1 slice, b in flow2 slice
    cross_costs: list[np.ndarray | None]  # dist(Z_s) between side-1 and side-2 points
    repair_magnitudes: list[float]
    preset_exceptions: np.ndarray | None = None   # times excluded a priori
    fast: list[tuple | None] | None = None


@dataclass(frozen=True)
class FDistanceReport:
    value: float
    exception_times: np.ndarray
    exception_measure: float
    sup_outside: float
    pair_values: dict
    repair_sup: float


def _pair_integrand(flow1: FiniteMetricFlow, flow2: FiniteMetricFlow,
                    corr: Correspondence, si: int, ti: int) -> float:
    """Integral of the glued-space W1 between pushed kernels against q_t."""
    i1_t, i2_t = corr.idx1[ti], corr.idx2[ti]
    i1_s, i2_s = corr.idx1[si], corr.idx2[si]
    q = corr.couplings[ti]
    fast = corr.fast[si] if corr.fast is not None else None
    if fast is not None and fast[0] == "identity":
        _, blend, offset = fast
        K1 = flow1.kernel(i1_t, i1_s)
        K2 = flow2.kernel(i2_t, i2_s)
        z = flow1.coords[i1_s] if flow1.coords else _line_embedding(flow1.dists[i1_s])
        if z is None:
            raise ValidationError("identity fast path needs line-embeddable slices")
        W = blend * _w1_line_batch(z, K1, K2) + offset
        return float(np.sum(q * W))
    if fast is not None:
        _, j_early, late_is_side1, scale_early, e_vec = fast
        if late_is_side1:
            K_late = flow1.kernel(i1_t, i1_s)
            pushed = flow1.kernel(i1_t, j_early)
            other = flow2.kernel(i2_t, i2_s)
            marg = q.sum(axis=1)
            rows1, rows2 = pushed, other
        else:
            K_late = flow2.kernel(i2_t, i2_s)
            pushed = flow2.kernel(i2_t, j_early)
            other = flow1.kernel(i1_t, i1_s)
            marg = q.sum(axis=0)
            rows1, rows2 = other, pushed
        cross_term = float(marg @ (K_late @ e_vec))
        z = flow1.coords[j_early] if flow1.coords else \
            _line_embedding(flow1.dists[j_early])
        if z is None:
            raise ValidationError("fast path needs line-embeddable slices")
        W = _w1_line_batch(scale_early * z, rows1, rows2)
        return cross_term + float(np.sum(q * W))
    K1 = flow1.kernel(i1_t, i1_s)
    K2 = flow2.kernel(i2_t, i2_s)
    cross = corr.cross_costs[si]
    if cross is None:
        z = flow1.coords[i1_s] if flow1.coords else _line_embedding(flow1.dists[i1_s])
        if z is not None:
            W = _w1_line_batch(z, K1, K2)
        else:
            W = np.empty((K1.shape[0], K2.shape[0]))
            for a in range(K1.shape[0]):
                for b in range(K2.shape[0]):
                    W[a, b] = w1(flow1.dists[i1_s], K1[a], K2[b])
    else:
        cost = cross
        if _is_monge(cost):
            W = _w1_monge_batch(cost, K1, K2)
        else:
            # exact fallback through the glued bipartite problem
            n1, n2 = cost.shape
            big = np.zeros((n1 + n2, n1 + n2))
            big[:n1, n1:] = cost
            big[n1:, :n1] = cost.T
            big[:n1, :n1] = flow1.dists[i1_s]
            big[n1:, n1:] = flow2.dists[i2_s]
            W = np.empty((K1.shape[0], K2.shape[0]))
            for a in range(K1.shape[0]):
                mu_a = np.concatenate([K1[a], np.zeros(n2)])
                for b in range(K2.shape[0]):
                    mu_b = np.concatenate([np.zeros(n1), K2[b]])
                    W[a, b] = w1(big, mu_a, mu_b)
    return float(np.sum(q * W))


def f_distance_upper(flow1: FiniteMetricFlow, mu1: ConjugateHeatFlowDiscrete,
                     flow2: FiniteMetricFlow, mu2: ConjugateHeatFlowDiscrete,
                     corr: Correspondence, *, bisection_steps: int = 50
                     ) -> FDistanceReport:
    """Upper bound on the flow-pair distance through one correspondence.

    Certifies the smallest r such that some exception set E of time measure
    at most r^2 leaves sup_{s <= t outside E} of the coupled kernel-W1
    integral below r.  The infimum over r runs by bisection; the witnessing
    exception set is built greedily (largest offender first), which can only
    increase the bound, never invalidate it.
    """
    m = corr.eval_times.size
    widths = _grid_cell_widths(corr.eval_times)
    preset = np.zeros(m, dtype=bool)
    if corr.preset_exceptions is not None:
        for te in corr.preset_exceptions:
            j = int(np.argmin(np.abs(corr.eval_times - te)))
            if abs(corr.eval_times[j] - te) <= 1e-9 * max(1.0, abs(te)):
                preset[j] = True
    D = {}
    for ti in range(m):
        for si in range(ti + 1):
            D[(si, ti)] = _pair_integrand(flow1, flow2, corr, si, ti)

    def witness(r: float) -> tuple[bool, np.ndarray]:
        banned = preset.copy()
        # greedy vertex cover of the pairs violating the threshold
        while True:
            offenders = np.zeros(m)
            for (si, ti), val in D.items():
                if val > r and not banned[si] and not banned[ti]:
                    offenders[si] += 1
                    offenders[ti] += 1
            if offenders.max() == 0:
                break
            banned[int(np.argmax(offenders))] = True
        measure = float(np.sum(widths[banned]))
        return measure <= r * r, banned

    r_lo, r_hi = 0.0, max(max(D.values()), math.sqrt(float(np.sum(widths)))) + 1e-12
    ok_hi, banned_hi = witness(r_hi)
    if not ok_hi:
        raise ValidationError("estimator could not certify any radius")
    for _ in range(bisection_steps):
        mid = 0.5 * (r_lo + r_hi)
        ok, banned = witness(mid)
        if ok:
            r_hi, banned_hi = mid, banned
        else:
            r_lo = mid
    sup_outside = max((v for (si, ti), v in D.items()
                       if not banned_hi[si] and not banned_hi[ti]), default=0.0)
    return FDistanceReport(
        value=r_hi,
        exception_times=corr.eval_times[banned_hi],
        exception_measure=float(np.sum(widths[banned_hi])),
        sup_outside=float(sup_outside),
        pair_values={f"{si},{ti}": v for (si, ti), v in D.items()},
        repair_sup=float(max(corr.repair_magnitudes, default=0.0)))


# ---------------------------------------------------------------------------
# correspondence builders
# ---------------------------------------------------------------------------

def _cross_cost(base_flow: FiniteMetricFlow, j_late: int, j_early: int,
                scale_late: float = 1.0, scale_early: float = 1.0
                ) -> tuple[np.ndarray, float]:
    """Repaired cross-distances between two slices of one underlying flow.

    Candidate distance from x (earlier slice) to y (later slice) is the
    kernel expectation E_{nu_{y}} d(x, .), computed in the earlier metric and
    scaled by the geometric mean of the two sides' length scales, then
    repaired to a metric by shortest-path completion across the glued block
    matrix.  Returns the repaired (earlier, later) block and the largest
    correction.
    """
    from scipy.sparse.csgraph import shortest_path

    K = base_flow.kernel(j_late, j_early)
    blend = math.sqrt(scale_late * scale_early)
    cross = blend * (K @ base_flow.dists[j_early]).T
    n1 = base_flow.points(j_early)
    n2 = base_flow.points(j_late)
    big = np.empty((n1 + n2, n1 + n2))
    big[:n1, :n1] = scale_early * base_flow.dists[j_early]
    big[n1:, n1:] = scale_late * base_flow.dists[j_late]
    big[:n1, n1:] = cross
    big[n1:, :n1] = cross.T
    repaired = shortest_path(big, method="J", directed=False)
    return repaired[:n1, n1:], float(np.max(big - repaired))


def correspondence_timeshift(flow: FiniteMetricFlow,
                             mu_flow: ConjugateHeatFlowDiscrete, sigma: float,
                             eval_times: np.ndarray, *, delta: float | None = None,
                             beta: float = 0.05) -> tuple[Correspondence, BadSet]:
    """Kernel-built correspondence between a flow and its sigma time shift.

    Uses the coupling q_t through the flow's own kernels over [t - sigma, t]
    and the variance bad set (with the final (-delta^3/H, 0] sliver) as the
    preset exception times.
    """
    if sigma < 0:
        raise ValidationError("sigma must be nonnegative")
    delta = sigma if delta is None else delta
    idx1, idx2, couplings, crosses, repairs, fast = [], [], [], [], [], []
    for t in eval_times:
        i1 = flow.index_of(t)
        i2 = flow.index_of(t - sigma)      # shifted flow slice at t
        idx1.append(i1)
        idx2.append(i2)
        mu_t = mu_flow.mu(i1)
        K = flow.kernel(i1, i2)
        # q_t[a, b]: a in the flow1 slice (time t), b in the flow2 slice (t-sigma)
        couplings.append(K * mu_t[:, None])
        if sigma == 0:
            crosses.append(None)
            repairs.append(0.0)
            fast.append(None)
        else:
            cross, mag = _cross_cost(flow, i1, i2)
            crosses.append(cross.T)           # orient (side1 = later, side2 = earlier)
            repairs.append(mag)
            e_vec = np.einsum("yx,xy->y", K, cross)
            fast.append(("kernel", i2, True, 1.0, e_vec))
    preset = None
    bad = None
    if delta > 0 and 0 < beta < 0.5 and 0 < min(delta, 0.49) and delta < 0.5:
        bad = bad_set(flow, mu_flow, delta, beta)
        sliver = flow.times[(flow.times > -delta ** 3 / flow.H)]
        preset = np.unique(np.concatenate([bad.E, sliver]))
    corr = Correspondence(eval_times=np.asarray(eval_times, dtype=float),
                          idx1=idx1, idx2=idx2, couplings=couplings,
                          cross_costs=crosses, repair_magnitudes=repairs,
                          preset_exceptions=preset, fast=fast)
    return corr, bad


def correspondence_rescale(flow: FiniteMetricFlow,
                           mu_flow: ConjugateHeatFlowDiscrete, lam: float,
                           eval_times: np.ndarray) -> Correspondence:
    """Correspondence between a flow and its parabolic rescaling by lam.

    The rescaled flow's slice at time t is the original slice at t/lam^2,
    paired by nearest grid time.  Because both sides share one point set,
    the gluing is the identity matching with the blended metric
    (1+lam)/2 d plus a uniform separation |lam-1|/2 diam; shortest-path
    repair of that candidate is what the reported repair magnitude measures.
    Couplings run through the flow's own kernels, so marginals are exact.
    """
    scaled = rescale(flow, lam)
    idx1, idx2, couplings, crosses, repairs, fast = [], [], [], [], [], []
    for t in eval_times:
        i1 = flow.index_of(t)
        i2 = scaled.nearest_index(t)
        idx1.append(i1)
        idx2.append(i2)
        j_early, j_late = min(i1, i2), max(i1, i2)
        mu_t = mu_flow.mu(i1)
        if j_early == j_late and abs(lam - 1.0) < 1e-15:
            couplings.append(np.diag(mu_t))
            crosses.append(None)
            repairs.append(0.0)
            fast.append(None)
            continue
        if j_early == j_late:
            couplings.append(np.diag(mu_t))
        else:
            # optimal (quantile) coupling between the two slice measures
            z = flow.coords[i1] if flow.coords else _line_embedding(flow.dists[i1])
            mu_other = mu_flow.mu(i2)
            if z is not None:
                _, plan = _w1_line(z, mu_t, mu_other, True)
            else:
                _, plan = w1(flow.dists[i1], mu_t, mu_other, return_coupling=True)
            couplings.append(plan)
        blend = 0.5 * (1.0 + lam)
        d1 = flow.dists[i1]
        offset = 0.5 * abs(lam - 1.0) * float(np.max(d1))
        cand = blend * d1 + offset
        crosses.append(cand)
        # report the repair the candidate would need as a metric
        from scipy.sparse.csgraph import shortest_path

        n1 = flow.points(i1)
        n2 = scaled.points(i2)
        big = np.empty((n1 + n2, n1 + n2))
        big[:n1, :n1] = flow.dists[i1]
        big[n1:, n1:] = scaled.dists[i2]
        big[:n1, n1:] = cand
        big[n1:, :n1] = cand.T
        rep = shortest_path(big, method="J", directed=False)
        repairs.append(float(np.max(big - rep)))
        fast.append(("identity", blend, offset))
    return Correspondence(eval_times=np.asarray(eval_times, dtype=float),
                          idx1=idx1, idx2=idx2, couplings=couplings,
                          cross_costs=crosses, repair_magnitudes=repairs,
                          fast=fast)


def correspondence_basepoints(flow: FiniteMetricFlow,
                              mu1: ConjugateHeatFlowDiscrete,
                              mu2: ConjugateHeatFlowDiscrete,
                              eval_times: np.ndarray) -> Correspondence:
    """Identity correspondence comparing two conjugate heat flows on one flow."""
    idx, couplings = [], []
    for t in eval_times:
        i = flow.index_of(t)
        idx.append(i)
        z = flow.coords[i] if flow.coords else _line_embedding(flow.dists[i])
        if z is None:
            _, plan = w1(flow.dists[i], mu1.mu(i), mu2.mu(i), return_coupling=True)
        else:
            _, plan = _w1_line(z, mu1.mu(i), mu2.mu(i), True)
        couplings.append(plan)
    m = len(idx)
    return Correspondence(eval_times=np.asarray(eval_times, dtype=float),
                          idx1=idx, idx2=list(idx), couplings=couplings,
                          cross_costs=[None] * m, repair_magnitudes=[0.0] * m)


@dataclass(frozen=True)
class TangentFlowReport:
    lambdas: list[float]
    values: list[float]
    rho: float
    rho_products: list[float]
    window: tuple[float, float]
    decays_below: dict


def tangent_flow_experiment(flow: FiniteMetricFlow, x0: tuple[float, int],
                            y0: tuple[float, int], lambdas: list[float],
                            T: float, *, eval_count: int = 17,
                            thresholds: tuple[float, ...] = (0.05, 0.02)
                            ) -> TangentFlowReport:
    """Distance bound between the two based rescaled flow pairs per lambda.

    Each lambda compares (rescaled flow, kernel at x0) against (same flow,
    kernel at y0) over the window [-T, 0] of the rescaled time axis.  The
    base points need not share a time slice.  rho is the parabolic reach that
    guarantees the base points see each other, assembled from an H-center of
    the later base point at the earlier slice.
    """
    t_x, p_x = x0
    t_y, p_y = y0
    if t_y > t_x:
        (t_x, p_x), (t_y, p_y) = (t_y, p_y), (t_x, p_x)
    i_x = flow.index_of(t_x)
    i_y = flow.index_of(t_y)
    mu_x = ConjugateHeatFlowDiscrete.from_top(
        flow, np.eye(flow.points(i_x))[p_x], i_x)
    mu_y = ConjugateHeatFlowDiscrete.from_top(
        flow, np.eye(flow.points(i_y))[p_y], i_y)

    # parabolic reach: dist(y0, z0) + sqrt(H dt) + sqrt(dt), z0 an H-center of x0
    dt_xy = t_x - t_y
    if dt_xy > 0:
        nu_at_y = flow.kernel(i_x, i_y)[p_x]
        var_to_pts = (flow.dists[i_y] ** 2) @ nu_at_y
        z0 = int(np.argmin(var_to_pts))
        rho = (flow.dists[i_y][p_y, z0] + math.sqrt(flow.H * dt_xy)
               + math.sqrt(dt_xy)) * 1.0001
    else:
        rho = flow.dists[i_x][p_x, p_y] * 1.0001 + 1e-9

    values = []
    for lam in lambdas:
        scaled = rescale(flow, lam, t0=t_x)
        lo = max(-T, float(scaled.times[0]))
        hi = float(scaled.times[min(i_y, scaled.size - 1)])
        hi = min(hi, 0.0 if hi > 0 else hi)
        grid = np.linspace(lo, hi, eval_count)
        eval_times = np.unique([scaled.times[scaled.nearest_index(t)] for t in grid])
        mu_x_s = ConjugateHeatFlowDiscrete(flow=scaled, top_index=mu_x.top_index,
                                           mus=mu_x.mus)
        mu_y_s = ConjugateHeatFlowDiscrete(flow=scaled, top_index=mu_y.top_index,
                                           mus=mu_y.mus)
        corr = correspondence_basepoints(scaled, mu_x_s, mu_y_s, eval_times)
        rep = f_distance_upper(scaled, mu_x_s, scaled, mu_y_s, corr)
        values.append(rep.value)
    decays = {eps: next((lam for lam, v in zip(lambdas, values) if v < eps), None)
              for eps in thresholds}
    return TangentFlowReport(lambdas=list(lambdas), values=values, rho=rho,
                             rho_products=[lam * rho for lam in lambdas],
                             window=(-T, 0.0), decays_below=decays)
