"""Geometry ansatze: rotationally symmetric warped metrics and homogeneous products.

A warped metric on S^n is stored as two grid profiles over a fixed coordinate
x in [0, 1]:

    g = u(x)^2 dx^2 + phi(x)^2 g_{S^{n-1}},

with arclength s(x) = integral of u.  Smooth closure at the poles corresponds
to phi(0) = phi(1) = 0 and |dphi/ds| = 1 there; numerically phi is extended
antisymmetrically and u symmetrically across the poles, which encodes both
conditions without one-sided stencils.

Homogeneous metrics are finite products of round spheres and flat tori; all
their curvature quantities are closed-form.

Derivatives use 4th-order centered stencils.  This is not a luxury: the
spherical sectional curvature (1 - phi_s^2)/phi^2 loses two orders to
cancellation at the first interior points, so 2nd-order differencing would
not converge there in max norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateMetricError,
    NumericError,
    ShapeMismatchError,
    ValidationError,
)

FORMAT_VERSION = 1


def unit_sphere_area(m: int) -> float:
    """Surface measure of the unit sphere S^m inside R^{m+1}."""
    return 2.0 * math.pi ** ((m + 1) / 2.0) / math.gamma((m + 1) / 2.0)


# ---------------------------------------------------------------------------
# finite differences with parity ghosts
# ---------------------------------------------------------------------------

def _extend(f: np.ndarray, parity_left: str, parity_right: str) -> np.ndarray:
    """Extend a grid function by two ghost nodes per side.

    "even" reflects values, "odd" point-reflects through the boundary value,
    so an exactly odd profile (phi with phi=0 at the pole) extends exactly.
    """
    n = f.shape[0]
    ext = np.empty(n + 4, dtype=float)
    ext[2:-2] = f
    if parity_left == "even":
        ext[0], ext[1] = f[2], f[1]
    elif parity_left == "odd":
        ext[0], ext[1] = 2.0 * f[0] - f[2], 2.0 * f[0] - f[1]
    else:
        raise ValidationError(f"unknown parity {parity_left!r}")
    if parity_right == "even":
        ext[-1], ext[-2] = f[-3], f[-2]
    elif parity_right == "odd":
        ext[-1], ext[-2] = 2.0 * f[-1] - f[-3], 2.0 * f[-1] - f[-2]
    else:
        raise ValidationError(f"unknown parity {parity_right!r}")
    return ext


def ddx(f: np.ndarray, h: float, parity: str) -> np.ndarray:
    """4th-order first derivative in x with parity extension at both ends."""
    e = _extend(f, parity, parity)
    return (-e[4:] + 8.0 * e[3:-1] - 8.0 * e[1:-3] + e[:-4]) / (12.0 * h)

def d2dx(f: np.ndarray, h: float, parity: str) -> np.ndarray:
    """4th-order second derivative in x with parity extension at both ends."""
    e = _extend(f, parity, parity)
    return (-e[4:] + 16.0 * e[3:-1] - 30.0 * e[2:-2]
            + 16.0 * e[1:-3] - e[:-4]) / (12.0 * h * h)


def _pole_extrapolate(values: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Fill the two pole entries of an even profile by quadratic extrapolation.

    An even function of arclength about the pole satisfies K(s) = K0 + c s^2;
    the two nearest interior samples determine K0.
    """
    out = values.copy()
    s1, s2 = s[1] - s[0], s[2] - s[0]
    out[0] = (values[1] * s2 ** 2 - values[2] * s1 ** 2) / (s2 ** 2 - s1 ** 2)
    t1, t2 = s[-1] - s[-2], s[-1] - s[-3]
    out[-1] = (values[-2] * t2 ** 2 - values[-3] * t1 ** 2) / (t2 ** 2 - t1 ** 2)
    return out


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WarpedMetric:
    """Rotationally symmetric metric u^2 dx^2 + phi^2 g_{S^{n-1}} on S^n."""

    n: int
    u: np.ndarray
    phi: np.ndarray
    pole_slope_tol: float = 0.02

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        phi = np.asarray(self.phi, dtype=float)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "phi", phi)
        self.validate()

    @property
    def grid_size(self) -> int:
        return self.u.shape[0] - 1

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.u.shape[0])

    @property
    def dx(self) -> float:
        return 1.0 / self.grid_size

    def validate(self) -> None:
        if self.n < 2:
            raise ValidationError("warped ansatz needs dimension n >= 2")
        if self.u.shape != self.phi.shape or self.u.ndim != 1 or self.u.size < 9:
            raise ValidationError("u and phi must be equal-length 1-d profiles, >= 9 nodes")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.phi))):
            raise NumericError("non-finite values in metric profiles")
        if np.any(self.u <= 0.0):
            raise DegenerateMetricError("radial density u must be positive")
        if abs(self.phi[0]) > 1e-12 * self.scale or abs(self.phi[-1]) > 1e-12 * self.scale:
            raise DegenerateMetricError("phi must vanish at both poles")
        if np.any(self.phi[1:-1] <= 0.0):
            raise DegenerateMetricError("phi must be positive in the interior")
        slopes = self.pole_slopes()
        if max(abs(abs(slopes[0]) - 1.0), abs(abs(slopes[1]) - 1.0)) > self.pole_slope_tol:
            raise DegenerateMetricError(
                f"pole slopes |dphi/ds| = {slopes} differ from 1 beyond tolerance")

    @property
    def scale(self) -> float:
        return float(max(np.max(self.u), np.max(np.abs(self.phi)), 1e-300))

    def pole_slopes(self) -> tuple[float, float]:
        phi_s = ddx(self.phi, self.dx, "odd") / self.u
        return float(phi_s[0]), float(phi_s[-1])

    def arclength(self) -> np.ndarray:
        """Arclength coordinate s(x) from the x=0 pole (trapezoid of u)."""
        s = np.zeros_like(self.u)
        s[1:] = np.cumsum(0.5 * (self.u[1:] + self.u[:-1]) * self.dx)
        return s

    def total_length(self) -> float:
        return float(self.arclength()[-1])

    def scaled(self, length_factor: float) -> "WarpedMetric":
        """Metric scaled so lengths multiply by length_factor (g -> factor^2 g)."""
        if length_factor <= 0:
            raise ValidationError("length factor must be positive")
        return replace(self, u=self.u * length_factor, phi=self.phi * length_factor)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_VERSION,
            "kind": "warped",
            "n": self.n,
            "grid_size": self.grid_size,
            "u": self.u.tolist(),
            "phi": self.phi.tolist(),
        }


@dataclass(frozen=True)
class Factor:
    """One factor of a homogeneous product: a round sphere or a flat torus."""

    kind: str          # "round-sphere" | "flat-torus"
    dim: int
    scale: float       # sphere radius or torus side, in length units

    def __post_init__(self):
        if self.kind not in ("round-sphere", "flat-torus"):
            raise ValidationError(f"unknown factor kind {self.kind!r}")
        if self.dim < 1 or self.scale <= 0:
            raise ValidationError("factor needs dim >= 1 and positive scale")
        if self.kind == "round-sphere" and self.dim < 2:
            raise ValidationError("round factors need dim >= 2 for nontrivial curvature")

    def volume(self) -> float:
        if self.kind == "round-sphere":
            return unit_sphere_area(self.dim) * self.scale ** self.dim
        return self.scale ** self.dim

    def diameter(self) -> float:
        if self.kind == "round-sphere":
            return math.pi * self.scale
        return 0.5 * self.scale * math.sqrt(self.dim)


@dataclass(frozen=True)
class HomogeneousMetric:
    """Product of round spheres and flat tori with closed-form geometry."""

    factors: tuple[Factor, ...]

    def __post_init__(self):
        if not self.factors:
            raise ValidationError("homogeneous metric needs at least one factor")
        object.__setattr__(self, "factors", tuple(self.factors))

    @property
    def n(self) -> int:
        return sum(f.dim for f in self.factors)

    def scaled(self, length_factor: float) -> "HomogeneousMetric":
        if length_factor <= 0:
            raise ValidationError("length factor must be positive")
        return HomogeneousMetric(tuple(
            replace(f, scale=f.scale * length_factor) for f in self.factors))

    def volume(self) -> float:
        return float(np.prod([f.volume() for f in self.factors]))

    def diameter(self) -> float:
        return math.sqrt(sum(f.diameter() ** 2 for f in self.factors))

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_VERSION,
            "kind": "homogeneous",
            "factors": [
                {"kind": f.kind, "dim": f.dim, "scale": f.scale} for f in self.factors
            ],
        }


Metric = WarpedMetric | HomogeneousMetric


def metric_from_dict(doc: dict) -> Metric:
    from .errors import FormatVersionError

    if doc.get("format") != FORMAT_VERSION:
        raise FormatVersionError(
            f"unsupported metric format {doc.get('format')!r}, expected {FORMAT_VERSION}")
    if doc["kind"] == "warped":
        g = WarpedMetric(n=int(doc["n"]),
                         u=np.asarray(doc["u"], dtype=float),
                         phi=np.asarray(doc["phi"], dtype=float))
        if g.grid_size != int(doc["grid_size"]):
            raise ValidationError("grid_size disagrees with profile length")
        return g
    if doc["kind"] == "homogeneous":
        return HomogeneousMetric(tuple(
            Factor(f["kind"], int(f["dim"]), float(f["scale"])) for f in doc["factors"]))
    raise ValidationError(f"unknown metric kind {doc['kind']!r}")


@dataclass(frozen=True)
class CurvatureProfile:
    """Pointwise curvature of a warped metric.

    ric_rad/ric_sph are the Ricci eigenvalues in the radial and spherical
    directions; k_rad/k_sph the corresponding sectional curvatures, kept
    because the flow right-hand side is assembled from them.
    """

    R: np.ndarray
    ric_rad: np.ndarray
    ric_sph: np.ndarray
    rm_norm: np.ndarray
    max_rm: float
    k_rad: np.ndarray = field(repr=False, default=None)
    k_sph: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class HomogeneousCurvature:
    """Per-factor Ricci eigenvalues and scalar invariants of a product metric."""

    ric_factors: np.ndarray
    R: float
    rm_norm: float

    @property
    def max_rm(self) -> float:
        return self.rm_norm


@dataclass(frozen=True)
class DiscreteNorm:
    """Value of the discrete C^k proxy distance between two same-grid metrics."""

    order: int
    value: float


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def curvature(g: WarpedMetric) -> CurvatureProfile:
    """Scalar/Ricci/Riemann curvature of a warped metric by finite differences.

    Interior sectional curvatures are K_rad = -phi_ss/phi and
    K_sph = (1 - phi_s^2)/phi^2; pole values are filled by even quadratic
    extrapolation in arclength.  All reported quantities are assembled from
    (K_rad, K_sph), so the trace identity R = ric_rad + (n-1) ric_sph holds
    by construction.
    """
    n, h = g.n, g.dx
    u, phi = g.u, g.phi
    u_x = ddx(u, h, "even")
    phi_x = ddx(phi, h, "odd")
    phi_xx = d2dx(phi, h, "odd")
    phi_s = phi_x / u
    phi_ss = (phi_xx * u - phi_x * u_x) / u ** 3

    k_rad = np.zeros_like(phi)
    k_sph = np.zeros_like(phi)
    inner = slice(1, -1)
    k_rad[inner] = -phi_ss[inner] / phi[inner]
    k_sph[inner] = (1.0 - phi_s[inner] ** 2) / phi[inner] ** 2
    s = g.arclength()
    k_rad = _pole_extrapolate(k_rad, s)
    k_sph = _pole_extrapolate(k_sph, s)

    ric_rad = (n - 1) * k_rad
    ric_sph = k_rad + (n - 2) * k_sph
    R = 2.0 * (n - 1) * k_rad + (n - 1) * (n - 2) * k_sph
    rm_norm = np.sqrt(4.0 * (n - 1) * k_rad ** 2 + 2.0 * (n - 1) * (n - 2) * k_sph ** 2)
    if not np.all(np.isfinite(rm_norm)):
        raise NumericError("curvature produced non-finite values")
    return CurvatureProfile(R=R, ric_rad=ric_rad, ric_sph=ric_sph, rm_norm=rm_norm,
                            max_rm=float(np.max(rm_norm)), k_rad=k_rad, k_sph=k_sph)


def curvature_hom(g: HomogeneousMetric) -> HomogeneousCurvature:
    """Closed-form curvature of a product of round spheres and flat tori."""
    ric = np.array([
        (f.dim - 1) / f.scale ** 2 if f.kind == "round-sphere" else 0.0
        for f in g.factors
    ])
    R = float(sum(f.dim * r for f, r in zip(g.factors, ric)))
    rm_sq = sum(
        2.0 * f.dim * (f.dim - 1) * (1.0 / f.scale ** 2) ** 2
        for f in g.factors if f.kind == "round-sphere"
    )
    return HomogeneousCurvature(ric_factors=ric, R=R, rm_norm=math.sqrt(rm_sq))


def volume_measure(g: Metric) -> tuple[float, np.ndarray]:
    """Total volume and per-cell quadrature weights.

    Warped: trapezoid weights omega_{n-1} phi^{n-1} u dx.  Homogeneous: the
    measure is a single cell carrying the product volume.
    """
    if isinstance(g, HomogeneousMetric):
        total = g.volume()
        return total, np.array([total])
    w = unit_sphere_area(g.n - 1) * g.phi ** (g.n - 1) * g.u * g.dx
    w[0] *= 0.5
    w[-1] *= 0.5
    return float(np.sum(w)), w


def metric_distance(g1: Metric, g2: Metric, order: int = 2) -> DiscreteNorm:
    """Discrete C^order proxy distance, measured against the reference g2.

    Sup over the grid of profile differences and their arclength derivatives
    up to `order`; derivatives are taken in the arclength of g2.  This is the
    norm in which the convergence-rate experiments are measured.
    """
    if order not in (0, 1, 2):
        raise ValidationError("order must be 0, 1, or 2")
    if isinstance(g1, HomogeneousMetric) or isinstance(g2, HomogeneousMetric):
        if not (isinstance(g1, HomogeneousMetric) and isinstance(g2, HomogeneousMetric)):
            raise ShapeMismatchError("cannot mix warped and homogeneous metrics")
        if len(g1.factors) != len(g2.factors) or any(
                a.kind != b.kind or a.dim != b.dim
                for a, b in zip(g1.factors, g2.factors)):
            raise ShapeMismatchError("factor structures differ")
        value = max(abs(a.scale - b.scale) for a, b in zip(g1.factors, g2.factors))
        return DiscreteNorm(order=order, value=float(value))

    if g1.n != g2.n or g1.u.shape != g2.u.shape:
        raise ShapeMismatchError("metrics live on different grids")
    h = g2.dx
    u2, u2_x = g2.u, ddx(g2.u, h, "even")
    value = 0.0
    for diff, parity in ((g1.u - g2.u, "even"), (g1.phi - g2.phi, "odd")):
        value = max(value, float(np.max(np.abs(diff))))
        if order >= 1:
            d_x = ddx(diff, h, parity)
            value = max(value, float(np.max(np.abs(d_x / u2))))
        if order >= 2:
            d_xx = d2dx(diff, h, parity)
            d_ss = (d_xx * u2 - d_x * u2_x) / u2 ** 3
            value = max(value, float(np.max(np.abs(d_ss))))
    return DiscreteNorm(order=order, value=value)


# ---------------------------------------------------------------------------
# factories
# ---------------------------------------------------------------------------

def round_sphere(n: int, radius: float, grid_size: int = 128) -> WarpedMetric:
    """Round S^n of the given radius in arclength-proportional coordinates."""
    x = np.linspace(0.0, 1.0, grid_size + 1)
    phi = radius * np.sin(math.pi * x)
    phi[0] = phi[-1] = 0.0
    u = np.full_like(x, math.pi * radius)
    return WarpedMetric(n=n, u=u, phi=phi)


def normalized_sphere(n: int, grid_size: int = 128) -> WarpedMetric:
    """Round S^n normalized as a shrinker at scale 1 (radius^2 = 2(n-1))."""
    return round_sphere(n, math.sqrt(2.0 * (n - 1)), grid_size)


def perturbed_sphere(n: int, radius: float, grid_size: int = 128,
                     shape_amp: float = 0.0, scale_factor: float = 1.0,
                     mode: int = 2) -> WarpedMetric:
    """Round sphere with an optional shape perturbation and overall rescaling.

    The shape term is windowed by sin^2(pi x) so the pole conditions are
    untouched to leading order.
    """
    x = np.linspace(0.0, 1.0, grid_size + 1)
    bump = 1.0 + shape_amp * np.cos(mode * math.pi * x) * np.sin(math.pi * x) ** 2
    phi = radius * np.sin(math.pi * x) * bump
    phi[0] = phi[-1] = 0.0
    u = np.full_like(x, math.pi * radius)
    g = WarpedMetric(n=n, u=u, phi=phi)
    return g.scaled(scale_factor) if scale_factor != 1.0 else g


def dumbbell(n: int, grid_size: int = 256, neck_depth: float = 0.8,
             neck_width: float = 0.12) -> WarpedMetric:
    """Two-bump profile with a thin neck; the standard pinching initial datum."""
    x = np.linspace(0.0, 1.0, grid_size + 1)
    bump = 1.0 - neck_depth * np.exp(-((x - 0.5) / neck_width) ** 2)
    phi = np.sin(math.pi * x) * bump
    phi[0] = phi[-1] = 0.0
    slope0 = math.pi * (1.0 - neck_depth * math.exp(-0.25 / neck_width ** 2))
    u = np.full_like(x, slope0)
    return WarpedMetric(n=n, u=u, phi=phi, pole_slope_tol=0.05)


def product_spheres(dims_scales: list[tuple[int, float]]) -> HomogeneousMetric:
    return HomogeneousMetric(tuple(Factor("round-sphere", p, a) for p, a in dims_scales))


def flat_torus(dim: int, side: float = 1.0) -> HomogeneousMetric:
    return HomogeneousMetric((Factor("flat-torus", dim, side),))


def sphere_hom(n: int, radius: float) -> HomogeneousMetric:
    return HomogeneousMetric((Factor("round-sphere", n, radius),))
