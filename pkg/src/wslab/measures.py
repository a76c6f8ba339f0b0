"""Probability measures on uniform grids and point clouds, with exact 1D transport.

Measures store cell *masses* (not density samples) so that the conservative
flow solvers preserve total mass exactly.  Quantile functions interpolate
linearly inside cells (piecewise-constant density), which makes the 1D
Wasserstein distances exact for the represented measure: the only error left
when comparing against a continuum target is the projection of that target
onto the grid.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

__all__ = [
    "GridMeasure1D",
    "GridMeasure2D",
    "PointCloud",
    "DegenerateInputError",
    "SupportSizeError",
    "gaussian_grid",
    "uniform_grid",
    "semicircle_grid",
    "grid_from_density",
    "point_mass_grid",
    "mixture",
    "quantile",
    "w2_1d",
    "w1_1d",
    "w2_discrete",
    "project_to_sphere",
    "tilt_to_moments",
]

MASS_TOL = 1e-12


class DegenerateInputError(ValueError):
    """Raised when an operation receives a measure it cannot act on (e.g. zero variance)."""


class SupportSizeError(ValueError):
    """Raised when a discrete-OT instance exceeds the exact-solver size cap."""


def _check_mass(mass: np.ndarray, what: str) -> None:
    if np.any(mass < 0):
        worst = float(mass.min())
        raise ValueError(f"{what}: negative mass entry {worst:g}")
    total = float(mass.sum())
    if abs(total - 1.0) > MASS_TOL:
        raise ValueError(f"{what}: total mass {total!r} not 1 within {MASS_TOL:g}")
    if not np.all(np.isfinite(mass)):
        raise ValueError(f"{what}: non-finite mass entry")


@dataclass(frozen=True)
class GridMeasure1D:
    """Probability measure with piecewise-constant density on a uniform 1D grid.

    ``mass[i]`` is the probability of the cell ``[x_min + i*dx, x_min + (i+1)*dx)``.
    """

    x_min: float
    dx: float
    mass: np.ndarray

    def __post_init__(self):
        if not (self.dx > 0):
            raise ValueError(f"dx must be positive, got {self.dx}")
        m = np.asarray(self.mass, dtype=float)
        _check_mass(m, "GridMeasure1D")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "mass", m)

    @property
    def n_cells(self) -> int:
        return self.mass.shape[0]

    @property
    def centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.n_cells) + 0.5) * self.dx

    @property
    def edges(self) -> np.ndarray:
        return self.x_min + np.arange(self.n_cells + 1) * self.dx

    @property
    def density(self) -> np.ndarray:
        return self.mass / self.dx

    def cdf_at_edges(self) -> np.ndarray:
        c = np.concatenate(([0.0], np.cumsum(self.mass)))
        c[-1] = 1.0
        return c

    def mean(self) -> float:
        return float(self.mass @ self.centers)

    def second_moment(self) -> float:
        # Cell-center quadrature; all moment constraints in the package use this
        # convention, so sphere projections are exact at the discrete level.
        x = self.centers
        return float(self.mass @ (x * x))

    def variance(self) -> float:
        return self.second_moment() - self.mean() ** 2

    def expect(self, f) -> float:
        """Cell-center quadrature of ``f`` (exact for degree-1 polynomials)."""
        return float(self.mass @ f(self.centers))

    def to_point_cloud(self) -> "PointCloud":
        keep = self.mass > 0
        pts = self.centers[keep].reshape(-1, 1)
        w = self.mass[keep] / self.mass[keep].sum()
        return PointCloud(dim=1, points=pts, weights=w)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("x,mass\n")
        for x, m in zip(self.centers, self.mass):
            buf.write(f"{x:.17g},{m:.17g}\n")
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "GridMeasure1D":
        lines = [ln for ln in text.strip().splitlines()]
        if not lines or lines[0].strip() != "x,mass":
            raise ValueError("line 1: expected header 'x,mass'")
        xs, ms = [], []
        for j, ln in enumerate(lines[1:], start=2):
            parts = ln.split(",")
            if len(parts) != 2:
                raise ValueError(f"line {j}: expected two comma-separated fields")
            try:
                xs.append(float(parts[0]))
                ms.append(float(parts[1]))
            except ValueError as e:
                raise ValueError(f"line {j}: {e}") from None
        x = np.asarray(xs)
        if len(x) < 1:
            raise ValueError("line 2: no data rows")
        if len(x) == 1:
            dx = 1.0
        else:
            steps = np.diff(x)
            dx = float(steps[0])
            if np.any(np.abs(steps - dx) > 1e-9 * max(1.0, abs(dx))):
                raise ValueError("line 3: grid spacing is not uniform")
        return GridMeasure1D(x_min=float(x[0]) - dx / 2.0, dx=dx, mass=np.asarray(ms))


@dataclass(frozen=True)
class GridMeasure2D:
    """Probability measure with cell masses on a uniform 2D grid (couplings live here)."""

    x_min: float
    dx: float
    y_min: float
    dy: float
    mass: np.ndarray  # shape (nx, ny)

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0):
            raise ValueError("cell sizes must be positive")
        m = np.asarray(self.mass, dtype=float)
        if m.ndim != 2:
            raise ValueError("GridMeasure2D mass must be 2D")
        _check_mass(m.ravel(), "GridMeasure2D")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "mass", m)

    @property
    def shape(self):
        return self.mass.shape

    @property
    def x_centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.mass.shape[0]) + 0.5) * self.dx

    @property
    def y_centers(self) -> np.ndarray:
        return self.y_min + (np.arange(self.mass.shape[1]) + 0.5) * self.dy

    def marginal_x(self) -> GridMeasure1D:
        return GridMeasure1D(self.x_min, self.dx, self.mass.sum(axis=1))

    def marginal_y(self) -> GridMeasure1D:
        return GridMeasure1D(self.y_min, self.dy, self.mass.sum(axis=0))

    def cross_moment(self) -> float:
        return float(self.x_centers @ self.mass @ self.y_centers)


@dataclass(frozen=True)
class PointCloud:
    """Weighted point cloud in R^dim (empirical measures)."""

    dim: int
    points: np.ndarray  # shape (n, dim)
    weights: np.ndarray  # shape (n,)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, self.dim)
        w = np.asarray(self.weights, dtype=float)
        if not np.all(np.isfinite(pts)):
            raise ValueError("PointCloud: non-finite coordinate")
        _check_mass(w, "PointCloud weights")
        pts = pts.copy()
        w = w.copy()
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def second_moment(self) -> float:
        return float(self.weights @ np.sum(self.points**2, axis=1))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(f"x{k+1}" for k in range(self.dim)) + ",weight\n")
        for p, w in zip(self.points, self.weights):
            buf.write(",".join(f"{v:.17g}" for v in p) + f",{w:.17g}\n")
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "PointCloud":
        lines = text.strip().splitlines()
        if not lines:
            raise ValueError("line 1: empty file")
        header = lines[0].split(",")
        if header[-1] != "weight" or not all(
            h == f"x{k+1}" for k, h in enumerate(header[:-1])
        ):
            raise ValueError("line 1: expected header 'x1,...,xd,weight'")
        dim = len(header) - 1
        pts, ws = [], []
        for j, ln in enumerate(lines[1:], start=2):
            parts = ln.split(",")
            if len(parts) != dim + 1:
                raise ValueError(f"line {j}: expected {dim + 1} fields")
            try:
                vals = [float(v) for v in parts]
            except ValueError as e:
                raise ValueError(f"line {j}: {e}") from None
            pts.append(vals[:-1])
            ws.append(vals[-1])
        return PointCloud(dim=dim, points=np.asarray(pts), weights=np.asarray(ws))


# ---------------------------------------------------------------------------
# Constructors
# ---------------------------------------------------------------------------


def gaussian_grid(mean: float, var: float, x_min: float, dx: float, n: int) -> GridMeasure1D:
    """Grid projection of N(mean, var): exact cell masses, renormalized."""
    if var <= 0:
        raise ValueError("var must be positive")
    edges = x_min + np.arange(n + 1) * dx
    z = (edges - mean) / math.sqrt(var)
    cdf = special.ndtr(z)
    mass = np.diff(cdf)
    mass = np.maximum(mass, 0.0)
    return GridMeasure1D(x_min, dx, mass / mass.sum())


def uniform_grid(a: float, b: float, x_min: float, dx: float, n: int) -> GridMeasure1D:
    """Grid projection of the uniform law on [a, b]."""
    if not b > a:
        raise ValueError("need b > a")
    edges = x_min + np.arange(n + 1) * dx
    cdf = np.clip((edges - a) / (b - a), 0.0, 1.0)
    mass = np.diff(cdf)
    return GridMeasure1D(x_min, dx, mass / mass.sum())


def _semicircle_cdf(x: np.ndarray) -> np.ndarray:
    xc = np.clip(x, -2.0, 2.0)
    return 0.5 + xc * np.sqrt(4.0 - xc * xc) / (4.0 * np.pi) + np.arcsin(xc / 2.0) / np.pi


def semicircle_grid(x_min: float, dx: float, n: int) -> GridMeasure1D:
    """Grid projection of the semicircle law (radius 2, unit variance)."""
    edges = x_min + np.arange(n + 1) * dx
    mass = np.diff(_semicircle_cdf(edges))
    mass = np.maximum(mass, 0.0)
    total = mass.sum()
    if total <= 0:
        raise ValueError("grid does not intersect [-2, 2]")
    return GridMeasure1D(x_min, dx, mass / total)


_GL5_NODES, _GL5_WEIGHTS = np.polynomial.legendre.leggauss(5)


def grid_from_density(f, x_min: float, dx: float, n: int) -> GridMeasure1D:
    """Project a density callable onto the grid by per-cell Gauss-Legendre(5)."""
    centers = x_min + (np.arange(n) + 0.5) * dx
    pts = centers[:, None] + 0.5 * dx * _GL5_NODES[None, :]
    vals = np.maximum(f(pts), 0.0)
    mass = 0.5 * dx * vals @ _GL5_WEIGHTS
    total = mass.sum()
    if total <= 0:
        raise ValueError("density integrates to zero on the grid")
    return GridMeasure1D(x_min, dx, mass / total)


def point_mass_grid(x0: float, dx: float, n: int) -> GridMeasure1D:
    """All mass in the single cell whose center is closest to x0; grid centered near x0."""
    x_min = x0 - (n / 2.0) * dx
    centers = x_min + (np.arange(n) + 0.5) * dx
    mass = np.zeros(n)
    mass[int(np.argmin(np.abs(centers - x0)))] = 1.0
    return GridMeasure1D(x_min, dx, mass)


def mixture(components, weights) -> GridMeasure1D:
    """Finite mixture of grid measures sharing one grid."""
    weights = np.asarray(weights, dtype=float)
    g0 = components[0]
    mass = np.zeros(g0.n_cells)
    for g, w in zip(components, weights):
        if (g.x_min, g.dx, g.n_cells) != (g0.x_min, g0.dx, g0.n_cells):
            raise ValueError("mixture components must share a grid")
        mass += w * g.mass
    return GridMeasure1D(g0.x_min, g0.dx, mass / mass.sum())


# ---------------------------------------------------------------------------
# Quantiles and exact 1D distances
# ---------------------------------------------------------------------------


def quantile(mu: GridMeasure1D, p) -> float | np.ndarray:
    """Generalized inverse CDF with linear interpolation inside cells.

    Non-decreasing in p; at CDF plateaus (empty cells) returns the left end.
    """
    p_arr = np.asarray(p, dtype=float)
    if np.any((p_arr < 0) | (p_arr > 1)):
        raise ValueError("quantile level p must lie in [0, 1]")
    c = mu.cdf_at_edges()
    edges = mu.edges
    # First cell whose right-edge CDF reaches p (left-continuous inverse).
    hi = np.searchsorted(c[1:], p_arr, side="left")
    hi = np.clip(hi, 0, mu.n_cells - 1)
    m = mu.mass[hi]
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(m > 0, (p_arr - c[hi]) / np.where(m > 0, m, 1.0), 0.0)
    frac = np.clip(frac, 0.0, 1.0)
    q = edges[hi] + frac * mu.dx
    return float(q) if np.isscalar(p) else q


def _merged_levels(mu: GridMeasure1D, nu: GridMeasure1D) -> np.ndarray:
    c = np.union1d(mu.cdf_at_edges(), nu.cdf_at_edges())
    c = np.clip(c, 0.0, 1.0)
    return np.unique(c)


def w2_1d(mu: GridMeasure1D, nu: GridMeasure1D) -> float:
    """Exact quadratic Wasserstein distance between two grid measures.

    Uses the quantile coupling: W2^2 = int_0^1 (Q_mu - Q_nu)^2 dp, computed
    exactly on the merged quantile partition where both quantile functions are
    linear in p.
    """
    levels = _merged_levels(mu, nu)
    lo, hi = levels[:-1], levels[1:]
    width = hi - lo
    keep = width > 0
    lo, hi, width = lo[keep], hi[keep], width[keep]
    mid = 0.5 * (lo + hi)
    # Evaluate each quantile on the open interval via its midpoint cell.
    da = _quantile_on_intervals(mu, lo, hi, mid)
    db = _quantile_on_intervals(nu, lo, hi, mid)
    d_lo = da[0] - db[0]
    d_hi = da[1] - db[1]
    # integral of a linear function squared over each interval
    val = np.sum(width * (d_lo * d_lo + d_lo * d_hi + d_hi * d_hi) / 3.0)
    return math.sqrt(max(val, 0.0))


def _quantile_on_intervals(mu, lo, hi, mid):
    """One-sided quantile values at interval ends, using the cell active on (lo, hi)."""
    c = mu.cdf_at_edges()
    idx = np.searchsorted(c, mid, side="right") - 1
    idx = np.clip(idx, 0, mu.n_cells - 1)
    m = mu.mass[idx]
    left = mu.edges[idx]
    safe = np.where(m > 0, m, 1.0)
    qlo = left + np.where(m > 0, (lo - c[idx]) / safe, 0.0) * mu.dx
    qhi = left + np.where(m > 0, (hi - c[idx]) / safe, 1.0) * mu.dx
    return np.clip(qlo, left, left + mu.dx), np.clip(qhi, left, left + mu.dx)


def w1_1d(mu: GridMeasure1D, nu: GridMeasure1D) -> float:
    """Exact W1 = int |F_mu - F_nu| dx over the union of both edge sets."""
    xs = np.union1d(mu.edges, nu.edges)
    fa = _cdf_at(mu, xs)
    fb = _cdf_at(nu, xs)
    d0 = fa[:-1] - fb[:-1]
    d1 = fa[1:] - fb[1:]
    w = np.diff(xs)
    same = d0 * d1 >= 0
    tri = np.abs(d0 + d1) / 2.0  # trapezoid when no sign change
    # sign change: two triangles, integral = (d0^2 + d1^2) / (2 |d0 - d1|)
    denom = np.where(np.abs(d0 - d1) > 0, np.abs(d0 - d1), 1.0)
    cross = (d0 * d0 + d1 * d1) / (2.0 * denom)
    return float(np.sum(w * np.where(same, tri, cross)))


def _cdf_at(mu: GridMeasure1D, xs: np.ndarray) -> np.ndarray:
    c = mu.cdf_at_edges()
    t = np.clip((xs - mu.x_min) / mu.dx, 0.0, mu.n_cells)
    i = np.clip(np.floor(t).astype(int), 0, mu.n_cells - 1)
    frac = t - i
    return np.clip(c[i] + frac * mu.mass[i], 0.0, 1.0)


def w2_discrete(mu: PointCloud, nu: PointCloud) -> float:
    """Exact W2 between point clouds via the transportation LP (HiGHS).

    Caps the joint support at 512 points; callers must subsample above that.
    """
    if mu.n + nu.n > 512:
        raise SupportSizeError(
            f"joint support {mu.n}+{nu.n} exceeds the 512-point exact-solver cap; subsample first"
        )
    if mu.dim != nu.dim:
        raise ValueError("dimension mismatch")
    diff = mu.points[:, None, :] - nu.points[None, :, :]
    cost = np.sum(diff * diff, axis=2)
    n, m = mu.n, nu.n
    # Transportation LP: row sums = mu.weights, col sums = nu.weights (drop one
    # redundant row to keep the equality system full-rank).
    a_rows = []
    b = []
    for i in range(n):
        row = np.zeros(n * m)
        row[i * m : (i + 1) * m] = 1.0
        a_rows.append(row)
        b.append(mu.weights[i])
    for j in range(m - 1):
        col = np.zeros(n * m)
        col[j::m] = 1.0
        a_rows.append(col)
        b.append(nu.weights[j])
    res = optimize.linprog(
        cost.ravel(),
        A_eq=np.asarray(a_rows),
        b_eq=np.asarray(b),
        bounds=(0, None),
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return math.sqrt(max(float(res.fun), 0.0))


# ---------------------------------------------------------------------------
# Sphere projections
# ---------------------------------------------------------------------------


def project_to_sphere(mu, u=0.0, theta: float = 1.0):
    """Affine map x -> u + s (x - m) sending mu onto the moment sphere.

    The image has mean u and centered second moment d*theta.  For grid
    measures the image lives on the affinely transformed grid, so the moment
    constraints hold to machine precision.
    """
    if theta <= 0:
        raise DegenerateInputError("theta must be positive (theta=0 spheres are point masses)")
    if isinstance(mu, GridMeasure1D):
        u = float(u)
        m = mu.mean()
        var = mu.variance()
        if var <= 0:
            raise DegenerateInputError("zero-variance measure cannot be projected")
        s = math.sqrt(theta / var)
        return GridMeasure1D(x_min=u + s * (mu.x_min - m), dx=s * mu.dx, mass=mu.mass)
    if isinstance(mu, PointCloud):
        u_vec = np.broadcast_to(np.atleast_1d(np.asarray(u, dtype=float)), (mu.dim,))
        m = mu.mean()
        centered = mu.points - m
        var = float(mu.weights @ np.sum(centered**2, axis=1))
        if var <= 0:
            raise DegenerateInputError("zero-variance cloud cannot be projected")
        s = math.sqrt(mu.dim * theta / var)
        return PointCloud(dim=mu.dim, points=u_vec + s * centered, weights=mu.weights)
    raise TypeError(f"unsupported measure type {type(mu)!r}")


def tilt_to_moments(mu: GridMeasure1D, targets, max_iter: int = 80, tol: float = 1e-12) -> GridMeasure1D:
    """Exponential tilting m_i -> m_i * exp(sum_k a_k f_k(x_i)) matching grid moments.

    ``targets`` is a list of (f, c) pairs with callables f; solves for the tilt
    coefficients by Newton's method so that sum_i f_k(x_i) m'_i = c_k.  Keeps
    the measure on its grid and strictly positive where it was positive, which
    is what the inequality experiments need (same-grid sphere samples).
    """
    x = mu.centers
    fs = np.stack([np.asarray(f(x), dtype=float) for f, _ in targets])
    cs = np.asarray([c for _, c in targets], dtype=float)
    a = np.zeros(len(targets))
    log_m = np.where(mu.mass > 0, np.log(np.where(mu.mass > 0, mu.mass, 1.0)), -np.inf)
    for _ in range(max_iter):
        logits = log_m + a @ fs
        logits -= logits.max()
        w = np.exp(logits)
        w /= w.sum()
        moments = fs @ w
        r = moments - cs
        if np.max(np.abs(r)) < tol:
            break
        centered = fs - moments[:, None]
        cov = (centered * w) @ centered.T
        try:
            step = np.linalg.solve(cov, r)
        except np.linalg.LinAlgError:
            raise DegenerateInputError("tilting failed: singular moment covariance") from None
        a -= step
    else:
        raise DegenerateInputError("tilting did not converge; targets may be unreachable")
    return GridMeasure1D(mu.x_min, mu.dx, w)
