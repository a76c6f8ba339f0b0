"""Monte Carlo probes of the large-deviation tail bounds: sphere block
sampling, centered empirical measures, exact W1 statistics against reference
laws, and the fixed-trace random-matrix experiment.

Reproducibility: every replicate draws from its own counter-based stream
keyed by (seed << 64) | replicate_index, so parallel and serial evaluation
orders produce bit-identical results.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .functionals import alpha
from .measures import PointCloud

__all__ = [
    "TailEstimate",
    "PiecewiseLinear",
    "sample_sphere_blocks",
    "center",
    "tail_estimate",
    "lipschitz_tail",
    "gue_fixed_trace",
    "gue_tail_probe",
    "w1_empirical_vs_gaussian",
    "w1_empirical_vs_semicircle",
    "estimates_to_jsonl",
    "estimates_to_csv",
]

DEFAULT_SLACK = 0.05  # per-unit-n slack absorbing finite-n effects in asymptotic bounds
CONF_LEVEL = 0.99


@dataclass
class TailEstimate:
    """Monte Carlo tail record for one (n, r) pair."""

    n: int
    r: float
    replicates: int
    hits: int
    bound: float  # exp(-n * alpha(r^2)) (or the conjectural analogue)
    seed: int
    statistic: str
    slack: float = DEFAULT_SLACK
    status: str = "checked"  # "checked" or "report-only"
    metadata: dict = field(default_factory=dict)

    @property
    def p_hat(self) -> float:
        return self.hits / self.replicates

    @property
    def ci(self) -> tuple[float, float]:
        """Clopper-Pearson interval at the module confidence level."""
        a = 1.0 - CONF_LEVEL
        lo = 0.0 if self.hits == 0 else float(
            stats.beta.ppf(a / 2, self.hits, self.replicates - self.hits + 1)
        )
        hi = 1.0 if self.hits == self.replicates else float(
            stats.beta.ppf(1 - a / 2, self.hits + 1, self.replicates - self.hits)
        )
        return lo, hi

    @property
    def passed(self) -> bool:
        if self.status == "report-only":
            return True
        _, hi = self.ci
        return hi <= self.bound * math.exp(self.n * self.slack)

    def log_ratio_per_n(self) -> float:
        """(1/n) log(p_hat / bound); <= slack certifies the tail inequality."""
        if self.hits == 0:
            return -math.inf
        return (math.log(self.p_hat) - math.log(self.bound)) / self.n

    def to_dict(self) -> dict:
        lo, hi = self.ci
        return {
            "n": self.n,
            "r": self.r,
            "replicates": self.replicates,
            "hits": self.hits,
            "p_hat": self.p_hat,
            "ci_lo": lo,
            "ci_hi": hi,
            "bound": self.bound,
            "slack": self.slack,
            "seed": self.seed,
            "statistic": self.statistic,
            "status": self.status,
            "pass": bool(self.passed),
            "metadata": self.metadata,
        }


def estimates_to_jsonl(estimates) -> str:
    return "\n".join(json.dumps(e.to_dict(), sort_keys=True) for e in estimates) + "\n"


def estimates_to_csv(estimates) -> str:
    lines = ["n,r,p_hat,ci_lo,ci_hi,bound,log_ratio_per_n"]
    for e in estimates:
        lo, hi = e.ci
        lr = e.log_ratio_per_n()
        lines.append(
            f"{e.n},{e.r:.17g},{e.p_hat:.17g},{lo:.17g},{hi:.17g},{e.bound:.17g},{lr:.17g}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def _stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=(int(seed) << 64) | int(index)))


def sample_sphere_blocks(n: int, d: int, seed: int, index: int = 0) -> PointCloud:
    """n blocks of d coordinates of a uniform point on the sphere of radius sqrt(dn)."""
    rng = _stream(seed, index)
    x = rng.standard_normal(n * d)
    x *= math.sqrt(d * n) / np.linalg.norm(x)
    return PointCloud(dim=d, points=x.reshape(n, d), weights=np.full(n, 1.0 / n))


def center(cloud: PointCloud) -> PointCloud:
    """Translate so the weighted mean is zero (idempotent)."""
    return PointCloud(dim=cloud.dim, points=cloud.points - cloud.mean(), weights=cloud.weights)


# ---------------------------------------------------------------------------
# Exact W1 between sorted samples and smooth reference CDFs
# ---------------------------------------------------------------------------


def _w1_vs_cdf(sorted_rows: np.ndarray, cdf, anti, inv_cdf) -> np.ndarray:
    """Row-wise exact integral of |F_empirical - F_ref|.

    ``anti`` is the antiderivative of the reference CDF normalized so that
    anti -> 0 at -inf and anti(x) - x -> 0 at +inf; then the left tail
    integral is anti(x_min), the right tail is anti(x_max) - x_max, and each
    interior segment at level c = k/n splits exactly at the reference
    quantile of c.
    """
    x = sorted_rows
    b, n = x.shape
    levels = np.arange(1, n) / n
    q = inv_cdf(levels)
    fx = cdf(x)
    ax = anti(x)
    total = ax[:, 0] + (ax[:, -1] - x[:, -1])
    c = levels[None, :]
    xl, xr = x[:, :-1], x[:, 1:]
    fl, fr = fx[:, :-1], fx[:, 1:]
    al, ar = ax[:, :-1], ax[:, 1:]
    qk = np.broadcast_to(q[None, :], fl.shape)
    aq = np.broadcast_to(anti(q)[None, :], fl.shape)
    below = fr <= c  # F <= c on the whole segment
    above = fl >= c  # F >= c on the whole segment
    seg_below = c * (xr - xl) - (ar - al)
    seg_above = (ar - al) - c * (xr - xl)
    seg_cross = (c * (qk - xl) - (aq - al)) + ((ar - aq) - c * (xr - qk))
    total += np.sum(np.where(below, seg_below, np.where(above, seg_above, seg_cross)), axis=1)
    return total


def _gauss_cdf(x):
    return special.ndtr(x)


def _gauss_anti(x):
    return x * special.ndtr(x) + np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)


def w1_empirical_vs_gaussian(samples: np.ndarray) -> np.ndarray:
    """Exact W1 between the empirical law of each row and the standard Gaussian."""
    s = np.sort(np.atleast_2d(np.asarray(samples, dtype=float)), axis=1)
    return _w1_vs_cdf(s, _gauss_cdf, _gauss_anti, special.ndtri)


def _semicircle_cdf(x):
    xc = np.clip(x, -2.0, 2.0)
    inside = 0.5 + xc * np.sqrt(4.0 - xc * xc) / (4 * np.pi) + np.arcsin(xc / 2.0) / np.pi
    return np.where(x < -2, 0.0, np.where(x > 2, 1.0, inside))


def _semi_anti_raw(x):
    return (
        0.5 * x
        - (4.0 - x * x) ** 1.5 / (12 * np.pi)
        + (x * np.arcsin(x / 2.0) + np.sqrt(4.0 - x * x)) / np.pi
    )


_SEMI_ANTI_AT_M2 = float(_semi_anti_raw(np.float64(-2.0)))
_SEMI_ANTI_AT_P2 = float(_semi_anti_raw(np.float64(2.0))) - _SEMI_ANTI_AT_M2


def _semicircle_anti(x):
    xc = np.clip(x, -2.0, 2.0)
    base = _semi_anti_raw(xc) - _SEMI_ANTI_AT_M2
    return np.where(x > 2, _SEMI_ANTI_AT_P2 + (x - 2.0), np.where(x < -2, 0.0, base))


_SEMI_GRID = np.linspace(-2.0, 2.0, 4097)
_SEMI_CDF_TABLE = _semicircle_cdf(_SEMI_GRID)


def _semicircle_inv(p):
    return np.interp(p, _SEMI_CDF_TABLE, _SEMI_GRID)


def w1_empirical_vs_semicircle(samples: np.ndarray) -> np.ndarray:
    """Exact W1 between each row's empirical law and the semicircle law."""
    s = np.sort(np.atleast_2d(np.asarray(samples, dtype=float)), axis=1)
    return _w1_vs_cdf(s, _semicircle_cdf, _semicircle_anti, _semicircle_inv)


# ---------------------------------------------------------------------------
# Tail estimates
# ---------------------------------------------------------------------------

_CHUNK = 2048


def _sphere_rows(n: int, seed: int, start: int, stop: int) -> np.ndarray:
    block = np.empty((stop - start, n))
    for i in range(start, stop):
        rng = _stream(seed, i)
        x = rng.standard_normal(n)
        x *= math.sqrt(n) / np.linalg.norm(x)
        block[i - start] = x
    return block


def tail_estimate(
    n: int,
    r: float,
    replicates: int,
    seed: int,
    d: int = 1,
    slack: float = DEFAULT_SLACK,
) -> TailEstimate:
    """Fraction of replicates with W1(centered block empirical law, gaussian)
    >= r, against the tail bound exp(-n alpha(r^2)).

    The pass criterion allows the asymptotic bound a declared slack of
    ``slack`` per unit n (upper confidence bound of p_hat <= bound * e^{n slack}).
    d = 1 only (exact one-dimensional W1 statistic); replicates capped at 1e6.
    """
    if d != 1:
        raise ValueError("tail_estimate computes the exact W1 statistic in d=1 only")
    if replicates > 10**6:
        raise ValueError("replicates capped at 1e6")
    hits = 0
    for start in range(0, replicates, _CHUNK):
        stop = min(start + _CHUNK, replicates)
        block = _sphere_rows(n, seed, start, stop)
        block -= block.mean(axis=1, keepdims=True)
        w1 = w1_empirical_vs_gaussian(block)
        hits += int(np.sum(w1 >= r))
    a = alpha(r * r, d)
    bound = math.exp(-n * a) if math.isfinite(a) else 0.0
    return TailEstimate(
        n=n,
        r=r,
        replicates=replicates,
        hits=hits,
        bound=bound,
        seed=seed,
        statistic="w1_vs_gaussian",
        slack=slack,
        metadata={"alpha": a, "d": d},
    )


@dataclass(frozen=True)
class PiecewiseLinear:
    """Piecewise-linear test function given by knots and node values; the tail
    probes require it to be 1-Lipschitz (checked, including tail slopes)."""

    knots: tuple
    values: tuple
    slope_left: float = 0.0
    slope_right: float = 0.0

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if k.ndim != 1 or k.size != v.size or k.size < 1:
            raise ValueError("knots and values must be equal-length 1D arrays")
        if k.size > 1 and np.any(np.diff(k) <= 0):
            raise ValueError("knots must be strictly increasing")
        slopes = list(np.diff(v) / np.diff(k)) if k.size > 1 else []
        slopes = [self.slope_left] + slopes + [self.slope_right]
        if max(abs(s) for s in slopes) > 1.0 + 1e-12:
            raise ValueError("function is not 1-Lipschitz")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        k = np.asarray(self.knots, dtype=float)
        v = np.asarray(self.values, dtype=float)
        out = np.interp(x, k, v)
        out = np.where(x < k[0], v[0] + self.slope_left * (x - k[0]), out)
        out = np.where(x > k[-1], v[-1] + self.slope_right * (x - k[-1]), out)
        return out

    def gaussian_mean(self) -> float:
        """Exact int f dgamma: per-piece a + b x integrated against the
        Gaussian via a (Phi(hi) - Phi(lo)) + b (phi(lo) - phi(hi))."""
        k = np.asarray(self.knots, dtype=float)
        v = np.asarray(self.values, dtype=float)
        pts = np.concatenate(([-np.inf], k, [np.inf]))
        total = 0.0
        for j in range(len(pts) - 1):
            lo, hi = pts[j], pts[j + 1]
            if j == 0:
                b = self.slope_left
                a = v[0] - b * k[0]
            elif j == len(pts) - 2:
                b = self.slope_right
                a = v[-1] - b * k[-1]
            else:
                b = (v[j] - v[j - 1]) / (k[j] - k[j - 1])
                a = v[j - 1] - b * k[j - 1]
            phi_lo = 0.0 if lo == -np.inf else math.exp(-0.5 * lo * lo) / math.sqrt(2 * math.pi)
            phi_hi = 0.0 if hi == np.inf else math.exp(-0.5 * hi * hi) / math.sqrt(2 * math.pi)
            cdf_lo = 0.0 if lo == -np.inf else float(special.ndtr(lo))
            cdf_hi = 1.0 if hi == np.inf else float(special.ndtr(hi))
            total += a * (cdf_hi - cdf_lo) + b * (phi_lo - phi_hi)
        return total


def lipschitz_tail(
    n: int,
    f: PiecewiseLinear,
    r: float,
    replicates: int,
    seed: int,
    slack: float = DEFAULT_SLACK,
) -> TailEstimate:
    """Tail of the centered test-function statistic:
    P[(1/n) sum f(U_i - mean) >= <gamma, f> + r] against exp(-n alpha(r^2))."""
    if replicates > 10**6:
        raise ValueError("replicates capped at 1e6")
    gf = f.gaussian_mean()
    hits = 0
    for start in range(0, replicates, _CHUNK):
        stop = min(start + _CHUNK, replicates)
        block = _sphere_rows(n, seed, start, stop)
        block -= block.mean(axis=1, keepdims=True)
        statv = f(block).mean(axis=1)
        hits += int(np.sum(statv >= gf + r))
    a = alpha(r * r, 1)
    bound = math.exp(-n * a) if math.isfinite(a) else 0.0
    return TailEstimate(
        n=n,
        r=r,
        replicates=replicates,
        hits=hits,
        bound=bound,
        seed=seed,
        statistic="lipschitz",
        slack=slack,
        metadata={"alpha": a, "gamma_mean": gf},
    )


# ---------------------------------------------------------------------------
# Fixed-trace random-matrix experiment
# ---------------------------------------------------------------------------


def gue_fixed_trace(n: int, seed: int, index: int = 0) -> PointCloud:
    """Centered eigenvalue empirical measure of the fixed-trace ensemble.

    Samples a Gaussian Hermitian matrix, rescales it exactly onto the shell
    tr(H^2) = n^2, and returns the centered eigenvalues of M/sqrt(n) with
    equal weights.  Deterministic given (seed, index); n capped at 512.
    """
    if n > 512:
        raise ValueError("matrix size capped at 512")
    rng = _stream(seed, index)
    a = rng.standard_normal((n, n))
    b = rng.standard_normal((n, n))
    hmat = a + 1j * b
    hmat = 0.5 * (hmat + hmat.conj().T)
    tr2 = float(np.sum(np.abs(hmat) ** 2))
    m = hmat * (n / math.sqrt(tr2))
    eig = np.linalg.eigvalsh(m / math.sqrt(n))
    eig = eig - eig.mean()
    return PointCloud(dim=1, points=eig.reshape(-1, 1), weights=np.full(n, 1.0 / n))


def gue_tail_probe(n: int, r: float, replicates: int, seed: int) -> TailEstimate:
    """Report-only probe of the conjectural fixed-trace tail improvement.

    Compares the empirical (1/n) log-frequency of {W1(centered spectrum,
    semicircle) >= r} against the conjectured rate 2 arcsin^2(r/2).  Never a
    hard failure: the underlying large-deviation statement is a conjecture,
    so the estimate is emitted with status "report-only".
    """
    hits = 0
    for i in range(replicates):
        cloud = gue_fixed_trace(n, seed, index=i)
        w1 = float(w1_empirical_vs_semicircle(cloud.points.ravel()[None, :])[0])
        hits += int(w1 >= r)
    rate = 2.0 * math.asin(min(r / 2.0, 1.0)) ** 2 if r <= 2.0 else math.inf
    bound = math.exp(-n * rate) if math.isfinite(rate) else 0.0
    return TailEstimate(
        n=n,
        r=r,
        replicates=replicates,
        hits=hits,
        bound=bound,
        seed=seed,
        statistic="gue_fixed_trace_w1",
        status="report-only",
        metadata={"conjectural_rate": rate},
    )
