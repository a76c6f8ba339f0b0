"""Named verification suites: each runs a batch of numerical experiments and
returns InequalityReport records with pinned tolerances.

The suites mirror the acceptance gate of the project: convexity certificates
along constrained geodesics, strengthened Talagrand / HWI inequalities on the
moment sphere, the evolution variational inequality and energy identity along
gradient flows, short-time Fisher regularization, duality gaps of extracted
certificates, and the lower-semicontinuous-envelope mixture construction.
Every suite is deterministic given its seed.  ``quick=True`` halves grids and
sample counts and doubles tolerances; the looser tolerances are declared in
each report's metadata.
"""

from __future__ import annotations

import math

import numpy as np

from . import flows, geodesics
from .constraints import sphere_constraints
from .functionals import (
    Functional,
    InequalityReport,
    alpha,
    convexity_profile,
    entropy,
    fisher_information,
    hwi_residual,
    log_energy,
    rate_I,
    rate_Ilog,
    relative_entropy,
)
from .geodesics import SolverOptions, coupling_geodesic, dual_value, solve_geodesic, sphere_distance
from .measures import (
    GridMeasure1D,
    GridMeasure2D,
    gaussian_grid,
    mixture,
    point_mass_grid,
    semicircle_grid,
    tilt_to_moments,
    w2_1d,
)

__all__ = ["SUITES", "run_suite", "run_suites"]


def _sphere_targets():
    return [(lambda x: x, 0.0), (lambda x: x * x, 1.0)]


def random_sphere_measure(rng, x_min=-6.0, dx=None, n=480, min_w2_to=None, smooth=False):
    """Random Gaussian mixture tilted onto the moment sphere (same grid)."""
    dx = dx if dx is not None else (2.0 * abs(x_min)) / n
    for _ in range(60):
        k = int(rng.integers(1, 4))
        means = rng.uniform(-1.4, 1.4, size=k)
        lo = 0.25 if smooth else 0.05
        var = rng.uniform(lo, 1.2, size=k)
        wts = rng.dirichlet(np.ones(k))
        comps = [gaussian_grid(m, v, x_min, dx, n) for m, v in zip(means, var)]
        try:
            g = tilt_to_moments(mixture(comps, wts), _sphere_targets())
        except Exception:
            continue
        return g
    raise RuntimeError("could not draw a sphere measure")


def _report(name, lhs, rhs, tol, **meta) -> InequalityReport:
    return InequalityReport(name=name, lhs=lhs, rhs=rhs, tolerance=tol, metadata=meta)


# ---------------------------------------------------------------------------
# evi suite
# ---------------------------------------------------------------------------


def suite_evi(quick: bool = False, seed: int = 0, lambda_inflation: float = 1.0):
    """EVI residual, energy identity, invariance, and Hermite decay along the
    linear-drift flow; the lambda-doubled negative control must fail."""
    scale = 2.0 if quick else 1.0
    n = 400 if quick else 800
    h = 16.0 / n
    steps = 500 if quick else 1000
    gauss = gaussian_grid(0.0, 0.25, -8, h, n)
    pi = gaussian_grid(0.0, 1.0, -8, h, n)
    tr = flows.ou_flow_grid(gauss, 0.0, 1.0, 1.0, steps, record_every=1)
    energy = Functional.relative_entropy(pi)
    lam = 1.0 * lambda_inflation
    reports = [flows.evi_residual(tr, pi, lam, energy, tolerance=1e-3 * scale)]
    reports.append(flows.energy_identity_residual(tr, pi, t_min=0.1, tolerance=0.02 * scale))
    neg = flows.evi_residual(tr, pi, 2.0 * lambda_inflation, energy, tolerance=1e-3)
    reports.append(
        _report(
            "evi_negative_control",
            1e-3,
            neg.lhs,
            0.0,
            note="lambda doubled must produce a positive residual",
        )
    )

    rng = np.random.default_rng(seed)
    sph = random_sphere_measure(rng, x_min=-8.0, n=n)
    steps_inv = 1000 if quick else 2000
    t_inv = 1.0 if quick else 2.0
    tri = flows.ou_flow_grid(sph, 0.0, 1.0, t_inv, steps_inv, record_every=10)
    reports.append(flows.invariance_check(tri, sphere_constraints(0.0, 1.0), tolerance=1e-4 * scale))
    skew = mixture(
        [gaussian_grid(-0.8, 0.25, -8, h, n), gaussian_grid(0.9, 0.6, -8, h, n)], [0.6, 0.4]
    )
    trh = flows.ou_flow_grid(skew, 0.0, 1.0, 1.0, steps, record_every=5)
    reports.append(flows.hermite_decay_check(trh, q=4, rate_tol=0.02 * scale))
    for r in reports:
        r.metadata.setdefault("quick", quick)
    return reports


# ---------------------------------------------------------------------------
# talagrand suite (sphere Talagrand, tail-length bound, free-probability variant)
# ---------------------------------------------------------------------------


def suite_talagrand(quick: bool = False, seed: int = 0, lambda_inflation: float = 1.0):
    scale = 2.0 if quick else 1.0
    n_samples = 20 if quick else 50
    n = 240 if quick else 480
    rng = np.random.default_rng(seed)
    gamma = gaussian_grid(0.0, 1.0, -6.0, 12.0 / n, n)
    worst = math.inf
    min_gain = math.inf
    w2s = []
    for _ in range(n_samples):
        mu = random_sphere_measure(rng, x_min=-6.0, n=n)
        w2 = w2_1d(mu, gamma)
        w2s.append(w2)
        lhs = alpha(w2 * w2, 1) * lambda_inflation
        rhs = relative_entropy(mu, gamma)
        worst = min(worst, rhs - lhs)
        if w2 >= 0.3:
            min_gain = min(min_gain, alpha(w2 * w2, 1) - 0.5 * w2 * w2)
    reports = [
        _report(
            "talagrand_sphere",
            -worst,
            0.0,
            1e-3 * scale,
            n_samples=n_samples,
            w2_range=[float(min(w2s)), float(max(w2s))],
        ),
        _report(
            "talagrand_strengthening_nonvacuous",
            0.0,
            min_gain if math.isfinite(min_gain) else math.nan,
            0.0,
            note="alpha(W2^2) - W2^2/2 > 0 on every sample with W2 >= 0.3",
        ),
    ]

    # tail-length bound along a flow (the single-curve Talagrand-type estimate)
    h = 16.0 / (400 if quick else 800)
    g0 = gaussian_grid(0.5, 1.0, -8, h, 400 if quick else 800)
    pi = gaussian_grid(0.0, 1.0, -8, h, 400 if quick else 800)
    tr = flows.ou_flow_grid(g0, 0.0, 1.0, 4.0, 2000 if quick else 4000, record_every=4)
    energy = Functional.relative_entropy(pi)
    reports.append(flows.flow_tail_length(tr, 1.0 * lambda_inflation, energy, tolerance=1e-3 * scale))
    neg = flows.flow_tail_length(tr, 2.0 * lambda_inflation, energy, tolerance=1e-3)
    reports.append(
        _report("tail_length_negative_control", 0.0, neg.lhs, 0.0, note="lambda doubled must violate")
    )

    # free-probability variant: strengthened transport inequality at the semicircle
    ns = 300 if quick else 600
    sgrid = dict(x_min=-3.0, dx=6.0 / ns, n=ns)
    sc = semicircle_grid(**sgrid)
    n_bv = 8 if quick else 20
    worst_bv = math.inf
    for _ in range(n_bv):
        mu = _perturbed_semicircle(rng, sc)
        w2 = w2_1d(mu, sc)
        lhs = 4.0 * math.asin(min(w2 / 2.0, 1.0)) ** 2 * lambda_inflation
        rhs = 2.0 * rate_Ilog(mu)
        worst_bv = min(worst_bv, rhs - lhs)
    reports.append(
        _report("biane_voiculescu_sphere", -worst_bv, 0.0, 1e-2 * scale, n_samples=n_bv)
    )
    for r in reports:
        r.metadata.setdefault("quick", quick)
    return reports


def _perturbed_semicircle(rng, sc: GridMeasure1D) -> GridMeasure1D:
    x = sc.centers
    k = int(rng.integers(1, 4))
    eps = rng.uniform(0.1, 0.45)
    phase = rng.uniform(0, 2 * np.pi)
    bump = 1.0 + eps * np.cos(k * np.pi * x / 3.0 + phase)
    m = sc.mass * np.maximum(bump, 0.05)
    g = GridMeasure1D(sc.x_min, sc.dx, m / m.sum())
    return tilt_to_moments(g, _sphere_targets())


# ---------------------------------------------------------------------------
# hwi suite
# ---------------------------------------------------------------------------


def suite_hwi(quick: bool = False, seed: int = 0, lambda_inflation: float = 1.0):
    scale = 2.0 if quick else 1.0
    n_pairs = 10 if quick else 25
    n = 240 if quick else 480
    rng = np.random.default_rng(seed)
    gamma = gaussian_grid(0.0, 1.0, -6.0, 12.0 / n, n)
    worst = math.inf
    for _ in range(n_pairs):
        mu = random_sphere_measure(rng, x_min=-6.0, n=n, smooth=True)
        nu = random_sphere_measure(rng, x_min=-6.0, n=n, smooth=True)
        ds = sphere_distance(mu, nu)
        rep = hwi_residual(mu, nu, gamma, 1.0 * lambda_inflation, ds)
        worst = min(worst, rep.slack)
    reports = [
        _report("hwi_sphere", -worst, 0.0, 1e-2 * scale, n_pairs=n_pairs),
    ]
    # Talagrand specialization: nu = stationary point recovers d^2 <= 2 H
    mu = random_sphere_measure(rng, x_min=-6.0, n=n, smooth=True)
    gam_s = tilt_to_moments(gamma, _sphere_targets())
    ds = sphere_distance(mu, gam_s)
    lhs = 0.5 * ds * ds * lambda_inflation
    rhs = relative_entropy(mu, gamma)
    reports.append(_report("hwi_talagrand_specialization", lhs, rhs, 1e-3 * scale))
    for r in reports:
        r.metadata.setdefault("quick", quick)
    return reports


# ---------------------------------------------------------------------------
# convexity suite (solver geodesics)
# ---------------------------------------------------------------------------


def _sphere_pair(rng, x_min, dx, n):
    def mk():
        k = int(rng.integers(1, 4))
        means = rng.uniform(-1.3, 1.3, size=k)
        var = rng.uniform(0.05, 1.0, size=k)
        wts = rng.dirichlet(np.ones(k))
        comps = [gaussian_grid(m, v, x_min, dx, n) for m, v in zip(means, var)]
        return tilt_to_moments(mixture(comps, wts), _sphere_targets())

    for _ in range(40):
        try:
            return mk(), mk()
        except Exception:
            continue
    raise RuntimeError("pair generation failed")


def gaussian_copula_coupling(n: int, half_width: float, corr: float) -> GridMeasure2D:
    """Coupling with exact standard-Gaussian grid marginals and target
    correlation: bivariate normal density fitted by proportional scaling."""
    h = 2.0 * half_width / n
    gx = gaussian_grid(0.0, 1.0, -half_width, h, n)
    x = gx.centers
    xx, yy = np.meshgrid(x, x, indexing="ij")
    det = 1.0 - corr * corr
    dens = np.exp(-(xx * xx - 2 * corr * xx * yy + yy * yy) / (2 * det))
    m = geodesics._ipf(dens, gx.mass, gx.mass, sweeps=200)
    return GridMeasure2D(-half_width, h, -half_width, h, m / m.sum())


def suite_convexity(quick: bool = False, seed: int = 0, lambda_inflation: float = 1.0):
    scale = 2.0 if quick else 1.0
    tol = 5e-3 * scale
    rng = np.random.default_rng(seed)
    reports = []
    lam = 1.0 * lambda_inflation

    n = 128 if quick else 256
    T = 16 if quick else 32
    iters = 3000 if quick else 6000
    opts = SolverOptions(max_iters=iters, tol=1e-8, step_ratio=0.01)
    H = Functional.entropy()
    n_sphere = 1 if quick else 3
    for j in range(n_sphere):
        mu, nu = _sphere_pair(rng, -5.0, 10.0 / n, n)
        path = solve_geodesic(mu, nu, sphere_constraints(0.0, 1.0), T=T, opts=opts)
        viol = convexity_profile(path.slices, H, lam, path.distance(), params=path.params)
        reports.append(
            _report(
                f"entropy_convexity_sphere_{j}",
                viol,
                tol,
                0.0,
                distance=path.distance(),
                converged=path.converged,
            )
        )

    ns = 150 if quick else 300
    sc = semicircle_grid(-3.0, 6.0 / ns, ns)
    EL = Functional.log_energy()
    n_log = 1 if quick else 2
    for j in range(n_log):
        mu = _perturbed_semicircle(rng, sc)
        nu = _perturbed_semicircle(rng, sc)
        path = solve_geodesic(mu, nu, sphere_constraints(0.0, 1.0), T=T, opts=opts)
        viol = convexity_profile(path.slices, EL, lam, path.distance(), params=path.params)
        reports.append(
            _report(
                f"log_energy_convexity_sphere_{j}",
                viol,
                tol,
                0.0,
                distance=path.distance(),
                converged=path.converged,
            )
        )

    n2 = 24 if quick else 32
    t2 = 6 if quick else 8
    rho_i = gaussian_copula_coupling(n2, 4.0, +0.5)
    rho_f = gaussian_copula_coupling(n2, 4.0, -0.5)
    cop_opts = SolverOptions(max_iters=2000 if quick else 4000, tol=1e-8, step_ratio=0.01)
    cpath = coupling_geodesic(rho_i, rho_f, T=t2, opts=cop_opts)
    viol_c = convexity_profile(cpath.slices, H, lam, cpath.distance(), params=cpath.params)
    reports.append(
        _report(
            "entropy_convexity_coupling",
            viol_c,
            tol,
            0.0,
            distance=cpath.distance(),
            converged=cpath.converged,
        )
    )
    # negative control on the sharpest instance: the certified modulus tripled
    viol_neg = convexity_profile(cpath.slices, 3.0 * lam, *(None,)) if False else convexity_profile(
        cpath.slices, H, 3.0 * lam, cpath.distance(), params=cpath.params
    )
    reports.append(
        _report(
            "convexity_negative_control",
            5e-3,
            viol_neg,
            0.0,
            note="modulus tripled must violate the profile",
        )
    )
    for r in reports:
        r.metadata.setdefault("quick", quick)
    return reports


# ---------------------------------------------------------------------------
# fisher regularization suite
# ---------------------------------------------------------------------------


def suite_fisher_reg(quick: bool = False, seed: int = 0, lambda_inflation: float = 1.0):
    scale = 2.0 if quick else 1.0
    n = 400 if quick else 800
    h = 16.0 / n
    steps = 2000 if quick else 4000
    pm = point_mass_grid(0.0, h, n + 1)
    tr = flows.ou_flow_grid(pm, 0.0, 1.0, 1.0, steps, record_every=max(1, steps // 400))
    rep = flows.fisher_regularization_check(tr, beta=1.0 * lambda_inflation, tol=0.03 * scale)
    eq_dev = rep.metadata["equality_max_rel_dev"]
    reports = [
        rep,
        _report(
            "fisher_regularization_equality_case",
            eq_dev,
            0.03 * scale,
            0.0,
            note="point-mass start saturates the bound",
        ),
    ]
    mix = mixture([point_mass_grid(-1.0, h, n + 1), point_mass_grid(1.0, h, n + 1)], [0.5, 0.5])
    # the two-point start shares the grid of pm shifted; rebuild both on one grid
    base = point_mass_grid(0.0, h, n + 1)
    mass = np.zeros(n + 1)
    centers = base.centers
    mass[int(np.argmin(np.abs(centers + 1.0)))] += 0.5
    mass[int(np.argmin(np.abs(centers - 1.0)))] += 0.5
    mix = GridMeasure1D(base.x_min, h, mass)
    trm = flows.ou_flow_grid(mix, 0.0, 1.0, 1.0, steps, record_every=max(1, steps // 400))
    repm = flows.fisher_regularization_check(trm, beta=1.0 * lambda_inflation, tol=0.03 * scale, equality_case=False)
    repm.name = "fisher_regularization_mixture"
    reports.append(repm)
    for r in reports:
        r.metadata.setdefault("quick", quick)
    return reports


# ---------------------------------------------------------------------------
# duality suite
# ---------------------------------------------------------------------------


def suite_duality(quick: bool = False, seed: int = 0, lambda_inflation: float = 1.0):
    scale = 2.0 if quick else 1.0
    n = 128 if quick else 256
    T = 16 if quick else 32
    iters = 3000 if quick else 5000
    opts = SolverOptions(max_iters=iters, tol=1e-8, step_ratio=0.01)
    rng = np.random.default_rng(seed)
    reports = []
    instances = []
    a = gaussian_grid(-0.3, 0.04, -2.0, 4.0 / n, n)
    b = gaussian_grid(0.3, 0.04, -2.0, 4.0 / n, n)
    instances.append(("gaussian_pair", a, b, None))
    sh0 = gaussian_grid(0.0, 0.09, -3.0, 6.0 / n, n)
    sh1 = gaussian_grid(1.0, 0.09, -3.0, 6.0 / n, n)
    instances.append(("translation", sh0, sh1, None))
    mu, nu = _sphere_pair(rng, -5.0, 10.0 / n, n)
    instances.append(("sphere_pair", mu, nu, sphere_constraints(0.0, 1.0)))
    for name, ri, rf, cs in instances:
        path = solve_geodesic(ri, rf, cs, T=T, opts=opts)
        dv = dual_value(path.certificate, ri, rf)
        gap = (path.action - dv) / max(path.action, 1e-15)
        reports.append(
            _report(
                f"duality_gap_{name}",
                gap,
                0.05 * scale,
                0.0,
                action=path.action,
                dual=dv,
                nonneg_gap=bool(dv <= path.action + 1e-12),
            )
        )
    # lower bound sanity: the zero certificate values 0 <= action
    reports.append(
        _report("duality_weak_zero_certificate", 0.0, float(path.action), 0.0, note="phi=0 pairs to 0")
    )
    for r in reports:
        r.metadata.setdefault("quick", quick)
    return reports


# ---------------------------------------------------------------------------
# envelope suite
# ---------------------------------------------------------------------------


def envelope_sequence(mu: GridMeasure1D, gamma: GridMeasure1D, ks) -> dict:
    """J values of the mixture construction mu_k = c_k mu + (1 - c_k) eta_k,
    where eta_k is the symmetric two-sided Gaussian shell law with second
    moment k and c_k is chosen so m2(mu_k) = 1 (d = 1)."""
    m2 = mu.second_moment()
    out = {}
    for k in ks:
        eta = mixture(
            [
                gaussian_grid(-math.sqrt(k - 1.0), 1.0, mu.x_min, mu.dx, mu.n_cells),
                gaussian_grid(math.sqrt(k - 1.0), 1.0, mu.x_min, mu.dx, mu.n_cells),
            ],
            [0.5, 0.5],
        )
        c = (k - 1.0) / (k - m2)
        mk = mixture([mu, eta], [c, 1.0 - c])
        out[k] = entropy(mk) + 0.5 + 0.5 * math.log(2 * math.pi)
    return out


def suite_envelope(quick: bool = False, seed: int = 0, lambda_inflation: float = 1.0):
    scale = 2.0 if quick else 1.0
    n_mu = 5 if quick else 10
    n = 1350 if quick else 2700
    x_min = -13.5
    dx = 27.0 / n
    rng = np.random.default_rng(seed)
    gamma = gaussian_grid(0.0, 1.0, x_min, dx, n)
    worst = 0.0
    mono_worst = -math.inf
    ks = [4, 8, 16, 32, 64]
    for _ in range(n_mu):
        m2_target = rng.uniform(0.90, 0.98)
        k = int(rng.integers(1, 3))
        means = rng.uniform(-0.8, 0.8, size=k)
        var = rng.uniform(0.2, 0.8, size=k)
        comps = [gaussian_grid(m, v, x_min, dx, n) for m, v in zip(means, var)]
        try:
            mu = tilt_to_moments(
                mixture(comps, rng.dirichlet(np.ones(k))),
                [(lambda x: x, 0.0), (lambda x: x * x, m2_target)],
            )
        except Exception:
            continue
        target = rate_I(mu, gamma)
        js = envelope_sequence(mu, gamma, ks)
        worst = max(worst, abs(js[64] - target))
        seq = [js[k] for k in ks]
        mono_worst = max(mono_worst, float(np.max(-np.diff(seq))))
    reports = [
        _report("lsc_envelope_convergence", worst, 1e-2 * scale, 0.0, k=64, n_mu=n_mu),
        _report(
            "lsc_envelope_monotone",
            mono_worst,
            1e-3 * scale,
            0.0,
            note="J(mu_k) increases to the envelope",
        ),
    ]
    gam_t = tilt_to_moments(gamma, _sphere_targets())
    exact_zero = rate_I(gam_t, gam_t)
    reports.append(_report("rate_I_gaussian_zero", abs(exact_zero), 1e-12, 0.0))

    # closed-form anchors live here as well: the semicircle values
    ns = 600 if quick else 1200
    sc = semicircle_grid(-2.5, 5.0 / ns, ns)
    reports.append(_report("anchor_log_energy_semicircle", abs(log_energy(sc) - 0.25), 5e-3, 0.0))
    reports.append(_report("anchor_rate_Ilog_semicircle", abs(rate_Ilog(sc)), 5e-3, 0.0))
    for r in reports:
        r.metadata.setdefault("quick", quick)
    return reports


SUITES = {
    "evi": suite_evi,
    "talagrand": suite_talagrand,
    "hwi": suite_hwi,
    "convexity": suite_convexity,
    "fisher-reg": suite_fisher_reg,
    "duality": suite_duality,
    "envelope": suite_envelope,
}


def run_suite(name: str, quick: bool = False, seed: int = 0, lambda_inflation: float = 1.0):
    if name == "all":
        return run_suites(sorted(SUITES), quick=quick, seed=seed, lambda_inflation=lambda_inflation)
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; available: {', '.join(sorted(SUITES))}, all")
    return SUITES[name](quick=quick, seed=seed, lambda_inflation=lambda_inflation)


def run_suites(names, quick: bool = False, seed: int = 0, lambda_inflation: float = 1.0):
    out = []
    for nm in names:
        reps = SUITES[nm](quick=quick, seed=seed, lambda_inflation=lambda_inflation)
        for r in reps:
            r.metadata.setdefault("suite", nm)
        out.extend(reps)
    return out
