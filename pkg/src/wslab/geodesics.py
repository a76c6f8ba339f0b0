"""Constrained dynamic-transport geodesics, dual certificates, and the
closed-form moment-sphere distance.

The squared induced distance between measures subject to linear test-function
constraints is the Benamou-Brenier kinetic action minimized over paths whose
every time slice satisfies the constraints.  The solver is a first-order
primal-dual (Chambolle-Pock) iteration on a staggered space-time grid:

* densities live at time nodes / cell centers, momenta at time midpoints /
  cell interfaces;
* the kinetic term q^2 / (2 rho) is handled by its pointwise proximal map
  (a scalar cubic) on face-averaged densities;
* discrete continuity + endpoint + per-slice constraints form one affine set
  onto which iterates are projected exactly: a space-time Poisson solve
  (DCT-diagonalized) plus a small dense Schur system for the slice
  constraints.

The stored ``action`` is half the kinetic integral, i.e. half the squared
constrained distance; ``sqrt(2 * action)`` is the distance.  A dual
certificate (phi, g) with the discrete Hamilton-Jacobi margin
``d_t phi + |grad phi|^2-average/4-sum + g <= 0`` satisfies
``sum phi_1 drho_f - sum phi_0 drho_i <= action`` for every feasible discrete
path (exact discrete weak duality for this pairing), and the extracted
certificate's value approaches the action at the optimum.
"""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dctn, idctn

from .constraints import Constraint, ConstraintSet, sphere_constraints
from .measures import GridMeasure1D, GridMeasure2D, PointCloud, tilt_to_moments, w2_1d, w2_discrete

__all__ = [
    "SpaceTimePath",
    "DualCertificate",
    "SolverOptions",
    "InfeasibleEndpointsError",
    "InadmissibleCertificateError",
    "solve_geodesic",
    "coupling_geodesic",
    "sphere_distance",
    "dual_value",
    "finite_length_curve",
]


class InfeasibleEndpointsError(ValueError):
    """Endpoints do not satisfy the constraint set (or each other's marginals/mass)."""


class InadmissibleCertificateError(ValueError):
    """Certificate violates the Hamilton-Jacobi feasibility margin."""

    def __init__(self, msg, t=None, x=None, violation=None):
        super().__init__(msg)
        self.t = t
        self.x = x
        self.violation = violation


@dataclass
class SolverOptions:
    max_iters: int = 20000
    min_iters: int = 200
    tol: float = 1e-6  # relative action change over `check_every` iterations
    check_every: int = 50
    step_ratio: float = 1.0  # tau / sigma
    endpoint_tol: float = 1e-8
    verbose: bool = False


@dataclass
class SpaceTimePath:
    """Discrete constrained-transport path: time slices plus face momenta."""

    times: np.ndarray
    slices: list
    momenta: list  # one array per space axis, shape (T, ..., n_a - 1, ...)
    action: float  # half the kinetic integral = half squared distance
    residuals: dict
    iterations: int
    converged: bool
    params: np.ndarray = None  # constant-speed parameters of the slices
    certificate: "DualCertificate" = None

    def distance(self) -> float:
        return math.sqrt(max(2.0 * self.action, 0.0))

    def export(self, outdir: str) -> None:
        os.makedirs(outdir, exist_ok=True)
        for j, s in enumerate(self.slices):
            with open(os.path.join(outdir, f"slice_{j:04d}.csv"), "w") as f:
                f.write(_slice_csv(s))
        meta = {
            "action": self.action,
            "distance": self.distance(),
            "residuals": {k: float(v) for k, v in self.residuals.items()},
            "iterations": self.iterations,
            "converged": bool(self.converged),
            "times": [float(t) for t in self.times],
            "params": [float(p) for p in self.params] if self.params is not None else None,
        }
        with open(os.path.join(outdir, "meta.json"), "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)


def _slice_csv(s) -> str:
    if isinstance(s, GridMeasure1D):
        return s.to_csv()
    buf = io.StringIO()
    buf.write("x,y,mass\n")
    xc, yc = s.x_centers, s.y_centers
    for i in range(s.mass.shape[0]):
        for j in range(s.mass.shape[1]):
            buf.write(f"{xc[i]:.17g},{yc[j]:.17g},{s.mass[i, j]:.17g}\n")
    return buf.getvalue()


@dataclass
class DualCertificate:
    """Grid dual pair (phi, g): phi at time nodes x cells, g a per-node
    combination of the constraint functions with coefficient curves."""

    t_nodes: np.ndarray
    phi: np.ndarray  # (T+1, *space_shape)
    coeff_curves: np.ndarray  # (T+1, K)
    constraints: ConstraintSet
    axes: tuple  # ((n, h), ...) per space axis
    origin: tuple  # (x_min, ...)

    def margin_field(self) -> np.ndarray:
        """Hamilton-Jacobi feasibility field on slabs x cells (admissible iff <= 0)."""
        T = self.phi.shape[0] - 1
        dt = float(self.t_nodes[1] - self.t_nodes[0])
        phibar = 0.5 * (self.phi[:-1] + self.phi[1:])
        margin = (self.phi[1:] - self.phi[:-1]) / dt
        for a, (n, h) in enumerate(self.axes):
            g = np.diff(phibar, axis=1 + a) / h
            gsq = g * g
            pad_lo = [(0, 0)] * gsq.ndim
            pad_hi = [(0, 0)] * gsq.ndim
            pad_lo[1 + a] = (1, 0)
            pad_hi[1 + a] = (0, 1)
            margin += 0.25 * (np.pad(gsq, pad_lo) + np.pad(gsq, pad_hi))
        if len(self.constraints):
            gvals = self._g_nodes()
            margin += 0.5 * (gvals[:-1] + gvals[1:])
        return margin

    def _g_nodes(self) -> np.ndarray:
        fmat = _constraint_values(self.constraints, self.axes, self.origin)
        out = np.tensordot(self.coeff_curves, fmat, axes=(1, 0))
        return out.reshape((self.phi.shape[0],) + self.phi.shape[1:])

    @property
    def feasibility_margin(self) -> float:
        return float(self.margin_field().max())

    def repair(self) -> "DualCertificate":
        """Shift phi by a time function so the margin is nonpositive everywhere."""
        phi = self.phi.copy()
        dt = float(self.t_nodes[1] - self.t_nodes[0])
        for _ in range(3):
            cert = DualCertificate(self.t_nodes, phi, self.coeff_curves, self.constraints, self.axes, self.origin)
            m = cert.margin_field().reshape(phi.shape[0] - 1, -1).max(axis=1)
            excess = np.maximum(m, 0.0)
            if excess.max() <= 0.0:
                return cert
            shift = np.concatenate([[0.0], np.cumsum(excess * dt * (1 + 1e-12) + 1e-15)])
            phi = phi - shift.reshape((-1,) + (1,) * (phi.ndim - 1))
        return DualCertificate(self.t_nodes, phi, self.coeff_curves, self.constraints, self.axes, self.origin)

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": "grid",
                "t_nodes": self.t_nodes.tolist(),
                "axes": [[int(n), float(h)] for n, h in self.axes],
                "origin": [float(v) for v in self.origin],
                "phi": self.phi.tolist(),
                "coeff_curves": self.coeff_curves.tolist(),
                "constraints": self.constraints.to_dict(),
                "feasibility_margin": self.feasibility_margin,
            },
            sort_keys=True,
        )


def _constraint_values(constraints: ConstraintSet, axes, origin) -> np.ndarray:
    """Zero-form test-function values on the (flattened-to-grid) space cells: shape (K, *space)."""
    shape = tuple(n for n, _ in axes)
    out = np.zeros((len(constraints),) + shape)
    for j, c in enumerate(constraints):
        if c.kind == "poly":
            if len(axes) != 1:
                raise ValueError("polynomial constraints are 1D")
            n, h = axes[0]
            x = origin[0] + (np.arange(n) + 0.5) * h
            out[j] = c.values(x) - c.target
        else:
            field_ = np.zeros(shape)
            idx = [slice(None)] * len(shape)
            idx[c.axis] = c.index
            field_[tuple(idx)] = 1.0
            out[j] = field_ - c.target
    return out


# ---------------------------------------------------------------------------
# Kinetic proximal map
# ---------------------------------------------------------------------------


def _kinetic_prox(zeta: np.ndarray, q: np.ndarray, gamma_w: float):
    """Pointwise prox of w q^2/(2 zeta) with parameter gamma: gamma_w = gamma * w.

    Solves (z - zeta)(z + c)^2 = c q^2 / 2 with c = gamma_w for the positive
    root by a safeguarded Newton iteration started on the convex side; returns
    (0, 0) when no positive root exists.
    """
    c = gamma_w
    rhs = 0.5 * c * q * q
    z = np.maximum(zeta, 0.0) + np.cbrt(rhs)
    for _ in range(60):
        f = (z - zeta) * (z + c) ** 2 - rhs
        fp = (z + c) ** 2 + 2.0 * (z - zeta) * (z + c)
        step = f / np.maximum(fp, 1e-300)
        z = z - step
        if np.max(np.abs(step)) < 1e-14 * (1.0 + np.max(np.abs(z))):
            break
    ok = z > 0
    z = np.where(ok, z, 0.0)
    qo = np.where(ok, z * q / np.where(ok, z + c, 1.0), 0.0)
    return z, qo


# ---------------------------------------------------------------------------
# The primal-dual solver (shared by 1D and 2D)
# ---------------------------------------------------------------------------


class _GeodesicProblem:
    def __init__(self, p_init: np.ndarray, p_final: np.ndarray, axes, origin, constraints: ConstraintSet, T: int):
        self.axes = tuple(axes)
        self.origin = tuple(origin)
        self.T = T
        self.dt = 1.0 / T
        self.cellvol = float(np.prod([h for _, h in axes]))
        self.space_shape = tuple(n for n, _ in axes)
        self.p0 = p_init
        self.p1 = p_final
        self.constraints = constraints
        self.K = len(constraints)
        self.fmat = (
            _constraint_values(constraints, axes, origin).reshape(self.K, -1) * self.cellvol
            if self.K
            else np.zeros((0, int(np.prod(self.space_shape))))
        )
        # DCT eigenvalues of the space-time Poisson operator (Neumann in every axis)
        lam_t = (2.0 - 2.0 * np.cos(np.pi * np.arange(T) / T)) / self.dt**2
        lams = [lam_t] + [
            (2.0 - 2.0 * np.cos(np.pi * np.arange(n) / n)) / h**2 for n, h in axes
        ]
        grid = np.zeros((T,) + self.space_shape)
        for a, l in enumerate(lams):
            shape = [1] * grid.ndim
            shape[a] = -1
            grid = grid + l.reshape(shape)
        grid_flat = grid.copy()
        grid_flat.flat[0] = 1.0  # zero mode handled by pinv convention
        self._eig = grid_flat
        self._schur = None
        if self.K:
            self._build_schur()

    # -- linear operators --
    def continuity(self, P: np.ndarray, Q: list) -> np.ndarray:
        r = (P[1:] - P[:-1]) / self.dt
        for a, (n, h) in enumerate(self.axes):
            q = Q[a]
            pad = [(0, 0)] * q.ndim
            pad[1 + a] = (1, 1)
            qp = np.pad(q, pad)
            r = r + np.diff(qp, axis=1 + a) / h
        return r

    def continuity_adjoint(self, lam: np.ndarray):
        """A_c^T lam: returns (dP_interior, [dQ_a])."""
        dP = (lam[:-1] - lam[1:]) / self.dt  # interior nodes 1..T-1
        dQ = []
        for a, (n, h) in enumerate(self.axes):
            sl_lo = [slice(None)] * lam.ndim
            sl_hi = [slice(None)] * lam.ndim
            sl_lo[1 + a] = slice(0, n - 1)
            sl_hi[1 + a] = slice(1, n)
            dQ.append((lam[tuple(sl_lo)] - lam[tuple(sl_hi)]) / h)
        return dP, dQ

    def poisson_solve(self, r: np.ndarray) -> np.ndarray:
        rh = dctn(r, type=2, norm="ortho")
        rh.flat[0] = 0.0
        rh = rh / self._eig
        return idctn(rh, type=2, norm="ortho")

    # -- Schur machinery for slice constraints --
    def _b_apply(self, lam_m: np.ndarray) -> np.ndarray:
        """B lam_m: slab x space field from node-constraint multipliers (T-1, K)."""
        W = np.zeros((self.T + 1, self.fmat.shape[1]))
        W[1 : self.T] = lam_m @ self.fmat
        out = (W[1:] - W[:-1]) / self.dt
        return out.reshape((self.T,) + self.space_shape)

    def _bt_apply(self, y: np.ndarray) -> np.ndarray:
        """B^T y for slab field y: result (T-1, K)."""
        yf = y.reshape(self.T, -1)
        out = np.empty((self.T - 1, self.K))
        for k in range(1, self.T):
            out[k - 1] = self.fmat @ (yf[k - 1] - yf[k]) / self.dt
        return out

    def _build_schur(self):
        gram = self.fmat @ self.fmat.T
        nK = (self.T - 1) * self.K
        S = np.kron(np.eye(self.T - 1), gram)
        for k in range(1, self.T):
            for kappa in range(self.K):
                lam_m = np.zeros((self.T - 1, self.K))
                lam_m[k - 1, kappa] = 1.0
                col = self.poisson_solve(self._b_apply(lam_m))
                bt = self._bt_apply(col).ravel()
                S[:, (k - 1) * self.K + kappa] -= bt
        S = 0.5 * (S + S.T)
        try:
            self._schur = np.linalg.cholesky(S)
            self._schur_is_chol = True
        except np.linalg.LinAlgError:
            self._schur = S
            self._schur_is_chol = False

    def _schur_solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._schur_is_chol:
            from scipy.linalg import cho_solve

            return cho_solve((self._schur, True), rhs)
        return np.linalg.lstsq(self._schur, rhs, rcond=None)[0]

    def project(self, P: np.ndarray, Q: list):
        """Exact Euclidean projection onto {continuity, endpoints, slice constraints}.

        Returns the projected (P, Q) and the multipliers (lam_c, lam_m).
        """
        r_c = self.continuity(P, Q)
        lam_m = np.zeros((max(self.T - 1, 0), self.K))
        y = self.poisson_solve(r_c)
        if self.K:
            r_m = P[1 : self.T].reshape(self.T - 1, -1) @ self.fmat.T
            rhs = r_m - self._bt_apply(y)
            lam_m = self._schur_solve(rhs.ravel()).reshape(self.T - 1, self.K)
            lam_c = y - self.poisson_solve(self._b_apply(lam_m))
        else:
            lam_c = y
        dP, dQ = self.continuity_adjoint(lam_c)
        Pn = P.copy()
        Pn[1 : self.T] -= dP
        if self.K:
            corr = (lam_m @ self.fmat).reshape((self.T - 1,) + self.space_shape)
            Pn[1 : self.T] -= corr
        Qn = [q - dq for q, dq in zip(Q, dQ)]
        return Pn, Qn, lam_c, lam_m

    # -- interpolation to faces (the K operator of the primal-dual scheme) --
    def face_density(self, P: np.ndarray, axis: int) -> np.ndarray:
        n, h = self.axes[axis]
        sl_lo = [slice(None)] * P.ndim
        sl_hi = [slice(None)] * P.ndim
        sl_lo[1 + axis] = slice(0, n - 1)
        sl_hi[1 + axis] = slice(1, n)
        pm = 0.5 * (P[:-1] + P[1:])
        return 0.5 * (pm[tuple(sl_lo)] + pm[tuple(sl_hi)])

    def face_density_adjoint(self, Z: list) -> np.ndarray:
        """Adjoint of face_density onto interior P nodes."""
        out = np.zeros((self.T + 1,) + self.space_shape)
        for a, (n, h) in enumerate(self.axes):
            z = Z[a]
            pad = [(0, 0)] * z.ndim
            pad[1 + a] = (1, 1)
            zp = np.pad(z, pad)
            sl_lo = [slice(None)] * zp.ndim
            sl_hi = [slice(None)] * zp.ndim
            sl_lo[1 + a] = slice(0, n)
            sl_hi[1 + a] = slice(1, n + 1)
            spread = 0.25 * (zp[tuple(sl_lo)] + zp[tuple(sl_hi)])
            out[:-1] += spread
            out[1:] += spread
        return out[1 : self.T]

    def action_of(self, P: np.ndarray, Q: list, floor: float = 1e-14) -> float:
        w = self.dt * self.cellvol
        total = 0.0
        for a in range(len(self.axes)):
            zeta = self.face_density(P, a)
            q = Q[a]
            mask = zeta > floor
            total += w * float(np.sum(q[mask] ** 2 / (2.0 * zeta[mask])))
        return total


def _norm_K(prob: _GeodesicProblem, iters: int = 40, seed: int = 0) -> float:
    """Power-iteration bound on ||K||: K(P, Q) = (face-averaged P, Q).

    The momentum block is the identity, so ||K||^2 = max(1, ||interp||^2) and
    only the density block needs iterating.
    """
    rng = np.random.default_rng(seed)
    P = np.zeros((prob.T + 1,) + prob.space_shape)
    P[1 : prob.T] = rng.normal(size=(prob.T - 1,) + prob.space_shape)
    lam = 1.0
    for _ in range(iters):
        Z = [prob.face_density(P, a) for a in range(len(prob.axes))]
        dP = prob.face_density_adjoint(Z)
        lam = math.sqrt(float(np.sum(dP**2)))
        if lam == 0:
            break
        P = np.zeros_like(P)
        P[1 : prob.T] = dP / lam
    return math.sqrt(max(lam, 1.0))


def _slab_kinetic(prob: _GeodesicProblem, P, Q, floor: float = 1e-14) -> np.ndarray:
    """Per-slab kinetic action (sums to the total action)."""
    w = prob.dt * prob.cellvol
    out = np.zeros(prob.T)
    for a in range(len(prob.axes)):
        zeta = prob.face_density(P, a)
        q = Q[a]
        contrib = np.where(zeta > floor, q * q / (2.0 * np.maximum(zeta, floor)), 0.0)
        out += w * contrib.reshape(prob.T, -1).sum(axis=1)
    return out


def _run_pdhg(prob: _GeodesicProblem, opts: SolverOptions):
    T, shape = prob.T, prob.space_shape
    naxes = len(prob.axes)
    w = prob.dt * prob.cellvol

    P = np.empty((T + 1,) + shape)
    t_lin = np.linspace(0.0, 1.0, T + 1).reshape((-1,) + (1,) * len(shape))
    P[:] = (1 - t_lin) * prob.p0 + t_lin * prob.p1
    Q = [np.zeros((T,) + tuple(n - 1 if b == a else n for b, (n, _) in enumerate(prob.axes))) for a in range(naxes)]
    P, Q, lam_c, lam_m = prob.project(P, Q)

    norm_k = _norm_K(prob)
    sigma = 0.95 / norm_k * opts.step_ratio
    tau = 0.95 / (sigma * norm_k**2)

    z_zeta = [np.zeros_like(prob.face_density(P, a)) for a in range(naxes)]
    z_q = [np.zeros_like(q) for q in Q]
    Pb, Qb = P.copy(), [q.copy() for q in Q]

    action_prev = math.inf
    action = prob.action_of(P, Q)
    rel_change = math.inf
    converged = False
    it = 0
    for it in range(1, opts.max_iters + 1):
        # dual ascent on the kinetic conjugate (pointwise Moreau/cubic)
        for a in range(naxes):
            yz = z_zeta[a] + sigma * prob.face_density(Pb, a)
            yq = z_q[a] + sigma * Qb[a]
            zc, qc = _kinetic_prox(yz / sigma, yq / sigma, w / sigma)
            z_zeta[a] = yz - sigma * zc
            z_q[a] = yq - sigma * qc
        # primal descent + exact affine projection
        dP = prob.face_density_adjoint(z_zeta)
        P_new = P.copy()
        P_new[1:T] = P[1:T] - tau * dP
        Q_new = [q - tau * zq for q, zq in zip(Q, z_q)]
        P_new, Q_new, lam_c, lam_m = prob.project(P_new, Q_new)
        Pb = 2.0 * P_new - P
        Qb = [2.0 * qn - q for qn, q in zip(Q_new, Q)]
        P, Q = P_new, Q_new

        if it % opts.check_every == 0:
            action_prev, action = action, prob.action_of(P, Q)
            denom = max(abs(action), 1e-12)
            rel_change = abs(action - action_prev) / denom
            if opts.verbose:
                print(f"  iter {it}: action={action:.8g} rel_change={rel_change:.3g}")
            if it >= opts.min_iters and rel_change < opts.tol:
                converged = True
                break

    mults = (lam_c / tau, lam_m / tau if lam_m is not None else None)
    return P, Q, action, rel_change, it, converged, mults


def _extract_certificate(prob: _GeodesicProblem, mults, constraints: ConstraintSet) -> DualCertificate:
    """Build (phi, g) from the converged projection multipliers.

    At the primal-dual fixed point the continuity multipliers are, up to the
    quadrature weight dt*cellvol, the slab values of the potential phi, and the
    slice-constraint multipliers give the coefficient curves of g; node values
    come from slab averaging with linear extrapolation at the ends, and the
    result is shifted time-slab-wise so the discrete Hamilton-Jacobi margin is
    nonpositive everywhere (which restores exact weak duality for the pairing).
    """
    mu_c, mu_m = mults
    T = prob.T
    dt = prob.dt
    phibar = mu_c / (dt * prob.cellvol)
    phi = np.empty((T + 1,) + prob.space_shape)
    phi[1:T] = 0.5 * (phibar[: T - 1] + phibar[1:])
    phi[0] = phibar[0]
    phi[T] = phibar[T - 1]
    K = len(constraints)
    coeff = np.zeros((T + 1, K))
    if K and mu_m is not None and mu_m.size:
        a_nodes = -mu_m / dt
        coeff[1:T] = a_nodes
        coeff[0] = coeff[1]
        coeff[T] = coeff[T - 1]
    t_nodes = np.linspace(0.0, 1.0, T + 1)
    # The projection multipliers satisfy the interior discrete Hamilton-Jacobi
    # stationarity, but the first/last node values are free; pick them by
    # saturating the end-slab margin pointwise (one discrete Hopf-Lax step),
    # which costs nothing in dual value at the optimum.
    gvals = None
    if K:
        fmat_vals = _constraint_values(constraints, prob.axes, prob.origin)
        gvals = np.tensordot(coeff, fmat_vals, axes=(1, 0))
    for end in (0, T):
        inner = 1 if end == 0 else T - 1
        slab = 0 if end == 0 else T - 1
        sign = 1.0 if end == 0 else -1.0
        phi_end = phi[inner].copy()
        gbar = 0.5 * (gvals[inner] + gvals[end]) if gvals is not None else 0.0
        for _ in range(30):
            phib = 0.5 * (phi_end + phi[inner])
            grad_term = np.zeros(prob.space_shape)
            for a, (n, h) in enumerate(prob.axes):
                g = np.diff(phib, axis=a) / h
                gsq = g * g
                pad_lo = [(0, 0)] * gsq.ndim
                pad_hi = [(0, 0)] * gsq.ndim
                pad_lo[a] = (1, 0)
                pad_hi[a] = (0, 1)
                grad_term += 0.25 * (np.pad(gsq, pad_lo) + np.pad(gsq, pad_hi))
            new_end = phi[inner] + sign * dt * (grad_term + gbar)
            if np.max(np.abs(new_end - phi_end)) < 1e-13 * (1.0 + np.max(np.abs(phi_end))):
                phi_end = new_end
                break
            phi_end = new_end
        phi[end] = phi_end
    cert = DualCertificate(t_nodes, phi, coeff, constraints, prob.axes, prob.origin)
    return cert.repair()


def _clean_slices_1d(prob, P, constraints, origin, axes):
    """Clip tiny negatives, renormalize, and re-tilt interior slices onto the
    constraint set when clipping moved them off it."""
    x_min, (n, h) = origin[0], axes[0]
    slices = []
    max_neg = 0.0
    worst_res = 0.0
    targets = [(lambda x, c=c: c.values(x), c.target) for c in constraints if c.kind == "poly"]
    for k in range(P.shape[0]):
        mass = P[k] * h
        max_neg = max(max_neg, float(-mass.min()) if mass.min() < 0 else 0.0)
        mass = np.maximum(mass, 0.0)
        mass = mass / mass.sum()
        g = GridMeasure1D(x_min, h, mass)
        if targets and 0 < k < P.shape[0] - 1:
            res = max(abs(f(g.centers) @ g.mass - c) for f, c in targets)
            if res > 1e-12:
                try:
                    g = tilt_to_moments(g, [(f, c) for f, c in targets])
                except Exception:
                    pass
            worst_res = max(worst_res, max(abs(f(g.centers) @ g.mass - c) for f, c in targets))
        slices.append(g)
    return slices, max_neg, worst_res


def solve_geodesic(
    rho_i: GridMeasure1D,
    rho_f: GridMeasure1D,
    constraints: ConstraintSet | None = None,
    T: int = 32,
    opts: SolverOptions | None = None,
) -> SpaceTimePath:
    """Constrained-transport geodesic between two grid measures.

    Minimizes the kinetic action over discrete paths satisfying continuity,
    the endpoint data, and the per-slice constraints; returns the path with
    half the squared induced distance stored in ``action`` and an admissible
    dual certificate attached.  Endpoints must satisfy the constraints within
    ``opts.endpoint_tol`` (else InfeasibleEndpointsError).  Non-convergence
    within ``opts.max_iters`` returns the best iterate flagged
    ``converged=False``.
    """
    opts = opts or SolverOptions()
    constraints = constraints or ConstraintSet()
    if T < 2:
        raise ValueError("need at least 2 time steps")
    if (rho_i.x_min, rho_i.dx, rho_i.n_cells) != (rho_f.x_min, rho_f.dx, rho_f.n_cells):
        raise InfeasibleEndpointsError("endpoints must share one grid")
    for c in constraints:
        for name, rho in (("initial", rho_i), ("final", rho_f)):
            r = abs(c.residual(rho))
            if r > opts.endpoint_tol:
                raise InfeasibleEndpointsError(
                    f"{name} measure violates constraint {c.label or c.kind} by {r:.3g}"
                )
    axes = ((rho_i.n_cells, rho_i.dx),)
    origin = (rho_i.x_min,)
    prob = _GeodesicProblem(rho_i.mass / rho_i.dx, rho_f.mass / rho_f.dx, axes, origin, constraints, T)
    P, Q, action, rel_change, iters, converged, mults = _run_pdhg(prob, opts)

    cont_res = float(np.max(np.abs(prob.continuity(P, Q))))
    slices, max_neg, constr_res = _clean_slices_1d(prob, P, constraints, origin, axes)
    slab = _slab_kinetic(prob, P, Q)
    speeds = np.sqrt(np.maximum(2.0 * slab / prob.dt, 0.0))
    cum = np.concatenate([[0.0], np.cumsum(speeds * prob.dt)])
    params = cum / cum[-1] if cum[-1] > 0 else np.linspace(0, 1, T + 1)
    cert = _extract_certificate(prob, mults, constraints)
    path = SpaceTimePath(
        times=np.linspace(0.0, 1.0, T + 1),
        slices=slices,
        momenta=[q.copy() for q in Q],
        action=action,
        residuals={
            "continuity_residual": cont_res,
            "constraint_residual": constr_res,
            "max_negative_mass": max_neg,
            "rel_action_change": rel_change,
        },
        iterations=iters,
        converged=converged,
        params=params,
        certificate=cert,
    )
    return path


def coupling_geodesic(
    rho_i: GridMeasure2D,
    rho_f: GridMeasure2D,
    T: int = 8,
    opts: SolverOptions | None = None,
) -> SpaceTimePath:
    """Geodesic in the space of couplings: both axis marginals are pinned at
    every time slice (one linear constraint per histogram bin, last bin of
    each family dropped as redundant)."""
    opts = opts or SolverOptions()
    nx, ny = rho_i.shape
    if rho_i.shape != rho_f.shape:
        raise InfeasibleEndpointsError("endpoint grids differ")
    if nx > 48 or ny > 48 or T > 16:
        raise ValueError("coupling solver capped at 48x48 cells and T=16")
    mx, my = rho_i.mass.sum(axis=1), rho_i.mass.sum(axis=0)
    if np.max(np.abs(rho_f.mass.sum(axis=1) - mx)) > opts.endpoint_tol or np.max(
        np.abs(rho_f.mass.sum(axis=0) - my)
    ) > opts.endpoint_tol:
        raise InfeasibleEndpointsError("endpoint marginals differ beyond tolerance")
    entries = [
        Constraint(kind="marginal", axis=0, index=i, target=float(mx[i]), label=f"marg_x_{i}")
        for i in range(nx - 1)
    ] + [
        Constraint(kind="marginal", axis=1, index=j, target=float(my[j]), label=f"marg_y_{j}")
        for j in range(ny - 1)
    ]
    constraints = ConstraintSet(tuple(entries))
    axes = ((nx, rho_i.dx), (ny, rho_i.dy))
    origin = (rho_i.x_min, rho_i.y_min)
    vol = rho_i.dx * rho_i.dy
    prob = _GeodesicProblem(rho_i.mass / vol, rho_f.mass / vol, axes, origin, constraints, T)
    P, Q, action, rel_change, iters, converged, mults = _run_pdhg(prob, opts)

    cont_res = float(np.max(np.abs(prob.continuity(P, Q))))
    slices = []
    max_neg = 0.0
    worst_res = 0.0
    for k in range(T + 1):
        mass = P[k] * vol
        max_neg = max(max_neg, float(-mass.min()) if mass.min() < 0 else 0.0)
        mass = np.maximum(mass, 0.0)
        if 0 < k < T:
            mass = _ipf(mass, mx, my)
        mass = mass / mass.sum()
        worst_res = max(
            worst_res,
            float(np.max(np.abs(mass.sum(axis=1) - mx))),
            float(np.max(np.abs(mass.sum(axis=0) - my))),
        )
        slices.append(GridMeasure2D(rho_i.x_min, rho_i.dx, rho_i.y_min, rho_i.dy, mass))
    slab = _slab_kinetic(prob, P, Q)
    speeds = np.sqrt(np.maximum(2.0 * slab / prob.dt, 0.0))
    cum = np.concatenate([[0.0], np.cumsum(speeds * prob.dt)])
    params = cum / cum[-1] if cum[-1] > 0 else np.linspace(0, 1, T + 1)
    cert = _extract_certificate(prob, mults, constraints)
    return SpaceTimePath(
        times=np.linspace(0.0, 1.0, T + 1),
        slices=slices,
        momenta=[q.copy() for q in Q],
        action=action,
        residuals={
            "continuity_residual": cont_res,
            "constraint_residual": worst_res,
            "max_negative_mass": max_neg,
            "rel_action_change": rel_change,
        },
        iterations=iters,
        converged=converged,
        params=params,
        certificate=cert,
    )


def _ipf(mass: np.ndarray, mx: np.ndarray, my: np.ndarray, sweeps: int = 30) -> np.ndarray:
    """Iterative proportional fitting onto the prescribed marginals."""
    m = np.maximum(mass, 1e-300)
    for _ in range(sweeps):
        m = m * (mx / np.maximum(m.sum(axis=1), 1e-300))[:, None]
        m = m * (my / np.maximum(m.sum(axis=0), 1e-300))[None, :]
        if max(
            np.max(np.abs(m.sum(axis=1) - mx)), np.max(np.abs(m.sum(axis=0) - my))
        ) < 1e-14:
            break
    return m


def sphere_distance(mu, nu, d: int = 1, theta: float = 1.0, constraint_tol: float = 1e-6) -> float:
    """Closed-form induced distance on the moment sphere:
    2 sqrt(d theta) arcsin( W2(mu, nu) / (2 sqrt(d theta)) ).

    For theta != 1 the scaling is derived (validated numerically against the
    constrained solver), not quoted.  Inputs must satisfy the sphere
    constraints within ``constraint_tol``.
    """
    scale = 2.0 * math.sqrt(d * theta)
    for name, m in (("mu", mu), ("nu", nu)):
        if isinstance(m, GridMeasure1D):
            mean, m2 = m.mean(), m.second_moment()
        else:
            mean = float(np.linalg.norm(m.mean()))
            m2 = m.second_moment()
        if abs(mean) > constraint_tol or abs(m2 - d * theta) > constraint_tol:
            raise InfeasibleEndpointsError(
                f"{name} violates the sphere constraints: mean={mean:.3g}, m2={m2:.6g}"
            )
    if isinstance(mu, GridMeasure1D) and isinstance(nu, GridMeasure1D):
        w = w2_1d(mu, nu)
    else:
        w = w2_discrete(mu, nu)
    arg = min(w / scale, 1.0)
    return scale * math.asin(arg)


def dual_value(cert: DualCertificate, rho_i, rho_f, margin_tol: float = 1e-9) -> float:
    """Boundary pairing sum phi(1) drho_f - sum phi(0) drho_i of an admissible
    certificate; by discrete weak duality this never exceeds the action of any
    feasible path for the same data."""
    field_ = cert.margin_field()
    worst = float(field_.max())
    if worst > margin_tol:
        flat = int(np.argmax(field_))
        idx = np.unravel_index(flat, field_.shape)
        k = idx[0]
        dt = float(cert.t_nodes[1] - cert.t_nodes[0])
        xs = [cert.origin[a] + (idx[1 + a] + 0.5) * cert.axes[a][1] for a in range(len(cert.axes))]
        raise InadmissibleCertificateError(
            f"certificate margin {worst:.3g} > 0 at t={(k + 0.5) * dt:.4g}, x={xs}",
            t=(k + 0.5) * dt,
            x=xs,
            violation=worst,
        )
    mi = rho_i.mass.ravel()
    mf = rho_f.mass.ravel()
    return float(cert.phi[-1].ravel() @ mf - cert.phi[0].ravel() @ mi)


def finite_length_curve(
    y1: GridMeasure1D,
    y2: GridMeasure1D,
    u: float = 0.0,
    theta: float = 1.0,
    t_end: float = 9.0,
    n_steps: int = 3000,
    n_slices: int = 33,
) -> SpaceTimePath:
    """Constraint-respecting path from y1 to y2 through the common flow limit.

    Runs the invariant gradient flow from each endpoint toward the stationary
    Gaussian, reparametrizes by arc length, and concatenates one leg with the
    time reversal of the other.  The result upper-bounds the induced distance:
    action = length^2 / 2 after constant-speed reparametrization.
    """
    from .flows import ou_flow_grid  # local import: flows depends on constraints only

    rec = max(1, n_steps // 400)
    tr1 = ou_flow_grid(y1, u, theta, t_end, n_steps, record_every=rec)
    tr2 = ou_flow_grid(y2, u, theta, t_end, n_steps, record_every=rec)
    states = list(tr1.states) + list(tr2.states)[::-1]
    hops = np.array([w2_1d(states[j], states[j + 1]) for j in range(len(states) - 1)])
    cum = np.concatenate([[0.0], np.cumsum(hops)])
    length = float(cum[-1])
    # resample existing states at (approximately) uniform arc length
    targets = np.linspace(0.0, length, n_slices)
    idx = np.searchsorted(cum, targets, side="left")
    idx = np.clip(idx, 0, len(states) - 1)
    idx[0], idx[-1] = 0, len(states) - 1
    slices = [states[j] for j in idx]
    params = cum[idx] / length if length > 0 else np.linspace(0, 1, n_slices)
    sphere = sphere_constraints(u, theta)
    constr_res = max(sphere.max_residual(s) for s in slices)
    return SpaceTimePath(
        times=np.linspace(0.0, 1.0, n_slices),
        slices=slices,
        momenta=[],
        action=0.5 * length**2,
        residuals={
            "continuity_residual": math.nan,
            "constraint_residual": float(constr_res),
            "max_negative_mass": 0.0,
            "rel_action_change": 0.0,
        },
        iterations=0,
        converged=True,
        params=params,
        certificate=None,
    )
