"""Linear test-function constraints defining Wasserstein submanifolds.

A ConstraintSet is a finite family of (test function, target) pairs; a measure
belongs to the submanifold when every test function integrates to its target.
Test functions are sparse 1D polynomials (degree <= 6) or 2D marginal-bin
indicators; constraints are constant in time (the time-dependent class used by
the geodesic solver is generated from these by enforcing them at every slice).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .measures import GridMeasure1D, GridMeasure2D

__all__ = ["Constraint", "ConstraintSet", "sphere_constraints", "hermite_constraints"]

MAX_DEGREE = 6


@dataclass(frozen=True)
class Constraint:
    """One linear constraint int f drho = target.

    ``kind`` is 'poly' (1D polynomial with coefficient array, low degree first)
    or 'marginal' (2D marginal bin: axis 0/1 and bin index).
    """

    kind: str
    target: float
    coeffs: tuple = ()
    axis: int = 0
    index: int = 0
    label: str = ""

    def __post_init__(self):
        if self.kind == "poly":
            c = np.asarray(self.coeffs, dtype=float)
            if c.size == 0 or c.size - 1 > MAX_DEGREE:
                raise ValueError(f"polynomial degree must be in [0, {MAX_DEGREE}]")
            if np.all(c[1:] == 0):
                raise ValueError("constant test functions are redundant with mass conservation")
            if not np.all(np.isfinite(c)):
                raise ValueError("non-finite polynomial coefficient")
        elif self.kind != "marginal":
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if not np.isfinite(self.target):
            raise ValueError("constraint target must be finite")

    def values(self, x: np.ndarray) -> np.ndarray:
        if self.kind != "poly":
            raise ValueError("grid evaluation only applies to polynomial constraints")
        return np.polynomial.polynomial.polyval(x, np.asarray(self.coeffs, dtype=float))

    def evaluate(self, mu) -> float:
        if self.kind == "poly":
            if not isinstance(mu, GridMeasure1D):
                raise TypeError("polynomial constraints act on 1D grid measures")
            return float(mu.mass @ self.values(mu.centers))
        if not isinstance(mu, GridMeasure2D):
            raise TypeError("marginal constraints act on 2D grid measures")
        marg = mu.mass.sum(axis=1 - self.axis)
        return float(marg[self.index])

    def residual(self, mu) -> float:
        return self.evaluate(mu) - self.target


@dataclass(frozen=True)
class ConstraintSet:
    entries: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def residuals(self, mu) -> np.ndarray:
        return np.array([c.residual(mu) for c in self.entries])

    def max_residual(self, mu) -> float:
        if not self.entries:
            return 0.0
        return float(np.max(np.abs(self.residuals(mu))))

    def matrix(self, x: np.ndarray) -> np.ndarray:
        """Rows f_k(x_i) for polynomial entries (used by solvers and projections)."""
        return np.stack([c.values(x) for c in self.entries])

    def targets(self) -> np.ndarray:
        return np.array([c.target for c in self.entries])

    def to_dict(self) -> dict:
        out = []
        for c in self.entries:
            if c.kind == "poly":
                out.append({"kind": "poly", "coeffs": list(c.coeffs), "target": c.target, "label": c.label})
            else:
                out.append({"kind": "marginal", "axis": c.axis, "index": c.index, "target": c.target, "label": c.label})
        return {"entries": out}

    @staticmethod
    def from_dict(d: dict) -> "ConstraintSet":
        entries = []
        for e in d.get("entries", []):
            if e["kind"] == "poly":
                entries.append(Constraint(kind="poly", coeffs=tuple(e["coeffs"]), target=float(e["target"]), label=e.get("label", "")))
            else:
                entries.append(Constraint(kind="marginal", axis=int(e["axis"]), index=int(e["index"]), target=float(e["target"]), label=e.get("label", "")))
        return ConstraintSet(tuple(entries))


def sphere_constraints(u: float = 0.0, theta: float = 1.0) -> ConstraintSet:
    """Mean-u, centered-second-moment-theta constraints (d = 1 moment sphere)."""
    if theta <= 0:
        raise ValueError("theta must be positive")
    return ConstraintSet(
        (
            Constraint(kind="poly", coeffs=(0.0, 1.0), target=u, label="mean"),
            Constraint(kind="poly", coeffs=(u * u, -2.0 * u, 1.0), target=theta, label="centered_m2"),
        )
    )


def hermite_constraints(q: int, theta: float = 1.0, u: float = 0.0) -> ConstraintSet:
    """Probabilists' Hermite moments He_k((x-u)/sqrt(theta)) = 0 for k = 1..q.

    These are eigenfunctions of the associated diffusion generator, so the
    matching gradient flow preserves them; with q = 2 this is the moment
    sphere in different coordinates.
    """
    if not 1 <= q <= MAX_DEGREE:
        raise ValueError(f"q must be in [1, {MAX_DEGREE}]")
    entries = []
    s = np.sqrt(theta)
    for k in range(1, q + 1):
        he = np.polynomial.hermite_e.HermiteE.basis(k)
        # compose He_k with (x-u)/s
        poly = he.convert(kind=np.polynomial.Polynomial)
        shifted = poly(np.polynomial.Polynomial([-u / s, 1.0 / s]))
        entries.append(
            Constraint(kind="poly", coeffs=tuple(shifted.coef), target=0.0, label=f"hermite_{k}")
        )
    return ConstraintSet(tuple(entries))
