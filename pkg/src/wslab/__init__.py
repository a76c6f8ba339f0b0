"""wslab: a numerical laboratory for constrained Wasserstein geometry.

Computes moment-constrained geodesics and induced distances on Wasserstein
submanifolds, simulates the gradient flows that leave those submanifolds
invariant, and verifies the resulting convexity statements, transport
inequalities, duality gaps, regularization estimates, and large-deviation
tail bounds at desk scale with explicit tolerances.
"""

__version__ = "0.1.0"
