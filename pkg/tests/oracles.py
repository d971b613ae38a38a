"""Independent numerical oracles used by the tests.

These deliberately share no code with the solver paths they check.
"""

from __future__ import annotations


def distflow_fixed_point(r: float, x: float, load_p: float, load_q: float = 0.0,
                         v0: float = 1.0, tol: float = 1e-10, max_iter: int = 10_000):
    """Two-bus DistFlow: iterate l <- (P^2+Q^2)/v0, P <- load + r l,
    Q <- load_q + x l until |dP| < tol.  Returns (P, Q, l)."""
    P, Q, l = load_p, load_q, 0.0
    for _ in range(max_iter):
        l = (P * P + Q * Q) / v0
        new_p = load_p + r * l
        Q = load_q + x * l
        if abs(new_p - P) < tol:
            return new_p, Q, (new_p * new_p + Q * Q) / v0
        P = new_p
    raise RuntimeError("fixed point did not converge")
