"""Order reduction of the remainder by repeated descent conjugations.

Starting from ``T0 + R`` with ``R`` of order -1, each step conjugates by
``T = Id + K`` where ``K`` solves the descent homological equation, collects
the diagonal part in ``Z`` and pushes the remainder one order down.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fourier import ParameterPoint
from .toeplitz import (TOp, compose, decay_norm, diag_part, neumann_invert,
                       solve_descent_homological)


@dataclass
class SmoothingStep:
    T: TOp
    T_inv: TOp
    Z: TOp
    R: TOp
    truncation_defect: float = 0.0


def reduce_order_step(Z: TOp, R: TOp, lam: ParameterPoint, gamma: float | None = None,
                      tau: float | None = None, s0: float = 3.0, order: int = 1) -> SmoothingStep:
    """One descent step: returns T_{n+1}, its inverse, Z_{n+1} and R_{n+1}.

    ``order`` is the current order -m of ``R``; the new remainder is tagged -(m+1).
    """
    lat = R.lattice
    K = solve_descent_homological(R, lam, gamma, tau)
    I = TOp.identity(lat)
    T = I + K
    T_inv = I + neumann_invert(K, 0.0, s0)
    D = diag_part(R)
    Z_new = (Z + D).with_order(-1.0)
    # products are cut back to the base offset box; the dropped mass is recorded
    ZK, d1 = compose(Z, K, return_defect=True)
    RK, d2 = compose(R, K, return_defect=True)
    P1, d3 = compose(T_inv - I, Z_new, return_defect=True)
    P2, d4 = compose(T_inv, ZK + RK, return_defect=True)
    R_new = P1 + P2
    return SmoothingStep(T, T_inv, Z_new, R_new.with_order(-float(order + 1)), d1 + d2 + d3 + d4)


@dataclass
class SmoothingResult:
    """B = T_1 ... T_{M-1}, the collected diagonal Q, the remainders R2 and R2_nu."""

    transforms: list
    inverses: list
    B: TOp
    B_inv: TOp
    Q: TOp
    R2: TOp
    R2_nu_unit: TOp
    history: list = field(default_factory=list)

    def R2_nu(self, nu: float) -> TOp:
        return nu * self.R2_nu_unit


def _product(ops: list, lat) -> TOp:
    out = TOp.identity(lat)
    for op in ops:
        out = compose(out, op)
    return out


def viscous_conjugate(B: TOp, B_inv: TOp, R_nu_unit: TOp) -> TOp:
    """Per unit nu: -(Delta (B - Id) + (B^{-1} - Id) Delta B) + B^{-1} R_nu B."""
    lat = B.lattice
    I = TOp.identity(lat)
    lap = -TOp.minus_laplacian(lat)
    out = -(compose(lap, B - I) + compose(compose(B_inv - I, lap), B)) \
        + compose(compose(B_inv, R_nu_unit), B)
    return out.with_order(2.0)


def run_smoothing_reduction(R1: TOp, R_nu1_unit: TOp, M: int, lam: ParameterPoint,
                            gamma: float | None = None, tau: float | None = None,
                            s0: float = 3.0) -> SmoothingResult:
    """Apply M - 1 descent steps to T0 + R1 and transport the viscous remainder."""
    if M < 1:
        raise ValueError("M must be at least 1")
    lat = R1.lattice
    Z = TOp.zeros(lat, -1.0)
    R = R1.with_order(-1.0)
    transforms, inverses = [], []
    history = [{"step": 0, "R_norm_own_order": decay_norm(R, -1.0, s0),
                "R_norm_minus_M": decay_norm(R, -float(M), s0),
                "Z_norm": 0.0, "truncation_defect": 0.0}]
    for n in range(1, M):
        st = reduce_order_step(Z, R, lam, gamma, tau, s0, order=n)
        transforms.append(st.T)
        inverses.append(st.T_inv)
        Z, R = st.Z, st.R
        history.append({"step": n,
                        "R_norm_own_order": decay_norm(R, -float(n + 1), s0),
                        "R_norm_minus_M": decay_norm(R, -float(M), s0),
                        "Z_norm": decay_norm(Z, -1.0, s0),
                        "truncation_defect": st.truncation_defect})
    B = _product(transforms, lat)
    B_inv = _product(inverses[::-1], lat)
    R2_nu_unit = viscous_conjugate(B, B_inv, R_nu1_unit) if transforms else R_nu1_unit
    return SmoothingResult(transforms, inverses, B, B_inv, diag_part(Z).with_order(-1.0),
                           R.with_order(-float(M)), R2_nu_unit, history)


def offdiagonal_mass(Q: TOp) -> float:
    """Largest entry of Q outside the time-independent diagonal."""
    return float(np.max(np.abs((Q - diag_part(Q)).blocks), initial=0.0))
