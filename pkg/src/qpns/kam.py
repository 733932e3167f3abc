"""Quadratic KAM diagonalization of omega.d_phi + zeta.grad + Q + R."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .fourier import Lattice, ParameterPoint
from .toeplitz import (SmallDivisorError, TOp, _centre_diag_mask, compose, decay_norm,
                       diag_entries, diag_part, jdiff_norm, ldiff_norm, neumann_invert,
                       op_project_N, op_project_N_perp, transport_divisors)


@dataclass(frozen=True)
class KamSchedule:
    """Scales N_n = N0^(chi^n) and the derived exponents."""

    tau: float = 3.0
    N0: float = 2.0
    chi: float = 1.5
    n_max: int = 12
    kam_tol: float = 1e-12
    s0: float = 3.0
    M_override: int | None = None

    @property
    def M(self) -> int:
        if self.M_override is not None:
            return self.M_override
        return int(math.floor(4 * self.tau)) + 1

    @property
    def tau1(self) -> float:
        return 4 * self.tau + 2 + self.M

    @property
    def alpha_exp(self) -> float:
        return (1 + 1 / self.chi) * self.tau1 + 1

    @property
    def beta(self) -> float:
        return self.alpha_exp + 1

    def N(self, n: int) -> float:
        if n < 0:
            return 1.0
        return self.N0 ** (self.chi ** n)

    def to_dict(self) -> dict:
        return {"tau": self.tau, "N0": self.N0, "chi": self.chi, "n_max": self.n_max,
                "kam_tol": self.kam_tol, "s0": self.s0, "M": self.M}


@dataclass
class Spectrum:
    """Eigenvalue corrections q(j) on the lattice x-modes, mu(j) = i zeta.j + q(j)."""

    lattice: Lattice
    lam: ParameterPoint
    q: np.ndarray

    @property
    def mu(self) -> np.ndarray:
        return 1j * (self.lattice.xmodes @ np.asarray(self.lam.zeta)) + self.q

    def real_part_violation(self) -> float:
        return float(np.max(np.abs(self.q.real), initial=0.0))

    def _neg(self) -> np.ndarray:
        xm = self.lattice.xmodes
        pos = {tuple(j): i for i, j in enumerate(xm)}
        return np.array([pos[(-a, -b)] for a, b in xm])

    def odd_violation(self) -> float:
        """max |q(j) + q(-j)|."""
        return float(np.max(np.abs(self.q + self.q[self._neg()]), initial=0.0))

    def conj_violation(self) -> float:
        """max |q(-j) - conj(q(j))|."""
        return float(np.max(np.abs(self.q[self._neg()] - np.conj(self.q)), initial=0.0))

    def decay_constant(self, eps: float) -> float:
        """max_j |q(j)| |j| / eps."""
        jn = np.sqrt((self.lattice.xmodes ** 2).sum(1))
        return float(np.max(np.abs(self.q) * jn, initial=0.0) / eps) if eps else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["j1", "j2", "re_q", "im_q"])
        for (a, b), v in zip(self.lattice.xmodes, self.q):
            w.writerow([int(a), int(b), repr(float(v.real)), repr(float(v.imag))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, lattice: Lattice, lam: ParameterPoint) -> "Spectrum":
        rows = list(csv.DictReader(io.StringIO(text)))
        pos = {tuple(j): i for i, j in enumerate(lattice.xmodes)}
        q = np.zeros(lattice.n_x, complex)
        for r in rows:
            q[pos[(int(r["j1"]), int(r["j2"]))]] = float(r["re_q"]) + 1j * float(r["im_q"])
        return cls(lattice, lam, q)


def kam_divisors(spec: Spectrum) -> np.ndarray:
    """i omega.l + mu(j) - mu(j') over all block entries."""
    lat = spec.lattice
    q = spec.q
    return transport_divisors(spec.lam, lat) + (q[:, None] - q[None, :])[None]


def _lbracket(lat: Lattice) -> np.ndarray:
    return np.maximum(ldiff_norm(lat), 1.0)


def melnikov2_margin(spec: Spectrum, gamma: float, tau: float, N: float | None = None,
                     factor: float = 1.0) -> tuple[float, tuple | None]:
    """Smallest |div| / threshold over the in-range set (excluding l = 0, j = j').

    The threshold is factor * gamma / (<l>^tau |j|^tau |j'|^tau).  The index set
    is restricted to |l|, |j - j'| <= N when N is given.
    """
    lat = spec.lattice
    div = np.abs(np.broadcast_to(kam_divisors(spec), (4 * lat.L + 1,) * lat.d
                                 + (lat.n_x, lat.n_x)))
    jn = np.sqrt((lat.xmodes ** 2).sum(1))
    thr = factor * gamma / (_lbracket(lat) ** tau * (jn[:, None] * jn[None, :])[None] ** tau)
    sel = ~_centre_diag_mask(lat)
    if N is not None:
        tol = 1e-9 * max(1.0, N)
        sel &= (ldiff_norm(lat) <= N + tol) & (jdiff_norm(lat)[None] <= N + tol)
    if not np.any(sel) or gamma == 0:
        return math.inf, None
    ratio = np.where(sel, div / thr, np.inf)
    idx = np.unravel_index(int(np.argmin(ratio)), ratio.shape)
    return float(ratio[idx]), tuple(int(i) for i in idx)


def cantor_check_step(spec: Spectrum, gamma: float, tau: float, N_prev: float) -> tuple[bool, float]:
    """Second Melnikov conditions on |l|, |j - j'| <= N_prev; returns (ok, worst margin)."""
    m, _ = melnikov2_margin(spec, gamma, tau, N_prev)
    return m >= 1.0, m


def final_cantor_membership(spec: Spectrum, gamma: float, tau: float) -> tuple[bool, float]:
    """Second Melnikov conditions with constant 2 gamma over the whole lattice range."""
    m, _ = melnikov2_margin(spec, gamma, tau, None, factor=2.0)
    return m >= 1.0, m


@dataclass
class KamStep:
    Psi: TOp
    Phi_inv: TOp
    Q: TOp
    R: TOp


def kam_step(Q: TOp, R: TOp, sched: KamSchedule, n: int, lam: ParameterPoint,
             gamma: float | None = None) -> KamStep:
    """Conjugate T0 + Q + R by Phi = Id + Psi with Psi solving the truncated homological equation."""
    lat = R.lattice
    spec = Spectrum(lat, lam, diag_entries(Q))
    N = sched.N(n)
    if gamma is not None:
        ok, margin = cantor_check_step(spec, gamma, sched.tau, N)
        if not ok:
            raise SmallDivisorError(f"second Melnikov condition fails at step {n} "
                                    f"(margin {margin:.3e})", value=margin)
    RN = op_project_N(R, N)
    support = (RN.blocks != 0) & ~_centre_diag_mask(lat)
    div = np.broadcast_to(kam_divisors(spec), R.blocks.shape)
    if np.any(support & (np.abs(div) < 1e-14)):
        raise SmallDivisorError(f"vanishing KAM divisor at step {n}")
    Psi = TOp(lat, np.where(support, -RN.blocks / np.where(support, div, 1.0), 0), 0.0)
    I = TOp.identity(lat)
    Phi_inv = I + neumann_invert(Psi, 0.0, sched.s0)
    DR = diag_part(R)
    Rperp = op_project_N_perp(R, N)
    R_new = Rperp + compose(Phi_inv - I, DR + Rperp) + compose(compose(Phi_inv, R), Psi)
    return KamStep(Psi, Phi_inv, (Q + DR).with_order(Q.order), R_new.with_order(R.order))


def kam_homological_residual(Psi: TOp, Q: TOp, R: TOp, N: float, lam: ParameterPoint) -> TOp:
    """omega.d_phi Psi + [D, Psi] + Pi_N R - D_R on the stored support."""
    lat = R.lattice
    spec = Spectrum(lat, lam, diag_entries(Q))
    div = np.broadcast_to(kam_divisors(spec), R.blocks.shape)
    RN = op_project_N(R, N)
    return TOp(lat, div * Psi.blocks + RN.blocks - diag_part(R).blocks, R.order)


@dataclass
class KamResult:
    Psi: list
    Phi_inv: list
    Phi: TOp
    Phi_inverse: TOp
    spectrum: Spectrum
    R: TOp
    converged: bool
    failed_step: int | None
    history: list = field(default_factory=list)

    def exponents(self, floor: float = 1e3 * np.finfo(float).eps) -> list:
        """log|R_{n+1}| / log|R_n| while |R_n| stays above floor."""
        norms = [h["R_norm"] for h in self.history]
        out = []
        for a, b in zip(norms[:-1], norms[1:]):
            if a <= floor or a >= 1 or b <= 0:
                break
            out.append(math.log(b) / math.log(a))
        return out


def run_kam(Q0: TOp, R0: TOp, sched: KamSchedule, lam: ParameterPoint,
            gamma: float | None = None) -> KamResult:
    """Iterate kam_step until |R_n|_{-M,s0} drops below kam_tol times its start value."""
    lat = R0.lattice
    M = sched.M
    I = TOp.identity(lat)
    Q, R = diag_part(Q0).with_order(-1.0), R0.with_order(-float(M))
    r0 = decay_norm(R, -float(M), sched.s0)
    history = [{"step": 0, "N": sched.N(-1), "R_norm": r0,
                "R_norm_s0_plus_1": decay_norm(R, -float(M), sched.s0 + 1),
                "q_change": 0.0}]
    Psis, Phi_invs = [], []
    Phi, Phi_inverse = I, I
    converged = r0 == 0 or r0 <= sched.kam_tol * max(r0, 1e-300)
    failed = None
    n = 0
    while not converged and n < sched.n_max:
        try:
            st = kam_step(Q, R, sched, n, lam, gamma)
        except SmallDivisorError:
            failed = n
            break
        dq = float(np.max(np.abs(diag_entries(st.Q) - diag_entries(Q)), initial=0.0))
        Psis.append(st.Psi)
        Phi_invs.append(st.Phi_inv)
        Phi = compose(Phi, I + st.Psi)
        Phi_inverse = compose(st.Phi_inv, Phi_inverse)
        Q, R = st.Q, st.R
        n += 1
        rn = decay_norm(R, -float(M), sched.s0)
        history.append({"step": n, "N": sched.N(n - 1), "R_norm": rn,
                        "R_norm_s0_plus_1": decay_norm(R, -float(M), sched.s0 + 1),
                        "q_change": dq})
        converged = rn <= sched.kam_tol * r0
    spec = Spectrum(lat, lam, diag_entries(Q))
    return KamResult(Psis, Phi_invs, Phi, Phi_inverse, spec, R, converged, failed, history)
