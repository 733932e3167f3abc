"""Euler and Navier-Stokes quasi-periodic solutions and the inviscid-limit sweep."""
from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import SolverConfig
from .fourier import Field, ParameterPoint, grid_sizes, laplacian, omega_dot_ell, sobolev_norm, to_grid
from .functional import Problem, Q, apply_linearized, dQ, eval_F_nu, linearized_top
from .inversion import (DenseOperator, NonConvergence, ReducedForm, assemble_R_nu_infty,
                        invert_L_e, invert_L_nu, melnikov1_margin, viscous_symbols)
from .kam import final_cantor_membership, run_kam
from .measure import is_diophantine, is_melnikov1, unperturbed_mu
from .smoothing import offdiagonal_mass, run_smoothing_reduction
from .straighten import conjugate_L1
from .toeplitz import (decay_norm, is_real, is_reversibility_preserving, is_reversible,
                       power_norm_ratios)


class NonResonanceError(RuntimeError):
    pass


def problem_from_config(cfg: SolverConfig, nu: float = 0.0) -> Problem:
    return Problem(cfg.lam, cfg.eps, cfg.forcing_field(), nu)


def check_nonresonance(cfg: SolverConfig) -> dict:
    lat, lam = cfg.lattice, cfg.lam
    K = lat.L * lat.d + 2 * lat.J
    ok_d, m_d = is_diophantine(lam, cfg.gamma_value, cfg.tau_value, K)
    ok_1, m_1 = is_melnikov1(unperturbed_mu(lam, lat), lam, lat, cfg.gamma_value, cfg.tau_value)
    if not ok_d:
        raise NonResonanceError(f"parameter is not Diophantine (margin {m_d:.3e})")
    if not ok_1:
        raise NonResonanceError(f"first Melnikov condition fails (margin {m_1:.3e})")
    return {"diophantine_margin": m_d, "melnikov1_margin": m_1}


# Euler --------------------------------------------------------------------------------------

@dataclass
class EulerResult:
    v: Field
    iterations: int
    residual: float
    history: list


def solve_euler(prob: Problem, tol: float = 1e-13, max_iter: int = 20, s0: float = 3.0) -> EulerResult:
    """Newton iteration from zero for T0 v + eps (Q(v) - F) = 0 with dense linear solves.

    ``tol`` is relative to eps |F|_{s0}.
    """
    prob = prob.with_nu(0.0)
    lat = prob.forcing.lattice
    v = Field.zeros(lat, "odd")
    scale = prob.eps * sobolev_norm(prob.forcing, s0)
    if scale == 0:
        return EulerResult(v, 0, 0.0, [0.0])
    r = eval_F_nu(v, prob)
    history = [sobolev_norm(r, s0) / scale]
    for it in range(1, max_iter + 1):
        op = DenseOperator(lat, lambda h, v=v: apply_linearized(v, h, prob))
        v = (v - op.solve(r)).with_parity("odd")
        r = eval_F_nu(v, prob)
        history.append(sobolev_norm(r, s0) / scale)
        if history[-1] <= tol:
            return EulerResult(v, it, history[-1], history)
        if it > 2 and history[-1] > 0.5 * history[-2]:
            break
    raise NonConvergence(f"Newton stagnates at relative residual {history[-1]:.3e}")


def L_e_apply(v_e: Field, prob: Problem):
    p0 = prob.with_nu(0.0)
    return lambda h: apply_linearized(v_e, h, p0)


def L_nu_apply(v_e: Field, prob: Problem, nu: float):
    pn = prob.with_nu(nu)
    return lambda h: apply_linearized(v_e, h, pn)


# reduction pipeline ----------------------------------------------------------------------------

def build_reduced_form(v_e: Field, cfg: SolverConfig, M: int | None = None) -> ReducedForm:
    """Straighten, smooth and diagonalize the linearized Euler operator at v_e."""
    lat, lam, eps = v_e.lattice, cfg.lam, cfg.eps
    M = cfg.M_value if M is None else M
    sched = cfg.schedule
    gamma, tau = cfg.gamma_value, cfg.tau_value
    if eps == 0 or v_e.max_abs() == 0:
        rf = ReducedForm.trivial(lat, lam, eps)
        rf.diagnostics = {"trivial": True}
        return rf
    c1 = conjugate_L1(v_e, lam, eps, s0=cfg.s0)
    sm = run_smoothing_reduction(c1.R1, c1.R_delta, M, lam, gamma, tau, cfg.s0)
    kr = run_kam(sm.Q, sm.R2, dataclasses.replace(sched, M_override=M), lam, gamma)
    R_nu_unit = assemble_R_nu_infty(kr.Phi, kr.Phi_inverse, sm.R2_nu_unit)
    member, member_margin = final_cantor_membership(kr.spectrum, gamma, tau)
    diag = {
        "straighten": c1.diagnostics,
        "smoothing": sm.history,
        "smoothing_Q_offdiagonal": offdiagonal_mass(sm.Q),
        "kam": kr.history,
        "kam_converged": kr.converged,
        "kam_failed_step": kr.failed_step,
        "kam_exponents": kr.exponents(),
        "M": M,
        "q_real_part": kr.spectrum.real_part_violation(),
        "q_odd_violation": kr.spectrum.odd_violation(),
        "q_decay_constant": kr.spectrum.decay_constant(eps),
        "final_cantor_member": member,
        "final_cantor_margin": member_margin,
        "R_nu_unit_norm_2_s0": decay_norm(R_nu_unit, 2.0, cfg.s0),
        "R1_power_norm_ratios": power_norm_ratios(c1.R1, -1.0, cfg.s0, 3),
        "melnikov1_margin_final": melnikov1_margin(kr.spectrum, gamma, tau)[0],
        "diag_inverse_norm": 1.0 / float(np.min(np.abs(viscous_symbols(kr.spectrum, 0.0))[lat.mask])),
    }
    return ReducedForm(lat, lam, eps, kr.spectrum, c1.st.A, c1.st.A_inv, sm.B, sm.B_inv,
                       kr.Phi, kr.Phi_inverse, R_nu_unit, kr.R, diag)


def symmetry_report(rf: ReducedForm, v_e: Field, eps: float) -> dict:
    """Reality and reversibility predicates on the assembled operators."""
    out = {}
    for name in ("A", "A_inv", "B", "B_inv", "Phi", "Phi_inv"):
        op = getattr(rf, name)
        out[f"{name}_real"] = is_real(op)[1]
        out[f"{name}_preserving"] = is_reversibility_preserving(op)[1]
    for name in ("R_nu_unit", "R_final"):
        op = getattr(rf, name)
        out[f"{name}_real"] = is_real(op)[1]
        out[f"{name}_preserving"] = is_reversibility_preserving(op)[1]
    lin = linearized_top(v_e, eps)
    out["L_e_perturbation_real"] = is_real(lin)[1]
    out["L_e_perturbation_reversible"] = is_reversible(lin)[1]
    return out


# approximate solution and fixed point ------------------------------------------------------------

@dataclass
class ApproxResult:
    v1: Field
    v_app: Field
    defect: Field
    defect_norm: float
    identity_error: float
    v1_residual: float


def build_approximate(v_e: Field, rf: ReducedForm, prob: Problem, nu: float,
                      s0: float = 3.0, refine: bool = True, v1: Field | None = None) -> ApproxResult:
    """v_1 = L_e^{-1} Delta v_e and v_app = v_e + nu v_1, with the defect F_nu(v_app)."""
    lap = laplacian(v_e)
    if v1 is None:
        rep = invert_L_e(rf, lap, L_apply=L_e_apply(v_e, prob), refine=refine, report=True)
        v1, res = rep.u, rep.residual
    else:
        res = float("nan")
    v_app = v_e + nu * v1
    defect = eval_F_nu(v_app, prob.with_nu(nu))
    predicted = nu ** 2 * (-laplacian(v1) + prob.eps * Q(v1))
    err = sobolev_norm(defect - predicted, s0)
    return ApproxResult(v1, v_app, defect, sobolev_norm(defect, s0), err, res)


@dataclass
class FixedPointResult:
    v: Field
    psi: Field
    iterations: int
    residual: float
    psi_norm: float
    in_ball: bool
    steps: list


def fixed_point_solve(v_e: Field, ap: ApproxResult, rf: ReducedForm, prob: Problem, nu: float,
                      tol: float = 1e-14, max_iter: int = 100, s0: float = 3.0,
                      refine: bool = True) -> FixedPointResult:
    """Picard iteration psi -> -L_nu^{-1}(F_nu(v_app) + eps nu dQ(v_1)[psi] + eps Q(psi))."""
    if nu <= 0:
        raise ValueError("nu must be positive")
    lat = v_e.lattice
    Lnu = L_nu_apply(v_e, prob, nu)
    eps = prob.eps
    psi = Field.zeros(lat)
    steps = []
    in_ball = True
    for it in range(1, max_iter + 1):
        rhs = ap.defect
        if eps:
            rhs = rhs + eps * nu * dQ(ap.v1, psi) + eps * Q(psi)
        new = -invert_L_nu(rf, nu, rhs, L_apply=Lnu, refine=refine)
        step = sobolev_norm(new - psi, s0)
        psi = new
        steps.append(step)
        if sobolev_norm(psi, s0) > nu:
            in_ball = False
        if step <= tol * nu:
            break
        if it > 3 and step > 0.9 * steps[-2]:
            raise NonConvergence(f"Picard iteration stalls (step {step:.3e})",
                                 factor=step / steps[-2])
    else:
        raise NonConvergence(f"Picard iteration not converged in {max_iter} steps")
    v = ap.v_app + psi
    res = sobolev_norm(eval_F_nu(v, prob.with_nu(nu)), s0)
    return FixedPointResult(v, psi, it, res, sobolev_norm(psi, s0), in_ball, steps)


# inviscid limit ---------------------------------------------------------------------------------

def supnorm(u: Field, lam: ParameterPoint, alpha: int = 0, beta: tuple = (0, 0),
            factor: int = 4) -> float:
    """max over a uniform grid of |(omega.d_phi)^alpha d_x^beta u|."""
    c = derivative_symbol(u.lattice, lam, alpha, beta) * u.coeffs
    vals = to_grid(c, grid_sizes(u.lattice, factor))
    return float(np.max(np.abs(vals), initial=0.0))


def derivative_symbol(lat, lam: ParameterPoint, alpha: int, beta: tuple) -> np.ndarray:
    return (1j * omega_dot_ell(lam, lat)) ** alpha * (1j * lat.jvec[0]) ** beta[0] \
        * (1j * lat.jvec[1]) ** beta[1]


def embedding_constant(lat, lam: ParameterPoint, alpha: int, beta: tuple, s: float) -> float:
    """C with sup |d^(alpha, beta) u| <= C |u|_s on the lattice (Cauchy-Schwarz)."""
    sym = np.abs(derivative_symbol(lat, lam, alpha, beta))
    return float(np.sqrt(np.sum(np.where(lat.mask, sym ** 2 * lat.bracket ** (-2 * s), 0))))


def supnorm_diff(u: Field, w: Field, lam: ParameterPoint,
                 multi_indices: Sequence[tuple] = ((0, (0, 0)),), s: float = 3.0) -> list:
    """Sup-norm of derivatives of u - w with the Sobolev bound for each multi-index."""
    diff = u - w
    sob = sobolev_norm(diff, s)
    out = []
    for alpha, beta in multi_indices:
        sup = supnorm(diff, lam, alpha, tuple(beta))
        C = embedding_constant(u.lattice, lam, alpha, tuple(beta), s)
        out.append({"alpha": alpha, "beta": list(beta), "sup": sup, "sobolev": sob,
                    "bound": C * sob, "within_bound": sup <= C * sob * (1 + 1e-12)})
    return out


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) < 2:
        return float("nan")
    return float(np.polyfit(np.log(np.asarray(x)), np.log(np.asarray(y)), 1)[0])


@dataclass
class SweepRow:
    nu: float
    diff_norm: float
    sup_diff: float
    residual: float
    v_norm: float
    approx_defect: float
    psi_norm: float
    in_ball: bool
    iterations: int


@dataclass
class SweepReport:
    rows: list
    slope: float
    sup_slope: float
    slope_defined: bool
    extra: dict = field(default_factory=dict)


def solve_ns(v_e: Field, rf: ReducedForm, prob: Problem, nu: float, s0: float = 3.0,
             refine: bool = True, tol: float = 1e-14, max_iter: int = 100,
             v1: Field | None = None) -> tuple[ApproxResult, FixedPointResult]:
    ap = build_approximate(v_e, rf, prob, nu, s0, refine, v1=v1)
    fp = fixed_point_solve(v_e, ap, rf, prob, nu, tol, max_iter, s0, refine)
    return ap, fp


def nu_sweep(v_e: Field, rf: ReducedForm, prob: Problem, nus: Sequence[float], s0: float = 3.0,
             threads: int = 1, refine: bool = True, tol: float = 1e-14,
             max_iter: int = 100) -> SweepReport:
    """Solve at every nu and fit the log-log slope of |v_nu - v_e|_{s0} against nu."""
    v1 = invert_L_e(rf, laplacian(v_e), L_apply=L_e_apply(v_e, prob), refine=refine)

    def one(nu):
        ap, fp = solve_ns(v_e, rf, prob, nu, s0, refine, tol, max_iter, v1=v1)
        diff = sobolev_norm(fp.v - v_e, s0)
        sup = supnorm(fp.v - v_e, prob.lam)
        return SweepRow(float(nu), diff, sup, fp.residual, sobolev_norm(fp.v, s0),
                        ap.defect_norm, fp.psi_norm, fp.in_ball, fp.iterations)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            rows = list(ex.map(one, nus))
    else:
        rows = [one(nu) for nu in nus]
    defined = len(rows) >= 2
    slope = loglog_slope([r.nu for r in rows], [r.diff_norm for r in rows]) if defined else math.nan
    sup_slope = loglog_slope([r.nu for r in rows], [r.sup_diff for r in rows]) if defined else math.nan
    return SweepReport(rows, slope, sup_slope, defined)
