"""Straightening the transport operator by a change of the space variable.

The diffeomorphism ``x -> x + alpha(phi, x)`` conjugates
``omega.d_phi + (zeta + eps a).grad`` to ``omega.d_phi + zeta.grad`` when
``alpha`` solves ``omega.d_phi alpha + (zeta + eps a).grad alpha + eps a = 0``.
All operators are assembled as time-Toeplitz matrices on the zero-average
lattice, which realises the projected maps ``Pi_0^perp A Pi_0^perp``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fourier import (Field, Lattice, ParameterPoint, from_grid, grad_perp_inv_lap,
                      grid_points, grid_sizes, omega_dot_ell, partial_x,
                      pointwise_product, sobolev_norm, to_grid, zeta_dot_j)
from .functional import advection_top, stretching_top
from .toeplitz import (TOp, compose, compose_many, decay_norm, from_multiplication,
                       neumann_invert, transport_commutator)


class StraighteningError(RuntimeError):
    pass


def embed(u: Field, lattice: Lattice) -> Field:
    """Move a field to a lattice with the same box but another zero-average flag."""
    if (u.lattice.d, u.lattice.L, u.lattice.J) != (lattice.d, lattice.L, lattice.J):
        raise ValueError("lattice boxes differ")
    return Field.from_masked(lattice, u.coeffs, u.parity)


def velocity(v: Field) -> tuple[Field, Field]:
    """a = grad_perp (-Delta)^{-1} v."""
    return grad_perp_inv_lap(v)


def _invert_transport(rhs: Field, lam: ParameterPoint) -> Field:
    lat = rhs.lattice
    div = 1j * (omega_dot_ell(lam, lat) + zeta_dot_j(lam, lat))
    safe = np.where(lat.mask & (div != 0), div, 1.0)
    out = np.where(lat.mask & (div != 0), rhs.coeffs / safe, 0)
    return Field(lat, out)


def transport_residual(alpha: tuple[Field, Field], a: tuple[Field, Field],
                       lam: ParameterPoint, eps: float) -> tuple[Field, Field]:
    """omega.d_phi alpha_k + (zeta + eps a).grad alpha_k + eps a_k, for k = 1, 2."""
    out = []
    for k in range(2):
        ak = alpha[k]
        r = Field(ak.lattice, 1j * (omega_dot_ell(lam, ak.lattice)
                                    + zeta_dot_j(lam, ak.lattice)) * ak.coeffs)
        adv = pointwise_product(a[0], partial_x(ak, 0)) + pointwise_product(a[1], partial_x(ak, 1))
        out.append(r + eps * adv + eps * a[k])
    return out[0], out[1]


@dataclass
class AlphaResult:
    alpha: tuple[Field, Field]
    iterations: int
    residual: float
    history: list[float] = field(default_factory=list)


def solve_alpha(a: tuple[Field, Field], lam: ParameterPoint, eps: float, tol: float = 1e-13,
                max_iter: int = 60, s: float = 3.0) -> AlphaResult:
    """Solve the straightening equation by inverting omega.d_phi + zeta.grad at each step.

    The equation is linear in alpha; each sweep moves the advection by the
    current alpha to the right-hand side, so the contraction factor is of
    size eps |a| |j| over the smallest transport divisor.
    """
    lat = a[0].lattice
    zero = Field.zeros(lat, "odd")
    if eps == 0 or (a[0].max_abs() == 0 and a[1].max_abs() == 0):
        return AlphaResult((zero, zero), 0, 0.0, [0.0])
    scale = max(eps * (sobolev_norm(a[0], s) + sobolev_norm(a[1], s)), 1e-300)
    alpha = (zero, zero)
    history = []
    for it in range(1, max_iter + 1):
        new = []
        for k in range(2):
            adv = pointwise_product(a[0], partial_x(alpha[k], 0)) \
                + pointwise_product(a[1], partial_x(alpha[k], 1))
            new.append(_invert_transport(-(eps * a[k] + eps * adv), lam))
        alpha = (new[0].with_parity("odd"), new[1].with_parity("odd")) \
            if a[0].parity == "even" else (new[0], new[1])
        r = transport_residual(alpha, a, lam, eps)
        res = (sobolev_norm(r[0], s) + sobolev_norm(r[1], s)) / scale
        history.append(res)
        if res <= tol:
            return AlphaResult(alpha, it, res, history)
        if it > 3 and res > 0.9 * history[-2]:
            break
    raise StraighteningError(f"straightening equation not solved: residual {history[-1]:.3e}")


# evaluation at displaced points ---------------------------------------------------------

def evaluate_displaced(coeffs: np.ndarray, lattice: Lattice, sizes, shift: np.ndarray) -> np.ndarray:
    """Values of the series with box coefficients at (phi_g, x_g + shift(phi_g, x_g)).

    ``coeffs`` may have a larger time box than the lattice (any odd length);
    ``shift`` has shape (2, *sizes).
    """
    d = lattice.d
    nphi = tuple(sizes[:d])
    # time synthesis only
    J = lattice.J
    a = np.zeros(nphi + coeffs.shape[d:], complex)
    idx = [np.arange(n) - n // 2 for n in coeffs.shape[:d]]
    a[np.ix_(*[k % g for k, g in zip(idx, nphi)], np.arange(2 * J + 1), np.arange(2 * J + 1))] = coeffs
    H = np.fft.ifftn(a, axes=tuple(range(d))) * np.prod(nphi)
    P = int(np.prod(nphi))
    H = H.reshape(P, 2 * J + 1, 2 * J + 1)
    gx = 2 * np.pi * np.arange(sizes[d]) / sizes[d]
    gy = 2 * np.pi * np.arange(sizes[d + 1]) / sizes[d + 1]
    X1 = (gx[:, None] + shift[0].reshape(P, sizes[d], sizes[d + 1]))
    X2 = (gy[None, :] + shift[1].reshape(P, sizes[d], sizes[d + 1]))
    jr = np.arange(-J, J + 1)
    E1 = np.exp(1j * X1[..., None] * jr)
    E2 = np.exp(1j * X2[..., None] * jr)
    T = np.einsum("pab,pxyb->pxya", H, E2)
    val = np.sum(T * E1, axis=-1)
    return val.reshape(tuple(sizes))


def _shift_on_grid(alpha: tuple[Field, Field], sizes) -> np.ndarray:
    return np.stack([to_grid(alpha[k].coeffs, sizes).real for k in range(2)])


def compose_with_diffeo(h: Field, alpha: tuple[Field, Field], factor: int = 2) -> Field:
    """(A h)(phi, x) = h(phi, x + alpha(phi, x)), truncated to h's lattice."""
    lat = h.lattice
    sizes = grid_sizes(lat, factor)
    shift = _shift_on_grid(alpha, sizes)
    vals = evaluate_displaced(h.coeffs, lat, sizes, shift)
    return Field.from_masked(lat, from_grid(vals, lat.shape), h.parity)


@dataclass
class InverseDiffeo:
    alpha_inv: tuple[Field, Field]
    iterations: int
    grid_error: float


def invert_diffeo(alpha: tuple[Field, Field], tol: float = 1e-14, max_iter: int = 100,
                  factor: int = 2) -> InverseDiffeo:
    """Solve breve_alpha(phi, y) = -alpha(phi, y + breve_alpha(phi, y)) on a grid."""
    lat = alpha[0].lattice
    sizes = grid_sizes(lat, factor)
    w = np.zeros((2,) + tuple(sizes))
    for it in range(1, max_iter + 1):
        new = -np.stack([evaluate_displaced(alpha[k].coeffs, lat, sizes, w).real for k in range(2)])
        step = float(np.max(np.abs(new - w), initial=0.0))
        w = new
        if step <= tol:
            break
    else:
        raise StraighteningError(f"inverse diffeomorphism not converged, step {step:.3e}")
    inv = tuple(Field.from_masked(lat, from_grid(w[k], lat.shape), alpha[k].parity)
                for k in range(2))
    err = round_trip_error(alpha, inv, factor=factor)
    return InverseDiffeo((inv[0], inv[1]), it, err)


def round_trip_error(alpha, alpha_inv, factor: int = 3) -> float:
    """max |y + alpha_inv(y) + alpha(y + alpha_inv(y)) - y| on a test grid."""
    lat = alpha[0].lattice
    sizes = grid_sizes(lat, factor)
    w = _shift_on_grid(alpha_inv, sizes)
    back = np.stack([evaluate_displaced(alpha[k].coeffs, lat, sizes, w).real for k in range(2)])
    return float(np.max(np.abs(w + back), initial=0.0))


# operator assembly -----------------------------------------------------------------------

def diffeo_operator(alpha: tuple[Field, Field], lattice: Lattice | None = None,
                    factor: int = 2) -> TOp:
    """Toeplitz matrix of h -> h(phi, x + alpha) restricted to the lattice x-modes.

    Column j' holds the coefficients of exp(i j'.(x + alpha(phi, x))).
    """
    lat = lattice or alpha[0].lattice
    L, J, d = lat.L, lat.J, lat.d
    sizes = (factor * (4 * L + 1),) * d + (factor * (2 * J + 1),) * 2
    shift = _shift_on_grid(alpha, sizes)
    X = grid_points(sizes)
    X1 = X[d] + shift[0]
    X2 = X[d + 1] + shift[1]
    xm = lat.xmodes
    box = (4 * L + 1,) * d + (2 * J + 1, 2 * J + 1)
    blocks = np.zeros(box[:d] + (lat.n_x, lat.n_x), complex)
    for c, (j1, j2) in enumerate(xm):
        vals = np.exp(1j * (j1 * X1 + j2 * X2))
        co = from_grid(vals, box)
        blocks[..., :, c] = co[..., lat.xmask]
    return TOp(lat, blocks, 0.0)


@dataclass
class Straightening:
    """The diffeomorphism, its inverse, and the projected operators."""

    alpha: tuple[Field, Field]
    alpha_inv: tuple[Field, Field]
    A: TOp
    A_inv: TOp
    alpha_iterations: int
    alpha_residual: float
    inverse_grid_error: float


def build_straightening(v_e: Field, lam: ParameterPoint, eps: float, tol: float = 1e-13,
                        factor: int = 2) -> Straightening:
    a = velocity(v_e)
    ar = solve_alpha(a, lam, eps, tol=tol)
    inv = invert_diffeo(ar.alpha, factor=factor)
    A = diffeo_operator(ar.alpha, v_e.lattice, factor)
    A_inv = diffeo_operator(inv.alpha_inv, v_e.lattice, factor)
    return Straightening(ar.alpha, inv.alpha_inv, A, A_inv, ar.iterations, ar.residual,
                         inv.grid_error)


def a_perp_conjugate(R: TOp, st: Straightening) -> TOp:
    """A_perp^{-1} R A_perp as a Toeplitz matrix."""
    return compose_many(st.A_inv, R, st.A)


def minus_laplacian(lat: Lattice) -> TOp:
    return TOp.minus_laplacian(lat)


def conjugate_laplacian_direct(st: Straightening) -> TOp:
    """R_Delta = A_perp^{-1}(-Delta)A_perp - (-Delta)."""
    lat = st.A.lattice
    mL = minus_laplacian(lat)
    return (a_perp_conjugate(mL, st) - mL).with_order(2.0)


def laplacian_coefficients(alpha: tuple[Field, Field]):
    """Second- and first-order coefficients of A^{-1}(-Delta)A + Delta in x-variables.

    With G_kl = sum_i (delta_ik + d_i alpha_k)(delta_il + d_i alpha_l):
    a_kl = -(G_kl - delta_kl) and b_k = -Delta alpha_k, all on the full lattice.
    """
    lat0 = alpha[0].lattice
    full = lat0.with_zero_average(False)
    grad = [[embed(partial_x(alpha[k], i), full) for k in range(2)] for i in range(2)]
    a = {}
    for k in range(2):
        for l in range(2):
            g = Field.zeros(full)
            for i in range(2):
                g = g + pointwise_product(grad[i][k], grad[i][l])
            # delta_ik d_i alpha_l + d_i alpha_k delta_il
            g = g + grad[k][l] + grad[l][k]
            a[(k, l)] = -g
    b = []
    for k in range(2):
        lap = Field(lat0, -lat0.jsq * alpha[k].coeffs)
        b.append(-embed(lap, full))
    return a, b


def conjugate_laplacian(st: Straightening, factor: int = 2) -> TOp:
    """R_Delta from the coefficient formulas (coefficients moved by A^{-1})."""
    lat = st.A.lattice
    a, b = laplacian_coefficients(st.alpha)
    xm = lat.xmodes.astype(float)
    out = TOp.zeros(lat, 2.0)
    for (k, l), coef in a.items():
        c = compose_with_diffeo(coef, st.alpha_inv, factor)
        # d_k d_l has symbol -j_k j_l
        out = out + from_multiplication(c, lat).scale_cols(-xm[:, k] * xm[:, l])
    for k in range(2):
        c = compose_with_diffeo(b[k], st.alpha_inv, factor)
        out = out + from_multiplication(c, lat).scale_cols(1j * xm[:, k])
    return out.with_order(2.0)


def invert_P_delta(R_delta: TOp, s0: float = 3.0) -> TOp:
    """(Id + (-Delta)^{-1} R_Delta)^{-1} (-Delta)^{-1}."""
    lat = R_delta.lattice
    inv_jsq = 1.0 / (lat.xmodes ** 2).sum(1)
    K = R_delta.scale_rows(inv_jsq, -2.0)
    N = neumann_invert(K, 0.0, s0)
    return (TOp.identity(lat) + N).scale_cols(inv_jsq, -2.0)


# conjugation of the linearized Euler operator ----------------------------------------------

@dataclass
class ConjugatedL1:
    st: Straightening
    R1: TOp
    R1_direct: TOp
    R_delta: TOp
    transport_defect: TOp
    left_inverse_defect: TOp
    diagnostics: dict


def conjugate_L1(v_e: Field, lam: ParameterPoint, eps: float, s0: float = 3.0,
                 tol: float = 1e-13, factor: int = 2) -> ConjugatedL1:
    """Conjugate the linearized Euler operator by A_perp.

    Returns R1 with A_perp^{-1} L_e A_perp = omega.d_phi + zeta.grad + R1 computed
    in the operator algebra (so the straightening residual is absorbed), the
    same remainder computed as eps A_perp^{-1} R A_perp for comparison, and
    R_Delta so that the viscous remainder is nu R_Delta.
    """
    lat = v_e.lattice
    st = build_straightening(v_e, lam, eps, tol=tol, factor=factor)
    adv = advection_top(v_e)
    stretch = stretching_top(v_e)
    transport_part = transport_commutator(st.A, lam) + eps * compose(adv, st.A)
    transport_defect = compose(st.A_inv, transport_part)
    R1_direct = (eps * a_perp_conjugate(stretch, st)).with_order(-1.0)
    R1 = (transport_defect + R1_direct).with_order(-1.0)
    left = compose(st.A_inv, st.A) - TOp.identity(lat)
    R_delta = conjugate_laplacian_direct(st)
    diag = {
        "alpha_iterations": st.alpha_iterations,
        "alpha_residual": st.alpha_residual,
        "inverse_grid_error": st.inverse_grid_error,
        "R1_norm_m1_s0": decay_norm(R1, -1.0, s0),
        "R1_minus_direct_m1_s0": decay_norm(R1 - R1_direct, -1.0, s0),
        "R_delta_norm_2_s0": decay_norm(R_delta, 2.0, s0),
        "left_inverse_defect_0_s0": decay_norm(left, 0.0, s0),
    }
    return ConjugatedL1(st, R1, R1_direct, R_delta, transport_defect, left, diag)
