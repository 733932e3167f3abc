"""The vorticity nonlinearity, the functional F_nu and its linearization."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fourier import (Field, Lattice, ParameterPoint, laplacian, omega_dot_ell,
                      project_zero_average_perp, zeta_dot_j)
from .toeplitz import TOp, from_multiplication


def nonlinear_kernel(xi1: np.ndarray, xi2: np.ndarray, n: int = 0) -> np.ndarray:
    """Symbol of grad_perp (-Delta)^{-1} v1 . grad v2 in the Fourier variables (xi1, xi2).

    Equals (xi1 x xi2) / |xi1|^2, optionally divided by |xi1 + xi2|^n.  The
    numerator is an integer, so the kernel vanishes exactly when xi2 = -xi1.
    """
    xi1 = np.asarray(xi1, float)
    xi2 = np.asarray(xi2, float)
    cross = xi1[..., 0] * xi2[..., 1] - xi1[..., 1] * xi2[..., 0]
    n1 = xi1[..., 0] ** 2 + xi1[..., 1] ** 2
    out = np.where(n1 > 0, cross / np.where(n1 > 0, n1, 1.0), 0.0)
    if n:
        s = xi1 + xi2
        ns = np.sqrt(s[..., 0] ** 2 + s[..., 1] ** 2)
        out = np.where(ns > 0, out / np.where(ns > 0, ns, 1.0) ** n, 0.0)
    return out


def _xmodes_of(c: np.ndarray, J: int) -> list[tuple[int, int]]:
    d = c.ndim - 2
    nz = np.any(c != 0, axis=tuple(range(d)))
    return [(int(a) - J, int(b) - J) for a, b in zip(*np.nonzero(nz))]


def bilinear_full(v1: Field, v2: Field, n: int = 0) -> np.ndarray:
    """Untruncated coefficients of N(v1, v2) (smoothed by |xi1+xi2|^{-n} when n > 0).

    Returns an array over the doubled box (|l| <= 2L, |j_k| <= 2J), including
    the j = 0 slice.  The loop runs over the x-modes of the sparser operand and
    the time convolution is done by FFT.
    """
    v1._check(v2)
    lat = v1.lattice
    d, L, J = lat.d, lat.L, lat.J
    G = 4 * L + 1
    ax = tuple(range(d))
    out = np.zeros((G,) * d + (4 * J + 1, 4 * J + 1), complex)
    a, b = v1.coeffs, v2.coeffs
    if not a.any() or not b.any():
        return np.zeros((G,) * d + (4 * J + 1, 4 * J + 1), complex)
    fa = np.fft.fft(a, n=G, axis=0) if d == 1 else np.fft.fftn(a, s=(G,) * d, axes=ax)
    fb = np.fft.fft(b, n=G, axis=0) if d == 1 else np.fft.fftn(b, s=(G,) * d, axes=ax)
    jr = np.arange(-J, J + 1)
    X1, X2 = np.meshgrid(jr, jr, indexing="ij")
    grid = np.stack([X1, X2], -1)
    m1, m2 = _xmodes_of(a, J), _xmodes_of(b, J)
    if len(m1) <= len(m2):
        for (p, q) in m1:
            k = nonlinear_kernel(np.array([p, q]), grid, n)
            contrib = fa[..., p + J, q + J][..., None, None] * k * fb
            out[..., p + J:p + 3 * J + 1, q + J:q + 3 * J + 1] += contrib
    else:
        for (p, q) in m2:
            k = nonlinear_kernel(grid, np.array([p, q]), n)
            contrib = fb[..., p + J, q + J][..., None, None] * k * fa
            out[..., p + J:p + 3 * J + 1, q + J:q + 3 * J + 1] += contrib
    res = np.fft.ifft(out, axis=0) if d == 1 else np.fft.ifftn(out, axes=ax)
    # linear convolution of centred boxes is already centred on the doubled box
    return res


def bilinear_N(v1: Field, v2: Field) -> Field:
    """Galerkin truncation of N(v1, v2) = grad_perp (-Delta)^{-1} v1 . grad v2."""
    lat = v1.lattice
    full = bilinear_full(v1, v2)
    L, J = lat.L, lat.J
    sl = tuple(slice(L, 3 * L + 1) for _ in range(lat.d)) + (slice(J, 3 * J + 1),) * 2
    return Field.from_masked(lat, full[sl])


def Q(v: Field) -> Field:
    return bilinear_N(v, v)


def dQ(v: Field, h: Field) -> Field:
    """Frechet derivative N(v, h) + N(h, v)."""
    return bilinear_N(v, h) + bilinear_N(h, v)


def transport(u: Field, lam: ParameterPoint) -> Field:
    """omega . d_phi u + zeta . grad u."""
    lat = u.lattice
    return Field(lat, 1j * (omega_dot_ell(lam, lat) + zeta_dot_j(lam, lat)) * u.coeffs, u.parity)


@dataclass(frozen=True)
class Problem:
    """Data of the forced equation at one parameter point."""

    lam: ParameterPoint
    eps: float
    forcing: Field
    nu: float = 0.0

    def with_nu(self, nu: float) -> "Problem":
        return Problem(self.lam, self.eps, self.forcing, nu)


def eval_F_nu(v: Field, prob: Problem) -> Field:
    """T0 v - nu Delta v + eps (Pi_0^perp N(v, v) - F)."""
    if prob.forcing.lattice != v.lattice:
        raise ValueError("forcing and state live on different lattices")
    out = transport(v, prob.lam) - prob.nu * laplacian(v)
    if prob.eps:
        out = out + prob.eps * (project_zero_average_perp(Q(v)) - prob.forcing)
    return out


def apply_linearized(v: Field, h: Field, prob: Problem) -> Field:
    """d F_nu(v)[h] = T0 h - nu Delta h + eps dQ(v)[h]."""
    out = transport(h, prob.lam) - prob.nu * laplacian(h)
    if prob.eps:
        out = out + prob.eps * dQ(v, h)
    return out


def advection_top(v: Field) -> TOp:
    """h -> N(v, h) as a Toeplitz matrix."""
    lat = v.lattice
    xm = lat.xmodes.astype(float)
    a1 = Field(lat, 1j * lat.jvec[1] * _inv(lat) * v.coeffs)
    a2 = Field(lat, -1j * lat.jvec[0] * _inv(lat) * v.coeffs)
    return (from_multiplication(a1).scale_cols(1j * xm[:, 0])
            + from_multiplication(a2).scale_cols(1j * xm[:, 1])).with_order(1.0)


def stretching_top(v: Field) -> TOp:
    """h -> N(h, v) = grad v . grad_perp (-Delta)^{-1} h as a Toeplitz matrix."""
    lat = v.lattice
    xm = lat.xmodes.astype(float)
    w = 1.0 / (xm ** 2).sum(1)
    d1 = Field(lat, 1j * lat.jvec[0] * v.coeffs)
    d2 = Field(lat, 1j * lat.jvec[1] * v.coeffs)
    return (from_multiplication(d1).scale_cols(1j * xm[:, 1] * w)
            + from_multiplication(d2).scale_cols(-1j * xm[:, 0] * w)).with_order(-1.0)


def _inv(lat: Lattice) -> np.ndarray:
    jsq = lat.jsq.astype(float)
    return np.where(jsq > 0, 1.0 / np.where(jsq > 0, jsq, 1.0), 0.0)


def linearized_top(v: Field, eps: float) -> TOp:
    """eps dQ(v) as a Toeplitz matrix; the full operator is T0 - nu Delta plus this."""
    return (eps * (advection_top(v) + stretching_top(v))).with_order(1.0)


@dataclass
class ForcingSpec:
    """A finite sum of real modes amp * cos(l.phi + j.x)."""

    modes: list = field(default_factory=lambda: [((1,), (1, 1), 1.0), ((1,), (1, -2), 0.5)])

    def build(self, lattice: Lattice) -> Field:
        c = np.zeros(lattice.shape, complex)
        for ell, j, amp in self.modes:
            ell = tuple(int(x) for x in ell)
            j = tuple(int(x) for x in j)
            if len(ell) != lattice.d:
                raise ValueError(f"forcing mode {ell} does not match d = {lattice.d}")
            if j == (0, 0):
                raise ValueError("forcing must have zero space average")
            if not lattice.contains(ell, j):
                raise ValueError(f"forcing mode {(ell, j)} outside the lattice")
            c[lattice.index(ell, j)] += 0.5 * amp
            c[lattice.index(tuple(-x for x in ell), tuple(-x for x in j))] += 0.5 * amp
        return Field(lattice, c, "even")

    def to_list(self) -> list:
        return [[list(e), list(j), float(a)] for e, j, a in self.modes]

    @classmethod
    def from_list(cls, items) -> "ForcingSpec":
        return cls([(tuple(e), tuple(j), float(a)) for e, j, a in items])
