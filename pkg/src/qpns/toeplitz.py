"""Time-Toeplitz operator matrices acting on truncated fields.

An operator ``R`` is stored as the blocks ``R(l)[j, j']`` for time offsets
``l`` in ``[-2L, 2L]^d`` and x-modes ``j, j'`` of the lattice. Its action is

    (R u)(l, j) = sum_{l', j'} R(l - l')[j, j'] u(l', j')

with ``l, l'`` restricted to the lattice box (finite section in both
variables). Compositions are Toeplitz products in time and finite sections
in space, truncated back to ``|l| <= 2L``.
"""
from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .fourier import Field, Lattice, ParameterPoint

TOP_MAGIC = b"QPTO"
TOP_VERSION = 1


class NeumannDivergence(RuntimeError):
    pass


class NeumannTruncation(RuntimeError):
    def __init__(self, msg: str, residual: float):
        super().__init__(msg)
        self.residual = residual


class SmallDivisorError(RuntimeError):
    def __init__(self, msg: str, index=None, value: float | None = None):
        super().__init__(msg)
        self.index = index
        self.value = value


# geometry helpers --------------------------------------------------------------

@lru_cache(maxsize=None)
def _ldiff(lat: Lattice) -> np.ndarray:
    r = np.arange(-2 * lat.L, 2 * lat.L + 1)
    g = np.meshgrid(*([r] * lat.d), indexing="ij")
    return np.stack(g)


@lru_cache(maxsize=None)
def _jdiff(lat: Lattice) -> np.ndarray:
    xm = lat.xmodes
    return (xm[:, None, :] - xm[None, :, :]).transpose(2, 0, 1)


@lru_cache(maxsize=None)
def _neg_index(lat: Lattice) -> np.ndarray:
    xm = lat.xmodes
    pos = {tuple(j): i for i, j in enumerate(xm)}
    return np.array([pos[(-a, -b)] for a, b in xm])


def ldiff_norm(lat: Lattice) -> np.ndarray:
    """|l| on the offset box, broadcast shape (*box, 1, 1)."""
    n = np.sqrt((_ldiff(lat) ** 2).sum(0))
    return n[..., None, None]


def jdiff_norm(lat: Lattice) -> np.ndarray:
    return np.sqrt((_jdiff(lat) ** 2).sum(0))


def decay_weight(lat: Lattice) -> np.ndarray:
    """<l, j - j'> over (offset box, n_x, n_x)."""
    return np.maximum(1.0, np.maximum(ldiff_norm(lat), jdiff_norm(lat)[None]))


def xbracket(lat: Lattice) -> np.ndarray:
    return np.maximum(1.0, np.sqrt((lat.xmodes ** 2).sum(1)))


def _block_shape(lat: Lattice) -> tuple[int, ...]:
    return (4 * lat.L + 1,) * lat.d + (lat.n_x, lat.n_x)


def _centre(lat: Lattice) -> tuple[int, ...]:
    return (2 * lat.L,) * lat.d


# the operator type ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TOp:
    lattice: Lattice
    blocks: np.ndarray
    order: float = 0.0

    def __post_init__(self):
        b = np.array(self.blocks, dtype=complex)
        if b.shape != _block_shape(self.lattice):
            raise ValueError(f"block shape {b.shape} != {_block_shape(self.lattice)}")
        b.setflags(write=False)
        object.__setattr__(self, "blocks", b)

    # construction --------------------------------------------------------
    @classmethod
    def zeros(cls, lat: Lattice, order: float = 0.0) -> "TOp":
        return cls(lat, np.zeros(_block_shape(lat), complex), order)

    @classmethod
    def diagonal(cls, lat: Lattice, diag: np.ndarray, order: float = 0.0) -> "TOp":
        """Time-independent x-diagonal operator with entries diag[j]."""
        b = np.zeros(_block_shape(lat), complex)
        b[_centre(lat)] = np.diag(np.asarray(diag, complex))
        return cls(lat, b, order)

    @classmethod
    def identity(cls, lat: Lattice) -> "TOp":
        return cls.diagonal(lat, np.ones(lat.n_x))

    @classmethod
    def minus_laplacian(cls, lat: Lattice) -> "TOp":
        return cls.diagonal(lat, (lat.xmodes ** 2).sum(1).astype(float), 2.0)

    # arithmetic --------------------------------------------------------------
    def _check(self, other: "TOp"):
        if other.lattice != self.lattice:
            raise ValueError("lattice mismatch")

    def __add__(self, other: "TOp") -> "TOp":
        self._check(other)
        return TOp(self.lattice, self.blocks + other.blocks, max(self.order, other.order))

    def __sub__(self, other: "TOp") -> "TOp":
        self._check(other)
        return TOp(self.lattice, self.blocks - other.blocks, max(self.order, other.order))

    def __neg__(self) -> "TOp":
        return TOp(self.lattice, -self.blocks, self.order)

    def __mul__(self, c: complex) -> "TOp":
        return TOp(self.lattice, self.blocks * c, self.order)

    __rmul__ = __mul__

    def with_order(self, m: float) -> "TOp":
        return TOp(self.lattice, self.blocks, m)

    def scale_rows(self, d: np.ndarray, order: float = 0.0) -> "TOp":
        """diag(d) o R."""
        return TOp(self.lattice, self.blocks * np.asarray(d)[:, None], self.order + order)

    def scale_cols(self, d: np.ndarray, order: float = 0.0) -> "TOp":
        """R o diag(d)."""
        return TOp(self.lattice, self.blocks * np.asarray(d)[None, :], self.order + order)

    def block(self, ell) -> np.ndarray:
        idx = tuple(int(x) + 2 * self.lattice.L for x in np.atleast_1d(ell))
        return self.blocks[idx]

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.blocks), initial=0.0))

    def nonzero_offsets(self) -> list[tuple[int, ...]]:
        nz = np.any(self.blocks != 0, axis=(-1, -2))
        return [tuple(int(k) for k in i) for i in zip(*np.nonzero(nz))]

    # action --------------------------------------------------------------------
    def apply_array(self, X: np.ndarray) -> np.ndarray:
        """Action on x-vector data X of shape (*l_box, n_x[, m])."""
        lat = self.lattice
        L, d = lat.L, lat.d
        n = 2 * L + 1
        trailing = X.ndim - d - 1
        Y = np.zeros(X.shape, complex)
        for idx in self.nonzero_offsets():
            B = self.blocks[idx]
            out_sl, in_sl = [], []
            for k in range(d):
                ld = idx[k] - 2 * L
                lo, hi = max(0, ld), min(n, n + ld)
                if lo >= hi:
                    break
                out_sl.append(slice(lo, hi))
                in_sl.append(slice(lo - ld, hi - ld))
            else:
                if trailing:
                    Y[tuple(out_sl)] += np.einsum("ij,...jk->...ik", B, X[tuple(in_sl)])
                else:
                    Y[tuple(out_sl)] += X[tuple(in_sl)] @ B.T
        return Y

    def apply(self, u: Field) -> Field:
        if u.lattice != self.lattice:
            raise ValueError("lattice mismatch")
        X = u.coeffs[..., self.lattice.xmask]
        Y = self.apply_array(X)
        c = np.zeros(self.lattice.shape, complex)
        c[..., self.lattice.xmask] = Y
        return Field(self.lattice, c)

    def to_dense(self) -> np.ndarray:
        """Finite-section matrix in the lexicographic mode ordering of Field.to_vector."""
        lat = self.lattice
        ells = lat.ell_box
        n_l, n_x = len(ells), lat.n_x
        diff = ells[:, None, :] - ells[None, :, :] + 2 * lat.L
        G = self.blocks[tuple(diff[..., k] for k in range(lat.d))]
        return G.transpose(0, 2, 1, 3).reshape(n_l * n_x, n_l * n_x)

    # serialization ----------------------------------------------------------------
    def to_bytes(self, flags: int = 0) -> bytes:
        lat = self.lattice
        head = struct.pack("<4sIIIIBdI", TOP_MAGIC, TOP_VERSION, lat.d, lat.L, lat.J,
                           int(lat.zero_average), float(self.order), int(flags))
        b = self.blocks
        body = np.empty(b.shape + (2,), dtype="<f8")
        body[..., 0] = b.real
        body[..., 1] = b.imag
        return head + body.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TOp":
        size = struct.calcsize("<4sIIIIBdI")
        magic, version, d, L, J, za, order, _flags = struct.unpack("<4sIIIIBdI", blob[:size])
        if magic != TOP_MAGIC:
            raise ValueError("not an operator record")
        if version != TOP_VERSION:
            raise ValueError(f"operator record version {version} != supported {TOP_VERSION}")
        lat = Lattice(d, L, J, bool(za))
        body = np.frombuffer(blob[size:], dtype="<f8")
        shape = _block_shape(lat)
        if body.size != 2 * int(np.prod(shape)):
            raise ValueError("operator record length does not match its header")
        body = body.reshape(shape + (2,))
        return cls(lat, body[..., 0] + 1j * body[..., 1], order)


# algebra -----------------------------------------------------------------------

def compose(R: TOp, Q: TOp, return_defect: bool = False):
    """R o Q, truncated back to |l| <= 2L; optionally the Frobenius norm dropped."""
    R._check(Q)
    lat = R.lattice
    d, L = lat.d, lat.L
    n_b = 4 * L + 1
    rz, qz = R.nonzero_offsets(), Q.nonzero_offsets()
    if len(rz) * len(qz) <= 64:
        out = np.zeros((8 * L + 1,) * d + (lat.n_x, lat.n_x), complex)
        for a in rz:
            Ra = R.blocks[a]
            for b in qz:
                out[tuple(x + y for x, y in zip(a, b))] += Ra @ Q.blocks[b]
    else:
        G = 8 * L + 1
        ax = tuple(range(d))
        fr = np.fft.fftn(R.blocks, s=(G,) * d, axes=ax)
        fq = np.fft.fftn(Q.blocks, s=(G,) * d, axes=ax)
        out = np.fft.ifftn(fr @ fq, axes=ax)
    keep = tuple(slice(2 * L, 2 * L + n_b) for _ in range(d))
    res = TOp(lat, out[keep], R.order + Q.order)
    if not return_defect:
        return res
    total = np.sum(np.abs(out) ** 2)
    defect = float(np.sqrt(max(total - np.sum(np.abs(out[keep]) ** 2), 0.0)))
    return res, defect


def compose_many(*ops: TOp) -> TOp:
    out = ops[0]
    for op in ops[1:]:
        out = compose(out, op)
    return out


def decay_norm(R: TOp, m: float, s: float) -> float:
    lat = R.lattice
    w = decay_weight(lat) ** (2 * s)
    cols = np.sum(w * np.abs(R.blocks) ** 2, axis=tuple(range(lat.d)) + (lat.d,))
    return float(np.max(np.sqrt(cols) * xbracket(lat) ** (-m), initial=0.0))


def power_norm_ratios(R: TOp, m: float, s: float, n_max: int = 4) -> list[float]:
    """|R^n|_{m,s} / |R|_{m,s}^n for n = 1..n_max, the measured power-norm growth."""
    r = decay_norm(R, m, s)
    if r == 0:
        return [0.0] * n_max
    out, P = [], R
    for n in range(1, n_max + 1):
        out.append(decay_norm(P, m, s) / r ** n)
        P = compose(P, R)
    return out


def neumann_invert(R: TOp, m: float = 0.0, s0: float = 3.0, tol: float = 1e-14,
                   max_terms: int = 60) -> TOp:
    """(Id + R)^{-1} - Id by the truncated Neumann series."""
    r = decay_norm(R, m, s0)
    if r >= 1.0:
        raise NeumannDivergence(f"|R|_(m={m}, s0={s0}) = {r:.3e} >= 1")
    total = TOp.zeros(R.lattice, R.order)
    term = -R
    for _ in range(max_terms):
        total = total + term
        tn = decay_norm(term, m, s0)
        if tn < tol:
            return total
        term = -compose(R, term)
    raise NeumannTruncation(f"Neumann series not converged after {max_terms} terms",
                            decay_norm(term, m, s0))


def diag_part(R: TOp) -> TOp:
    lat = R.lattice
    b = np.zeros_like(R.blocks)
    c = _centre(lat)
    b[c] = np.diag(np.diag(R.blocks[c]))
    return TOp(lat, b, R.order)


def diag_entries(R: TOp) -> np.ndarray:
    return np.diag(R.blocks[_centre(R.lattice)]).copy()


def _window_mask(lat: Lattice, N: float) -> np.ndarray:
    eps = 1e-9 * max(1.0, N)
    return (ldiff_norm(lat) <= N + eps) & (jdiff_norm(lat)[None] <= N + eps)


def op_project_N(R: TOp, N: float) -> TOp:
    return TOp(R.lattice, np.where(_window_mask(R.lattice, N), R.blocks, 0), R.order)


def op_project_N_perp(R: TOp, N: float) -> TOp:
    return TOp(R.lattice, np.where(_window_mask(R.lattice, N), 0, R.blocks), R.order)


def from_multiplication(a: Field, target: Lattice | None = None) -> TOp:
    """Operator of multiplication by a: blocks a_hat(l, j - j')."""
    lat = target or a.lattice
    if (lat.d, lat.L, lat.J) != (a.lattice.d, a.lattice.L, a.lattice.J):
        raise ValueError("lattice mismatch")
    L, J = lat.L, lat.J
    jd = _jdiff(lat)
    inbox = (np.abs(jd[0]) <= J) & (np.abs(jd[1]) <= J)
    ji = np.where(inbox, jd[0] + J, 0)
    jk = np.where(inbox, jd[1] + J, 0)
    b = np.zeros(_block_shape(lat), complex)
    inner = tuple(slice(L, 3 * L + 1) for _ in range(lat.d))
    b[inner] = np.where(inbox, a.coeffs[..., ji, jk], 0)
    return TOp(lat, b, 0.0)


def _flipped(R: TOp) -> np.ndarray:
    lat = R.lattice
    neg = _neg_index(lat)
    b = R.blocks[(slice(None, None, -1),) * lat.d]
    return b[..., neg, :][..., neg]


def reality_violation(R: TOp) -> float:
    return float(np.max(np.abs(R.blocks - np.conj(_flipped(R))), initial=0.0))


def reversibility_violation(R: TOp) -> float:
    return float(np.max(np.abs(R.blocks + _flipped(R)), initial=0.0))


def preservation_violation(R: TOp) -> float:
    return float(np.max(np.abs(R.blocks - _flipped(R)), initial=0.0))


def is_real(R: TOp, tol: float = 1e-11) -> tuple[bool, float]:
    v = reality_violation(R)
    return v <= tol, v


def is_reversible(R: TOp, tol: float = 1e-11) -> tuple[bool, float]:
    v = reversibility_violation(R)
    return v <= tol, v


def is_reversibility_preserving(R: TOp, tol: float = 1e-11) -> tuple[bool, float]:
    v = preservation_violation(R)
    return v <= tol, v


# homological equations ---------------------------------------------------------------

def omega_ldiff(lam: ParameterPoint, lat: Lattice) -> np.ndarray:
    """omega . l over the offset box, broadcast shape (*box, 1, 1)."""
    return np.tensordot(np.asarray(lam.omega), _ldiff(lat), axes=1)[..., None, None]


def zeta_jdiff(lam: ParameterPoint, lat: Lattice) -> np.ndarray:
    return np.tensordot(np.asarray(lam.zeta), _jdiff(lat), axes=1)[None]


def transport_divisors(lam: ParameterPoint, lat: Lattice) -> np.ndarray:
    """i(omega . l + zeta . (j - j')) per block entry."""
    return 1j * (omega_ldiff(lam, lat) + zeta_jdiff(lam, lat))


def dphi_commutator(R: TOp, lam: ParameterPoint) -> TOp:
    """[omega . d_phi, R]: blocks multiplied by i omega . l."""
    return TOp(R.lattice, 1j * omega_ldiff(lam, R.lattice) * R.blocks, R.order)


def transport_commutator(R: TOp, lam: ParameterPoint) -> TOp:
    """[omega . d_phi + zeta . grad, R]."""
    return TOp(R.lattice, transport_divisors(lam, R.lattice) * R.blocks, R.order)


def diag_commutator(mu: np.ndarray, R: TOp) -> TOp:
    """[diag(mu), R]: entries (mu_j - mu_j') R."""
    mu = np.asarray(mu)
    return TOp(R.lattice, (mu[:, None] - mu[None, :]) * R.blocks, R.order)


def _centre_diag_mask(lat: Lattice) -> np.ndarray:
    m = np.zeros(_block_shape(lat), bool)
    m[_centre(lat)] = np.eye(lat.n_x, dtype=bool)
    return m


def solve_descent_homological(R: TOp, lam: ParameterPoint, gamma: float | None = None,
                              tau: float | None = None, floor: float = 1e-13) -> TOp:
    """Solve omega.d_phi Psi + [zeta.grad, Psi] + R - D_R = 0 entrywise.

    When gamma and tau are given, every divisor on the support of R is checked
    against gamma / (|l| + |j - j'|)^tau before dividing.
    """
    lat = R.lattice
    div = transport_divisors(lam, lat)
    div = np.broadcast_to(div, R.blocks.shape)
    diag = _centre_diag_mask(lat)
    support = (R.blocks != 0) & ~diag
    _check_divisors(np.abs(div), support, lat, floor, gamma, tau, kind="descent")
    safe = np.where(support, div, 1.0)
    psi = np.where(support, -R.blocks / safe, 0)
    return TOp(lat, psi, R.order)


def _check_divisors(absdiv, support, lat, floor, gamma, tau, kind):
    if not np.any(support):
        return
    bad = support & (absdiv < floor)
    if np.any(bad):
        idx = tuple(int(i[0]) for i in np.nonzero(bad))
        raise SmallDivisorError(f"{kind} divisor below {floor:g} at block index {idx}",
                                index=idx, value=float(absdiv[idx]))
    if gamma is not None and tau is not None:
        kn = (ldiff_norm(lat) + jdiff_norm(lat)[None])
        thr = gamma / np.maximum(kn, 1.0) ** tau
        viol = support & (absdiv < thr)
        if np.any(viol):
            idx = tuple(int(i[0]) for i in np.nonzero(viol))
            raise SmallDivisorError(f"{kind} divisor violates the Diophantine bound at {idx}",
                                    index=idx, value=float(absdiv[idx]))


def homological_residual_descent(Psi: TOp, R: TOp, lam: ParameterPoint) -> TOp:
    return transport_commutator(Psi, lam) + R - diag_part(R)


def iter_offsets(lat: Lattice):
    r = range(-2 * lat.L, 2 * lat.L + 1)
    return itertools.product(r, repeat=lat.d)
