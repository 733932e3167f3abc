"""Truncated Fourier fields on T^d x T^2.

A field is stored as a dense complex array over the rectangular box
``|l|_inf <= L``, ``|j|_inf <= J``. On a zero-average lattice the ``j = 0``
plane is not part of the mode set and is kept identically zero.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

FIELD_MAGIC = b"QPFD"
FIELD_VERSION = 1

PARITIES = ("even", "odd", "none")


@dataclass(frozen=True)
class ParameterPoint:
    """lambda = (omega, zeta): time frequencies and the constant drift."""

    omega: tuple[float, ...]
    zeta: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "omega", tuple(float(w) for w in self.omega))
        object.__setattr__(self, "zeta", tuple(float(z) for z in self.zeta))
        if len(self.zeta) != 2:
            raise ValueError("zeta must have two components")
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError("parameter values must be finite")

    @property
    def d(self) -> int:
        return len(self.omega)

    def as_array(self) -> np.ndarray:
        return np.array(self.omega + self.zeta, dtype=float)

    @classmethod
    def from_array(cls, x: Sequence[float], d: int) -> "ParameterPoint":
        x = list(x)
        return cls(tuple(x[:d]), tuple(x[d:d + 2]))

    def to_dict(self) -> dict:
        return {"omega": list(self.omega), "zeta": list(self.zeta)}


@dataclass(frozen=True)
class Lattice:
    d: int
    L: int
    J: int
    zero_average: bool = True

    def __post_init__(self):
        if self.d < 1 or self.L < 1 or self.J < 2:
            raise ValueError(f"invalid lattice {self}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (2 * self.L + 1,) * self.d + (2 * self.J + 1, 2 * self.J + 1)

    @cached_property
    def ell(self) -> np.ndarray:
        """Integer l-components broadcast over the box, shape (d, *shape)."""
        r = np.arange(-self.L, self.L + 1)
        s = np.arange(-self.J, self.J + 1)
        grids = np.meshgrid(*([r] * self.d + [s, s]), indexing="ij")
        return np.stack(grids[: self.d])

    @cached_property
    def jvec(self) -> np.ndarray:
        r = np.arange(-self.L, self.L + 1)
        s = np.arange(-self.J, self.J + 1)
        grids = np.meshgrid(*([r] * self.d + [s, s]), indexing="ij")
        return np.stack(grids[self.d:])

    @cached_property
    def jsq(self) -> np.ndarray:
        return (self.jvec**2).sum(0)

    @cached_property
    def bracket(self) -> np.ndarray:
        """<l, j> = max(1, |l|, |j|) on every box entry."""
        el = np.sqrt((self.ell**2).sum(0))
        jj = np.sqrt(self.jsq)
        return np.maximum(1.0, np.maximum(el, jj))

    @cached_property
    def mask(self) -> np.ndarray:
        m = np.ones(self.shape, dtype=bool)
        if self.zero_average:
            m &= self.jsq != 0
        return m

    @property
    def n_modes(self) -> int:
        return int(self.mask.sum())

    @cached_property
    def xmodes(self) -> np.ndarray:
        """x-modes of the lattice in lexicographic order, shape (n_x, 2)."""
        s = np.arange(-self.J, self.J + 1)
        j1, j2 = np.meshgrid(s, s, indexing="ij")
        modes = np.stack([j1.ravel(), j2.ravel()], axis=1)
        if self.zero_average:
            modes = modes[(modes != 0).any(axis=1)]
        return modes

    @property
    def n_x(self) -> int:
        return len(self.xmodes)

    @cached_property
    def xmask(self) -> np.ndarray:
        m = np.ones((2 * self.J + 1,) * 2, dtype=bool)
        if self.zero_average:
            m[self.J, self.J] = False
        return m

    @cached_property
    def ell_box(self) -> np.ndarray:
        """All l in the box, lexicographic, shape (n_l, d)."""
        r = np.arange(-self.L, self.L + 1)
        g = np.meshgrid(*([r] * self.d), indexing="ij")
        return np.stack([a.ravel() for a in g], axis=1)

    @property
    def diameter(self) -> float:
        return float(self.bracket[self.mask].max())

    def with_zero_average(self, flag: bool) -> "Lattice":
        return Lattice(self.d, self.L, self.J, flag)

    def index(self, ell: Sequence[int], j: Sequence[int]) -> tuple[int, ...]:
        ell = tuple(int(x) for x in np.atleast_1d(ell))
        if len(ell) != self.d:
            raise ValueError("l has wrong length")
        return tuple(x + self.L for x in ell) + (int(j[0]) + self.J, int(j[1]) + self.J)

    def contains(self, ell: Sequence[int], j: Sequence[int]) -> bool:
        ell = np.atleast_1d(ell)
        if np.any(np.abs(ell) > self.L) or abs(j[0]) > self.J or abs(j[1]) > self.J:
            return False
        return not (self.zero_average and j[0] == 0 and j[1] == 0)

    def to_dict(self) -> dict:
        return {"d": self.d, "L_max": self.L, "J_max": self.J,
                "zero_average": self.zero_average}

    @classmethod
    def from_dict(cls, d: dict) -> "Lattice":
        return cls(int(d["d"]), int(d["L_max"]), int(d["J_max"]), bool(d["zero_average"]))


@dataclass(frozen=True, eq=False)
class Field:
    lattice: Lattice
    coeffs: np.ndarray
    parity: str = "none"

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex)
        if c.shape != self.lattice.shape:
            raise ValueError(f"coefficient shape {c.shape} != lattice shape {self.lattice.shape}")
        if self.parity not in PARITIES:
            raise ValueError(f"unknown parity tag {self.parity!r}")
        if np.any(c[~self.lattice.mask] != 0):
            raise ValueError("nonzero coefficient outside the lattice mode set")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    # construction -----------------------------------------------------
    @classmethod
    def zeros(cls, lattice: Lattice, parity: str = "none") -> "Field":
        return cls(lattice, np.zeros(lattice.shape, complex), parity)

    @classmethod
    def from_masked(cls, lattice: Lattice, coeffs: np.ndarray, parity: str = "none") -> "Field":
        """Build a field after zeroing everything outside the mode set."""
        c = np.where(lattice.mask, coeffs, 0)
        return cls(lattice, c, parity)

    @classmethod
    def mode(cls, lattice: Lattice, ell, j, c: complex = 1.0) -> "Field":
        a = np.zeros(lattice.shape, complex)
        a[lattice.index(ell, j)] = c
        return cls(lattice, a)

    @classmethod
    def from_vector(cls, lattice: Lattice, vec: np.ndarray, parity: str = "none") -> "Field":
        a = np.zeros(lattice.shape, complex)
        a[lattice.mask] = vec
        return cls(lattice, a, parity)

    def to_vector(self) -> np.ndarray:
        return self.coeffs[self.lattice.mask]

    def with_parity(self, parity: str) -> "Field":
        return Field(self.lattice, self.coeffs, parity)

    # arithmetic ------------------------------------------------------
    def _check(self, other: "Field"):
        if other.lattice != self.lattice:
            raise ValueError("lattice mismatch")

    def __add__(self, other: "Field") -> "Field":
        self._check(other)
        p = self.parity if self.parity == other.parity else "none"
        return Field(self.lattice, self.coeffs + other.coeffs, p)

    def __sub__(self, other: "Field") -> "Field":
        self._check(other)
        p = self.parity if self.parity == other.parity else "none"
        return Field(self.lattice, self.coeffs - other.coeffs, p)

    def __neg__(self) -> "Field":
        return Field(self.lattice, -self.coeffs, self.parity)

    def __mul__(self, c: complex) -> "Field":
        if isinstance(c, Field):
            raise TypeError("use pointwise_product for field products")
        p = self.parity if np.isreal(c) else "none"
        return Field(self.lattice, self.coeffs * c, p)

    __rmul__ = __mul__

    def __truediv__(self, c: complex) -> "Field":
        return self * (1.0 / c)

    # symmetry ---------------------------------------------------------
    def reflected(self) -> np.ndarray:
        """Coefficients of u(-phi, -x), i.e. c(-l, -j)."""
        return self.coeffs[(slice(None, None, -1),) * self.coeffs.ndim]

    def reality_violation(self) -> float:
        return float(np.max(np.abs(self.coeffs - np.conj(self.reflected())), initial=0.0))

    def is_real(self, tol: float = 1e-11) -> bool:
        return self.reality_violation() <= tol

    def parity_violation(self, parity: str) -> float:
        sign = {"even": 1.0, "odd": -1.0}[parity]
        return float(np.max(np.abs(self.coeffs - sign * self.reflected()), initial=0.0))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.coeffs), initial=0.0))

    # serialization ------------------------------------------------------
    def to_bytes(self) -> bytes:
        lat = self.lattice
        head = struct.pack("<4sIIIIB", FIELD_MAGIC, FIELD_VERSION, lat.d, lat.L, lat.J,
                           int(lat.zero_average))
        vec = self.to_vector()
        body = np.empty(2 * len(vec), dtype="<f8")
        body[0::2] = vec.real
        body[1::2] = vec.imag
        return head + body.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes, parity: str = "none") -> "Field":
        size = struct.calcsize("<4sIIIIB")
        magic, version, d, L, J, za = struct.unpack("<4sIIIIB", blob[:size])
        if magic != FIELD_MAGIC:
            raise ValueError("not a field record")
        if version != FIELD_VERSION:
            raise ValueError(f"field record version {version} != supported {FIELD_VERSION}")
        lat = Lattice(d, L, J, bool(za))
        body = np.frombuffer(blob[size:], dtype="<f8")
        if len(body) != 2 * lat.n_modes:
            raise ValueError("field record length does not match its header")
        return cls.from_vector(lat, body[0::2] + 1j * body[1::2], parity)

    def to_json(self) -> str:
        vec = self.to_vector()
        return json.dumps({
            "version": FIELD_VERSION,
            "lattice": self.lattice.to_dict(),
            "parity": self.parity,
            "re": vec.real.tolist(),
            "im": vec.imag.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "Field":
        obj = json.loads(text)
        if obj.get("version") != FIELD_VERSION:
            raise ValueError(f"field JSON version {obj.get('version')} != {FIELD_VERSION}")
        lat = Lattice.from_dict(obj["lattice"])
        vec = np.asarray(obj["re"]) + 1j * np.asarray(obj["im"])
        return cls.from_vector(lat, vec, obj.get("parity", "none"))


def random_field(lattice: Lattice, rng: np.random.Generator, *, decay: float = 1.0,
                 real: bool = True, parity: str | None = None, scale: float = 1.0) -> Field:
    """Random field with coefficients damped like exp(-decay * <l, j>)."""
    shape = lattice.shape
    c = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    c *= scale * np.exp(-decay * (lattice.bracket - 1))
    u = Field.from_masked(lattice, c)
    if real:
        u = Field(lattice, 0.5 * (u.coeffs + np.conj(u.reflected())))
    if parity is not None:
        u = parity_project(u, parity)
    return u


# norms ---------------------------------------------------------------------

def sobolev_norm(u: Field, s: float) -> float:
    if s < 0:
        raise ValueError("s must be nonnegative")
    w = u.lattice.bracket ** (2 * s)
    return float(np.sqrt(np.sum(w * np.abs(u.coeffs) ** 2)))


def lip_gamma_norm(family: Sequence[tuple[ParameterPoint, Field]], s: float, gamma: float) -> float:
    """Sup norm at s plus gamma times the largest nearest-neighbour quotient at s - 1.

    Warns and drops the Lipschitz part when the grid has a single point.
    """
    if len(family) == 0:
        raise ValueError("empty family")
    sup = max(sobolev_norm(u, s) for _, u in family)
    if len(family) == 1:
        warnings.warn("single-point parameter grid: Lipschitz part reported as 0",
                      RuntimeWarning, stacklevel=2)
        return sup
    pts = np.array([lam.as_array() for lam, _ in family])
    lip = 0.0
    for i, (_, u) in enumerate(family):
        dist = np.linalg.norm(pts - pts[i], axis=1)
        dist[i] = np.inf
        k = int(np.argmin(dist))
        q = sobolev_norm(u - family[k][1], max(s - 1, 0.0)) / dist[k]
        lip = max(lip, q)
    return sup + gamma * lip


# projectors ----------------------------------------------------------------

def project_N(u: Field, N: float) -> Field:
    if N <= 0:
        raise ValueError("N must be positive")
    return Field(u.lattice, np.where(u.lattice.bracket <= N, u.coeffs, 0), u.parity)


def project_N_perp(u: Field, N: float) -> Field:
    if N <= 0:
        raise ValueError("N must be positive")
    return Field(u.lattice, np.where(u.lattice.bracket > N, u.coeffs, 0), u.parity)


def project_zero_average(u: Field) -> Field:
    """Keep the x-average (j = 0 modes)."""
    return Field(u.lattice, np.where(u.lattice.jsq == 0, u.coeffs, 0), u.parity)


def project_zero_average_perp(u: Field) -> Field:
    return Field(u.lattice, np.where(u.lattice.jsq != 0, u.coeffs, 0), u.parity)


def parity_project(u: Field, parity: str) -> Field:
    sign = {"even": 1.0, "odd": -1.0}[parity]
    return Field(u.lattice, 0.5 * (u.coeffs + sign * u.reflected()), parity)


# products --------------------------------------------------------------------

def _product_parity(p: str, q: str) -> str:
    if "none" in (p, q):
        return "none"
    return "even" if p == q else "odd"


def convolve_full(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact linear convolution of two coefficient boxes (full support).

    Loops over the nonzero entries of the sparser operand, so products with
    a handful of modes are cheap and the summation order is deterministic.
    """
    if np.count_nonzero(a) > np.count_nonzero(b):
        a, b = b, a
    out = np.zeros(tuple(x + y - 1 for x, y in zip(a.shape, b.shape)), complex)
    for idx in zip(*np.nonzero(a)):
        sl = tuple(slice(i, i + n) for i, n in zip(idx, b.shape))
        out[sl] += a[idx] * b
    return out


def crop_full(full: np.ndarray, lattice: Lattice) -> np.ndarray:
    """Centre crop of a full convolution back to the lattice box."""
    sl = []
    for n_full, n in zip(full.shape, lattice.shape):
        off = (n_full - n) // 2
        sl.append(slice(off, off + n))
    return full[tuple(sl)]


def pointwise_product(u: Field, v: Field) -> Field:
    """Galerkin product: exact coefficient convolution truncated to the lattice."""
    u._check(v)
    full = convolve_full(u.coeffs, v.coeffs)
    return Field.from_masked(u.lattice, crop_full(full, u.lattice),
                             _product_parity(u.parity, v.parity))


# differential operators ---------------------------------------------------------

def _flip(p: str) -> str:
    return {"even": "odd", "odd": "even", "none": "none"}[p]


def _lam_arrays(lam: ParameterPoint, lattice: Lattice):
    if lam.d != lattice.d:
        raise ValueError("parameter dimension does not match the lattice")
    return np.asarray(lam.omega), np.asarray(lam.zeta)


def omega_dot_ell(lam: ParameterPoint, lattice: Lattice) -> np.ndarray:
    om, _ = _lam_arrays(lam, lattice)
    return np.tensordot(om, lattice.ell, axes=1)


def zeta_dot_j(lam: ParameterPoint, lattice: Lattice) -> np.ndarray:
    _, ze = _lam_arrays(lam, lattice)
    return np.tensordot(ze, lattice.jvec, axes=1)


def omega_dphi(u: Field, lam: ParameterPoint) -> Field:
    return Field(u.lattice, 1j * omega_dot_ell(lam, u.lattice) * u.coeffs, _flip(u.parity))


def zeta_grad(u: Field, lam: ParameterPoint) -> Field:
    return Field(u.lattice, 1j * zeta_dot_j(lam, u.lattice) * u.coeffs, _flip(u.parity))


def partial_x(u: Field, k: int) -> Field:
    return Field(u.lattice, 1j * u.lattice.jvec[k] * u.coeffs, _flip(u.parity))


def partial_phi(u: Field, k: int) -> Field:
    return Field(u.lattice, 1j * u.lattice.ell[k] * u.coeffs, _flip(u.parity))


def laplacian(u: Field) -> Field:
    return Field(u.lattice, -u.lattice.jsq * u.coeffs, u.parity)


def _require_zero_average(u: Field):
    if not u.lattice.zero_average:
        raise ValueError("operator needs a zero-average lattice (j = 0 present)")


def _inv_jsq(lattice: Lattice) -> np.ndarray:
    jsq = lattice.jsq.astype(float)
    return np.where(jsq > 0, 1.0 / np.where(jsq > 0, jsq, 1.0), 0.0)


def inv_laplacian(u: Field) -> Field:
    _require_zero_average(u)
    return Field(u.lattice, -_inv_jsq(u.lattice) * u.coeffs, u.parity)


def grad_perp_inv_lap(u: Field) -> tuple[Field, Field]:
    """Velocity (d_2, -d_1)(-Delta)^{-1} u as two fields."""
    _require_zero_average(u)
    lat = u.lattice
    w = _inv_jsq(lat)
    p = _flip(u.parity)
    return (Field(lat, 1j * lat.jvec[1] * w * u.coeffs, p),
            Field(lat, -1j * lat.jvec[0] * w * u.coeffs, p))


def bracket2(u: Field) -> Field:
    return Field(u.lattice, (1.0 + u.lattice.jsq) * u.coeffs, u.parity)


def inv_bracket2(u: Field) -> Field:
    return Field(u.lattice, u.coeffs / (1.0 + u.lattice.jsq), u.parity)


# grid evaluation --------------------------------------------------------------

def grid_sizes(lattice: Lattice, factor: int = 2) -> tuple[int, ...]:
    return (factor * (2 * lattice.L + 1),) * lattice.d + (factor * (2 * lattice.J + 1),) * 2


def _embed_for_fft(coeffs: np.ndarray, sizes: Sequence[int]) -> np.ndarray:
    """Place centred coefficients into an FFT-ordered array of the given sizes."""
    out = np.zeros(tuple(sizes), complex)
    idx = []
    for n_c, n_g in zip(coeffs.shape, sizes):
        k = np.arange(n_c) - n_c // 2
        if n_g < n_c:
            raise ValueError("grid too small for the coefficient box")
        idx.append(k % n_g)
    out[np.ix_(*idx)] = coeffs
    return out


def to_grid(coeffs: np.ndarray, sizes: Sequence[int]) -> np.ndarray:
    """Values of sum c e^{i(l.phi + j.x)} on the uniform grid of the given sizes."""
    a = _embed_for_fft(coeffs, sizes)
    return np.fft.ifftn(a) * np.prod(sizes)


def from_grid(values: np.ndarray, box_shape: Sequence[int]) -> np.ndarray:
    """Fourier coefficients of grid data, cropped to a centred box."""
    a = np.fft.fftn(values) / values.size
    idx = []
    for n_c, n_g in zip(box_shape, values.shape):
        k = np.arange(n_c) - n_c // 2
        idx.append(k % n_g)
    return a[np.ix_(*idx)]


def field_to_grid(u: Field, factor: int = 2) -> np.ndarray:
    return to_grid(u.coeffs, grid_sizes(u.lattice, factor))


def field_from_grid(lattice: Lattice, values: np.ndarray, parity: str = "none") -> Field:
    return Field.from_masked(lattice, from_grid(values, lattice.shape), parity)


def grid_points(sizes: Sequence[int]) -> list[np.ndarray]:
    axes = [2 * np.pi * np.arange(n) / n for n in sizes]
    return np.meshgrid(*axes, indexing="ij")
