"""Inversion of the reduced and of the original linearized operators.

The reduced operator is ``omega.d_phi + D_inf - nu Delta + R_nu_inf`` with
``D_inf`` diagonal; its inverse is a diagonal division followed by a Neumann
series in ``(diag)^{-1} R_nu_inf``.  The original operator is recovered through
``W = A_perp B Phi_inf``.  A dense LU path serves as the reference solver.
"""
from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .fourier import Field, Lattice, ParameterPoint, omega_dot_ell, sobolev_norm
from .kam import Spectrum
from .smoothing import viscous_conjugate
from .toeplitz import TOp, NeumannDivergence, SmallDivisorError

REDUCED_FORMAT = "qpns-reduced"
REDUCED_VERSION = 1


class NonConvergence(RuntimeError):
    def __init__(self, msg: str, factor: float | None = None):
        super().__init__(msg)
        self.factor = factor


# dense reference solver --------------------------------------------------------------------

class DenseOperator:
    """Finite matrix of a linear map on fields, assembled by applying it to every basis field."""

    def __init__(self, lattice: Lattice, apply: Callable[[Field], Field] | None = None,
                 matrix: np.ndarray | None = None):
        self.lattice = lattice
        if matrix is None:
            if apply is None:
                raise ValueError("need an operator or a matrix")
            n = int(lattice.mask.sum())
            matrix = np.empty((n, n), complex)
            e = np.zeros(n, complex)
            for k in range(n):
                e[k] = 1.0
                matrix[:, k] = apply(Field.from_vector(lattice, e)).to_vector()
                e[k] = 0.0
        self.matrix = matrix
        self._lu = None

    def factor(self):
        if self._lu is None:
            self._lu = lu_factor(self.matrix)
        return self._lu

    def solve(self, rhs: Field) -> Field:
        x = lu_solve(self.factor(), rhs.to_vector())
        return Field.from_vector(self.lattice, x)

    def apply(self, u: Field) -> Field:
        return Field.from_vector(self.lattice, self.matrix @ u.to_vector())


def dense_solve(op: DenseOperator | Callable[[Field], Field], rhs: Field) -> Field:
    if not isinstance(op, DenseOperator):
        op = DenseOperator(rhs.lattice, op)
    return op.solve(rhs)


# the reduced form ----------------------------------------------------------------------------

@dataclass
class ReducedForm:
    """Everything needed to invert the linearized operator at one parameter point.

    ``R_nu_unit`` is the viscous remainder of the final reduced operator per unit nu.
    """

    lattice: Lattice
    lam: ParameterPoint
    eps: float
    spectrum: Spectrum
    A: TOp
    A_inv: TOp
    B: TOp
    B_inv: TOp
    Phi: TOp
    Phi_inv: TOp
    R_nu_unit: TOp
    R_final: TOp
    diagnostics: dict = field(default_factory=dict)

    def W(self, u: Field) -> Field:
        return self.A.apply(self.B.apply(self.Phi.apply(u)))

    def W_inv(self, u: Field) -> Field:
        return self.Phi_inv.apply(self.B_inv.apply(self.A_inv.apply(u)))

    @classmethod
    def trivial(cls, lattice: Lattice, lam: ParameterPoint, eps: float = 0.0) -> "ReducedForm":
        I = TOp.identity(lattice)
        Z = TOp.zeros(lattice)
        return cls(lattice, lam, eps, Spectrum(lattice, lam, np.zeros(lattice.n_x, complex)),
                   I, I, I, I, I, I, Z, Z, {})

    # persistence ----------------------------------------------------------------
    _OPS = ("A", "A_inv", "B", "B_inv", "Phi", "Phi_inv", "R_nu_unit", "R_final")

    def save(self, path) -> None:
        manifest = {"format": REDUCED_FORMAT, "version": REDUCED_VERSION,
                    "lattice": self.lattice.to_dict(), "lam": self.lam.to_dict(),
                    "eps": self.eps, "diagnostics": _jsonable(self.diagnostics)}
        with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as z:
            z.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
            z.writestr("spectrum.csv", self.spectrum.to_csv())
            for name in self._OPS:
                z.writestr(f"{name}.top", getattr(self, name).to_bytes())

    @classmethod
    def load(cls, path) -> "ReducedForm":
        with zipfile.ZipFile(path) as z:
            manifest = json.loads(z.read("manifest.json"))
            if manifest.get("format") != REDUCED_FORMAT or manifest.get("version") != REDUCED_VERSION:
                raise ValueError(f"unsupported reduced-form artifact: {manifest.get('format')} "
                                 f"v{manifest.get('version')}")
            lat = Lattice.from_dict(manifest["lattice"])
            lam = ParameterPoint(tuple(manifest["lam"]["omega"]), tuple(manifest["lam"]["zeta"]))
            spec = Spectrum.from_csv(z.read("spectrum.csv").decode(), lat, lam)
            ops = {name: TOp.from_bytes(z.read(f"{name}.top")) for name in cls._OPS}
        for op in ops.values():
            if op.lattice != lat:
                raise ValueError("operator lattice does not match the manifest")
        return cls(lat, lam, manifest["eps"], spec, diagnostics=manifest["diagnostics"], **ops)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def assemble_R_nu_infty(Phi: TOp, Phi_inv: TOp, R2_nu_unit: TOp) -> TOp:
    """Per unit nu: -(Delta (Phi - Id) + (Phi^{-1} - Id) Delta Phi) + Phi^{-1} R2_nu Phi."""
    return viscous_conjugate(Phi, Phi_inv, R2_nu_unit)


def assemble_L_infty_nu(spec: Spectrum, Phi: TOp, Phi_inv: TOp, R2_nu_unit: TOp,
                        nu: float) -> tuple[np.ndarray, TOp]:
    """Diagonal symbols i omega.l + mu(j) + nu |j|^2 and the remainder R_nu_inf."""
    return viscous_symbols(spec, nu), nu * assemble_R_nu_infty(Phi, Phi_inv, R2_nu_unit)


# diagonal inverses ----------------------------------------------------------------------------

def viscous_symbols(spec: Spectrum, nu: float) -> np.ndarray:
    """i omega.l + mu(j) + nu |j|^2 on the lattice box (zero outside the mode set)."""
    lat = spec.lattice
    mu = np.zeros(lat.shape, complex)
    mu[..., lat.xmask] = spec.mu
    sym = 1j * omega_dot_ell(spec.lam, lat) + mu + nu * lat.jsq
    return np.where(lat.mask, sym, 0)


def _divide(rhs: Field, sym: np.ndarray) -> Field:
    lat = rhs.lattice
    safe = np.where(lat.mask, sym, 1.0)
    return Field(lat, np.where(lat.mask, rhs.coeffs / safe, 0))


def invert_diag_viscous(spec: Spectrum, nu: float, rhs: Field, real_tol: float = 1e-12) -> Field:
    """Divide by i omega.l + mu(j) + nu |j|^2, checking |divisor| >= nu |j|^2."""
    if nu <= 0:
        raise ValueError("nu must be positive")
    if spec.real_part_violation() > real_tol:
        raise ValueError(f"eigenvalues have real part {spec.real_part_violation():.3e}")
    sym = viscous_symbols(spec, nu)
    lat = spec.lattice
    low = np.abs(sym) < nu * lat.jsq * (1 - 1e-12)
    if np.any(low & lat.mask):
        raise ValueError("viscous divisor below nu |j|^2")
    return _divide(rhs, sym)


def viscous_divisor_margin(spec: Spectrum, nu: float) -> float:
    """min over the lattice of |i omega.l + mu(j) + nu |j|^2| / (nu |j|^2)."""
    lat = spec.lattice
    sym = np.abs(viscous_symbols(spec, nu))[lat.mask]
    return float(np.min(sym / (nu * lat.jsq[lat.mask])))


def invert_diag_inviscid(spec: Spectrum, rhs: Field, gamma: float | None = None,
                         tau: float | None = None) -> Field:
    """Divide by i omega.l + mu(j), checking the first Melnikov conditions when gamma is given."""
    sym = viscous_symbols(spec, 0.0)
    lat = spec.lattice
    if gamma is not None:
        margin, idx = melnikov1_margin(spec, gamma, tau)
        if margin < 1.0:
            raise SmallDivisorError(f"first Melnikov condition fails at {idx} "
                                    f"(margin {margin:.3e})", index=idx, value=margin)
    if np.any((np.abs(sym) < 1e-14) & lat.mask):
        raise SmallDivisorError("vanishing divisor in the diagonal inverse")
    return _divide(rhs, sym)


def melnikov1_margin(spec: Spectrum, gamma: float, tau: float) -> tuple[float, tuple | None]:
    """min |i omega.l + mu(j)| <l>^tau |j|^tau / gamma over the lattice mode set."""
    lat = spec.lattice
    sym = np.abs(viscous_symbols(spec, 0.0))
    if gamma == 0:
        return float("inf"), None
    lb = np.maximum(1.0, np.sqrt((lat.ell ** 2).sum(0)))
    jn = np.sqrt(np.where(lat.mask, lat.jsq, 1))
    thr = gamma / (lb ** tau * jn ** tau)
    ratio = np.where(lat.mask, sym / thr, np.inf)
    idx = np.unravel_index(int(np.argmin(ratio)), ratio.shape)
    return float(ratio[idx]), tuple(int(i) for i in idx)


# the Neumann-corrected reduced inverse --------------------------------------------------------

def contraction_factor(spec: Spectrum, R_nu: TOp, nu: float, s: float = 3.0) -> float:
    """Operator norm on H^s_0 of (diag)^{-1} R_nu, computed from the dense truncation."""
    lat = spec.lattice
    sym = viscous_symbols(spec, nu)[lat.mask]
    K = R_nu.to_dense() / sym[:, None]
    w = lat.bracket[lat.mask] ** s
    return float(np.linalg.norm(w[:, None] * K / w[None, :], 2))


def reduced_inverse(spec: Spectrum, R_nu: TOp, nu: float, rhs: Field, tol: float = 1e-12,
                    max_iter: int = 200, s0: float = 3.0) -> tuple[Field, int]:
    """(Id + D^{-1} R_nu)^{-1} D^{-1} rhs by fixed-point iteration on the vector."""
    z = invert_diag_viscous(spec, nu, rhs)
    w = z
    scale = max(sobolev_norm(z, s0), 1e-300)
    for k in range(1, max_iter + 1):
        new = z - invert_diag_viscous(spec, nu, R_nu.apply(w))
        step = sobolev_norm(new - w, s0)
        w = new
        if step <= tol * scale:
            return w, k
        if not np.isfinite(step) or step > 1e6 * scale:
            raise NeumannDivergence(f"Neumann iteration diverges (step {step:.3e})")
    raise NonConvergence(f"Neumann iteration not converged in {max_iter} steps")


@dataclass
class SolveReport:
    u: Field
    residual: float
    neumann_iterations: int
    refinements: int


def invert_L_nu(rf: ReducedForm, nu: float, rhs: Field,
                L_apply: Callable[[Field], Field] | None = None, refine: bool = True,
                tol: float = 1e-13, max_refine: int = 20, s0: float = 3.0,
                report: bool = False):
    """Solve L_nu u = rhs through the reduced form.

    ``L_apply`` evaluates the original operator; when given, the residual is
    measured and, if ``refine`` is set, the solve is repeated on the residual.
    """
    R_nu = nu * rf.R_nu_unit

    def once(r: Field) -> tuple[Field, int]:
        w, k = reduced_inverse(rf.spectrum, R_nu, nu, rf.W_inv(r), s0=s0)
        return rf.W(w), k

    u, iters = once(rhs)
    nref, res = 0, float("nan")
    if L_apply is not None:
        rn = max(sobolev_norm(rhs, s0), 1e-300)
        r = rhs - L_apply(u)
        res = sobolev_norm(r, s0) / rn
        while refine and res > tol and nref < max_refine:
            du, k = once(r)
            u = u + du
            iters += k
            nref += 1
            r = rhs - L_apply(u)
            new = sobolev_norm(r, s0) / rn
            if new > 0.5 * res:
                res = new
                break
            res = new
    out = SolveReport(u, res, iters, nref)
    return out if report else u


def invert_L_e(rf: ReducedForm, rhs: Field, L_apply: Callable[[Field], Field] | None = None,
               refine: bool = True, gamma: float | None = None, tau: float | None = None,
               tol: float = 1e-13, max_refine: int = 20, s0: float = 3.0, report: bool = False):
    """Solve L_e u = rhs by u = W (omega.d_phi + D_inf)^{-1} W^{-1} rhs, optionally refined."""

    def once(r: Field) -> Field:
        return rf.W(invert_diag_inviscid(rf.spectrum, rf.W_inv(r), gamma, tau))

    u = once(rhs)
    nref, res = 0, float("nan")
    if L_apply is not None:
        rn = max(sobolev_norm(rhs, s0), 1e-300)
        r = rhs - L_apply(u)
        res = sobolev_norm(r, s0) / rn
        while refine and res > tol and nref < max_refine:
            u = u + once(r)
            nref += 1
            r = rhs - L_apply(u)
            new = sobolev_norm(r, s0) / rn
            if new > 0.5 * res:
                res = new
                break
            res = new
    out = SolveReport(u, res, 0, nref)
    return out if report else u
