import json
import zipfile

import numpy as np
import pytest

from qpns.fourier import Field, ParameterPoint, random_field, sobolev_norm
from qpns.inversion import (DenseOperator, NonConvergence, ReducedForm, contraction_factor,
                            dense_solve, invert_L_e, invert_L_nu, invert_diag_inviscid,
                            invert_diag_viscous, melnikov1_margin, reduced_inverse,
                            viscous_divisor_margin, viscous_symbols)
from qpns.kam import Spectrum
from qpns.nssolver import L_e_apply, L_nu_apply
from qpns.toeplitz import NeumannDivergence, SmallDivisorError

from conftest import random_top

LAM = ParameterPoint((1.0966,), (0.8294, 1.4366))


def zero_spectrum(lat, lam=LAM):
    return Spectrum(lat, lam, np.zeros(lat.n_x, complex))


class TestDense:
    def test_assembly_matches_matrix(self, small_lat, rng):
        R = random_top(small_lat, rng)
        D = DenseOperator(small_lat, R.apply)
        assert np.allclose(D.matrix, R.to_dense(), atol=1e-14)

    def test_solve_residual(self, small_lat, rng):
        R = random_top(small_lat, rng, scale=0.1)
        op = lambda u: u + R.apply(u)
        b = random_field(small_lat, rng)
        x = dense_solve(op, b)
        assert sobolev_norm(op(x) - b, 0) < 1e-12 * sobolev_norm(b, 0)

    def test_needs_input(self, small_lat):
        with pytest.raises(ValueError):
            DenseOperator(small_lat)


class TestDiagonal:
    def test_viscous_round_trip(self, small_lat, rng):
        sp = zero_spectrum(small_lat)
        u = random_field(small_lat, rng)
        w = invert_diag_viscous(sp, 1e-2, u)
        back = Field(small_lat, viscous_symbols(sp, 1e-2) * w.coeffs)
        assert np.allclose(back.coeffs, u.coeffs, atol=1e-14)

    @pytest.mark.parametrize("nu", [1e-1, 1e-3, 1e-6])
    def test_viscous_margin(self, small_lat, nu):
        assert viscous_divisor_margin(zero_spectrum(small_lat), nu) >= 1.0

    def test_viscous_checks(self, small_lat, rng):
        u = random_field(small_lat, rng)
        with pytest.raises(ValueError):
            invert_diag_viscous(zero_spectrum(small_lat), 0.0, u)
        bad = Spectrum(small_lat, LAM, np.full(small_lat.n_x, 1e-6 + 0j))
        with pytest.raises(ValueError):
            invert_diag_viscous(bad, 1e-2, u)

    def test_inviscid_gate(self, small_lat, rng):
        u = random_field(small_lat, rng)
        resonant = ParameterPoint((1.0,), (1.0, 2.0))
        with pytest.raises(SmallDivisorError):
            invert_diag_inviscid(zero_spectrum(small_lat, resonant), u)
        sp = zero_spectrum(small_lat)
        m, _ = melnikov1_margin(sp, 0.1, 3.0)
        assert m > 1.0
        with pytest.raises(SmallDivisorError):
            invert_diag_inviscid(sp, u, gamma=10 * m * 0.1, tau=3.0)


class TestNeumann:
    def test_matches_dense(self, small_lat, rng):
        sp = zero_spectrum(small_lat)
        nu = 1e-2
        R = random_top(small_lat, rng, decay=2.0, order=2.0, scale=1e-3 * nu)
        assert contraction_factor(sp, R, nu) < 1
        rhs = random_field(small_lat, rng)
        w, k = reduced_inverse(sp, R, nu, rhs)
        sym = viscous_symbols(sp, nu)[small_lat.mask]
        ref = np.linalg.solve(np.diag(sym) + R.to_dense(), rhs.to_vector())
        assert np.allclose(w.to_vector(), ref, rtol=0, atol=1e-12 * np.abs(ref).max())

    def test_divergence(self, small_lat, rng):
        sp = zero_spectrum(small_lat)
        R = random_top(small_lat, rng, decay=0.5, scale=10.0)
        with pytest.raises((NeumannDivergence, NonConvergence)):
            reduced_inverse(sp, R, 1e-3, random_field(small_lat, rng))


class TestPipeline:
    def test_trivial_form(self, small_lat, rng):
        rf = ReducedForm.trivial(small_lat, LAM)
        u = random_field(small_lat, rng)
        a = invert_L_nu(rf, 1e-2, u)
        b = invert_diag_viscous(rf.spectrum, 1e-2, u)
        assert np.array_equal(a.coeffs, b.coeffs)

    def test_L_nu_against_dense(self, reduced, euler, rng):
        prob, v = euler
        nu = 1e-2
        Lnu = L_nu_apply(v, prob, nu)
        rhs = random_field(v.lattice, rng)
        rep = invert_L_nu(reduced, nu, rhs, L_apply=Lnu, report=True)
        assert rep.residual < 1e-13
        D = DenseOperator(v.lattice, Lnu)
        ref = D.solve(rhs)
        assert sobolev_norm(rep.u - ref, 3) < 1e-10 * sobolev_norm(ref, 3)

    def test_L_e_residual(self, reduced, euler, rng):
        prob, v = euler
        rhs = random_field(v.lattice, rng, parity="even")
        rep = invert_L_e(reduced, rhs, L_apply=L_e_apply(v, prob), report=True)
        assert rep.residual < 1e-12
        assert rep.u.parity_violation("odd") < 1e-12 * rep.u.max_abs()

    def test_W_round_trip(self, reduced, lat, rng):
        u = random_field(lat, rng)
        assert sobolev_norm(reduced.W(reduced.W_inv(u)) - u, 3) < 1e-8 * sobolev_norm(u, 3)


class TestPersistence:
    def test_round_trip(self, reduced, tmp_path):
        p = tmp_path / "rf.zip"
        reduced.save(p)
        back = ReducedForm.load(p)
        for name in ReducedForm._OPS:
            assert np.array_equal(getattr(back, name).blocks, getattr(reduced, name).blocks)
        assert np.array_equal(back.spectrum.q, reduced.spectrum.q)
        assert back.lam == reduced.lam and back.eps == reduced.eps

    def test_rejects_unknown_format(self, reduced, tmp_path):
        p = tmp_path / "rf.zip"
        reduced.save(p)
        q = tmp_path / "bad.zip"
        with zipfile.ZipFile(p) as zin, zipfile.ZipFile(q, "w") as zout:
            for item in zin.namelist():
                data = zin.read(item)
                if item == "manifest.json":
                    m = json.loads(data)
                    m["version"] = 99
                    data = json.dumps(m)
                zout.writestr(item, data)
        with pytest.raises(ValueError):
            ReducedForm.load(q)
