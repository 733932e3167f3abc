import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qpns.fourier import (Field, Lattice, ParameterPoint, field_to_grid, from_grid,
                          grad_perp_inv_lap, grid_sizes, partial_x, random_field, to_grid)
from qpns.functional import (ForcingSpec, Problem, Q, advection_top, apply_linearized,
                             bilinear_N, bilinear_full, dQ, eval_F_nu, linearized_top,
                             nonlinear_kernel, stretching_top)
from qpns.toeplitz import is_real, is_reversible

seeds = st.integers(min_value=0, max_value=2**32 - 1)
LAM = ParameterPoint((1.0966,), (0.8294, 1.4366))


def grid_oracle(u, w):
    """N(u, w) from a 4x physical grid product, cropped to the lattice."""
    lat = u.lattice
    sz = grid_sizes(lat, 4)
    a = grad_perp_inv_lap(u)
    g = sum(to_grid(a[k].coeffs, sz) * to_grid(partial_x(w, k).coeffs, sz) for k in range(2))
    return Field.from_masked(lat, from_grid(g, lat.shape))


class TestKernel:
    def test_value_on_unit_vectors(self):
        assert nonlinear_kernel(np.array([1, 0]), np.array([0, 1])) == 1.0
        assert nonlinear_kernel(np.array([0, 1]), np.array([1, 0])) == -1.0

    def test_vanishes_on_antipodes(self):
        xi = np.array([[1, 2], [-3, 1], [4, 4]])
        assert np.all(nonlinear_kernel(xi, -xi) == 0.0)

    def test_smoothed_kernel(self):
        k2 = nonlinear_kernel(np.array([1, 0]), np.array([1, 1]), n=2)
        assert np.isclose(k2, 1.0 / 5.0)


class TestBilinear:
    def test_two_mode_value(self, lat):
        e1 = Field.mode(lat, (0,), (1, 0))
        e2 = Field.mode(lat, (0,), (0, 1))
        n = bilinear_N(e1, e2)
        idx = lat.index((0,), (1, 1))
        assert abs(n.coeffs[idx] - 1.0) < 1e-15
        rest = np.array(n.coeffs)
        rest[idx] = 0
        assert np.abs(rest).max() < 1e-15

    def test_grid_oracle(self, lat, rng):
        u, w = random_field(lat, rng), random_field(lat, rng)
        assert np.abs((bilinear_N(u, w) - grid_oracle(u, w)).coeffs).max() < 1e-13

    def test_full_contains_cropped(self, small_lat, rng):
        u, w = random_field(small_lat, rng), random_field(small_lat, rng)
        full = bilinear_full(u, w)
        L, J = small_lat.L, small_lat.J
        inner = full[L:3 * L + 1, J:3 * J + 1, J:3 * J + 1]
        assert np.allclose(Field.from_masked(small_lat, inner).coeffs, bilinear_N(u, w).coeffs)

    @given(seeds)
    @settings(max_examples=25, deadline=None)
    def test_average_exactly_zero(self, seed):
        lat = Lattice(1, 2, 3)
        rng = np.random.default_rng(seed)
        full = bilinear_full(random_field(lat, rng), random_field(lat, rng))
        assert np.all(full[..., 2 * lat.J, 2 * lat.J] == 0.0)

    @given(seeds)
    @settings(max_examples=20, deadline=None)
    def test_parity(self, seed):
        lat = Lattice(1, 2, 3)
        rng = np.random.default_rng(seed)
        v = random_field(lat, rng, parity="odd")
        assert Q(v).parity_violation("even") < 1e-14
        assert Q(v).reality_violation() < 1e-14

    def test_zero_operand(self, small_lat, rng):
        assert not bilinear_full(Field.zeros(small_lat), random_field(small_lat, rng)).any()


class TestLinearization:
    def test_dQ_is_derivative(self, lat, rng):
        v, h = random_field(lat, rng), random_field(lat, rng)
        t = 1e-4
        fd = (Q(v + t * h) - Q(v - t * h)) * (0.5 / t)
        assert np.abs((fd - dQ(v, h)).coeffs).max() < 1e-10

    def test_matrix_forms(self, lat, rng):
        v, h = random_field(lat, rng), random_field(lat, rng)
        assert np.abs((advection_top(v).apply(h) - bilinear_N(v, h)).coeffs).max() < 1e-13
        assert np.abs((stretching_top(v).apply(h) - bilinear_N(h, v)).coeffs).max() < 1e-13

    def test_linearized_reversible(self, lat, rng):
        T = linearized_top(random_field(lat, rng, parity="odd"), 1e-3)
        assert is_reversible(T)[1] < 1e-15
        assert is_real(T)[1] < 1e-15

    def test_apply_linearized(self, lat, rng):
        prob = Problem(LAM, 1e-3, ForcingSpec().build(lat), 1e-2)
        v, h = random_field(lat, rng), random_field(lat, rng)
        t = 1e-5
        fd = (eval_F_nu(v + t * h, prob) - eval_F_nu(v - t * h, prob)) * (0.5 / t)
        assert np.abs((fd - apply_linearized(v, h, prob)).coeffs).max() < 1e-9


class TestForcing:
    def test_default_is_even_and_real(self, lat):
        F = ForcingSpec().build(lat)
        assert F.parity_violation("even") == 0.0
        assert F.reality_violation() == 0.0
        assert np.isclose(np.abs(field_to_grid(F)).max(), 1.5, atol=1e-2)

    def test_list_round_trip(self):
        spec = ForcingSpec([((1,), (2, 0), 0.25)])
        assert ForcingSpec.from_list(spec.to_list()) == spec

    @pytest.mark.parametrize("mode", [((1,), (0, 0), 1.0), ((9,), (1, 0), 1.0), ((1, 1), (1, 0), 1.0)])
    def test_invalid_modes(self, lat, mode):
        with pytest.raises(ValueError):
            ForcingSpec([mode]).build(lat)

    def test_lattice_check(self, lat, small_lat):
        prob = Problem(LAM, 1e-3, ForcingSpec().build(lat))
        with pytest.raises(ValueError):
            eval_F_nu(Field.zeros(small_lat), prob)
