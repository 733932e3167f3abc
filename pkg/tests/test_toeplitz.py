import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qpns.fourier import Lattice, ParameterPoint, pointwise_product, random_field
from qpns.toeplitz import (NeumannDivergence, SmallDivisorError, TOp, compose, decay_norm,
                           diag_entries, diag_part, from_multiplication, homological_residual_descent,
                           is_real, is_reversibility_preserving, is_reversible, neumann_invert,
                           op_project_N, op_project_N_perp, power_norm_ratios,
                           solve_descent_homological, transport_commutator)

from conftest import random_top

seeds = st.integers(min_value=0, max_value=2**32 - 1)
LAM = ParameterPoint((1.0966,), (0.8294, 1.4366))


def test_identity_acts_trivially(lat, rng):
    u = random_field(lat, rng)
    assert np.array_equal(TOp.identity(lat).apply(u).coeffs, u.coeffs)
    assert decay_norm(TOp.identity(lat), 0, 3) == 1.0


def test_minus_laplacian_norm_is_one_at_order_two(lat):
    assert np.isclose(decay_norm(TOp.minus_laplacian(lat), 2, 3), 1.0)


def test_apply_matches_dense(small_lat, rng):
    R = random_top(small_lat, rng)
    u = random_field(small_lat, rng)
    assert np.allclose(R.apply(u).to_vector(), R.to_dense() @ u.to_vector(), atol=1e-13)


def test_multiplication_matches_product(lat, rng):
    a = random_field(lat, rng, decay=2.0)
    u = random_field(lat, rng)
    assert np.abs((from_multiplication(a).apply(u) - pointwise_product(a, u)).coeffs).max() < 1e-14


def test_compose_against_block_sum(small_lat, rng):
    R, Q = random_top(small_lat, rng), random_top(small_lat, rng)
    C = compose(R, Q)
    L2 = 2 * small_lat.L
    for ell in (-3, 0, 2, L2):
        ref = sum(R.block(ell - k) @ Q.block(k) for k in range(-L2, L2 + 1) if abs(ell - k) <= L2)
        assert np.abs(C.block(ell) - ref).max() < 1e-12


def test_compose_associative_on_small_support(small_lat, rng):
    # operators supported on |l| <= L/2 never leave the offset box
    def narrow():
        R = random_top(small_lat, rng)
        b = np.array(R.blocks)
        b[np.abs(np.arange(b.shape[0]) - 2 * small_lat.L) > 1] = 0
        return TOp(small_lat, b)

    A, B, C = narrow(), narrow(), narrow()
    lhs = compose(compose(A, B), C)
    rhs = compose(A, compose(B, C))
    assert np.abs((lhs - rhs).blocks).max() < 1e-12


@given(seeds)
@settings(max_examples=15, deadline=None)
def test_neumann_inverse(seed):
    lat = Lattice(1, 2, 2)
    rng = np.random.default_rng(seed)
    R = random_top(lat, rng, decay=2.0)
    R = R * (0.3 / decay_norm(R, 0, 3))
    N = neumann_invert(R, 0, 3)
    I = TOp.identity(lat)
    # the truncated algebra is not exact; the defect is the dropped tail only
    D = compose(I + R, I + N) - I
    assert decay_norm(D, 0, 3) < 1e-12 + 1e-2 * decay_norm(R, 0, 3) ** 2


def test_neumann_rejects_large(small_lat, rng):
    R = random_top(small_lat, rng)
    with pytest.raises(NeumannDivergence):
        neumann_invert(R * (2.0 / decay_norm(R, 0, 3)), 0, 3)


def test_bytes_round_trip(small_lat, rng):
    R = random_top(small_lat, rng, order=-1.0).with_order(-1.0)
    S = TOp.from_bytes(R.to_bytes())
    assert np.array_equal(S.blocks, R.blocks) and S.order == -1.0
    with pytest.raises(ValueError):
        TOp.from_bytes(R.to_bytes()[:-16])


def test_projection_split(small_lat, rng):
    R = random_top(small_lat, rng)
    for N in (0.5, 1.0, 2.5, 10.0):
        assert np.array_equal((op_project_N(R, N) + op_project_N_perp(R, N)).blocks, R.blocks)


def test_diag_part(small_lat, rng):
    R = random_top(small_lat, rng)
    D = diag_part(R)
    assert np.count_nonzero(D.blocks) == small_lat.n_x
    assert np.array_equal(diag_entries(D), diag_entries(R))


class TestSymmetryPredicates:
    def test_even_multiplier_preserves(self, lat, rng):
        a = random_field(lat, rng, parity="even")
        M = from_multiplication(a)
        assert is_real(M)[1] < 1e-15
        assert is_reversibility_preserving(M)[0]
        assert not is_reversible(M)[0]

    def test_odd_multiplier_reverses(self, lat, rng):
        a = random_field(lat, rng, parity="odd")
        M = from_multiplication(a)
        assert is_reversible(M)[0]
        assert is_real(M)[0]

    def test_action_matches_predicate(self, lat, rng):
        # a reversibility-preserving operator maps odd fields to odd fields
        M = from_multiplication(random_field(lat, rng, parity="even"))
        u = random_field(lat, rng, parity="odd")
        assert M.apply(u).parity_violation("odd") < 1e-14

    def test_composition_closed(self, lat, rng):
        A = from_multiplication(random_field(lat, rng, parity="odd"))
        B = from_multiplication(random_field(lat, rng, parity="odd"))
        assert is_reversibility_preserving(compose(A, B))[1] < 1e-13


class TestDescentHomological:
    def test_residual_vanishes(self, lat, rng):
        R = random_top(lat, rng, scale=1e-2)
        Psi = solve_descent_homological(R, LAM)
        res = homological_residual_descent(Psi, R, LAM)
        assert res.max_abs() < 1e-15

    def test_field_level_identity(self, lat, rng):
        R = random_top(lat, rng, scale=1e-2)
        Psi = solve_descent_homological(R, LAM)
        u = random_field(lat, rng)
        lhs = transport_commutator(Psi, LAM).apply(u)
        assert np.abs((lhs + R.apply(u) - diag_part(R).apply(u)).coeffs).max() < 1e-14

    def test_resonant_parameter_raises(self, small_lat, rng):
        lam = ParameterPoint((1.0,), (1.0, 2.0))
        with pytest.raises(SmallDivisorError):
            solve_descent_homological(random_top(small_lat, rng), lam)

    def test_diophantine_gate(self, small_lat, rng):
        with pytest.raises(SmallDivisorError):
            solve_descent_homological(random_top(small_lat, rng), LAM, gamma=10.0, tau=3.0)


def test_power_norm_ratios(small_lat, rng):
    assert power_norm_ratios(TOp.identity(small_lat), 0, 3, 3) == [1.0, 1.0, 1.0]
    R = random_top(small_lat, rng, decay=1.5)
    r = power_norm_ratios(R, 0, 3, 4)
    assert r[0] == 1.0 and all(np.isfinite(r))
    assert power_norm_ratios(TOp.zeros(small_lat), 0, 3, 2) == [0.0, 0.0]
