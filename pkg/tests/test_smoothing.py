import numpy as np

from qpns.fourier import ParameterPoint
from qpns.smoothing import (offdiagonal_mass, reduce_order_step, run_smoothing_reduction,
                            viscous_conjugate)
from qpns.toeplitz import TOp, compose, decay_norm, is_reversible

from conftest import random_top

LAM = ParameterPoint((1.0966,), (0.8294, 1.4366))


def _small_R(lat, rng, size=1e-5):
    R = random_top(lat, rng, decay=1.5, order=-1.0).with_order(-1.0)
    return R * (size / decay_norm(R, -1.0, 3))


def test_step_conjugates(small_lat, rng):
    Z = TOp.zeros(small_lat, -1.0)
    R = _small_R(small_lat, rng)
    st = reduce_order_step(Z, R, LAM)
    I = TOp.identity(small_lat)
    # T^{-1}(T0 + R)T = T0 + Z + R_new, i.e. T^{-1}([T0, T] + R T) - Z - R_new = 0
    from qpns.toeplitz import transport_commutator
    lhs = compose(st.T_inv, transport_commutator(st.T, LAM) + compose(R, st.T))
    defect = lhs - st.Z - st.R
    # only the algebra truncation remains
    assert decay_norm(defect, 0, 3) < 1e-3 * decay_norm(R, 0, 3) ** 2 + 1e-16
    assert np.abs(compose(st.T, st.T_inv).blocks - I.blocks).max() < 1e-12


def test_step_lowers_size(small_lat, rng):
    R = _small_R(small_lat, rng)
    st = reduce_order_step(TOp.zeros(small_lat, -1.0), R, LAM)
    assert decay_norm(st.R, -2.0, 3) < 1e-2 * decay_norm(R, -1.0, 3)
    assert offdiagonal_mass(st.Z) == 0.0


def test_reduction_runs(small_lat, rng):
    R = _small_R(small_lat, rng)
    res = run_smoothing_reduction(R, TOp.zeros(small_lat, 2.0), 4, LAM)
    norms = [h["R_norm_minus_M"] for h in res.history]
    assert all(h["truncation_defect"] >= 0 for h in res.history)
    assert all(b < a for a, b in zip(norms, norms[1:]))
    assert len(res.transforms) == 3
    I = TOp.identity(small_lat)
    assert np.abs(compose(res.B, res.B_inv).blocks - I.blocks).max() < 1e-12


def test_M_one_is_identity(small_lat, rng):
    R = _small_R(small_lat, rng)
    Rnu = random_top(small_lat, rng, scale=1e-3)
    res = run_smoothing_reduction(R, Rnu, 1, LAM)
    assert res.transforms == []
    assert np.array_equal(res.R2_nu_unit.blocks, Rnu.blocks)


def test_viscous_conjugate_identity(small_lat, rng):
    I = TOp.identity(small_lat)
    Rnu = random_top(small_lat, rng)
    assert np.allclose(viscous_conjugate(I, I, Rnu).blocks, Rnu.blocks)


def test_viscous_conjugate_formula(small_lat, rng):
    # -Delta + V = B^{-1}(-Delta + Rnu)B must hold for B = Id + K
    K = random_top(small_lat, rng, decay=2.0, scale=1e-4)
    from qpns.toeplitz import neumann_invert
    I = TOp.identity(small_lat)
    B, B_inv = I + K, I + neumann_invert(K)
    Rnu = random_top(small_lat, rng, decay=2.0, scale=1e-3)
    mL = TOp.minus_laplacian(small_lat)
    full = compose(compose(B_inv, mL + Rnu), B)
    assert np.abs((full - mL - viscous_conjugate(B, B_inv, Rnu)).blocks).max() < 1e-12


def test_default_pipeline_smoothing(conjugated, cfg):
    res = run_smoothing_reduction(conjugated.R1, conjugated.R_delta, 3, cfg.lam,
                                  cfg.gamma_value, cfg.tau_value)
    assert offdiagonal_mass(res.Q) == 0.0
    assert is_reversible(res.Q)[1] < 1e-20
    h = res.history
    assert h[-1]["R_norm_minus_M"] < 1e-3 * h[0]["R_norm_minus_M"]
