import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qkdgrid.errors import Diverged
from qkdgrid.plant import DgState
from qkdgrid.secondary import (
    ControlGains,
    NeighborRecord,
    integrate_secondary,
    secondary_rates,
    source_terms,
)

WN = 314.0
DROOPS = (np.array([1e-4, 2e-4, 1e-4]), np.array([1e-4, 1e-4, 3e-4]))

finite = st.floats(-1e4, 1e4, allow_nan=False)


def test_record_freshness_invariant():
    with pytest.raises(ValueError):
        NeighborRecord(1.0, 2.0, 3.0, fresh=True, age=2)
    r = NeighborRecord(1.0, 2.0, 3.0).held().held()
    assert (r.fresh, r.age, r.omega) == (False, 2, 1.0)


def test_source_terms_example():
    rec = NeighborRecord(314.1, 1000.0, 200.0)
    r1, r2 = source_terms(0, 1, rec, (314.0, 500.0, 100.0), *DROOPS)
    assert r1 == pytest.approx(0.1 + (2e-4 * 1000 - 1e-4 * 500))
    assert r2 == pytest.approx(1e-4 * 200 - 1e-4 * 100)


@given(finite, finite, finite)
def test_identical_droop_products_give_zero_residual(omega, p, q):
    # DG 1 has m_P = 2e-4, n_Q = 1e-4; DG 2 has m_P = 1e-4, n_Q = 3e-4
    rec = NeighborRecord(omega, p, 3 * q)
    r1, r2 = source_terms(2, 1, rec, (omega, 2 * p, q), *DROOPS)
    assert r1 == pytest.approx(0.0, abs=1e-12)
    assert r2 == pytest.approx(0.0, abs=1e-12)


def test_rates_include_pinning_only_for_pinned_dg():
    view = {1: NeighborRecord(WN, 0.0, 0.0)}
    gains = ControlGains.equal(10.0)
    r_pinned = secondary_rates(0, view, (WN - 0.5, 0.0, 0.0), 1.0, gains, DROOPS, WN)
    r_free = secondary_rates(0, view, (WN - 0.5, 0.0, 0.0), 0.0, gains, DROOPS, WN)
    assert r_pinned[0] == pytest.approx(10.0 * (0.5 + 0.5))
    assert r_free[0] == pytest.approx(10.0 * 0.5)


def test_weights_scale_sources():
    view = {1: NeighborRecord(WN + 1, 0.0, 10.0), 2: NeighborRecord(WN, 0.0, 0.0)}
    gains = ControlGains(2.0, 3.0)
    r1, r2 = secondary_rates(0, view, (WN, 0.0, 0.0), 0.0, gains, DROOPS, WN, weights={1: 3.0})
    assert r1 == pytest.approx(2.0 * 3.0 * 1.0)
    assert r2 == pytest.approx(3.0 * 3.0 * 1e-4 * 10.0)


def test_gains_must_be_positive():
    with pytest.raises(ValueError):
        ControlGains(0.0, 1.0)


def test_integrate_forward_euler_and_divergence():
    s = DgState.zeros(2)
    s2 = integrate_secondary(s, (np.array([1.0, -2.0]), np.array([0.5, 0.0])), 1e-3)
    np.testing.assert_allclose(s2.d_omega, [1e-3, -2e-3])
    np.testing.assert_allclose(s2.d_v, [5e-4, 0.0])
    with pytest.raises(Diverged):
        integrate_secondary(s, (np.array([np.nan, 0.0]), np.zeros(2)), 1e-3, t=0.2)
    with pytest.raises(ValueError):
        integrate_secondary(s, (np.zeros(2), np.zeros(2)), 0.0)


def test_rate_examples():
    same = (np.full(2, 1e-4), np.full(2, 1e-4))
    view = {1: NeighborRecord(WN + 0.5, 100.0, 10.0)}
    r1, r2 = secondary_rates(0, view, (WN, 100.0, 10.0), 0.0, ControlGains.equal(2.0), same, WN)
    assert (r1, r2) == (pytest.approx(1.0), 0.0)
    r1, _ = secondary_rates(0, {}, (WN - 0.2, 0.0, 0.0), 1.0, ControlGains.equal(2.0), same, WN)
    assert r1 == pytest.approx(0.4)
    r1, r2 = secondary_rates(0, {1: NeighborRecord(WN, 5.0, 5.0)}, (WN, 5.0, 5.0), 1.0,
                             ControlGains.equal(2.0), same, WN)
    assert (r1, r2) == (0.0, 0.0)


def test_constant_rate_accumulates_linearly():
    s = DgState.zeros(1)
    for _ in range(7):
        s = integrate_secondary(s, (np.array([0.25]), np.array([-1.0])), 0.5)
    assert s.d_omega[0] == 0.25 * 7 * 0.5 and s.d_v[0] == -1.0 * 7 * 0.5
    assert integrate_secondary(s, (np.zeros(1), np.zeros(1)), 1.0).d_omega[0] == s.d_omega[0]


vec3 = st.tuples(finite, finite, finite)


@given(vec3, vec3, st.floats(-3, 3), st.floats(-3, 3))
def test_rates_are_linear_in_disagreement(a, b, ca, cb):
    # local DG at the origin of (omega - omega_n, P, Q); neighbor offsets a and b
    gains = ControlGains(1.5, 2.5)
    local = (WN, 0.0, 0.0)

    def rates(off):
        return np.array(secondary_rates(0, {1: NeighborRecord(WN + off[0], off[1], off[2])}, local, 0.0,
                                        gains, DROOPS, WN))

    mix = tuple(ca * x + cb * y for x, y in zip(a, b))
    np.testing.assert_allclose(rates(mix), ca * rates(a) + cb * rates(b), rtol=1e-9, atol=1e-9)


def test_clean_system_restores_frequency_within_two_seconds():
    from qkdgrid.config import parse_config
    from qkdgrid.runner import simulate

    res = simulate(parse_config("[run]\nduration = 2\nmode = baseline\n"))
    assert np.abs(res.trace.omega[-1] - res.config.plant.omega_n).max() < 1e-3
