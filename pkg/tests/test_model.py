import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delaysparse.errors import DimensionError
from delaysparse.model import (ControllerDesign, LtiPlant, NetworkModel, SparsityPattern,
                               apply_pattern, cardinality, closed_loop_delay_free, link_delay,
                               psd_sqrt, random_plant)


def test_link_delay_reference_values():
    net = NetworkModel(c=956.0, tau_p=9.83e-3, kappa=0.01)
    assert link_delay(2500, net) == pytest.approx(35.98e-3, rel=5e-3)
    assert link_delay(248, net) == pytest.approx(12.42e-3, rel=5e-3)


def test_link_delay_zero_links_is_propagation():
    net = NetworkModel(c=3.0, tau_p=0.25)
    assert link_delay(0, net) == 0.25


@given(st.integers(0, 500), st.integers(0, 500),
       st.floats(0.1, 1e4), st.floats(0.0, 1.0), st.floats(1e-3, 1.0))
def test_link_delay_monotone_in_links(a, b, c, tp, kappa):
    net = NetworkModel(c=c, tau_p=tp, kappa=kappa)
    lo, hi = sorted((a, b))
    assert link_delay(lo, net) <= link_delay(hi, net)
    assert link_delay(hi, net) - link_delay(lo, net) == pytest.approx(kappa * (hi - lo) / c)


def test_network_rejects_bad_values():
    with pytest.raises(ValueError):
        NetworkModel(c=0.0)
    with pytest.raises(ValueError):
        NetworkModel(c=1.0, tau_p=-1.0)
    with pytest.raises(ValueError):
        NetworkModel(c=1.0, kappa=0.0)
    with pytest.raises(ValueError):
        link_delay(-1, NetworkModel(c=1.0))


def test_with_bandwidth_keeps_other_fields():
    net = NetworkModel(c=2.0, tau_p=0.1, kappa=0.5)
    assert net.with_bandwidth(7.0) == NetworkModel(c=7.0, tau_p=0.1, kappa=0.5)


def test_cardinality_uses_relative_zero_tolerance():
    K = np.array([[1.0, 1e-12, 0.0], [-2.0, 0.0, 3e-3]])
    assert cardinality(K) == 3
    assert cardinality(K, zero_tol=0.0) == 4
    assert cardinality(np.zeros((2, 2))) == 0


def test_sparsity_pattern_counts():
    pat = SparsityPattern.of([[1.0, 0.0], [0.0, 2.0]])
    assert pat.card == 2 and pat.s == 2
    assert pat == SparsityPattern(np.eye(2, dtype=bool))
    full = SparsityPattern.full(2, 3)
    assert full.card == 6 and full.s == 0


@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6),
       st.lists(st.booleans(), min_size=6, max_size=6))
def test_apply_pattern_respects_mask(vals, bits):
    K = np.array(vals).reshape(2, 3)
    pat = SparsityPattern(np.array(bits).reshape(2, 3))
    Kp = apply_pattern(K, pat)
    assert np.all(Kp[~pat.mask] == 0)
    assert np.array_equal(Kp[pat.mask], K[pat.mask])
    assert cardinality(Kp, zero_tol=0.0) <= pat.card


def test_plant_validation():
    with pytest.raises(DimensionError):
        LtiPlant(A=np.eye(2), B=np.ones((3, 1)), Bw=np.eye(2), Q=np.eye(2), R=np.eye(1))
    with pytest.raises(DimensionError):
        LtiPlant(A=np.eye(2), B=np.ones((2, 1)), Bw=np.eye(2), Q=np.eye(2), R=-np.eye(1))
    with pytest.raises(DimensionError):
        LtiPlant(A=np.eye(2), B=np.ones((2, 1)), Bw=np.eye(2), Q=-np.eye(2), R=np.eye(1))
    with pytest.raises(DimensionError):
        LtiPlant(A=[[np.nan]], B=[[1.0]], Bw=[[1.0]], Q=[[1.0]], R=[[1.0]])


def test_plant_arrays_are_read_only():
    P = random_plant(3, rng=0)
    with pytest.raises(ValueError):
        P.A[0, 0] = 1.0


def test_check_gain_shape():
    P = random_plant(3, 2, rng=1)
    assert P.check_gain(np.zeros((2, 3))).shape == (2, 3)
    with pytest.raises(DimensionError):
        P.check_gain(np.zeros((3, 2)))


def test_random_plant_defaults():
    P = random_plant(4, rng=2)
    assert (P.n, P.m, P.p) == (4, 4, 4)
    assert np.array_equal(P.B, np.eye(4)) and np.array_equal(P.Bw, np.eye(4))
    Q = random_plant(4, 2, rng=2)
    assert Q.B.shape == (4, 2)


def test_random_plant_is_reproducible():
    assert np.array_equal(random_plant(5, rng=7).A, random_plant(5, rng=7).A)


def test_closed_loop_delay_free():
    P = LtiPlant(A=[[0.0]], B=[[1.0]], Bw=[[1.0]], Q=[[1.0]], R=[[1.0]])
    Acl, ok = closed_loop_delay_free(P, [[1.0]])
    assert Acl[0, 0] == -1.0 and ok
    assert not closed_loop_delay_free(P, [[0.0]])[1]


def test_controller_design_invariants():
    K = np.array([[1.0, 0.0]])
    d = ControllerDesign(K=K, tau=0.1)
    assert d.pattern.card == 1
    assert d.consistent_with(NetworkModel(c=1.0, tau_p=0.05))
    assert not d.consistent_with(NetworkModel(c=1.0, tau_p=0.2))
    with pytest.raises(ValueError):
        ControllerDesign(K=K, tau=0.1, pattern=SparsityPattern(np.array([[False, True]])))
    with pytest.raises(ValueError):
        ControllerDesign(K=K, tau=-1.0)


@settings(max_examples=30)
@given(st.integers(1, 5), st.integers(0, 10_000))
def test_psd_sqrt_squares_back(n, seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, n))
    S = M @ M.T
    R = psd_sqrt(S)
    assert np.allclose(R @ R, S, atol=1e-8 * (1 + np.abs(S).max()))
    assert np.allclose(R, R.T)
