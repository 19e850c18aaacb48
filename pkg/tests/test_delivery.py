import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import small_scenario
from cscn.cacheplan import uc_allocation
from cscn.channel import ChannelRealization, frame_rng, sample_channels
from cscn.delivery import (DeliveryInfeasible, DeliveryParams, FrameData, buffering_time,
                           build_ccp_subproblem, check_policy, dump_policy,
                           min_required_fh_rate, sinr, solve_fixed_clustering,
                           solve_short_term, solve_short_term_unicast, _feasibility_probe,
                           _restore_fronthaul)
from cscn.demand import batch_from_pairs
from cscn.simkit import make_trace


# --- closed-form helpers ------------------------------------------------------

def test_sinr_aligned_beam():
    h = np.array([1.0, 0.0])
    v = np.array([[math.sqrt(10.0), 0.0]])
    assert sinr(0, 0, v, h, 1.0) == pytest.approx(10.0)


def test_sinr_orthogonal_beam():
    assert sinr(0, 0, np.array([[0.0, 2.0]]), np.array([1.0, 0.0]), 1.0) == 0.0


def test_sinr_with_interference():
    h = np.array([1.0])
    V = np.array([[2.0], [1.0]])
    assert sinr(0, 0, V, h, 1.0) == pytest.approx(2.0)


def test_required_rate_fully_cached():
    assert np.allclose(min_required_fh_rate([[1.0, 1.0]], [[1, 1]], [10.0]), 0.0)


def test_required_rate_uncached():
    assert min_required_fh_rate([[0.0]], [[1]], [7.5])[0] == pytest.approx(7.5)


def test_required_rate_worst_sbs():
    assert min_required_fh_rate([[0.3, 0.6]], [[1, 1]], [10.0])[0] == pytest.approx(7.0)


def test_required_rate_ignores_unselected():
    assert min_required_fh_rate([[0.0, 0.9]], [[0, 1]], [10.0])[0] == pytest.approx(1.0)


def test_buffering_time_cases():
    assert buffering_time(0.3, 0.7 * 1e7, 1e7, 1e6) == pytest.approx(0.0, abs=1e-15)
    assert buffering_time(1.0, 1.0, 1e7, 1e6) == 0.0
    assert buffering_time(0.0, 5e6, 1e7, 1e6) == pytest.approx(0.1)


# --- CCP subproblem -------------------------------------------------------------

def _pack(prob, lay, V, W, E, fd):
    x = np.zeros(prob.n)
    x[lay.v[0::2]], x[lay.v[1::2]] = V.real.ravel(), V.imag.ravel()
    x[lay.w[0::2]], x[lay.w[1::2]] = W.real.ravel(), W.imag.ravel()
    x[lay.e] = E.ravel()
    x[lay.ep] = np.maximum(E.ravel() - E.ravel() ** 2, 0.0)
    x[lay.rho] = fd.rate_floor(E).ravel()
    x[lay.s] = np.linalg.norm(x[lay.ep])
    return x


def _desk_frame(desk, seed=0, min_groups=2):
    L = uc_allocation(desk).L
    for rec in make_trace(desk, seed, 0).frames:
        if len(rec.batch.contents) < min_groups:
            continue
        fd = FrameData(desk, L, rec.channels, rec.batch)
        try:
            V, W = _feasibility_probe(fd, DeliveryParams())
        except DeliveryInfeasible:
            continue
        return L, rec, fd, V, W
    raise AssertionError("no usable frame")


def test_subproblem_tight_at_expansion_point(desk):
    L, rec, fd, V, W = _desk_frame(desk)
    E = np.ones((fd.G, fd.B))
    prob, lay = build_ccp_subproblem(fd, V, W, E, lam=5.0)
    x = _pack(prob, lay, V, W, E, fd)
    assert prob.max_violation(x) <= 1e-7


def test_binary_push_coefficients(desk):
    _, _, fd, V, W = _desk_frame(desk)
    E = np.full((fd.G, fd.B), 0.5)
    E[0, 0] = 1.0
    prob, lay = build_ccp_subproblem(fd, V, W, E, lam=1.0)
    push = [b for b in prob.blocks if b.tag == "binary_push"]
    assert len(push) == fd.G * fd.B
    # e_i = 1: e' + e - 1 >= 0, i.e. 1 - e <= e'
    assert np.allclose(push[0].mat, [[1.0, 1.0]]) and np.allclose(push[0].const, [-1.0])
    # e_i = 0.5: e' >= 0.25 whatever e is
    assert np.allclose(push[1].mat, [[1.0, 0.0]]) and np.allclose(push[1].const, [-0.25])


# --- closed-form instances --------------------------------------------------------

def _single_link(M=2, N=1, mu=1.0, rng_seed=3):
    s = small_scenario(sbs_antennas=M, cp_antennas=N, fractional_capacity=mu,
                       rng_seed=rng_seed)
    ch = sample_channels(s, 0, frame_rng(rng_seed, 0))
    return s, ch, batch_from_pairs(0, [(0, 0)])


def test_mrt_power_fully_cached():
    s, ch, batch = _single_link()
    pol = solve_short_term(s, np.ones((1, 1)), ch, batch)
    h = ch.aggregate(0)
    expect = s.power_slope_sbs[0] * s.sinr_target[0] * s.noise_power_edge[0] / np.vdot(h, h).real
    assert pol.power == pytest.approx(expect, rel=1e-2)
    assert pol.edge_power == pytest.approx(expect, rel=1e-6)
    assert pol.fronthaul_power == 0.0


def test_single_link_fronthaul_closed_form():
    s, ch, batch = _single_link(M=1, N=1, mu=0.0)
    pol = solve_short_term(s, np.zeros((1, 1)), ch, batch)
    h = ch.aggregate(0)
    edge = s.power_slope_sbs[0] * s.sinr_target[0] * s.noise_power_edge[0] / abs(h[0]) ** 2
    fh = (s.power_slope_cp * s.noise_power_fh[0]
          * (2 ** (s.edge_rate[0] / s.fronthaul_bandwidth) - 1) / abs(ch.fronthaul[0, 0, 0]) ** 2)
    assert pol.edge_power == pytest.approx(edge, rel=1e-6)
    assert pol.fronthaul_power == pytest.approx(fh, rel=1e-6)


def test_full_cache_needs_no_fronthaul(desk):
    L = np.ones((desk.num_contents, desk.num_sbs))
    for rec in make_trace(desk, 1, 0).frames[:6]:
        try:
            pol = solve_short_term(desk, L, rec.channels, rec.batch)
        except DeliveryInfeasible:
            continue
        assert np.sum(np.abs(pol.fronthaul_beams) ** 2) == 0.0


def test_empty_frame_zero_power(desk):
    rec = make_trace(desk, 0, 0).frames[0]
    empty = batch_from_pairs(3, [])
    pol = solve_short_term(desk, uc_allocation(desk).L, rec.channels, empty)
    assert pol.empty and pol.power == 0.0


def test_infeasible_sinr_raises():
    s = small_scenario(max_tx_power_w=1e-30, rng_seed=2)
    ch = sample_channels(s, 0, frame_rng(2, 0))
    with pytest.raises(DeliveryInfeasible) as err:
        solve_short_term(s, np.ones((1, 1)), ch, batch_from_pairs(0, [(0, 0)]))
    assert err.value.constraint == "sinr"


# --- unicast fronthaul --------------------------------------------------------

def _two_sbs_identical_fh():
    s = small_scenario(num_sbs=2, num_users=1, cp_antennas=1, sbs_antennas=1,
                       fractional_capacity=0.0, rng_seed=4, shadowing_std_db=0.0,
                       cp_position=[0, 0], sbs_positions=[100, 0, -100, 0],
                       user_positions=[0, 60])
    ch = sample_channels(s, 0, frame_rng(4, 0))
    fh = np.repeat(ch.fronthaul[:1], 2, axis=0)
    return s, ChannelRealization(0, ch.edge, fh), batch_from_pairs(0, [(0, 0)])


def test_unicast_doubles_fronthaul_on_identical_links():
    s, ch, batch = _two_sbs_identical_fh()
    L = np.zeros((1, 2))
    E = np.ones((1, 2), int)
    out = {}
    for uni in (False, True):
        fd = FrameData(s, L, ch, batch, unicast=uni)
        V0, W0 = _feasibility_probe(fd, DeliveryParams())
        V, W, _ = solve_fixed_clustering(fd, E, V0, W0, DeliveryParams())
        out[uni] = fd.power_parts(V, W)[1]
    assert out[True] == pytest.approx(2.0 * out[False], rel=1e-9)


def test_unicast_matches_multicast_single_sbs():
    s, ch, batch = _single_link(M=2, N=1, mu=0.0)
    a = solve_short_term(s, np.zeros((1, 1)), ch, batch)
    b = solve_short_term_unicast(s, np.zeros((1, 1)), ch, batch)
    assert b.power == pytest.approx(a.power, rel=1e-6)


def test_unicast_full_cache_zero_fronthaul():
    s, ch, batch = _two_sbs_identical_fh()
    pol = solve_short_term_unicast(s, np.ones((1, 2)), ch, batch)
    assert pol.fronthaul_power == 0.0


# --- invariants on desk frames --------------------------------------------------------

def _desk_policies(desk, seed, n=8, unicast=False):
    L = uc_allocation(desk).L
    fn = solve_short_term_unicast if unicast else solve_short_term
    out = []
    for rec in make_trace(desk, seed, 0).frames[:n]:
        try:
            out.append((rec, fn(desk, L, rec.channels, rec.batch, DeliveryParams(seed=seed))))
        except DeliveryInfeasible:
            pass
    return L, out


@pytest.mark.parametrize("unicast", [False, True])
def test_policies_satisfy_constraints(desk, unicast):
    L, pols = _desk_policies(desk, 2, unicast=unicast)
    assert pols
    for rec, pol in pols:
        viol = check_policy(desk, L, rec.channels, rec.batch, pol)
        assert max(viol.values()) <= 1e-6, viol
        assert set(np.unique(pol.clustering)) <= {0, 1}
        if not pol.empty:
            assert pol.clustering.sum(axis=1).min() >= 1
            off = np.linalg.norm(pol.edge_beams, axis=2)[pol.clustering == 0]
            assert np.all(off == 0)


def test_penalized_objective_descends_at_fixed_lambda(desk):
    _, pols = _desk_policies(desk, 3)
    for _, pol in pols:
        hist = pol.objective_history
        for (l0, a), (l1, b) in zip(hist, hist[1:]):
            if l0 == l1:
                assert b <= a + 1e-6 * max(1.0, abs(a))


def test_deterministic(desk):
    _, a = _desk_policies(desk, 4, n=4)
    _, b = _desk_policies(desk, 4, n=4)
    for (_, p), (_, q) in zip(a, b):
        assert p.power == q.power and np.array_equal(p.clustering, q.clustering)


def test_dump_policy_columns(desk):
    _, pols = _desk_policies(desk, 0, n=4)
    rec, pol = next((r, p) for r, p in pols if not p.empty)
    text = dump_policy(pol, {0: {pol.groups[0][0]: 10.0}})
    lines = text.strip().splitlines()
    assert lines[0] == "frame,f,b,e,v_power,w_power,fh_rate,sinr"
    assert len(lines) == 1 + len(pol.contents) * desk.num_sbs


def test_restored_fronthaul_meets_floor(desk):
    _, _, fd, V, W = _desk_frame(desk)
    E = np.ones((fd.G, fd.B), int)
    W2 = _restore_fronthaul(fd, np.zeros_like(W), E)
    need = np.expm1(math.log(2) * fd.rate_floor(E))
    have = fd.fh_snr(W2)
    for g in range(fd.G):
        assert have[g].min() >= need[g] * (1 - 1e-9)


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 10_000), mu=st.sampled_from([0.0, 0.3, 1.0]),
       k=st.integers(1, 3))
def test_random_small_instances_feasible(seed, mu, k):
    s = small_scenario(num_sbs=2, num_users=k, num_contents=3, sbs_antennas=2,
                       cp_antennas=2, fractional_capacity=mu, rng_seed=seed)
    ch = sample_channels(s, 0, frame_rng(seed, 0))
    rng = np.random.default_rng(seed)
    batch = batch_from_pairs(0, [(u, int(rng.integers(3))) for u in range(k)])
    L = uc_allocation(s).L
    try:
        pol = solve_short_term(s, L, ch, batch, DeliveryParams(seed=seed))
    except DeliveryInfeasible:
        return
    assert max(check_policy(s, L, ch, batch, pol).values()) <= 1e-6
