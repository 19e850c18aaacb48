"""Acceptance criteria 1-10; each test records one PASS/FAIL line.

The lines are printed in the terminal summary (see ``conftest.py``) and the
test itself asserts the same verdict.
"""

import csv
import io
import math
import os
import time

import numpy as np
import pytest

from cscn.cacheplan import (BlockHistory, LocalPreference, _clustering_terms,
                            estimate_local_preference, lc_pcud, pcud, solve_p2,
                            uc_allocation)
from cscn.channel import frame_rng, sample_channels
from cscn.cli import SweepSpec, run_sweep
from cscn.delivery import DeliveryInfeasible, DeliveryParams, check_policy, solve_short_term
from cscn.demand import batch_from_pairs
from cscn.scenario import load_scenario, preset_config
from cscn.simkit import FrameSolver, make_trace, oracle_short_term, run_block

from conftest import ACCEPTANCE, small_scenario
from lp_oracle import enumerate_lp, objective

POLICIES = ["UC", "PCUD", "GAC", "TS-FUC"]
MU_VALUES = ["0.1", "0.3", "0.5", "0.8"]
B2_VALUES = ["4e6", "6e6", "8e6", "10e6"]
SEEDS = list(range(5))


def report(n, ok, detail):
    ACCEPTANCE[n] = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    print(ACCEPTANCE[n])
    assert ok, detail


# --- shared runs ------------------------------------------------------------

@pytest.fixture(scope="module")
def desk():
    return load_scenario(preset_config("desk"))


@pytest.fixture(scope="module")
def runs():
    """Every delivery-solver run made by the suite, with its constraint check."""
    return []


def record(runs, scenario, L, ch, batch, pol):
    runs.append((pol, check_policy(scenario, L, ch, batch, pol)))


@pytest.fixture(scope="module")
def oracle_runs(runs):
    t0 = time.perf_counter()
    out = []
    for seed in range(200):
        s = load_scenario(preset_config("desk", num_sbs=2, num_users=2, num_contents=2,
                                        sbs_antennas=1, cp_antennas=1, num_patterns=1,
                                        rng_seed=seed))
        rng = frame_rng(seed, 7)
        ch = sample_channels(s, 0, rng)
        L = rng.uniform(0.0, 1.0, (2, 2))
        batch = batch_from_pairs(0, [(0, 0), (1, 1)])
        try:
            orc = oracle_short_term(s, L, ch, batch)
        except DeliveryInfeasible:
            continue
        pol = solve_short_term(s, L, ch, batch, DeliveryParams(seed=seed))
        record(runs, s, L, ch, batch, pol)
        out.append((seed, orc, pol))
        if len(out) == 20:
            break
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def desk_runs(desk, runs):
    t0 = time.perf_counter()
    L = uc_allocation(desk).L
    out = []
    for seed in SEEDS:
        for rec in make_trace(desk, seed, 0).frames:
            if rec.batch.empty:
                continue
            try:
                pol = solve_short_term(desk, L, rec.channels, rec.batch,
                                       DeliveryParams(seed=seed))
            except DeliveryInfeasible:
                continue
            record(runs, desk, L, rec.channels, rec.batch, pol)
            out.append(pol)
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def trend(tmp_path_factory):
    """Criterion-9 sweeps along mu and B2 at the desk preset."""
    root = tmp_path_factory.mktemp("trend")
    t0 = time.perf_counter()
    out = {}
    for param, values in (("mu", MU_VALUES), ("fronthaul_bandwidth", B2_VALUES)):
        spec = SweepSpec(param, values, POLICIES, SEEDS, str(root / param))
        _, summary = run_sweep(spec, preset_config("desk"))
        out[param] = summary
    return out, time.perf_counter() - t0, root


def summary_table(text):
    table = {}
    for r in csv.DictReader(io.StringIO(text)):
        table.setdefault(float(r["sweep_value"]), {})[r["policy"]] = float(r["mean_power_w"])
    return dict(sorted(table.items()))


# --- criteria ---------------------------------------------------------------

def test_criterion_1_mrt_closed_form(runs):
    t0 = time.perf_counter()
    s = small_scenario(sbs_antennas=2, rng_seed=3)
    ch = sample_channels(s, 0, frame_rng(3, 0))
    batch = batch_from_pairs(0, [(0, 0)])
    L = np.ones((1, 1))
    pol = solve_short_term(s, L, ch, batch)
    record(runs, s, L, ch, batch, pol)
    h = ch.aggregate(0)
    expect = s.power_slope_sbs[0] * s.sinr_target[0] * s.noise_power_edge[0] / np.vdot(h, h).real
    rel = abs(pol.power - expect) / expect
    dt = time.perf_counter() - t0
    report(1, rel <= 0.01 and dt < 5.0,
           f"rel error {rel:.2e} (tol 1e-2), {dt:.2f} s (limit 5 s)")


def test_criterion_2_oracle_equivalence(oracle_runs):
    out, dt = oracle_runs
    certs = {orc.certificate for _, orc, _ in out}
    gaps = [(pol.power - orc.objective) / orc.objective for _, orc, pol in out]
    worst = max(abs(g) for g in gaps)
    below = min(gaps)
    ok = (len(out) == 20 and certs == {"ExactSOCP"} and worst <= 1e-4 and dt < 120.0)
    report(2, ok, f"{len(out)} instances, certificates {sorted(certs)}, worst rel gap "
                  f"{worst:.2e} (tol 1e-4), min gap {below:.2e}, {dt:.1f} s (limit 120 s)")


def test_criterion_3_descent_and_feasibility(runs, oracle_runs, desk_runs):
    worst_rise = 0.0
    worst_viol = 0.0
    for pol, chk in runs:
        hist = pol.objective_history
        for (l0, v0), (l1, v1) in zip(hist, hist[1:]):
            if l0 == l1:
                worst_rise = max(worst_rise, (v1 - v0) / max(abs(v0), 1.0))
        worst_viol = max(worst_viol, max(chk.values()))
    ok = worst_rise <= 1e-6 and worst_viol <= 1e-6 and len(runs) > 0
    report(3, ok, f"{len(runs)} runs, worst fixed-lambda rise {worst_rise:.2e} (tol 1e-6), "
                  f"worst constraint violation {worst_viol:.2e} (tol 1e-6)")


def iterations_to_settle(history, tol=1e-3):
    """First iteration whose relative change from the previous one is below ``tol``."""
    for i in range(1, len(history)):
        prev, cur = history[i - 1][1], history[i][1]
        if history[i - 1][0] == history[i][0] and abs(cur - prev) < tol * max(abs(prev), 1e-12):
            return i + 1
    return math.inf


def test_criterion_4_convergence_speed(desk_runs):
    pols, dt = desk_runs
    its = [iterations_to_settle(p.objective_history) for p in pols]
    frac = float(np.mean([i <= 15 for i in its]))
    finite = [i for i in its if math.isfinite(i)]
    ok = frac >= 0.95 and dt < 180.0
    report(4, ok, f"{frac:.1%} of {len(its)} frames settle within 15 iterations "
                  f"(median {np.median(finite) if finite else math.nan:.0f}), "
                  f"{dt:.1f} s (limit 180 s)")


def test_criterion_5_zero_fronthaul(desk):
    L = np.ones((desk.num_contents, desk.num_sbs))
    m, pols, _ = run_block(desk, "UC", make_trace(desk, 0, 1), FrameSolver(desk), L=L)
    fh = sum(float(np.sum(np.abs(p.fronthaul_beams) ** 2)) * desk.power_slope_cp
             for p in pols if p is not None)
    ok = fh <= 1e-8 and m.counted_frames > 0
    report(5, ok, f"fronthaul power {fh:.2e} W over {m.counted_frames} frames (tol 1e-8)")


def test_criterion_6_bcd_monotone(desk):
    worst = -math.inf
    rounds = []
    for seed in SEEDS:
        solver = FrameSolver(desk, DeliveryParams(seed=seed))
        res = pcud(make_trace(desk, seed, 0), desk, solver.for_history(),
                   L0=uc_allocation(desk).L)
        obj = np.asarray(res.objectives)
        rounds.append(len(obj))
        if obj.size > 1:
            worst = max(worst, float(np.max(np.diff(obj) / np.maximum(obj[:-1], 1e-12))))
    ok = worst <= 1e-6
    report(6, ok, f"largest relative rise {max(worst, 0.0):.2e} (tol 1e-6), "
                  f"objective counts per history {rounds}")


def _stub(F, B, cap, sizes, rate=1.0):
    import types
    return types.SimpleNamespace(num_contents=F, num_sbs=B, content_sizes=sizes,
                                 cache_capacity=np.full(B, float(cap)),
                                 edge_rate=np.full(F, rate))


def test_criterion_7_lp_correctness():
    worst = 0.0
    n = 0
    # worked examples
    R = 2.0e6
    hist = BlockHistory.from_clusterings(
        [batch_from_pairs(0, [(0, 0)]), batch_from_pairs(1, [(0, 0)]),
         batch_from_pairs(2, [(0, 1)])], [np.ones((1, 1))] * 3)
    alloc, val = solve_p2(hist, _stub(2, 1, 1.0, np.ones(2), R))
    worst = max(worst, abs(val - R) / R, float(np.abs(alloc.L - [[1], [0]]).max()))
    pref = LocalPreference(np.array([[0.8], [0.2]]), np.array([False]))
    alloc, val, _ = lc_pcud(BlockHistory(), _stub(2, 1, 1.0, np.ones(2), R), pref)
    worst = max(worst, abs(val - 0.2 * R) / R, float(np.abs(alloc.L - [[1], [0]]).max()))
    n += 2
    rng = np.random.default_rng(2024)
    for _ in range(30):
        F, B = int(rng.integers(2, 5)), int(rng.integers(1, 3))
        sizes = rng.integers(1, 4, F).astype(float)
        sc = _stub(F, B, float(rng.integers(0, int(sizes.sum()) + 1)), sizes)
        frames = []
        for t in range(5):
            k = int(rng.integers(1, F + 1))
            cs = np.sort(rng.choice(F, k, replace=False))
            E = (rng.random((k, B)) < 0.6).astype(float)
            E[np.arange(k), rng.integers(B, size=k)] = 1
            frames.append((batch_from_pairs(t, [(u, int(f)) for u, f in enumerate(cs)]), E))
        hist = BlockHistory.from_clusterings([f for f, _ in frames], [e for _, e in frames])
        terms = _clustering_terms(hist, sc.edge_rate, B)
        for unicast in (False, True):
            best, _ = enumerate_lp(terms, F, B, sizes, sc.cache_capacity, unicast)
            alloc, val = solve_p2(hist, sc, unicast=unicast)
            worst = max(worst, abs(val - best), abs(objective(alloc.L, terms, unicast) - best))
            n += 1
        q = rng.dirichlet(np.ones(F), size=B).T
        lterms = [(1.0, f, {b: q[f, b] for b in range(B)}) for f in range(F)]
        best, _ = enumerate_lp(lterms, F, B, sizes, sc.cache_capacity)
        alloc, val, _ = lc_pcud(BlockHistory(), sc, LocalPreference(q, np.zeros(B, bool)))
        worst = max(worst, abs(val - best), abs(objective(alloc.L, lterms) - best))
        n += 1
    report(7, worst <= 1e-9, f"{n} LPs, worst deviation from vertex enumeration "
                             f"{worst:.2e} (tol 1e-9)")


def test_criterion_8_local_preference():
    batches = [batch_from_pairs(0, [(0, 0), (1, 0), (2, 1)]),
               batch_from_pairs(1, [(0, 2)]),
               batch_from_pairs(2, [(1, 1), (2, 1)])]
    clusterings = [np.array([[1, 1], [0, 1]]), np.array([[1, 0]]), np.array([[1, 1]])]
    pref = estimate_local_preference(BlockHistory.from_clusterings(batches, clusterings), 3, 2)
    # SBS 0 serves 2, 2, 1 requests of contents 0, 1, 2; SBS 1 serves 2, 3, 0
    expect = np.array([[2 / 5, 2 / 5], [2 / 5, 3 / 5], [1 / 5, 0.0]])
    ok = np.array_equal(pref.q, expect) and not pref.flagged.any()
    report(8, ok, f"q' = {pref.q.T.round(6).tolist()} per SBS, expected "
                  f"{expect.T.round(6).tolist()}")


def test_criterion_9_trends(trend):
    out, dt, _ = trend
    problems = []
    gains = []
    for param, text in out.items():
        table = summary_table(text)
        pcud_curve = []
        for value, row in table.items():
            uc, pc, ga, ts = (row[p] for p in POLICIES)
            if not ga <= pc * (1 + 1e-9):
                problems.append(f"{param}={value:g}: GAC {ga:.4g} > PCUD {pc:.4g}")
            if not pc <= uc * (1 + 1e-9):
                problems.append(f"{param}={value:g}: PCUD {pc:.4g} > UC {uc:.4g}")
            if not pc <= ts * (1 + 1e-9):
                problems.append(f"{param}={value:g}: PCUD {pc:.4g} > TS-FUC {ts:.4g}")
            gains.append(1.0 - pc / uc)
            pcud_curve.append(pc)
        if np.any(np.diff(pcud_curve) > 1e-9 * np.abs(pcud_curve[:-1])):
            problems.append(f"PCUD not non-increasing in {param}: "
                            + ", ".join(f"{p:.4g}" for p in pcud_curve))
    gain = float(np.mean(gains))
    if gain < 0.20:
        problems.append(f"mean PCUD gain over UC {gain:.1%} < 20%")
    if dt >= 900.0:
        problems.append(f"runtime {dt:.0f} s >= 900 s")
    report(9, not problems, f"mean PCUD gain over UC {gain:.1%}, {dt:.0f} s (limit 900 s)"
           + ("; " + "; ".join(problems) if problems else ""))


def test_criterion_10_determinism(trend, tmp_path):
    _, _, root = trend
    ref_dir = root / "mu"
    spec = SweepSpec("mu", [MU_VALUES[0]], POLICIES, [0], str(tmp_path))
    run_sweep(spec, preset_config("desk"))
    name = f"point_mu_{float(MU_VALUES[0])}_seed0.csv"
    same = (tmp_path / name).read_bytes() == (ref_dir / name).read_bytes()
    report(10, same, f"re-run of {name} byte-identical: {same}")
