"""Mixed-timescale simulation with its block metrics.

Also hosts the brute-force reference oracle for single frames.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np

from .conic import ConicProblem, complex_rows, solve
from .delivery import (DeliveryInfeasible, DeliveryParams, FrameData, LN2,
                       solve_fixed_clustering, _feasibility_probe, _initial_edge_beams)

log = logging.getLogger(__name__)

ORACLE_BUDGET = 4096


def power_of(policy, scenario):
    """``sum delta_b ||v_{f,b}||^2 + sum beta ||w_f||^2`` in watts."""
    V = np.asarray(policy.edge_beams)
    W = np.asarray(policy.fronthaul_beams)
    edge = float(np.sum(np.asarray(scenario.power_slope_sbs)[None, :]
                        * np.sum(np.abs(V) ** 2, axis=-1))) if V.size else 0.0
    return edge + float(scenario.power_slope_cp) * float(np.sum(np.abs(W) ** 2))


# --- oracle -----------------------------------------------------------------

@dataclass
class OracleResult:
    objective: float
    clustering: np.ndarray
    certificate: str  # "ExactSOCP" or "MultiStartLocal"
    edge_power: float = 0.0
    fronthaul_power: float = 0.0
    evaluated: int = 0


class OracleBudgetExceeded(ValueError):
    pass


def _edge_socp(fd, E):
    """Exact fixed-clustering edge power when every group has a single user.

    Phase rotation makes ``h^H v_g`` real and nonnegative, turning the SINR
    constraints into second-order cones. Returns ``(power, V)`` or ``None``.
    """
    G, B, M = fd.G, fd.B, fd.M
    prob = ConicProblem()
    v = prob.add_variable("v", 2 * G * B * M)
    n = 2 * B * M
    for g in range(G):
        for b in range(B):
            cell = v[g * n + 2 * b * M: g * n + 2 * (b + 1) * M]
            if E[g, b]:
                prob.add_sum_squares(cell, fd.delta[b])
            else:
                for i in cell:
                    prob.lower[i] = prob.upper[i] = 0.0
    for b in range(B):
        cols = np.concatenate([v[g * n + 2 * b * M: g * n + 2 * (b + 1) * M] for g in range(G)])
        mat = np.vstack([np.zeros((1, cols.size)), np.eye(cols.size)])
        const = np.zeros(cols.size + 1)
        const[0] = math.sqrt(fd.pmax[b])
        prob.add_soc(cols, mat, const)
    for g, grp in enumerate(fd.groups):
        (k,) = grp
        rows = complex_rows(fd.g_edge[k].conj())
        prob.add_eq(v[g * n:(g + 1) * n], rows[1:2], [0.0])
        mat = np.zeros((2 * G, G * n))
        mat[0, g * n:(g + 1) * n] = rows[0] / math.sqrt(fd.gamma[g])
        r = 1
        for gp in range(G):
            if gp != g:
                mat[r:r + 2, gp * n:(gp + 1) * n] = rows
                r += 2
        const = np.zeros(2 * G)
        const[-1] = 1.0
        prob.add_soc(v, mat, const)
    sol = solve(prob)
    if sol.status != "Optimal":
        return None
    x = sol.value(prob, "v")
    V = (x[0::2] + 1j * x[1::2]).reshape(G, B, M)
    return float(sol.objective), V


def _fronthaul_exact(fd, E):
    """Closed-form minimum fronthaul power, or None if not single-stream exact."""
    floor = fd.rate_floor(E)
    snr = np.expm1(LN2 * floor)
    total = 0.0
    for g in range(fd.G):
        if fd.unicast:
            for b in range(fd.B):
                if snr[g, b] > 0:
                    total += snr[g, b] / np.linalg.norm(fd.g_fh[b], 2) ** 2
            continue
        if snr[g] <= 0:
            continue
        sel = np.flatnonzero(E[g])
        if fd.N == 1:
            gains = [np.sum(np.abs(fd.g_fh[b]) ** 2) for b in sel]
            total += snr[g] / min(gains)
        elif sel.size == 1:
            total += snr[g] / np.linalg.norm(fd.g_fh[sel[0]], 2) ** 2
        else:
            return None
    return fd.beta * total


def _exact_eligible(fd):
    return all(len(grp) == 1 for grp in fd.groups)


def _clusterings(G, B):
    rows = [r for r in itertools.product((0, 1), repeat=B) if any(r)]
    for combo in itertools.product(rows, repeat=G):
        yield np.array(combo, dtype=int).reshape(G, B)


def oracle_short_term(scenario, L, channels, batch, n_restarts=20, seed=0,
                      unicast=False, params=None, budget=ORACLE_BUDGET):
    """Enumerate every clustering with nonempty clusters and keep the best."""
    fd = FrameData(scenario, L, channels, batch, unicast=unicast)
    if fd.G == 0:
        return OracleResult(0.0, np.zeros((0, fd.B), int), "ExactSOCP")
    if 2 ** (fd.G * fd.B) > budget:
        raise OracleBudgetExceeded(f"2^{fd.G * fd.B} clusterings exceed budget {budget}")
    params = params or DeliveryParams()
    best = None
    exact_all = True
    count = 0
    for E in _clusterings(fd.G, fd.B):
        count += 1
        fh = _fronthaul_exact(fd, E)
        edge = None
        if _exact_eligible(fd):
            res = _edge_socp(fd, E)
            if res is None:
                continue
            edge = res[0]
        if edge is not None and fh is not None:
            total = edge + fh
            ep, fp = edge, fh
        else:
            exact_all = False
            total = math.inf
            rng = np.random.default_rng([seed, count])
            for r in range(n_restarts):
                V0 = _initial_edge_beams(fd, E, rng if r else None)
                W0 = rng.standard_normal(fd.w_shape) + 1j * rng.standard_normal(fd.w_shape)
                try:
                    V, W, _ = solve_fixed_clustering(fd, E, V0, W0, params)
                except DeliveryInfeasible:
                    continue
                e_, f_ = fd.power_parts(V, W)
                if e_ + f_ < total:
                    total, ep, fp = e_ + f_, e_, f_
            if not math.isfinite(total):
                continue
        if best is None or total < best.objective:
            best = OracleResult(total, E, "", ep, fp)
    if best is None:
        raise DeliveryInfeasible("sinr", "no clustering is feasible")
    best.certificate = "ExactSOCP" if exact_all else "MultiStartLocal"
    best.evaluated = count
    return best


# --- simulation ---------------------------------------------------------------

POLICIES = ("UC", "LRU", "PCUD", "LC-PCUD", "GAC", "TS-FUC")
METRICS_VERSION = 1
METRIC_FIELDS = ["sweep_param", "sweep_value", "policy", "seed", "block", "frames",
                 "feasible_frames", "infeasible_frames", "counted_frames", "total_power", "edge_power",
                 "fronthaul_power", "mean_power", "mean_iterations", "hit_fraction",
                 "status"]


@dataclass
class BlockMetrics:
    policy: str
    seed: int
    block: int
    frames: int
    infeasible_frames: int
    total_power: float  # watts summed over the counted frames
    edge_power: float
    fronthaul_power: float
    mean_iterations: float
    hit_fraction: float  # auxiliary: request-weighted mean l over serving clusters
    counted_frames: int = 0  # frames entering the power sums
    sweep_param: str = ""
    sweep_value: float = math.nan
    status: str = "ok"

    @property
    def feasible_frames(self):
        return self.frames - self.infeasible_frames

    @property
    def mean_power(self):
        n = self.counted_frames
        return self.total_power / n if n else math.nan

    def row(self):
        return {"sweep_param": self.sweep_param, "sweep_value": repr(float(self.sweep_value)),
                "policy": self.policy, "seed": self.seed, "block": self.block,
                "frames": self.frames, "feasible_frames": self.feasible_frames,
                "infeasible_frames": self.infeasible_frames,
                "counted_frames": self.counted_frames,
                "total_power": repr(float(self.total_power)), "edge_power": repr(float(self.edge_power)),
                "fronthaul_power": repr(float(self.fronthaul_power)),
                "mean_power": repr(float(self.mean_power)),
                "mean_iterations": repr(float(self.mean_iterations)),
                "hit_fraction": repr(float(self.hit_fraction)), "status": self.status}


def dump_metrics(metrics):
    import csv
    import io
    buf = io.StringIO()
    buf.write(f"# cscn block metrics v{METRICS_VERSION}\n")
    w = csv.DictWriter(buf, METRIC_FIELDS, lineterminator="\n")
    w.writeheader()
    for m in metrics:
        w.writerow(m.row())
    return buf.getvalue()


def load_metrics(text):
    import csv
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# cscn block metrics v"):
        raise ValueError("missing metrics schema header")
    version = int(lines[0].rsplit("v", 1)[1])
    if version != METRICS_VERSION:
        raise ValueError(f"unsupported metrics schema v{version}")
    out = []
    for r in csv.DictReader(lines[1:]):
        frames, infeasible = int(r["frames"]), int(r["infeasible_frames"])
        out.append(BlockMetrics(
            r["policy"], int(r["seed"]), int(r["block"]), frames, infeasible,
            float(r["total_power"]), float(r["edge_power"]), float(r["fronthaul_power"]),
            float(r["mean_iterations"]), float(r["hit_fraction"]), int(r["counted_frames"]),
            r["sweep_param"], float(r["sweep_value"]), r["status"]))
    return out


def make_trace(scenario, seed, block, patterns=None):
    """Requests and channels of one block, reproducible from ``(seed, block)``.

    Preference patterns are drawn once per seed; large-scale fading once per
    block; small-scale fading and requests per frame.
    """
    from .cacheplan import BlockHistory, FrameRecord
    from .channel import frame_rng, sample_channels, sample_large_scale
    from .demand import build_patterns, sample_requests
    s = scenario
    if patterns is None:
        patterns = build_patterns(s.num_patterns, s.num_contents, frame_rng(seed, 1),
                                  s.skew_min, s.skew_max)
    large = sample_large_scale(s, frame_rng(seed, 2, block))
    frames = []
    T = s.frames_per_block
    for t in range(T):
        rng = frame_rng(seed, 3, block, t)
        index = block * T + t
        ch = sample_channels(s, index, rng, large)
        batch = sample_requests(patterns, s.user_pattern, index, rng, s.p_active)
        frames.append(FrameRecord(batch, ch))
    return BlockHistory(frames, block)


class FrameSolver:
    """Memoized per-frame delivery.

    A frame only sees the cache rows of the contents it requests, so the key is
    (frame, unicast, those rows); BCD rounds that move other rows reuse results.
    """

    def __init__(self, scenario, params=None):
        self.scenario = scenario
        self.params = params or DeliveryParams()
        self.cache = {}
        self.solves = 0

    def __call__(self, L, record, unicast=False):
        from .delivery import solve_short_term, solve_short_term_unicast
        L = np.ascontiguousarray(L, dtype=float)
        rows = L[list(record.batch.contents)] if record.batch.contents else L[:0]
        key = (record.batch.frame, unicast, np.ascontiguousarray(rows).tobytes())
        if key not in self.cache:
            self.solves += 1
            fn = solve_short_term_unicast if unicast else solve_short_term
            try:
                pol = fn(self.scenario, L, record.channels, record.batch, self.params)
            except DeliveryInfeasible as exc:
                log.info("frame %d infeasible: %s", record.batch.frame, exc)
                pol = None
            self.cache[key] = pol
        return self.cache[key]

    def for_history(self, unicast=False):
        return lambda L, i, rec: self(L, rec, unicast)


def _hit_fraction(policy, L):
    num = den = 0.0
    if policy is None or policy.empty:
        return num, den
    counts = [len(g) for g in policy.groups]
    for g, f in enumerate(policy.contents):
        sel = np.flatnonzero(policy.clustering[g])
        num += counts[g] * float(np.mean(np.asarray(L)[f, sel]))
        den += counts[g]
    return num, den


def block_metrics(policy_name, seed, block, policies, allocations, mask=None):
    """Aggregate per-frame policies (None = infeasible) into BlockMetrics.

    ``allocations`` is one L per frame (or a single L). ``mask`` restricts
    the power sums to a common set of frames.
    """
    n = len(policies)
    if mask is None:
        mask = [p is not None for p in policies]
    if not isinstance(allocations, list):
        allocations = [allocations] * n
    edge = fh = 0.0
    iters = []
    hit_num = hit_den = 0.0
    for p, m, L in zip(policies, mask, allocations):
        if p is None or not m:
            continue
        edge += p.edge_power
        fh += p.fronthaul_power
        iters.append(p.iterations)
        a, b = _hit_fraction(p, L)
        hit_num += a
        hit_den += b
    counted = sum(1 for p, m in zip(policies, mask) if p is not None and m)
    infeasible = sum(p is None for p in policies)
    return BlockMetrics(policy_name, seed, block, n, infeasible, edge + fh, edge, fh,
                        float(np.mean(iters)) if iters else 0.0,
                        hit_num / hit_den if hit_den else 0.0, counted)


def run_block(scenario, policy_name, trace, solver, L=None, lru_state=None, seed=0):
    """Serve one block with a fixed allocation (or an evolving LRU cache).

    Returns ``(BlockMetrics, per-frame policies, per-frame allocations)``.
    Infeasible frames are counted, never fatal.
    """
    from .cacheplan import lru_update
    unicast = policy_name == "TS-FUC"
    policies, allocs = [], []
    for rec in trace.frames:
        if lru_state is not None:
            L = lru_state.allocation().L
        pol = solver(L, rec, unicast)
        policies.append(pol)
        allocs.append(L)
        if lru_state is not None and pol is not None:
            lru_update(lru_state, rec.batch, pol.clustering)
    return block_metrics(policy_name, seed, trace.block, policies, allocs), policies, allocs


def simulate(scenario, policies=("UC", "PCUD", "GAC", "TS-FUC"), seed=0, params=None,
             max_outer=5, solver=None):
    """Two consecutive blocks on a shared trace: block 0 builds history, block 1 is
    measured. Power sums use the frames feasible under every policy.

    Returns ``{policy: BlockMetrics}`` for block 1 plus the allocations used.
    """
    from .cacheplan import (BlockHistory, FrameRecord, LruCache, gac, lc_pcud, pcud,
                            uc_allocation)
    unknown = [p for p in policies if p not in POLICIES]
    if unknown or not policies:
        raise ValueError(f"unknown or empty policy list: {unknown or policies}")
    s = scenario
    solver = solver or FrameSolver(s, params or DeliveryParams(seed=seed))
    hist = make_trace(s, seed, 0)
    meas = make_trace(s, seed, 1)
    uc = uc_allocation(s).L
    allocations = {}
    per_frame = {}
    for name in policies:
        lru = None
        if name == "UC":
            L = uc
        elif name == "PCUD":
            L = pcud(hist, s, solver.for_history(), L0=uc, max_outer=max_outer).allocation.L
        elif name == "TS-FUC":
            L = pcud(hist, s, solver.for_history(True), L0=uc, max_outer=max_outer,
                     unicast=True, algorithm="TS-FUC").allocation.L
        elif name == "GAC":
            L = gac(meas, s, solver.for_history(), L0=uc, max_outer=max_outer).allocation.L
        elif name == "LC-PCUD":
            pols = [solver(uc, rec) for rec in hist.frames]
            observed = BlockHistory([FrameRecord(r.batch, r.channels,
                                                 None if p is None else p.clustering)
                                     for r, p in zip(hist.frames, pols)], 0)
            L = lc_pcud(observed, s)[0].L
        else:  # LRU warms up on block 0 and keeps evolving through block 1
            lru = LruCache.for_scenario(s)
            run_block(s, name, hist, solver, lru_state=lru, seed=seed)
            L = None
        _, pols, allocs = run_block(s, name, meas, solver, L=L, lru_state=lru, seed=seed)
        allocations[name] = allocs[0] if lru is None else allocs
        per_frame[name] = (pols, allocs)
    common = [all(per_frame[n][0][i] is not None for n in policies)
              for i in range(len(meas.frames))]
    metrics = {}
    for name in policies:
        pols, allocs = per_frame[name]
        metrics[name] = block_metrics(name, seed, 1, pols, allocs, common)
    return metrics, allocations
