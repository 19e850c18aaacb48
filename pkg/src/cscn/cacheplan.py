"""Long-term cache updating.

Block coordinate descent between per-frame delivery (clustering) and the
cache allocation LP, plus the preference-learning shortcut and the baseline
allocators. All allocation LPs are solved with HiGHS so the
returned L is an exact vertex satisfying the storage constraints.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

__all__ = [
    "CacheAllocation",
    "FrameRecord",
    "BlockHistory",
    "LocalPreference",
    "BcdResult",
    "uc_allocation",
    "solve_p2",
    "estimate_local_preference",
    "lc_pcud",
    "pcud",
    "gac",
    "LruCache",
    "lru_update",
    "dump_allocation",
    "load_allocation",
]

log = logging.getLogger(__name__)


@dataclass
class CacheAllocation:
    L: np.ndarray  # (F, B), fraction of each content's parity bits per SBS
    algorithm: str = ""
    block: int = 0
    seed: int = 0

    def check(self, content_sizes, capacity, tol=1e-9):
        """Raise ValueError unless 0 <= l <= 1 and per-SBS storage fits."""
        L = np.asarray(self.L, float)
        if L.min(initial=0.0) < -tol or L.max(initial=0.0) > 1 + tol:
            raise ValueError("cache fractions outside [0, 1]")
        used = np.asarray(content_sizes, float) @ L
        cap = np.broadcast_to(np.asarray(capacity, float), used.shape)
        if np.any(used > cap * (1 + tol) + tol):
            raise ValueError(f"storage exceeded: {used} > {cap}")


@dataclass
class FrameRecord:
    """One observed frame. ``clustering`` is None when the frame was infeasible."""

    batch: object
    channels: object
    clustering: np.ndarray | None = None


@dataclass
class BlockHistory:
    frames: list = field(default_factory=list)
    block: int = 0

    def __len__(self):
        return len(self.frames)

    @classmethod
    def from_clusterings(cls, batches, clusterings, block=0):
        """History without channels, e.g. for the LP steps alone."""
        return cls([FrameRecord(b, None, None if E is None else np.asarray(E))
                    for b, E in zip(batches, clusterings)], block)


@dataclass
class LocalPreference:
    q: np.ndarray  # (F, B)
    flagged: np.ndarray  # (B,) True where the SBS never served a request


def uc_allocation(scenario):
    mu = float(scenario.fractional_capacity)
    if not 0.0 <= mu <= 1.0:
        raise ValueError("fractional capacity must lie in [0, 1]")
    return CacheAllocation(np.full((scenario.num_contents, scenario.num_sbs), mu), "UC")


def _capacity_rows(num_contents, num_sbs, sizes, capacity):
    """Rows of ``sum_f s_f l_{f,b} <= S_b`` over the flattened (f, b) layout."""
    A = np.zeros((num_sbs, num_contents * num_sbs))
    for b in range(num_sbs):
        A[b, b::num_sbs] = sizes
    return A, np.broadcast_to(np.asarray(capacity, float), (num_sbs,)).copy()


def _epigraph_lp(terms, num_contents, num_sbs, sizes, capacity, sum_terms=False):
    """min sum_j w_j max_{b in S_j} c_{j,b} (1 - l_{f_j,b}) s.t. storage and box.

    ``terms`` is a list of ``(weight, f, {b: c})``. With ``sum_terms`` the max
    over b is replaced by a sum (unicast surrogate). Returns ``(L, value)``.
    """
    F, B = num_contents, num_sbs
    sizes = np.asarray(sizes, float)
    cap = np.broadcast_to(np.asarray(capacity, float), (B,))
    terms = [(w, f, {b: c for b, c in cb.items() if c > 0}) for w, f, cb in terms]
    terms = [t for t in terms if t[0] > 0 and t[2]]
    if not terms:
        return np.zeros((F, B)), 0.0
    # normalize rates and sizes so the LP is well scaled
    cscale = max(c for _, _, cb in terms for c in cb.values())
    sscale = max(float(sizes.max()), 1e-300)
    nl = F * B
    rows, rhs, obj_u = [], [], []
    n_u = 0 if sum_terms else len(terms)
    q = np.zeros(nl + n_u)
    const = 0.0
    for j, (w, f, cb) in enumerate(terms):
        if sum_terms:
            for b, c in cb.items():
                q[f * B + b] -= w * c / cscale
                const += w * c / cscale
            continue
        q[nl + j] = w
        for b, c in cb.items():
            row = np.zeros(nl + n_u)
            row[f * B + b] = -c / cscale  # u >= c (1 - l)  <=>  -c l - u <= -c
            row[nl + j] = -1.0
            rows.append(row)
            rhs.append(-c / cscale)
    A_cap, b_cap = _capacity_rows(F, B, sizes / sscale, cap / sscale)
    A_cap = np.hstack([A_cap, np.zeros((B, n_u))])
    A_ub = np.vstack([A_cap] + ([np.vstack(rows)] if rows else []))
    b_ub = np.concatenate([b_cap, np.asarray(rhs, float)])
    bounds = [(0.0, 1.0)] * nl + [(0.0, None)] * n_u
    res = linprog(q, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"cache LP failed: {res.message}")
    L = np.clip(res.x[:nl].reshape(F, B), 0.0, 1.0)
    return L, (float(res.fun) + const) * cscale


def _clustering_terms(history, edge_rates, num_sbs):
    """Aggregate identical (content, cluster) pairs across frames."""
    agg = {}
    for rec in history.frames:
        if rec.clustering is None:
            continue
        for g, f in enumerate(rec.batch.contents):
            cluster = tuple(int(b) for b in np.flatnonzero(rec.clustering[g]))
            agg[(f, cluster)] = agg.get((f, cluster), 0) + 1
    return [(w, f, {b: float(edge_rates[f]) for b in cluster})
            for (f, cluster), w in sorted(agg.items())]


def solve_p2(history, scenario, unicast=False):
    """Cache update for fixed clusterings.

    Minimizes ``sum_t sum_f max_b (1 - l_{f,b}) e_{f,b,t} R_f`` (the
    per-SBS sum for unicast fronthaul) subject to storage and box constraints.
    Returns ``(CacheAllocation, objective)`` with the objective in bit/s.
    """
    terms = _clustering_terms(history, scenario.edge_rate, scenario.num_sbs)
    L, val = _epigraph_lp(terms, scenario.num_contents, scenario.num_sbs,
                          scenario.content_sizes, scenario.cache_capacity, sum_terms=unicast)
    return CacheAllocation(L, "P2-unicast" if unicast else "P2", history.block), val


def estimate_local_preference(history, num_contents, num_sbs):
    """Request-weighted share of each content in the service of each SBS."""
    counts = np.zeros((num_contents, num_sbs))
    for rec in history.frames:
        if rec.clustering is None:
            continue
        n = rec.batch.counts
        for g, f in enumerate(rec.batch.contents):
            counts[f] += n[g] * np.asarray(rec.clustering[g], float)
    total = counts.sum(axis=0)
    flagged = total <= 0
    q = np.where(flagged[None, :], 1.0 / num_contents, counts / np.where(flagged, 1.0, total))
    if flagged.any():
        log.warning("SBS %s never served a request; using a uniform preference",
                    np.flatnonzero(flagged).tolist())
    return LocalPreference(q, flagged)


def lc_pcud(history, scenario, preference=None):
    """Low-complexity update: min sum_f max_b q'_{f,b} (1 - l_{f,b}) R_f.

    Returns ``(CacheAllocation, objective, LocalPreference)``.
    """
    pref = preference or estimate_local_preference(history, scenario.num_contents,
                                                   scenario.num_sbs)
    R = scenario.edge_rate
    terms = [(1.0, f, {b: float(pref.q[f, b] * R[f]) for b in range(scenario.num_sbs)})
             for f in range(scenario.num_contents)]
    L, val = _epigraph_lp(terms, scenario.num_contents, scenario.num_sbs,
                          scenario.content_sizes, scenario.cache_capacity)
    return CacheAllocation(L, "LC-PCUD", history.block), val, pref


# --- inexact block coordinate descent ---------------------------------------

@dataclass
class BcdResult:
    allocation: CacheAllocation
    objectives: list  # summed block power after each accepted round
    rounds: int
    policies: list  # per-frame policy (None if infeasible) under the final L
    rejected: int = 0  # cache updates discarded because power went up


def pcud(history, scenario, frame_solver, L0=None, max_outer=5, tol=1e-3,
         unicast=False, algorithm="PCUD", backtrack=(0.5, 0.25)):
    """Alternate per-frame delivery and the cache LP.

    ``frame_solver(L, index, record)`` returns a policy or None (infeasible).
    The summed power is compared on frames feasible under both allocations.
    When the LP solution raises it, damped steps ``L + a (L_lp - L)`` for ``a`` in
    ``backtrack`` are tried; if none helps the update is rejected, which keeps
    the objective sequence non-increasing.
    """
    L = np.array(uc_allocation(scenario).L if L0 is None else L0, float)
    if len(history) == 0:
        warnings.warn("empty history: cache allocation left unchanged", RuntimeWarning)
        return BcdResult(CacheAllocation(L, algorithm, history.block), [], 0, [])

    def evaluate(Lc):
        return [frame_solver(Lc, i, rec) for i, rec in enumerate(history.frames)]

    def total(pols, mask):
        return float(sum(p.power for p, m in zip(pols, mask) if m))

    policies = evaluate(L)
    feasible = [p is not None for p in policies]
    objectives = [total(policies, feasible)]
    rounds = rejected = 0
    for rounds in range(1, max_outer + 1):
        fixed = BlockHistory([FrameRecord(rec.batch, rec.channels,
                                          None if p is None else p.clustering)
                              for rec, p in zip(history.frames, policies)], history.block)
        L_lp = solve_p2(fixed, scenario, unicast=unicast)[0].L
        if np.array_equal(L_lp, L):
            break
        accepted = False
        for a in (1.0,) + tuple(backtrack):
            L_new = L_lp if a == 1.0 else L + a * (L_lp - L)
            new_pols = evaluate(L_new)
            both = [x is not None and y is not None for x, y in zip(policies, new_pols)]
            old_val, new_val = total(policies, both), total(new_pols, both)
            if new_val <= old_val:
                accepted = True
                break
            log.info("%s round %d: step %.3g rejected (%.6g > %.6g)", algorithm, rounds,
                     a, new_val, old_val)
        if not accepted:
            rejected += 1
            break
        L, policies = L_new, new_pols
        feasible = [p is not None for p in policies]
        objectives.append(total(policies, feasible))
        if old_val - new_val < tol * max(old_val, 1e-300):
            break
    return BcdResult(CacheAllocation(L, algorithm, history.block), objectives, rounds,
                     policies, rejected)


def gac(future_history, scenario, frame_solver, **kw):
    """Genie-aided bound: the BCD run on the block that is about to be served."""
    kw.setdefault("algorithm", "GAC")
    return pcud(future_history, scenario, frame_solver, **kw)


# --- LRU --------------------------------------------------------------------

class LruCache:
    """Whole-content LRU state per SBS (l in {0, 1})."""

    def __init__(self, num_contents, num_sbs, content_sizes, capacity):
        self.num_contents = num_contents
        self.sizes = np.asarray(content_sizes, float)
        self.capacity = np.broadcast_to(np.asarray(capacity, float), (num_sbs,)).copy()
        self.order = [OrderedDict() for _ in range(num_sbs)]

    @classmethod
    def for_scenario(cls, scenario):
        return cls(scenario.num_contents, scenario.num_sbs, scenario.content_sizes,
                   scenario.cache_capacity)

    def access(self, b, f):
        cache = self.order[b]
        if self.sizes[f] > self.capacity[b] * (1 + 1e-12):
            warnings.warn(f"content {f} larger than SBS {b} storage; not cached",
                          RuntimeWarning)
            return
        cache[f] = True
        cache.move_to_end(f)
        while sum(self.sizes[x] for x in cache) > self.capacity[b] * (1 + 1e-12):
            cache.popitem(last=False)

    def contents(self, b):
        return list(self.order[b])

    def allocation(self):
        L = np.zeros((self.num_contents, len(self.order)))
        for b, cache in enumerate(self.order):
            L[list(cache), b] = 1.0
        return CacheAllocation(L, "LRU")


def lru_update(state, batch, clustering=None):
    """Insert every content served in ``batch`` at each serving SBS.

    ``clustering`` is the frame's (G, B) matrix; when None every SBS is
    treated as serving every requested content. Returns the new allocation.
    """
    B = len(state.order)
    for g, f in enumerate(batch.contents):
        serving = range(B) if clustering is None else np.flatnonzero(clustering[g])
        for b in serving:
            state.access(int(b), int(f))
    return state.allocation()


# --- serialization ----------------------------------------------------------

def dump_allocation(alloc):
    buf = io.StringIO()
    buf.write(f"# algorithm={alloc.algorithm} block={alloc.block} seed={alloc.seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["f", "b", "l"])
    F, B = alloc.L.shape
    for f in range(F):
        for b in range(B):
            w.writerow([f, b, repr(float(alloc.L[f, b]))])
    return buf.getvalue()


def load_allocation(text):
    lines = text.splitlines()
    meta = {}
    if lines and lines[0].startswith("#"):
        for item in lines[0][1:].split():
            k, _, v = item.partition("=")
            meta[k] = v
        lines = lines[1:]
    rows = list(csv.DictReader(lines))
    F = max(int(r["f"]) for r in rows) + 1
    B = max(int(r["b"]) for r in rows) + 1
    L = np.zeros((F, B))
    for r in rows:
        L[int(r["f"]), int(r["b"])] = float(r["l"])
    return CacheAllocation(L, meta.get("algorithm", ""), int(meta.get("block", 0)),
                           int(meta.get("seed", 0)))
