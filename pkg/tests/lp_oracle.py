"""Brute-force vertex enumeration for the small cache LPs used in tests.

The objective sum_j w_j max_{b in S_j} c_{j,b} (1 - l_{f_j,b}) is piecewise
linear, so its minimum over the storage polytope sits at a vertex of the
arrangement formed by the box, storage and breakpoint hyperplanes. Every
n-subset of those hyperplanes is solved as a square system; feasible points
are scored directly.
"""

import itertools

import numpy as np


def _objective(L, terms, sum_terms):
    val = 0.0
    for w, f, cb in terms:
        parts = [c * (1.0 - L[f, b]) for b, c in cb.items()]
        val += w * (sum(parts) if sum_terms else max(parts))
    return val


def enumerate_lp(terms, F, B, sizes, capacity, sum_terms=False):
    n = F * B
    A, rhs = [], []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        A += [e, e]
        rhs += [0.0, 1.0]
    cap = np.broadcast_to(np.asarray(capacity, float), (B,))
    for b in range(B):
        row = np.zeros(n)
        row[b::B] = sizes
        A.append(row)
        rhs.append(cap[b])
    for _, f, cb in terms:
        for (b1, c1), (b2, c2) in itertools.combinations(sorted(cb.items()), 2):
            # c1 (1 - l1) = c2 (1 - l2)  <=>  -c1 l1 + c2 l2 = c2 - c1
            row = np.zeros(n)
            row[f * B + b1] -= c1
            row[f * B + b2] += c2
            A.append(row)
            rhs.append(c2 - c1)
    A, rhs = np.array(A), np.array(rhs)
    # drop duplicate hyperplanes
    key = np.round(np.hstack([A, rhs[:, None]]), 12)
    _, keep = np.unique(key, axis=0, return_index=True)
    A, rhs = A[np.sort(keep)], rhs[np.sort(keep)]
    combos = np.array(list(itertools.combinations(range(len(A)), n)))
    M = A[combos]
    r = rhs[combos]
    det = np.linalg.det(M)
    ok = np.abs(det) > 1e-12
    X = np.linalg.solve(M[ok], r[ok][..., None])[..., 0]
    feas = np.all(X >= -1e-12, axis=1) & np.all(X <= 1 + 1e-12, axis=1)
    for b in range(B):
        feas &= X[:, b::B] @ np.asarray(sizes, float) <= cap[b] * (1 + 1e-12) + 1e-12
    best, best_L = np.inf, None
    for x in X[feas]:
        L = np.clip(x.reshape(F, B), 0.0, 1.0)
        v = _objective(L, terms, sum_terms)
        if v < best - 1e-15:
            best, best_L = v, L
    return best, best_L


def objective(L, terms, sum_terms=False):
    return _objective(np.asarray(L, float), terms, sum_terms)
