"""Zipf preference patterns and per-frame multicast request batches."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PreferencePattern",
    "RequestBatch",
    "zipf_probs",
    "build_patterns",
    "sample_requests",
    "batch_from_pairs",
    "dump_request_trace",
    "load_request_trace",
]


def zipf_probs(ranks, kappa):
    """p_f = c * rank_f^-kappa normalized to sum to one."""
    w = np.asarray(ranks, dtype=float) ** (-float(kappa))
    return w / w.sum()


@dataclass(frozen=True)
class PreferencePattern:
    pattern_id: int
    ranks: np.ndarray  # rank of content f, a permutation of 1..F
    kappa: float
    probs: np.ndarray


def build_patterns(num_patterns, num_contents, rng, skew_min=1.0, skew_max=3.0):
    if num_patterns < 1:
        raise ValueError("num_patterns must be >= 1")
    patterns = []
    for i in range(num_patterns):
        ranks = rng.permutation(num_contents) + 1
        kappa = float(rng.uniform(skew_min, skew_max))
        patterns.append(PreferencePattern(i, ranks, kappa, zipf_probs(ranks, kappa)))
    return patterns


@dataclass(frozen=True)
class RequestBatch:
    """Requests of one frame.

    ``contents`` lists the requested contents in ascending order; ``groups[g]``
    holds the users requesting ``contents[g]``.
    """

    frame: int
    requests: tuple  # ((k, f), ...) sorted by user
    contents: tuple = field(default=())
    groups: tuple = field(default=())

    @property
    def empty(self):
        return not self.requests

    @property
    def counts(self):
        """Number of requests per requested content (N'_{f,t})."""
        return np.array([len(g) for g in self.groups], dtype=int)

    @property
    def active_users(self):
        return tuple(k for k, _ in self.requests)


def batch_from_pairs(frame, pairs):
    """Group (user, content) pairs into multicast groups."""
    pairs = tuple(sorted((int(k), int(f)) for k, f in pairs))
    users = [k for k, _ in pairs]
    if len(set(users)) != len(users):
        raise ValueError("a user may request only one content per frame")
    contents = tuple(sorted({f for _, f in pairs}))
    groups = tuple(tuple(k for k, f in pairs if f == c) for c in contents)
    return RequestBatch(int(frame), pairs, contents, groups)


def sample_requests(patterns, user_pattern, frame, rng, p_active=0.5):
    """Bernoulli activity per user, then one Zipf draw per active user."""
    user_pattern = np.asarray(user_pattern)
    active = rng.random(len(user_pattern)) < p_active
    pairs = []
    for k in np.flatnonzero(active):
        p = patterns[user_pattern[k]].probs
        pairs.append((int(k), int(rng.choice(len(p), p=p))))
    return batch_from_pairs(frame, pairs)


def dump_request_trace(batches):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "k", "f"])
    for batch in batches:
        for k, f in batch.requests:
            w.writerow([batch.frame, k, f])
    return buf.getvalue()


def load_request_trace(text, frames=None):
    """Rebuild batches from CSV. ``frames`` lists frames to emit even if empty."""
    by_frame = {}
    for row in csv.DictReader(io.StringIO(text)):
        by_frame.setdefault(int(row["t"]), []).append((int(row["k"]), int(row["f"])))
    keys = sorted(set(by_frame) | set(frames or ()))
    return [batch_from_pairs(t, by_frame.get(t, [])) for t in keys]
