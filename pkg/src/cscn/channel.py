"""Edge and fronthaul channel generation.

Large-scale gain (path loss, antenna gain, log-normal shadowing) is drawn
once per transmission block; Rayleigh small-scale fading is redrawn every
frame.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ChannelRealization",
    "LargeScale",
    "path_loss_db",
    "sample_large_scale",
    "sample_channels",
    "frame_rng",
    "dump_channel_trace",
    "load_channel_trace",
]

MIN_DISTANCE_KM = 1e-3


def path_loss_db(d_km, intercept=148.1, slope=37.6):
    """Path loss ``intercept + slope * log10(d)`` with ``d`` in km (clamped at 1 m)."""
    d = np.maximum(np.asarray(d_km, dtype=float), MIN_DISTANCE_KM)
    return intercept + slope * np.log10(d)


def frame_rng(seed, *stream):
    """Independent generator for a (seed, stream...) tuple, e.g. (seed, block, frame)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


@dataclass(frozen=True)
class LargeScale:
    """Linear power gains: ``edge[k, b]`` user-SBS, ``fronthaul[b]`` CP-SBS."""

    edge: np.ndarray
    fronthaul: np.ndarray


@dataclass(frozen=True)
class ChannelRealization:
    """Channels of one frame.

    ``edge[k, b]`` is h_{k,b} in C^M and ``fronthaul[b]`` is H_b in C^{N x M},
    both linear amplitude gains.
    """

    frame_index: int
    edge: np.ndarray
    fronthaul: np.ndarray

    def aggregate(self, k):
        """Stacked channel h_k from all SBSs to user ``k`` (length B*M)."""
        return self.edge[k].reshape(-1)


def sample_large_scale(scenario, rng, shadowing=True):
    s = scenario
    d_edge = np.linalg.norm(s.user_positions[:, None, :] - s.sbs_positions[None, :, :],
                            axis=-1) / 1e3
    d_fh = np.linalg.norm(s.sbs_positions - s.cp_position[None, :], axis=-1) / 1e3
    pl_edge = path_loss_db(d_edge, s.pathloss_intercept_db, s.pathloss_slope_db)
    pl_fh = path_loss_db(d_fh, s.pathloss_intercept_db, s.pathloss_slope_db)
    x_edge = rng.normal(0.0, s.shadowing_std_db, pl_edge.shape)
    x_fh = rng.normal(0.0, s.shadowing_std_db, pl_fh.shape)
    if not shadowing:
        x_edge = np.zeros_like(x_edge)
        x_fh = np.zeros_like(x_fh)
    return LargeScale(
        edge=10.0 ** ((-pl_edge + s.antenna_gain_dbi + x_edge) / 10.0),
        fronthaul=10.0 ** ((-pl_fh + s.antenna_gain_dbi + x_fh) / 10.0),
    )


def _cn(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def sample_channels(scenario, frame_index, rng, large_scale=None):
    """Draw one frame of channels.

    Each entry is ``sqrt(G_large) * CN(0, 1)``. When ``large_scale`` is None a
    fresh block-level draw is taken from ``rng`` first.
    """
    s = scenario
    if large_scale is None:
        large_scale = sample_large_scale(s, rng)
    K, B, M, N = s.num_users, s.num_sbs, s.sbs_antennas, s.cp_antennas
    edge = np.sqrt(large_scale.edge)[:, :, None] * _cn(rng, (K, B, M))
    fh = np.sqrt(large_scale.fronthaul)[:, None, None] * _cn(rng, (B, N, M))
    return ChannelRealization(frame_index=int(frame_index), edge=edge, fronthaul=fh)


def dump_channel_trace(realizations):
    """CSV rows ``t, link, k_or_cp, b, i, j, re, im``.

    ``link`` is ``edge`` (i = SBS antenna, j = 0) or ``fh`` (k_or_cp = cp,
    i = CP antenna, j = SBS antenna). Floats use repr so replay is exact.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "link", "k_or_cp", "b", "i", "j", "re", "im"])
    for ch in realizations:
        K, B, M = ch.edge.shape
        for k in range(K):
            for b in range(B):
                for m in range(M):
                    z = ch.edge[k, b, m]
                    w.writerow([ch.frame_index, "edge", k, b, m, 0, repr(float(z.real)), repr(float(z.imag))])
        for b in range(ch.fronthaul.shape[0]):
            for n in range(ch.fronthaul.shape[1]):
                for m in range(ch.fronthaul.shape[2]):
                    z = ch.fronthaul[b, n, m]
                    w.writerow([ch.frame_index, "fh", "cp", b, n, m, repr(float(z.real)), repr(float(z.imag))])
    return buf.getvalue()


def load_channel_trace(text, num_users, num_sbs, sbs_antennas, cp_antennas):
    rows = list(csv.DictReader(io.StringIO(text)))
    frames = sorted({int(r["t"]) for r in rows})
    out = {t: (np.zeros((num_users, num_sbs, sbs_antennas), complex),
               np.zeros((num_sbs, cp_antennas, sbs_antennas), complex)) for t in frames}
    for r in rows:
        edge, fh = out[int(r["t"])]
        z = complex(float(r["re"]), float(r["im"]))
        if r["link"] == "edge":
            edge[int(r["k_or_cp"]), int(r["b"]), int(r["i"])] = z
        else:
            fh[int(r["b"]), int(r["i"]), int(r["j"])] = z
    return [ChannelRealization(t, *out[t]) for t in frames]
