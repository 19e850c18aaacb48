"""Short-term content delivery: SBS clustering plus edge/fronthaul multicast
beamforming for one frame.

The mixed-integer problem is handled with a Frobenius-norm penalty on the
slack of ``e - e^2 <= e'`` and the convex-concave procedure (CCP): every
difference-of-convex constraint is linearized at the current iterate and the
resulting conic program is solved, while the penalty weight grows
geometrically. The clustering is then thresholded and the beamformers are
re-optimized for the fixed clustering.

Internally channels are normalized by the noise standard deviation
(``g_k = h_k / sigma_k``, ``G_b = H_b / z_b``) and rates by the fronthaul
bandwidth, which keeps every conic program well scaled.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .conic import ConicProblem, complex_rows, solve

__all__ = [
    "DeliveryParams",
    "TransmissionPolicy",
    "DeliveryInfeasible",
    "FrameData",
    "sinr",
    "sinr_all",
    "min_required_fh_rate",
    "buffering_time",
    "build_ccp_subproblem",
    "solve_short_term",
    "solve_short_term_unicast",
    "solve_fixed_clustering",
    "check_policy",
    "dump_policy",
]

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


class DeliveryInfeasible(RuntimeError):
    """No feasible transmission policy was found for the frame."""

    def __init__(self, constraint, message=""):
        super().__init__(f"infeasible ({constraint}) {message}".strip())
        self.constraint = constraint


@dataclass
class DeliveryParams:
    lambda0: float = 1.0
    lambda_growth: float = 3.0
    lambda_max: float = 50.0
    eps: float = 0.01
    stop_tol: float = 1e-3
    max_iter: int = 30
    polish_tol: float = 1e-8
    polish_max_iter: int = 80
    phase1_max_iter: int = 40
    sinr_margin: float = 1e-6
    exp_mode: str = "native"
    seed: int = 0
    e_init: np.ndarray | None = None  # overrides the random E^(0)
    init_scale: float | None = None  # randomized beamformer start (demo)
    objective_scale: float | None = None  # watts per objective unit; None: probe power
    local_search: bool = True  # single-flip clustering refinement after polishing
    local_search_passes: int = 10
    local_search_first: bool = False  # take the first improving flip instead of the best
    search_tol: float = 1e-5  # CCP tolerance while screening candidate flips


@dataclass
class TransmissionPolicy:
    frame: int
    contents: tuple
    clustering: np.ndarray  # (G, B) in {0, 1}
    edge_beams: np.ndarray  # (G, B, M) complex
    fronthaul_beams: np.ndarray  # (G, N) multicast or (G, B, N) unicast
    fronthaul_rates: np.ndarray  # bit/s, (G,) or (G, B)
    edge_power: float
    fronthaul_power: float
    unicast: bool = False
    iterations: int = 0
    converged: bool = True
    objective_history: list = field(default_factory=list)  # (lambda, value)
    reference_power: float = 1.0
    nonbinary_residual: bool = False
    repairs: int = 0
    e_relaxed: np.ndarray | None = None
    e_history: list = field(default_factory=list)
    flips: int = 0  # clustering entries changed by the local search
    groups: tuple = ()  # users of each multicast group

    @property
    def power(self):
        return self.edge_power + self.fronthaul_power

    @property
    def empty(self):
        return len(self.contents) == 0


class FrameData:
    """Normalized per-frame problem data shared by every solve of a frame."""

    def __init__(self, scenario, L, channels, batch, unicast=False):
        s = scenario
        self.scenario = s
        self.batch = batch
        self.unicast = unicast
        self.contents = tuple(batch.contents)
        self.groups = tuple(batch.groups)
        self.G = len(self.contents)
        self.B, self.M, self.N = s.num_sbs, s.sbs_antennas, s.cp_antennas
        fs = np.array(self.contents, dtype=int)
        L = np.asarray(L, dtype=float)
        self.L = L
        self.gamma = s.sinr_target[fs] if self.G else np.zeros(0)
        self.edge_rate = s.edge_rate[fs] if self.G else np.zeros(0)
        self.b2 = s.fronthaul_bandwidth
        # (1 - l_{f,b}) R_f / B2: normalized rate floor coefficient per (g, b).
        self.floor_coef = ((1.0 - L[fs]) * self.edge_rate[:, None] / self.b2
                           if self.G else np.zeros((0, self.B)))
        self.tau = s.tau0 / self.b2
        self.pmax = np.asarray(s.max_tx_power, float)
        self.delta = np.asarray(s.power_slope_sbs, float)
        self.beta = float(s.power_slope_cp)
        users = [k for grp in self.groups for k in grp]
        self.user_group = {k: g for g, grp in enumerate(self.groups) for k in grp}
        self.users = users
        self.g_edge = {k: channels.aggregate(k) / math.sqrt(s.noise_power_edge[k])
                       for k in users}
        self.g_fh = channels.fronthaul / np.sqrt(s.noise_power_fh)[:, None, None]
        self.raw_channels = channels
        self.fh_cache = {}

    @property
    def w_shape(self):
        return (self.G, self.B, self.N) if self.unicast else (self.G, self.N)

    def rate_floor(self, E):
        """Normalized cache-aware rate floor: per group, or per (group, SBS) for unicast."""
        r = self.floor_coef * E
        return r if self.unicast else r.max(axis=1, initial=0.0)

    def fh_snr(self, W):
        """``||G_b^H w||^2`` for every (g, b)."""
        if self.unicast:
            return np.einsum("bnm,gbn->gbm", self.g_fh.conj(), W).__abs__().__pow__(2).sum(-1)
        return np.abs(np.einsum("bnm,gn->gbm", self.g_fh.conj(), W)) ** 2 @ np.ones(self.M)

    def power_parts(self, V, W):
        edge = float(np.sum(self.delta[None, :] * np.sum(np.abs(V) ** 2, axis=2)))
        fh = self.beta * float(np.sum(np.abs(W) ** 2))
        return edge, fh


# --- closed-form QoS quantities ---------------------------------------------

def sinr(k, g, V, channels, noise_power, groups=None):
    """SINR of user ``k`` decoding group ``g`` under aggregate beams ``V``.

    ``V`` has shape (G, B, M) (or (G, B*M)); ``channels`` is a
    :class:`~cscn.channel.ChannelRealization` or the aggregate h_k directly.
    """
    h = channels.aggregate(k) if hasattr(channels, "aggregate") else np.asarray(channels)
    V = np.asarray(V).reshape(len(V), -1)
    amp = np.abs(V.conj() @ h) ** 2  # |h^H v_g|^2 for all g
    interference = amp.sum() - amp[g]
    return float(amp[g] / (interference + noise_power))


def sinr_all(fd, V):
    """Achieved SINR per active user as ``{k: value}``."""
    Vf = V.reshape(fd.G, -1)
    out = {}
    for k in fd.users:
        amp = np.abs(Vf.conj() @ fd.g_edge[k]) ** 2
        g = fd.user_group[k]
        out[k] = float(amp[g] / (amp.sum() - amp[g] + 1.0))
    return out


def min_required_fh_rate(L, E, edge_rates):
    """``max_b (1 - l_{f,b}) e_{f,b} R_f`` per requested content.

    ``L`` and ``E`` are (G, B) rows of the requested contents.
    """
    L, E = np.asarray(L, float), np.asarray(E, float)
    return ((1.0 - L) * E * np.asarray(edge_rates, float)[:, None]).max(axis=1, initial=0.0)


def buffering_time(l_worst, fh_rate, edge_rate, segment_size):
    """Per-segment buffering delay ``[(1-l) s0 / R_FH - s0 / R_f]^+`` in seconds."""
    need = (1.0 - l_worst) * segment_size
    if need <= 0.0:
        return 0.0
    return max(need / fh_rate - segment_size / edge_rate, 0.0)


# --- conic program assembly -------------------------------------------------

class _Layout:
    def __init__(self, prob, fd, relaxed):
        G, B, M, N = fd.G, fd.B, fd.M, fd.N
        self.fd = fd
        self.v = prob.add_variable("v", 2 * G * B * M)
        self.w = prob.add_variable("w", 2 * int(np.prod(fd.w_shape)))
        if relaxed:
            self.e = prob.add_variable("e", G * B, lb=0.0, ub=1.0)
            self.ep = prob.add_variable("e_slack", G * B, lb=0.0)
            nr = G * B if fd.unicast else G
            self.rho = prob.add_variable("rate", nr, lb=0.0)
            self.s = prob.add_variable("frob", 1, lb=0.0)

    def v_group(self, g):
        n = 2 * self.fd.B * self.fd.M
        return self.v[g * n:(g + 1) * n]

    def v_cell(self, g, b):
        M = self.fd.M
        start = 2 * (g * self.fd.B + b) * M
        return self.v[start:start + 2 * M]

    def w_stream(self, g, b=None):
        N = self.fd.N
        i = g * self.fd.B + b if self.fd.unicast else g
        return self.w[2 * i * N:2 * (i + 1) * N]

    def rho_index(self, g, b):
        return self.rho[g * self.fd.B + b] if self.fd.unicast else self.rho[g]


def _unpack(x, idx, shape):
    z = x[idx]
    return (z[0::2] + 1j * z[1::2]).reshape(shape)


def _power_objective(prob, lay, fd, scale):
    for g in range(fd.G):
        for b in range(fd.B):
            prob.add_sum_squares(lay.v_cell(g, b), fd.delta[b] / scale)
    prob.add_sum_squares(lay.w, fd.beta / scale)


def _power_constraints(prob, lay, fd):
    for b in range(fd.B):
        cols = np.concatenate([lay.v_cell(g, b) for g in range(fd.G)])
        mat = np.vstack([np.zeros((1, cols.size)), np.eye(cols.size)])
        const = np.zeros(cols.size + 1)
        const[0] = math.sqrt(fd.pmax[b])
        prob.add_soc(cols, mat, const, tag="power")


def _sinr_constraints(prob, lay, fd, V_lin, gamma_scale=1.0, slack=None):
    """Linearized ``gamma * (interference + 1) <= 2Re(a0* h^H v) - |a0|^2``.

    ``slack`` maps user -> slack column, turning the constraint into
    ``... <= ... + t_k``.
    """
    G, B, M = fd.G, fd.B, fd.M
    n = 2 * B * M
    cols = lay.v
    for k in fd.users:
        g = fd.user_group[k]
        gamma = fd.gamma[g] * gamma_scale
        rows = complex_rows(fd.g_edge[k].conj())  # [Re; Im] of h^H v
        a0 = complex(fd.g_edge[k].conj() @ V_lin[g].reshape(-1))
        U = np.zeros((2 * (G - 1), G * n))
        r = 0
        for gp in range(G):
            if gp == g:
                continue
            U[r:r + 2, gp * n:(gp + 1) * n] = math.sqrt(gamma) * rows
            r += 2
        a = np.zeros(G * n)
        a[g * n:(g + 1) * n] = 2.0 * (a0.real * rows[0] + a0.imag * rows[1])
        a_const = -abs(a0) ** 2 - gamma
        c = cols
        if slack is not None:
            c = np.concatenate([cols, [slack[k]]])
            U = np.hstack([U, np.zeros((U.shape[0], 1))])
            a = np.concatenate([a, [1.0]])
        prob.add_rotated_quad(c, U, np.zeros(U.shape[0]), a, a_const, tag="sinr")


def _fh_linear_rows(fd, w_lin, b):
    """Real row ``r`` and constant ``c`` with ``r_hat_2(w) = r @ w + c``."""
    Gb = fd.g_fh[b]
    d = Gb @ (Gb.conj().T @ w_lin)
    row = 2.0 * complex_rows(d.conj())[0]
    return row, -float(np.linalg.norm(Gb.conj().T @ w_lin) ** 2)


def build_ccp_subproblem(fd, V_lin, W_lin, E_lin, lam, scale=1.0):
    """Convex CCP subproblem around ``(V_lin, W_lin, E_lin)`` with penalty ``lam``.

    Objective: ``P_t / scale + lam * ||E'||_F``.
    """
    G, B = fd.G, fd.B
    prob = ConicProblem()
    lay = _Layout(prob, fd, relaxed=True)
    _power_objective(prob, lay, fd, scale)
    prob.add_linear_objective(lay.s, [lam])
    prob.add_soc(np.concatenate([lay.s, lay.ep]), np.eye(1 + G * B),
                 np.zeros(1 + G * B), tag="frobenius")
    _power_constraints(prob, lay, fd)
    E_lin = np.asarray(E_lin, float)
    for g in range(G):
        for b in range(B):
            # ||v_{g,b}|| <= e_{g,b} sqrt(P_b)
            vc = lay.v_cell(g, b)
            cols = np.concatenate([[lay.e[g * B + b]], vc])
            mat = np.zeros((1 + vc.size, cols.size))
            mat[0, 0] = math.sqrt(fd.pmax[b])
            mat[1:, 1:] = np.eye(vc.size)
            prob.add_soc(cols, mat, np.zeros(1 + vc.size), tag="cluster")
            # (e^(i))^2 - (2 e^(i) - 1) e <= e'
            ei = E_lin[g, b]
            prob.add_ge([lay.ep[g * B + b], lay.e[g * B + b]],
                        [[1.0, 2.0 * ei - 1.0]], [-ei * ei], tag="binary_push")
            # rate floor rho >= (1 - l) R_f e / B2
            rho = lay.rho_index(g, b)
            if fd.floor_coef[g, b] > 0:
                prob.add_ge([rho, lay.e[g * B + b]], [[1.0, -fd.floor_coef[g, b]]],
                            [0.0], tag="rate_floor")
            # 2^(rho + tau (e - 1)) <= 1 + r_hat_2(w)
            w_lin = W_lin[g, b] if fd.unicast else W_lin[g]
            wc = lay.w_stream(g, b)
            row, c0 = _fh_linear_rows(fd, w_lin, b)
            cols = np.concatenate([[rho, lay.e[g * B + b]], wc])
            ax = np.concatenate([[LN2, LN2 * fd.tau], np.zeros(wc.size)])
            az = np.concatenate([[0.0, 0.0], row])
            prob.add_exp(cols, ax, -LN2 * fd.tau, az, 1.0 + c0, tag="fronthaul")
        # nonempty cluster cut
        prob.add_ge(lay.e[g * B:(g + 1) * B], np.ones((1, B)), [-1.0], tag="cluster_cut")
    _sinr_constraints(prob, lay, fd, V_lin)
    return prob, lay


# --- fixed-clustering restriction -------------------------------------------
#
# With E fixed the problem separates into an edge part (V) and one
# fronthaul part per content (w_f). Single-user groups have an exact SOC
# form of their SINR constraint (rotate v_f so that h^H v_f is real);
# multi-user groups keep the CCP linearization.

def _principal_direction(Gb):
    u, _, _ = np.linalg.svd(Gb)
    return u[:, 0]


def _restore_fronthaul(fd, W, E):
    """Scale fronthaul beams so every selected SBS meets the rate floor."""
    floor = fd.rate_floor(E)
    snr_need = np.expm1(LN2 * floor)
    W = np.array(W, dtype=complex)
    have = fd.fh_snr(W)
    for g in range(fd.G):
        if fd.unicast:
            for b in range(fd.B):
                if snr_need[g, b] <= 0:
                    W[g, b] = 0
                    continue
                if have[g, b] <= 0:
                    W[g, b] = _principal_direction(fd.g_fh[b])
                    have[g, b] = fd.fh_snr(W)[g, b]
                W[g, b] *= math.sqrt(snr_need[g, b] / have[g, b])
        else:
            sel = np.flatnonzero(E[g] > 0)
            if snr_need[g] <= 0:
                W[g] = 0
                continue
            if np.any(have[g, sel] <= 0):
                W[g] = sum(_principal_direction(fd.g_fh[b]) for b in sel)
                have = fd.fh_snr(W)
            W[g] *= math.sqrt(max(snr_need[g] / have[g, b] for b in sel))
    return W


def _sinr_ok(fd, V, margin=0.0):
    got = sinr_all(fd, V)
    return all(got[k] >= fd.gamma[fd.user_group[k]] * (1.0 - margin) for k in fd.users)


def _edge_problem(fd, E, V_lin, phase1, scale, gamma_scale):
    """Edge part of the fixed-E restriction around ``V_lin``.

    ``phase1`` swaps the power objective for the sum of SINR slacks.
    """
    G, B, M = fd.G, fd.B, fd.M
    n = 2 * B * M
    prob = ConicProblem()
    v = prob.add_variable("v", 2 * G * B * M)
    for g in range(G):
        for b in range(B):
            cell = v[g * n + 2 * b * M: g * n + 2 * (b + 1) * M]
            if not E[g, b]:
                for i in cell:
                    prob.lower[i] = prob.upper[i] = 0.0
            elif not phase1:
                prob.add_sum_squares(cell, fd.delta[b] / scale)
    if phase1:
        t = prob.add_variable("t", len(fd.users), lb=0.0)
        prob.add_linear_objective(t, np.ones(t.size))
    for b in range(B):
        cols = np.concatenate([v[g * n + 2 * b * M: g * n + 2 * (b + 1) * M] for g in range(G)])
        mat = np.vstack([np.zeros((1, cols.size)), np.eye(cols.size)])
        const = np.zeros(cols.size + 1)
        const[0] = math.sqrt(fd.pmax[b])
        prob.add_soc(cols, mat, const, tag="power")
    for i, k in enumerate(fd.users):
        g = fd.user_group[k]
        gamma = fd.gamma[g] * gamma_scale
        rows = complex_rows(fd.g_edge[k].conj())
        others = [gp for gp in range(G) if gp != g]
        cols = np.concatenate([v, [t[i]]]) if phase1 else v
        width = cols.size
        if len(fd.groups[g]) == 1:
            # Im(h^H v_g) = 0 and Re(h^H v_g)/sqrt(gamma) >= ||(h^H v_g', 1)||
            prob.add_eq(v[g * n:(g + 1) * n], rows[1:2], [0.0], tag="phase")
            mat = np.zeros((1 + 2 * len(others) + 1, width))
            mat[0, g * n:(g + 1) * n] = rows[0] / math.sqrt(gamma)
            if phase1:
                mat[0, -1] = 1.0
            for j, gp in enumerate(others):
                mat[1 + 2 * j:3 + 2 * j, gp * n:(gp + 1) * n] = rows
            const = np.zeros(mat.shape[0])
            const[-1] = 1.0
            prob.add_soc(cols, mat, const, tag="sinr")
            continue
        a0 = complex(fd.g_edge[k].conj() @ V_lin[g].reshape(-1))
        U = np.zeros((2 * len(others), width))
        for j, gp in enumerate(others):
            U[2 * j:2 * j + 2, gp * n:(gp + 1) * n] = math.sqrt(gamma) * rows
        a = np.zeros(width)
        a[g * n:(g + 1) * n] = 2.0 * (a0.real * rows[0] + a0.imag * rows[1])
        if phase1:
            a[-1] = 1.0
        prob.add_rotated_quad(cols, U, np.zeros(U.shape[0]), a, -abs(a0) ** 2 - gamma,
                              tag="sinr")
    return prob


def _group_slack(fd, t):
    viol = np.zeros(fd.G)
    for k, tk in zip(fd.users, t):
        g = fd.user_group[k]
        viol[g] = max(viol[g], tk)
    return viol


def _phase1(fd, E, V, params, max_iter=None):
    """Drive SINR slacks to zero with CCP; returns (V, ok, slack_by_group)."""
    gs = 1.0 + 10 * params.sinr_margin
    prev = math.inf
    stall = 0
    viol = np.full(fd.G, math.inf)
    for _ in range(max_iter or params.phase1_max_iter):
        prob = _edge_problem(fd, E, V, True, 1.0, gs)
        sol = solve(prob, exp_mode=params.exp_mode)
        if sol.status not in ("Optimal", "NumericalTrouble") or not np.all(np.isfinite(sol.x)):
            break
        V = _unpack(sol.x, prob.variables["v"], (fd.G, fd.B, fd.M)) * E[:, :, None]
        t = sol.value(prob, "t")
        viol = _group_slack(fd, t)
        if _sinr_ok(fd, V, params.sinr_margin):
            return V, True, viol
        total = float(t.sum())
        if total > prev * (1 - 1e-4):
            stall += 1
            if stall >= 3:
                break
        else:
            stall = 0
        prev = min(prev, total)
    return V, False, viol


def _rescaled(fd, V, margin):
    """``V`` scaled up uniformly until every SINR holds, or None if the power
    budget or the interference level rules that out."""
    c2 = 0.0
    for k in fd.users:
        g = fd.user_group[k]
        gains = np.abs(V.reshape(fd.G, -1) @ fd.g_edge[k].conj()) ** 2
        need = fd.gamma[g] * (1.0 + 2 * margin)
        sig, intf = gains[g], gains.sum() - gains[g]
        if sig <= need * intf:
            return None
        c2 = max(c2, need / (sig - need * intf))
    per_sbs = np.sum(np.abs(V) ** 2, axis=(0, 2))
    if np.any(c2 * per_sbs > fd.pmax):
        return None
    return V * math.sqrt(c2)


def _edge_fixed(fd, E, V0, params, scale, tol, need_slack=True):
    """Minimum edge power for fixed ``E``; raises DeliveryInfeasible("sinr")."""
    E = np.asarray(E, dtype=int)
    V = np.asarray(V0, complex) * E[:, :, None]
    exact = all(len(grp) == 1 for grp in fd.groups)
    if not exact and not _sinr_ok(fd, V, params.sinr_margin):
        Vs = _rescaled(fd, V, params.sinr_margin)
        if Vs is not None and _sinr_ok(fd, Vs, params.sinr_margin):
            V, ok = Vs, True
        else:
            # screening calls give up early; they only need a yes/no
            V, ok, viol = _phase1(fd, E, V, params, None if need_slack else 3)
        if not ok:
            exc = DeliveryInfeasible("sinr", "fixed clustering")
            exc.slack = viol
            raise exc
    # normalize by the starting edge power: the edge program does not see the
    # fronthaul, and a frame-wide scale can make solver gaps loose here
    e0 = fd.power_parts(V, np.zeros(0))[0]
    scale = e0 if e0 > 0 else (scale or 1.0)
    obj = math.inf if exact else fd.power_parts(V, np.zeros(0))[0] / scale
    it = 0
    for it in range(1, params.polish_max_iter + 1):
        prob = _edge_problem(fd, E, V, False, scale, 1.0)
        sol = solve(prob, exp_mode=params.exp_mode)
        if sol.status == "Infeasible" and exact:
            viol = _phase1(fd, E, V, params)[2] if need_slack else np.ones(fd.G)
            exc = DeliveryInfeasible("sinr", "fixed clustering")
            exc.slack = viol
            raise exc
        if not np.all(np.isfinite(sol.x)) or sol.status == "Infeasible":
            break
        V_new = _unpack(sol.x, prob.variables["v"], (fd.G, fd.B, fd.M)) * E[:, :, None]
        if not _sinr_ok(fd, V_new, params.sinr_margin):
            if exact:
                exc = DeliveryInfeasible("sinr", f"solver status {sol.status}")
                exc.slack = np.ones(fd.G)
                raise exc
            break
        new = fd.power_parts(V_new, np.zeros(0))[0] / scale
        if exact:
            V = V_new
            break
        if new > obj + 1e-9:
            break
        V = V_new
        done = obj - new <= tol * max(obj, 1e-12)
        obj = new
        if done:
            break
    return V, it


def _min_norm_halfspaces(A, c):
    """argmin ||x|| s.t. A x >= c, by enumerating active sets (few rows)."""
    m = A.shape[0]
    best, best_val = None, math.inf
    for mask in range(1, 1 << m):
        S = [i for i in range(m) if mask >> i & 1]
        As = A[S]
        try:
            mu = np.linalg.solve(As @ As.T, c[S])
        except np.linalg.LinAlgError:
            continue
        if np.any(mu < -1e-12):
            continue
        x = As.T @ mu
        if np.all(A @ x >= c - 1e-9 * (1.0 + np.abs(c))):
            val = float(x @ x)
            if val < best_val:
                best, best_val = x, val
    return best


def _multicast_ccp(fd, sel, snr, w0, tol, max_iter):
    """min ||w||^2 s.t. ||G_b^H w||^2 >= snr for b in ``sel`` (CCP from ``w0``).

    Each convexified step is a min-norm point over a few halfspaces, solved by
    active-set enumeration.
    """
    w = np.array(w0, dtype=complex)
    have = min(np.linalg.norm(fd.g_fh[b].conj().T @ w) ** 2 for b in sel)
    if have <= 0:
        w = sum(_principal_direction(fd.g_fh[b]) for b in sel)
        have = min(np.linalg.norm(fd.g_fh[b].conj().T @ w) ** 2 for b in sel)
    w *= math.sqrt(snr / have)
    obj = float(np.vdot(w, w).real)
    for _ in range(max_iter):
        rows = [_fh_linear_rows(fd, w, b) for b in sel]
        A = np.array([r for r, _ in rows])
        c = np.array([snr - c0 for _, c0 in rows])
        x = _min_norm_halfspaces(A, c)
        if x is None:
            break
        w_new = _unpack(x, np.arange(2 * fd.N), (fd.N,))
        have = min(np.linalg.norm(fd.g_fh[b].conj().T @ w_new) ** 2 for b in sel)
        w_new *= math.sqrt(max(snr / have, 1.0))
        new = float(np.vdot(w_new, w_new).real)
        if new > obj:
            break
        done = obj - new <= tol * obj
        w, obj = w_new, new
        if done:
            break
    return w


def _fronthaul_fixed(fd, E, W0, params, tol):
    """Minimum-power fronthaul beams meeting the rate floor for fixed ``E``.

    Closed form for unicast streams, single-SBS clusters and single-antenna
    CPs; CCP otherwise. Results are cached per (content, cluster).
    """
    floor = fd.rate_floor(E)
    snr = np.expm1(LN2 * floor)
    W = np.zeros(fd.w_shape, complex)
    for g in range(fd.G):
        if fd.unicast:
            for b in range(fd.B):
                if snr[g, b] > 0:
                    Gb = fd.g_fh[b]
                    W[g, b] = _principal_direction(Gb) * math.sqrt(
                        snr[g, b] / np.linalg.norm(Gb, 2) ** 2)
            continue
        if snr[g] <= 0:
            continue
        sel = tuple(int(b) for b in np.flatnonzero(E[g]))
        key = (g, sel)
        cached = fd.fh_cache.get(key)
        if cached is not None and cached[0] <= tol:
            W[g] = cached[1]
            continue
        if len(sel) == 1:
            Gb = fd.g_fh[sel[0]]
            w = _principal_direction(Gb) * math.sqrt(snr[g] / np.linalg.norm(Gb, 2) ** 2)
            tol_used = 0.0
        elif fd.N == 1:
            gain = min(abs(fd.g_fh[b][0, :]) @ abs(fd.g_fh[b][0, :]) for b in sel)
            w = np.array([math.sqrt(snr[g] / gain)], complex)
            tol_used = 0.0
        else:
            w0 = cached[1] if cached is not None else W0[g]
            w = _multicast_ccp(fd, sel, snr[g], w0, tol, params.polish_max_iter)
            tol_used = tol
        fd.fh_cache[key] = (tol_used, w)
        W[g] = w
    return W


def solve_fixed_clustering(fd, E, V0, W0, params, scale=None, tol=None, need_slack=True):
    """Minimize power for binary ``E`` from ``(V0, W0)``.

    Returns ``(V, W, iterations)`` or raises :class:`DeliveryInfeasible` with
    ``constraint="sinr"`` and the per-group slack attached as ``.slack``.
    """
    tol = params.polish_tol if tol is None else tol
    E = np.asarray(E, dtype=int)
    V, it = _edge_fixed(fd, E, V0, params, scale, tol, need_slack)
    W = _fronthaul_fixed(fd, E, W0, params, tol)
    return V, W, it


def _initial_edge_beams(fd, E, rng=None, scale=None):
    """Matched-filter start (or random if ``rng`` is given), scaled to a quarter of
    each SBS's power budget."""
    V = np.zeros((fd.G, fd.B, fd.M), complex)
    for g, grp in enumerate(fd.groups):
        if rng is not None:
            V[g] = (rng.standard_normal((fd.B, fd.M)) + 1j * rng.standard_normal((fd.B, fd.M)))
        else:
            for k in grp:
                h = fd.g_edge[k].reshape(fd.B, fd.M)
                V[g] += h / max(np.linalg.norm(h), 1e-300)
    V *= E[:, :, None]
    per_sbs = np.sum(np.abs(V) ** 2, axis=(0, 2))
    frac = 0.25 if scale is None else scale
    with np.errstate(divide="ignore"):
        factors = np.where(per_sbs > 0, frac * fd.pmax / per_sbs, np.inf)
    V *= math.sqrt(min(factors.min(), 1e300))
    return V


# --- penalty CCP ---------------------------------------------------------------

def _empty_policy(batch, fd, unicast):
    return TransmissionPolicy(
        frame=batch.frame, contents=(), clustering=np.zeros((0, fd.B), int),
        edge_beams=np.zeros((0, fd.B, fd.M), complex),
        fronthaul_beams=np.zeros((0,) + fd.w_shape[1:], complex),
        fronthaul_rates=np.zeros((0,) + ((fd.B,) if unicast else ())),
        edge_power=0.0, fronthaul_power=0.0, unicast=unicast)


def _feasibility_probe(fd, params, rng=None):
    """Feasible (V, W) with every SBS in every cluster."""
    ones = np.ones((fd.G, fd.B), int)
    V = _initial_edge_beams(fd, ones, rng, params.init_scale)
    W0 = np.zeros(fd.w_shape, complex)
    if rng is not None:
        W0 = rng.standard_normal(fd.w_shape) + 1j * rng.standard_normal(fd.w_shape)
    W = _restore_fronthaul(fd, W0, ones)
    if not _sinr_ok(fd, V, params.sinr_margin):
        V, ok, _ = _phase1(fd, ones, V, params)
        if not ok:
            raise DeliveryInfeasible("sinr", "no feasible beamformers with full cooperation")
    return V, W


def _quantize(E, eps):
    return (np.asarray(E) >= eps).astype(int)


def _penalty_ccp(scenario, L, channels, batch, params, unicast):
    params = params or DeliveryParams()
    fd = FrameData(scenario, L, channels, batch, unicast=unicast)
    if fd.G == 0:
        return _empty_policy(batch, fd, unicast)
    rng = np.random.default_rng(np.random.SeedSequence([params.seed, batch.frame, 0xA1]))
    if params.e_init is not None:
        E_lin = np.array(params.e_init, float).reshape(fd.G, fd.B)
    else:
        E_lin = rng.uniform(0.0, 1.0, (fd.G, fd.B))
    beam_rng = None
    if params.init_scale is not None:
        beam_rng = np.random.default_rng(np.random.SeedSequence([params.seed, batch.frame, 0xB2]))
    V0, W0 = _feasibility_probe(fd, params, beam_rng)
    scale = params.objective_scale or max(sum(fd.power_parts(V0, W0)), 1e-12)
    V, W = V0, W0
    lam = params.lambda0
    history = []
    e_hist = [E_lin]
    converged = False
    it = 0
    for it in range(1, params.max_iter + 1):
        prob, lay = build_ccp_subproblem(fd, V, W, E_lin, lam, scale)
        sol = solve(prob, exp_mode=params.exp_mode)
        if sol.status == "NumericalTrouble" and params.exp_mode == "native":
            retry = solve(prob, exp_mode="cuts")
            if retry.max_violation <= 1e-6 and (sol.max_violation > 1e-6
                                                or retry.objective < sol.objective):
                sol = retry
        if sol.status == "Infeasible" or not np.all(np.isfinite(sol.x)):
            log.warning("frame %d: CCP step %d failed (%s)", batch.frame, it, sol.status)
            it -= 1
            break
        if history:
            # the previous iterate is feasible here; an inexact step that scores
            # worse than it is dropped so the fixed-lambda sequence cannot rise
            here = (sum(fd.power_parts(V, W)) / scale
                    + lam * float(np.linalg.norm(E_lin - E_lin ** 2)))
            if sol.max_violation > 1e-6 or sol.objective > here:
                log.info("frame %d: inexact CCP step %d kept the previous iterate",
                         batch.frame, it)
                history.append((lam, here))
                e_hist.append(E_lin)
                if history[-2][0] == lam == params.lambda_max:
                    prev = history[-2][1]
                    if abs(prev - here) <= params.stop_tol * max(abs(prev), 1e-12):
                        converged = True
                        break
                lam = min(params.lambda_max, params.lambda_growth * lam)
                continue
        V = _unpack(sol.x, lay.v, (fd.G, fd.B, fd.M))
        W = _unpack(sol.x, lay.w, fd.w_shape)
        E_lin = np.clip(sol.value(prob, "e").reshape(fd.G, fd.B), 0.0, 1.0)
        history.append((lam, float(sol.objective)))
        e_hist.append(E_lin)
        if len(history) >= 2 and history[-2][0] == lam == params.lambda_max:
            prev = history[-2][1]
            if abs(prev - history[-1][1]) <= params.stop_tol * max(abs(prev), 1e-12):
                converged = True
                break
        lam = min(params.lambda_max, params.lambda_growth * lam)

    if not history:
        E_lin = np.ones((fd.G, fd.B))
        V, W = V0, W0
    nonbinary = bool(np.any((E_lin > params.eps) & (E_lin < 1.0 - params.eps)))
    if nonbinary:
        log.info("frame %d: non-binary clustering residual after %d iterations",
                 batch.frame, it)
    E = _quantize(E_lin, params.eps)
    repairs = 0
    while True:
        try:
            Vp, Wp, _ = solve_fixed_clustering(fd, E, V, W, params, scale)
            break
        except DeliveryInfeasible as exc:
            if E.all():
                # full cooperation is known feasible from the probe point
                Vp, Wp, _ = solve_fixed_clustering(fd, E, V0, W0, params, scale)
                break
            E = _repair(E, E_lin, getattr(exc, "slack", None))
            repairs += 1
    flips = 0
    if params.local_search:
        E, Vp, Wp, flips = _local_search(fd, E, Vp, Wp, params, scale, E_lin)
    edge, fh = fd.power_parts(Vp, Wp)
    rates = fd.rate_floor(E) * fd.b2
    return TransmissionPolicy(
        frame=batch.frame, contents=fd.contents, clustering=E, edge_beams=Vp,
        fronthaul_beams=Wp, fronthaul_rates=rates, edge_power=edge,
        fronthaul_power=fh, unicast=unicast, iterations=len(history),
        converged=converged, objective_history=history, reference_power=scale,
        nonbinary_residual=nonbinary, repairs=repairs, e_relaxed=E_lin,
        e_history=e_hist, flips=flips, groups=fd.groups)


def _local_search(fd, E, V, W, params, scale, E_relaxed=None):
    """Descent over single clustering flips.

    Removals are tried first, weakest relaxed entry first, then additions,
    strongest first. With ``local_search_first`` the first improving flip is
    taken, otherwise the best one in the pass. Candidates are screened with a
    loose CCP tolerance; the accepted clustering is re-polished at
    ``polish_tol``. Clusters never become empty.
    """
    edge, fh = fd.power_parts(V, W)
    power = edge + fh
    exact = all(len(grp) == 1 for grp in fd.groups)
    pri = np.zeros(E.shape) if E_relaxed is None else np.asarray(E_relaxed, float)
    flips = 0
    for _ in range(params.local_search_passes):
        order = sorted(((E[g, b] == 0, -pri[g, b] if E[g, b] == 0 else pri[g, b], g, b)
                        for g in range(fd.G) for b in range(fd.B)))
        best = None
        for _, _, g, b in order:
            if E[g, b] and E[g].sum() == 1:
                continue
            cand = E.copy()
            cand[g, b] ^= 1
            # fronthaul is cheap and independent of the edge beams: screen with
            # it first, adding the current edge power when the edge optimum is
            # exact and the flip shrinks the support
            Wc = _fronthaul_fixed(fd, cand, W, params, params.search_tol)
            fh_c = fd.power_parts(np.zeros_like(V), Wc)[1]
            edge_lb = edge if exact and not cand[g, b] else 0.0
            if edge_lb + fh_c >= power * (1 - 1e-6):
                continue
            try:
                Vc, _ = _edge_fixed(fd, cand, V, params, scale, params.search_tol,
                                    need_slack=False)
            except DeliveryInfeasible:
                continue
            ec = fd.power_parts(Vc, np.zeros(0))[0]
            pc = ec + fh_c
            if pc < power * (1 - 1e-6) and (best is None or pc < best[0]):
                best = (pc, cand, Vc, Wc, ec, fh_c)
                if params.local_search_first:
                    break
        if best is None:
            break
        power, E, V, W, edge, fh = best
        flips += 1
    if flips:
        V, W, _ = solve_fixed_clustering(fd, E, V, W, params, scale)
    return E, V, W, flips


def _repair(E, E_relaxed, slack):
    """Switch on the largest sub-threshold entry, preferring violated groups."""
    E = E.copy()
    cand = np.where(E == 0, E_relaxed, -np.inf)
    if slack is not None and np.any(slack > 0):
        bad = slack > 0
        if np.any(np.isfinite(cand[bad])):
            cand = np.where(bad[:, None], cand, -np.inf)
    g, b = np.unravel_index(np.argmax(cand), cand.shape)
    E[g, b] = 1
    return E


def solve_short_term(scenario, L, channels, batch, params=None):
    """Penalty-CCP clustering and multicast beamforming for one frame."""
    return _penalty_ccp(scenario, L, channels, batch, params, unicast=False)


def solve_short_term_unicast(scenario, L, channels, batch, params=None):
    """Same as :func:`solve_short_term` with one fronthaul stream per (content, SBS)."""
    return _penalty_ccp(scenario, L, channels, batch, params, unicast=True)


# --- verification -------------------------------------------------------------

def check_policy(scenario, L, channels, batch, policy):
    """Violations of the original constraints, keyed by constraint name.

    Values are relative and 0 means satisfied. ``fh_floor`` is the
    cache-aware rate floor; ``cluster`` measures beam energy outside the
    selected SBSs.
    """
    if policy.empty:
        return {"power": 0.0, "cluster": 0.0, "sinr": 0.0, "fh_capacity": 0.0,
                "fh_floor": 0.0, "nonempty": 0.0}
    fd = FrameData(scenario, L, channels, batch, unicast=policy.unicast)
    E, V, W = policy.clustering, policy.edge_beams, policy.fronthaul_beams
    out = {}
    per_sbs = np.sum(np.abs(V) ** 2, axis=(0, 2))
    out["power"] = float(np.max(np.maximum(per_sbs - fd.pmax, 0) / fd.pmax))
    out["cluster"] = float(np.max(np.linalg.norm(V, axis=2) * (1 - E), initial=0.0))
    got = sinr_all(fd, V)
    out["sinr"] = max(max(0.0, 1.0 - got[k] / fd.gamma[fd.user_group[k]]) for k in fd.users)
    snr = fd.fh_snr(W)
    cap = fd.b2 * np.log2(1.0 + snr)
    floor = fd.rate_floor(E) * fd.b2
    rates = policy.fronthaul_rates
    cap_v, floor_v = 0.0, 0.0
    for g in range(fd.G):
        for b in range(fd.B):
            if not E[g, b]:
                continue
            r = rates[g, b] if fd.unicast else rates[g]
            cap_v = max(cap_v, (r - cap[g, b]) / max(fd.edge_rate[g], 1.0))
        fl = floor[g] if not fd.unicast else floor[g]
        rr = rates[g]
        floor_v = max(floor_v, float(np.max((fl - rr) / max(fd.edge_rate[g], 1.0))))
    out["fh_capacity"] = max(cap_v, 0.0)
    out["fh_floor"] = max(floor_v, 0.0)
    out["nonempty"] = float(np.any(E.sum(axis=1) < 1))
    return out


def dump_policy(policy, achieved_sinr=None):
    """CSV rows ``f, b, e, v_power, w_power, fh_rate, sinr`` (SINR as k:value list)."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["frame", "f", "b", "e", "v_power", "w_power", "fh_rate", "sinr"])
    for g, f in enumerate(policy.contents):
        for b in range(policy.clustering.shape[1]):
            if policy.unicast:
                wp = float(np.sum(np.abs(policy.fronthaul_beams[g, b]) ** 2))
                rate = float(policy.fronthaul_rates[g, b])
            else:
                wp = float(np.sum(np.abs(policy.fronthaul_beams[g]) ** 2))
                rate = float(policy.fronthaul_rates[g])
            s = ""
            if achieved_sinr is not None:
                s = ";".join(f"{k}:{v!r}" for k, v in sorted(achieved_sinr.get(g, {}).items()))
            wr.writerow([policy.frame, f, b, int(policy.clustering[g, b]),
                         repr(float(np.sum(np.abs(policy.edge_beams[g, b]) ** 2))),
                         repr(wp), repr(rate), s])
    return buf.getvalue()
