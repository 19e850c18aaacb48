"""Static network description, unit conventions and config parsing.

All quantities inside a :class:`Scenario` are linear SI units: watts, Hz,
bit/s, bits and meters. dB/dBm values are only accepted on the config side
and converted once at load time.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Scenario",
    "ConfigError",
    "PlacementError",
    "load_scenario",
    "dump_scenario",
    "sample_topology",
    "preset_config",
    "hexagon_contains",
    "db_to_linear",
]

THERMAL_NOISE_DBM_HZ = -174.0


class ConfigError(ValueError):
    """Malformed config text or a value that fails validation."""

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class PlacementError(RuntimeError):
    """Rejection sampling could not place a node inside the cell."""


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def hexagon_contains(points, edge):
    """Mask of points inside a flat-topped regular hexagon centered at 0."""
    p = np.abs(np.atleast_2d(points))
    x, y = p[:, 0], p[:, 1]
    h = math.sqrt(3.0) / 2.0 * edge
    return (y <= h) & (math.sqrt(3.0) * x + y <= math.sqrt(3.0) * edge)


def _sample_in_cell(n, edge, avoid, radius, rng, max_attempts):
    out = np.empty((n, 2))
    h = math.sqrt(3.0) / 2.0 * edge
    avoid = np.asarray(avoid, dtype=float).reshape(-1, 2)
    placed = 0
    attempts = 0
    while placed < n:
        if attempts >= max_attempts:
            raise PlacementError(
                f"placed {placed}/{n} points after {attempts} draws "
                f"(edge={edge} m, exclusion={radius} m)")
        batch = 64
        cand = np.column_stack([rng.uniform(-edge, edge, batch),
                                rng.uniform(-h, h, batch)])
        attempts += batch
        ok = hexagon_contains(cand, edge)
        if avoid.size:
            d = np.linalg.norm(cand[:, None, :] - avoid[None, :, :], axis=-1)
            ok &= np.all(d >= radius, axis=1)
        good = cand[ok][: n - placed]
        out[placed:placed + len(good)] = good
        placed += len(good)
    return out


def sample_topology(num_sbs, num_users, rng, cell_edge_m=500.0,
                    exclusion_radius_m=30.0, max_attempts=100_000):
    """Drop SBSs and users uniformly in the hexagonal cell.

    The CP sits at the center. SBSs keep ``exclusion_radius_m`` from the CP;
    users keep it from the CP and from every SBS.

    Returns ``(cp_position, sbs_positions, user_positions)``.
    """
    cp = np.zeros(2)
    sbs = _sample_in_cell(num_sbs, cell_edge_m, cp, exclusion_radius_m, rng,
                          max_attempts)
    users = _sample_in_cell(num_users, cell_edge_m, np.vstack([cp, sbs]),
                            exclusion_radius_m, rng, max_attempts)
    return cp, sbs, users


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Scenario:
    num_sbs: int
    num_users: int
    num_contents: int
    cp_antennas: int
    sbs_antennas: int
    cell_edge_m: float
    exclusion_radius_m: float
    cp_position: np.ndarray
    sbs_positions: np.ndarray
    user_positions: np.ndarray
    content_sizes: np.ndarray
    segment_size: float
    cache_capacity: np.ndarray
    fractional_capacity: float
    max_tx_power: np.ndarray
    sinr_target: np.ndarray
    edge_bandwidth: float
    fronthaul_bandwidth: float
    power_slope_sbs: np.ndarray
    power_slope_cp: float
    noise_power_edge: np.ndarray
    noise_power_fh: np.ndarray
    tau0: float
    frames_per_block: int
    pathloss_intercept_db: float
    pathloss_slope_db: float
    shadowing_std_db: float
    antenna_gain_dbi: float
    num_patterns: int
    p_active: float
    skew_min: float
    skew_max: float
    rng_seed: int

    @property
    def edge_rate(self):
        """R_f = B1 log2(1 + gamma_f), bit/s per content."""
        return self.edge_bandwidth * np.log2(1.0 + self.sinr_target)

    @property
    def user_pattern(self):
        """Contiguous, balanced assignment of users to preference patterns."""
        return np.arange(self.num_users) * self.num_patterns // self.num_users

    def replace(self, **changes):
        """Return a copy with ``changes`` applied and derived fields rebuilt.

        Goes through the config path so that e.g. changing the fronthaul
        bandwidth re-derives the fronthaul noise power unless it is pinned.
        """
        cfg = _as_config(self)
        for key in ("noise_power_fh_w", "noise_power_edge_w", "tau0",
                    "cache_capacity_bits"):
            cfg.pop(key, None)
        cfg.update({k: _fmt(v) for k, v in changes.items()})
        return _build(cfg)

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return dump_scenario(self) == dump_scenario(other)


# key -> (kind, default). kind: int, float, floats (per-entity list), or
# "positions". None default means required.
_FIELDS = {
    "num_sbs": ("int", None),
    "num_users": ("int", None),
    "num_contents": ("int", None),
    "cp_antennas": ("int", 8),
    "sbs_antennas": ("int", 4),
    "cell_edge_m": ("float", 500.0),
    "exclusion_radius_m": ("float", 30.0),
    "content_size_bits": ("floats", 1e8),
    "segment_size_bits": ("float", 1e6),
    "fractional_capacity": ("float", 0.2),
    "cache_capacity_bits": ("floats", None),
    "max_tx_power_dbw": ("floats", 0.0),
    "max_tx_power_w": ("floats", None),
    "sinr_target_db": ("floats", 10.0),
    "sinr_target": ("floats", None),
    "edge_bandwidth_hz": ("float", 10e6),
    "fronthaul_bandwidth_hz": ("float", 5e6),
    "power_slope_sbs": ("floats", 2.7),
    "power_slope_cp": ("float", 4.0),
    "noise_density_dbm_hz": ("float", THERMAL_NOISE_DBM_HZ),
    "noise_figure_db": ("float", 0.0),
    "noise_power_edge_w": ("floats", None),
    "noise_power_fh_w": ("floats", None),
    "tau0": ("float", None),
    "frames_per_block": ("int", 30),
    "pathloss_intercept_db": ("float", 148.1),
    "pathloss_slope_db": ("float", 37.6),
    "shadowing_std_db": ("float", 8.0),
    "antenna_gain_dbi": ("float", 10.0),
    "num_patterns": ("int", 3),
    "p_active": ("float", 0.5),
    "skew_min": ("float", 1.0),
    "skew_max": ("float", 3.0),
    "rng_seed": ("int", 0),
    "cp_position": ("positions", None),
    "sbs_positions": ("positions", None),
    "user_positions": ("positions", None),
}

_PRESETS = {
    "desk": {
        "num_sbs": 3, "num_users": 6, "num_contents": 20, "cp_antennas": 4,
        "sbs_antennas": 2, "frames_per_block": 30, "num_patterns": 3,
        "p_active": 0.5,
    },
    # 12 users x 20 frames x p_active = 100 requests per block on average.
    "full": {
        "num_sbs": 5, "num_users": 12, "num_contents": 100, "cp_antennas": 8,
        "sbs_antennas": 4, "frames_per_block": 20, "num_patterns": 3,
        "p_active": 100.0 / 240.0,
    },
}


def preset_config(name="desk", **overrides):
    """Config text for a named preset (``desk`` or ``full``)."""
    try:
        cfg = dict(_PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}") from None
    cfg.update(overrides)
    lines = [f"# preset: {name}"]
    lines += [f"{k} = {_fmt(v)}" for k, v in cfg.items()]
    return "\n".join(lines) + "\n"


def _fmt(value):
    if isinstance(value, (list, tuple, np.ndarray)):
        return ", ".join(_fmt(v) for v in np.ravel(value))
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _parse_text(text):
    parser = configparser.ConfigParser(
        inline_comment_prefixes=("#",), comment_prefixes=("#",),
        delimiters=("=",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[scenario]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    raw = dict(parser["scenario"])
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise ConfigError("unknown key", key=unknown[0])
    return raw


def _convert(key, text):
    kind = _FIELDS[key][0]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as {kind}", key=key) from None
    if kind == "positions":
        if len(vals) % 2:
            raise ConfigError("positions need x,y pairs", key=key)
        return np.array(vals).reshape(-1, 2)
    return np.array(vals)


def _per_entity(key, value, n):
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1:
        return np.full(n, float(arr[0]))
    if arr.size != n:
        raise ConfigError(f"expected 1 or {n} values, got {arr.size}", key=key)
    return arr


def load_scenario(config_text, **overrides):
    """Parse ``key = value`` text into a validated :class:`Scenario`.

    ``overrides`` replace config keys before validation (sweeps use this).
    """
    raw = _parse_text(config_text)
    unknown = sorted(set(overrides) - set(_FIELDS))
    if unknown:
        raise ConfigError("unknown key", key=unknown[0])
    raw.update({k: _fmt(v) for k, v in overrides.items()})
    return _build(raw)


def _build(raw):
    vals = {}
    for key, (kind, default) in _FIELDS.items():
        if key in raw and raw[key].strip() != "":
            vals[key] = _convert(key, raw[key])
        else:
            vals[key] = default
    for key in ("num_sbs", "num_users", "num_contents"):
        if vals[key] is None:
            raise ConfigError("required key missing", key=key)

    B, K, F = vals["num_sbs"], vals["num_users"], vals["num_contents"]
    for key in ("num_sbs", "num_users", "num_contents", "cp_antennas",
                "sbs_antennas", "frames_per_block", "num_patterns"):
        if vals[key] < 1:
            raise ConfigError("must be >= 1", key=key)
    for key in ("edge_bandwidth_hz", "fronthaul_bandwidth_hz", "cell_edge_m",
                "segment_size_bits"):
        if not vals[key] > 0:
            raise ConfigError("must be positive", key=key)
    if vals["exclusion_radius_m"] < 0:
        raise ConfigError("must be nonnegative", key="exclusion_radius_m")
    mu = vals["fractional_capacity"]
    if not 0.0 <= mu <= 1.0:
        raise ConfigError("must lie in [0, 1]", key="fractional_capacity")
    if not 0.0 <= vals["p_active"] <= 1.0:
        raise ConfigError("must lie in [0, 1]", key="p_active")
    if not 0.0 <= vals["skew_min"] <= vals["skew_max"]:
        raise ConfigError("need 0 <= skew_min <= skew_max", key="skew_min")
    if vals["num_patterns"] > K:
        raise ConfigError("more patterns than users", key="num_patterns")

    sizes = _per_entity("content_size_bits", vals["content_size_bits"], F)
    if np.any(sizes <= 0):
        raise ConfigError("must be positive", key="content_size_bits")
    if vals["cache_capacity_bits"] is not None:
        capacity = _per_entity("cache_capacity_bits", vals["cache_capacity_bits"], B)
    else:
        capacity = np.full(B, mu * sizes.sum())
    if np.any(capacity < 0):
        raise ConfigError("must be nonnegative", key="cache_capacity_bits")

    if vals["max_tx_power_w"] is not None:
        p_max = _per_entity("max_tx_power_w", vals["max_tx_power_w"], B)
    else:
        p_max = db_to_linear(_per_entity("max_tx_power_dbw", vals["max_tx_power_dbw"], B))
    if np.any(p_max <= 0):
        raise ConfigError("must be positive", key="max_tx_power_w")
    if vals["sinr_target"] is not None:
        gamma = _per_entity("sinr_target", vals["sinr_target"], F)
    else:
        gamma = db_to_linear(_per_entity("sinr_target_db", vals["sinr_target_db"], F))
    if np.any(gamma <= 0):
        raise ConfigError("must be positive", key="sinr_target")

    b1, b2 = vals["edge_bandwidth_hz"], vals["fronthaul_bandwidth_hz"]
    n0 = db_to_linear(vals["noise_density_dbm_hz"] + vals["noise_figure_db"]) * 1e-3
    if vals["noise_power_edge_w"] is not None:
        sigma2 = _per_entity("noise_power_edge_w", vals["noise_power_edge_w"], K)
    else:
        sigma2 = np.full(K, n0 * b1)
    if vals["noise_power_fh_w"] is not None:
        z2 = _per_entity("noise_power_fh_w", vals["noise_power_fh_w"], B)
    else:
        z2 = np.full(B, n0 * b2)
    if np.any(sigma2 <= 0) or np.any(z2 <= 0):
        raise ConfigError("noise powers must be positive", key="noise_power_edge_w")

    rates = b1 * np.log2(1.0 + gamma)
    tau0 = vals["tau0"]
    if tau0 is None:
        tau0 = 2.0 * rates.max()
    elif tau0 < rates.max():
        warnings.warn(f"tau0={tau0:g} below max edge rate {rates.max():g}; "
                      f"raised to {2.0 * rates.max():g}", stacklevel=3)
        tau0 = 2.0 * rates.max()

    edge = vals["cell_edge_m"]
    radius = vals["exclusion_radius_m"]
    positions = (vals["cp_position"], vals["sbs_positions"], vals["user_positions"])
    if any(p is None for p in positions):
        rng = np.random.default_rng(np.random.SeedSequence([vals["rng_seed"], 0x70B0]))
        cp, sbs, users = sample_topology(B, K, rng, edge, radius)
        cp = positions[0] if positions[0] is not None else cp
        sbs = positions[1] if positions[1] is not None else sbs
        users = positions[2] if positions[2] is not None else users
    else:
        cp, sbs, users = positions
    cp = np.asarray(cp, dtype=float).reshape(-1)
    if cp.shape != (2,):
        raise ConfigError("need exactly one x,y pair", key="cp_position")
    if sbs.shape != (B, 2):
        raise ConfigError(f"need {B} x,y pairs", key="sbs_positions")
    if users.shape != (K, 2):
        raise ConfigError(f"need {K} x,y pairs", key="user_positions")

    return Scenario(
        num_sbs=B, num_users=K, num_contents=F,
        cp_antennas=vals["cp_antennas"], sbs_antennas=vals["sbs_antennas"],
        cell_edge_m=edge, exclusion_radius_m=radius,
        cp_position=_frozen(cp), sbs_positions=_frozen(sbs),
        user_positions=_frozen(users),
        content_sizes=_frozen(sizes), segment_size=vals["segment_size_bits"],
        cache_capacity=_frozen(capacity), fractional_capacity=mu,
        max_tx_power=_frozen(p_max), sinr_target=_frozen(gamma),
        edge_bandwidth=b1, fronthaul_bandwidth=b2,
        power_slope_sbs=_frozen(_per_entity("power_slope_sbs", vals["power_slope_sbs"], B)),
        power_slope_cp=vals["power_slope_cp"],
        noise_power_edge=_frozen(sigma2), noise_power_fh=_frozen(z2),
        tau0=float(tau0), frames_per_block=vals["frames_per_block"],
        pathloss_intercept_db=vals["pathloss_intercept_db"],
        pathloss_slope_db=vals["pathloss_slope_db"],
        shadowing_std_db=vals["shadowing_std_db"],
        antenna_gain_dbi=vals["antenna_gain_dbi"],
        num_patterns=vals["num_patterns"], p_active=vals["p_active"],
        skew_min=vals["skew_min"], skew_max=vals["skew_max"],
        rng_seed=vals["rng_seed"],
    )


def _as_config(s):
    return {
        "num_sbs": _fmt(s.num_sbs),
        "num_users": _fmt(s.num_users),
        "num_contents": _fmt(s.num_contents),
        "cp_antennas": _fmt(s.cp_antennas),
        "sbs_antennas": _fmt(s.sbs_antennas),
        "cell_edge_m": _fmt(s.cell_edge_m),
        "exclusion_radius_m": _fmt(s.exclusion_radius_m),
        "cp_position": _fmt(s.cp_position),
        "sbs_positions": _fmt(s.sbs_positions),
        "user_positions": _fmt(s.user_positions),
        "content_size_bits": _fmt(s.content_sizes),
        "segment_size_bits": _fmt(s.segment_size),
        "cache_capacity_bits": _fmt(s.cache_capacity),
        "fractional_capacity": _fmt(s.fractional_capacity),
        "max_tx_power_w": _fmt(s.max_tx_power),
        "sinr_target": _fmt(s.sinr_target),
        "edge_bandwidth_hz": _fmt(s.edge_bandwidth),
        "fronthaul_bandwidth_hz": _fmt(s.fronthaul_bandwidth),
        "power_slope_sbs": _fmt(s.power_slope_sbs),
        "power_slope_cp": _fmt(s.power_slope_cp),
        "noise_power_edge_w": _fmt(s.noise_power_edge),
        "noise_power_fh_w": _fmt(s.noise_power_fh),
        "tau0": _fmt(s.tau0),
        "frames_per_block": _fmt(s.frames_per_block),
        "pathloss_intercept_db": _fmt(s.pathloss_intercept_db),
        "pathloss_slope_db": _fmt(s.pathloss_slope_db),
        "shadowing_std_db": _fmt(s.shadowing_std_db),
        "antenna_gain_dbi": _fmt(s.antenna_gain_dbi),
        "num_patterns": _fmt(s.num_patterns),
        "p_active": _fmt(s.p_active),
        "skew_min": _fmt(s.skew_min),
        "skew_max": _fmt(s.skew_max),
        "rng_seed": _fmt(s.rng_seed),
    }


def dump_scenario(scenario):
    """Canonical sorted ``key = value`` text; reloads to an equal scenario."""
    cfg = _as_config(scenario)
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def scenario_with(scenario, **fields):
    """Raw field replacement without re-deriving anything (tests, oracles)."""
    return dataclasses.replace(scenario, **fields)
