"""Command-line harness: single simulations, parameter sweeps and the
delivery-solver convergence demo, with CSV and SVG output."""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import csv
import io
import logging
import math
import os
import sys
import warnings
from dataclasses import dataclass, field

import numpy as np

from .cacheplan import uc_allocation
from .delivery import DeliveryInfeasible, DeliveryParams, FrameData, _feasibility_probe
from .scenario import ConfigError, load_scenario, preset_config
from .simkit import (POLICIES, FrameSolver, dump_metrics, make_trace, oracle_short_term,
                     simulate)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_PARTIAL = 0, 1, 2, 3
THREADS_ENV = "CSCN_THREADS"
DEFAULT_POLICIES = ("UC", "PCUD", "GAC", "TS-FUC")

# swept name -> (config key, converter, validity check, description)
SWEEP_PARAMS = {
    "fronthaul_bandwidth": ("fronthaul_bandwidth_hz", float, lambda v: v > 0, "> 0 Hz"),
    "num_patterns": ("num_patterns", int, lambda v: v >= 1, ">= 1"),
    "mu": ("fractional_capacity", float, lambda v: 0.0 <= v <= 1.0, "in [0, 1]"),
}


@dataclass
class SweepSpec:
    param: str
    values: list
    policies: list = field(default_factory=lambda: list(DEFAULT_POLICIES))
    seeds: list = field(default_factory=lambda: list(range(5)))
    out_dir: str = "out"

    def validate(self):
        if self.param not in SWEEP_PARAMS:
            raise ConfigError(f"unknown sweep parameter {self.param!r}")
        if not self.values or not self.policies or not self.seeds:
            raise ConfigError("sweep lists must not be empty")
        _, conv, ok, desc = SWEEP_PARAMS[self.param]
        vals = []
        for v in self.values:
            try:
                cv = conv(v)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value {v!r} for {self.param}") from None
            if conv is int and float(v) != cv:
                raise ConfigError(f"{self.param} must be an integer, got {v!r}")
            if not ok(cv):
                raise ConfigError(f"{self.param} must be {desc}, got {v!r}")
            vals.append(cv)
        self.values = vals
        bad = [p for p in self.policies if p not in POLICIES]
        if bad:
            raise ConfigError(f"unknown policy {bad[0]!r}; choose from {', '.join(POLICIES)}")
        return self


# --- small helpers ----------------------------------------------------------

def _threads():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(n, 1)


def _write_atomic(path, text):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x):
    return repr(float(x))


# --- SVG line chart -----------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def _ticks(lo, hi, n=5):
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return []
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def svg_line_chart(series, title="", xlabel="", ylabel="", width=640, height=400):
    """Self-contained SVG; ``series`` maps a name to a list of (x, y) points.

    Every point carries ``data-x``/``data-y`` attributes with the exact values,
    so the plotted numbers can be read back from the file.
    """
    ml, mr, mt, mb = 70, 150, 40, 50
    pts = [(x, y) for s in series.values() for x, y in s if math.isfinite(y)]
    xs = [p[0] for p in pts] or [0.0, 1.0]
    ys = [p[1] for p in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        pad = abs(y0) * 0.05 or 1.0
        y0, y1 = y0 - pad, y1 + pad
    pw, ph = width - ml - mr, height - mt - mb

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">'
           f'{_esc(title)}</text>',
           f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{px(t):.2f}" y1="{mt + ph}" x2="{px(t):.2f}" '
                   f'y2="{mt + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{px(t):.2f}" y="{mt + ph + 18}" text-anchor="middle">'
                   f'{t:.4g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{ml - 5}" y1="{py(t):.2f}" x2="{ml}" y2="{py(t):.2f}" '
                   f'stroke="black"/>')
        out.append(f'<text x="{ml - 8}" y="{py(t) + 4:.2f}" text-anchor="end">{t:.4g}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">'
               f'{_esc(xlabel)}</text>')
    out.append(f'<text x="15" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 15 {mt + ph / 2:.1f})">{_esc(ylabel)}</text>')
    for i, (name, pts_s) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        good = [(x, y) for x, y in pts_s if math.isfinite(y)]
        if good:
            path = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in good)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" '
                       f'points="{path}" data-series="{_esc(name)}"/>')
        for x, y in good:
            out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{color}" '
                       f'data-series="{_esc(name)}" data-x="{_fmt(x)}" data-y="{_fmt(y)}"/>')
        ly = mt + 10 + 18 * i
        out.append(f'<line x1="{ml + pw + 15}" y1="{ly}" x2="{ml + pw + 40}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 45}" y="{ly + 4}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(text):
    return (str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;"))


def svg_points(svg_text):
    """Read ``{series: [(x, y), ...]}`` back from a chart written above."""
    import re
    out = {}
    for m in re.finditer(r'<circle [^>]*data-series="([^"]*)" data-x="([^"]*)" '
                         r'data-y="([^"]*)"', svg_text):
        out.setdefault(m.group(1), []).append((float(m.group(2)), float(m.group(3))))
    return out


# --- sweeps -----------------------------------------------------------------

def summary_rows(metrics):
    """Mean over seeds of each seed's mean block power, per (value, policy)."""
    acc = {}
    for m in metrics:
        acc.setdefault((m.sweep_param, float(m.sweep_value), m.policy), []).append(m)
    rows = []
    for (param, value, policy), ms in sorted(acc.items()):
        p = [x.mean_power for x in ms if x.status == "ok" and math.isfinite(x.mean_power)]
        mean = float(np.mean(p)) if p else math.nan
        rows.append([param, _fmt(value), policy, len(p), _fmt(mean),
                     _fmt(min(p) if p else math.nan), _fmt(max(p) if p else math.nan)])
    return rows


SUMMARY_HEADER = ["sweep_param", "sweep_value", "policy", "seeds", "mean_power_w",
                  "min_power_w", "max_power_w"]


def chart_from_summary(text, title=""):
    """SVG regenerated from summary CSV text."""
    series = {}
    xlabel = ""
    for r in csv.DictReader(io.StringIO(text)):
        xlabel = r["sweep_param"]
        series.setdefault(r["policy"], []).append((float(r["sweep_value"]),
                                                   float(r["mean_power_w"])))
    for pts in series.values():
        pts.sort()
    return svg_line_chart(series, title or f"mean block power vs {xlabel}", xlabel,
                          "mean power per frame [W]")


def _failed_metrics(policies, seed, param, value):
    from .simkit import BlockMetrics
    return [BlockMetrics(p, seed, 1, 0, 0, math.nan, math.nan, math.nan, math.nan, math.nan,
                         0, param, value, "failed") for p in policies]


def _run_seed(base_text, spec_param, values, policies, seed, out_dir, params_kw):
    """All sweep points of one seed (one unit of parallel work).

    Along ``mu`` the per-frame solver cache is shared: the delivery problem
    does not depend on the storage budget.
    """
    key = SWEEP_PARAMS[spec_param][0]
    results = []
    shared = None
    for value in values:
        try:
            scen = load_scenario(base_text, **{key: value})
            if spec_param == "mu":
                if shared is None:
                    shared = FrameSolver(scen, DeliveryParams(seed=seed, **params_kw))
                solver = shared
            else:
                solver = FrameSolver(scen, DeliveryParams(seed=seed, **params_kw))
            metrics, _ = simulate(scen, tuple(policies), seed=seed, solver=solver)
            rows = []
            for p in policies:
                m = metrics[p]
                m.sweep_param, m.sweep_value = spec_param, float(value)
                rows.append(m)
        except (DeliveryInfeasible, RuntimeError, np.linalg.LinAlgError) as exc:
            log.error("sweep point %s=%s seed %d failed: %s", spec_param, value, seed, exc)
            rows = _failed_metrics(policies, seed, spec_param, float(value))
        if out_dir:
            name = os.path.join(out_dir, f"point_{spec_param}_{value}_seed{seed}.csv")
            _write_atomic(name, dump_metrics(rows))
        results.extend(rows)
    return results


def run_sweep(spec, base_text=None, params_kw=None):
    """Simulate every (value, seed); write metrics.csv, summary.csv and sweep.svg.

    Returns ``(metrics, summary_csv_text)``; failed points carry
    ``status="failed"``.
    """
    spec.validate()
    base_text = base_text or preset_config("desk")
    load_scenario(base_text)  # validate before spending time
    params_kw = params_kw or {}
    out_dir = spec.out_dir
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    jobs = [(base_text, spec.param, list(spec.values), list(spec.policies), s, out_dir,
             params_kw) for s in spec.seeds]
    workers = min(_threads(), len(jobs))
    metrics = []
    if workers > 1:
        with cf.ProcessPoolExecutor(workers) as pool:
            for part in pool.map(_run_seed_star, jobs):
                metrics.extend(part)
    else:
        for job in jobs:
            metrics.extend(_run_seed(*job))
    order = {p: i for i, p in enumerate(spec.policies)}
    metrics.sort(key=lambda m: (float(m.sweep_value), order[m.policy], m.seed))
    summary = _csv_text(SUMMARY_HEADER, summary_rows(metrics))
    if out_dir:
        _write_atomic(os.path.join(out_dir, "metrics.csv"), dump_metrics(metrics))
        _write_atomic(os.path.join(out_dir, "summary.csv"), summary)
        _write_atomic(os.path.join(out_dir, "sweep.svg"), chart_from_summary(summary))
    return metrics, summary


def _run_seed_star(job):
    return _run_seed(*job)


# --- convergence demo -------------------------------------------------------

def _demo_frame(scenario, seed, L):
    """Feasible frame of the seed's history block with the most multicast groups."""
    trace = make_trace(scenario, seed, 0)
    recs = sorted((r for r in trace.frames if not r.batch.empty),
                  key=lambda r: (-len(r.batch.contents), r.batch.frame))
    for rec in recs:
        fd = FrameData(scenario, L, rec.channels, rec.batch)
        try:
            V0, W0 = _feasibility_probe(fd, DeliveryParams())
        except DeliveryInfeasible:
            continue
        return rec, fd, V0, W0
    raise RuntimeError("no feasible frame in the demo block")


def run_convergence_demo(scenario, n_trials, seed=0, init_scale=0.25):
    """Penalty CCP from ``n_trials`` random beam initializations and one shared E0.

    Objectives are reported in watts (normalized objective times the shared
    reference power). Returns ``(csv_text, svg_text, finals)`` where
    ``finals`` holds each trial's polished power.
    """
    header = ["trial", "iteration", "lambda", "objective_w", "final_power_w"]
    if n_trials <= 0:
        warnings.warn("no convergence trials requested", RuntimeWarning)
        return _csv_text(header, []), svg_line_chart({}, "penalty CCP convergence"), []
    from .delivery import solve_short_term
    L = uc_allocation(scenario).L
    rec, fd, V0, W0 = _demo_frame(scenario, seed, L)
    ref = max(sum(fd.power_parts(V0, W0)), 1e-12)
    e0 = np.random.default_rng(np.random.SeedSequence([seed, 0xE0])).uniform(
        0.0, 1.0, (fd.G, fd.B))
    rows, series, finals = [], {}, []
    for trial in range(n_trials):
        params = DeliveryParams(seed=seed * 1000 + trial + 1, e_init=e0,
                                init_scale=init_scale, objective_scale=ref)
        pol = solve_short_term(scenario, L, rec.channels, rec.batch, params)
        finals.append(pol.power)
        pts = []
        for i, (lam, obj) in enumerate(pol.objective_history, start=1):
            rows.append([trial, i, _fmt(lam), _fmt(obj * ref), _fmt(pol.power)])
            pts.append((float(i), obj * ref))
        series[f"trial {trial + 1}"] = pts
    svg = svg_line_chart(series, "penalty CCP convergence", "iteration",
                         "penalized objective [W]")
    return _csv_text(header, rows), svg, finals


# --- oracle cross-check -----------------------------------------------------

def oracle_check(scenario, seed, L, frames, params, max_frames=10):
    """Gap of the delivery solver to the exact oracle on eligible frames (CSV rows)."""
    from .delivery import solve_short_term
    from .simkit import _exact_eligible
    rows = []
    for rec in frames:
        if len(rows) >= max_frames or rec.batch.empty:
            continue
        fd = FrameData(scenario, L, rec.channels, rec.batch)
        if not _exact_eligible(fd) or 2 ** (fd.G * fd.B) > 4096:
            continue
        try:
            orc = oracle_short_term(scenario, L, rec.channels, rec.batch, seed=seed)
            pol = solve_short_term(scenario, L, rec.channels, rec.batch, params)
        except DeliveryInfeasible:
            continue
        gap = (pol.power - orc.objective) / max(orc.objective, 1e-300)
        rows.append([rec.batch.frame, orc.certificate, _fmt(orc.objective), _fmt(pol.power),
                     _fmt(gap)])
    return rows


# --- entry point ------------------------------------------------------------

def _base_text(args):
    if getattr(args, "config", None):
        with open(args.config) as fh:
            return fh.read()
    return preset_config("full" if args.paper_scale else "desk")


def _parse_list(text, conv=str):
    return [conv(t.strip()) for t in text.split(",") if t.strip()]


def build_parser():
    ap = argparse.ArgumentParser(prog="cscn", description=__doc__)
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--paper-scale", action="store_true",
                    help="use the large preset instead of the desk preset")
    ap.add_argument("--oracle", action="store_true",
                    help="cross-check the delivery solver against the oracle on eligible frames")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="two-block simulation for one seed")
    sp.add_argument("--config", help="scenario config file (key = value lines)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--policy", action="append",
                    help=f"policy name, repeatable or comma separated ({', '.join(POLICIES)})")

    sw = sub.add_parser("sweep", help="sweep one scenario parameter")
    sw.add_argument("--param", required=True, choices=sorted(SWEEP_PARAMS))
    sw.add_argument("--values", required=True, help="comma separated values")
    sw.add_argument("--config")
    sw.add_argument("--policies", default=",".join(DEFAULT_POLICIES))
    sw.add_argument("--seeds", default="0,1,2,3,4")

    cv = sub.add_parser("convergence", help="delivery solver from random initializations")
    cv.add_argument("--trials", type=int, default=5)
    cv.add_argument("--config")
    cv.add_argument("--seed", type=int, default=0)
    return ap


def _policies(arg):
    if not arg:
        return list(DEFAULT_POLICIES)
    out = []
    for a in arg:
        out.extend(_parse_list(a))
    if not out:
        raise ConfigError("empty policy list")
    bad = [p for p in out if p not in POLICIES]
    if bad:
        raise ConfigError(f"unknown policy {bad[0]!r}; choose from {', '.join(POLICIES)}")
    return out


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DeliveryInfeasible, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


def _dispatch(args):
    _threads()
    os.makedirs(args.out, exist_ok=True)
    if args.command == "simulate":
        text = _base_text(args)
        scen = load_scenario(text)
        policies = _policies(args.policy)
        params = DeliveryParams(seed=args.seed)
        solver = FrameSolver(scen, params)
        metrics, allocs = simulate(scen, tuple(policies), seed=args.seed, solver=solver)
        rows = [metrics[p] for p in policies]
        _write_atomic(os.path.join(args.out, f"simulate_seed{args.seed}.csv"),
                      dump_metrics(rows))
        for m in rows:
            print(f"{m.policy:8s} mean power {m.mean_power:.6g} W over {m.counted_frames} "
                  f"frames ({m.infeasible_frames} infeasible)")
        if args.oracle:
            orows = oracle_check(scen, args.seed, uc_allocation(scen).L,
                                 make_trace(scen, args.seed, 1).frames, params)
            _write_atomic(os.path.join(args.out, f"oracle_seed{args.seed}.csv"),
                          _csv_text(["frame", "certificate", "oracle_w", "solver_w",
                                     "rel_gap"], orows))
            print(f"oracle cross-check on {len(orows)} eligible frames")
        return EXIT_OK
    if args.command == "sweep":
        spec = SweepSpec(args.param, _parse_list(args.values), _parse_list(args.policies),
                         _parse_list(args.seeds, int), args.out)
        metrics, summary = run_sweep(spec, _base_text(args))
        sys.stdout.write(summary)
        return EXIT_PARTIAL if any(m.status != "ok" for m in metrics) else EXIT_OK
    # convergence
    scen = load_scenario(_base_text(args))
    text, svg, finals = run_convergence_demo(scen, args.trials, seed=args.seed)
    _write_atomic(os.path.join(args.out, "convergence.csv"), text)
    _write_atomic(os.path.join(args.out, "convergence.svg"), svg)
    for i, p in enumerate(finals, 1):
        print(f"trial {i}: final power {p:.6g} W")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
