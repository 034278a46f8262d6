"""Command-line front end: path sampling, average-density curves, the
reflected conservative flow, and self-check suites.

Subcommands
-----------
``sample PROCESS``
    Write an ensemble of paths as CSV (one row per sample, one column per
    grid point) plus a JSON sidecar with the full parameter set.
``density TARGET``
    Estimate the density of the time average on a grid of target values;
    CSV columns are ``c, density, std_error``.
``spde``
    Integrate one trajectory of the conservative flow (linear or penalized)
    and write snapshot rows ``time, field...`` plus a stats JSON whose
    ``avg_drift_max`` records the worst conservation drift.
``check SUITE``
    Run a self-check suite (``abco`` = conditioning-kit constraints,
    ``operators`` = kernel/flow identities, ``invariance`` = stationarity
    under the linear flow) and exit nonzero on failure.

Conventions
-----------
* Reproducible by construction: outputs depend only on parameters and the
  seed (``--seed`` > config file > ``EXLAB_SEED`` environment variable > 0);
  a rerun with the same inputs writes byte-identical files.  Sidecars carry
  no timestamps for the same reason.
* CSV: 17 significant digits, ``.`` decimal separator, ``\\n`` line endings.
* ``--config FILE`` reads flat ``key = value`` lines (keys are the long
  option names, dashes or underscores); unknown keys are rejected and
  explicit command-line flags override file values.
* ``--plot`` additionally writes a standalone SVG (hand-rolled, no plotting
  dependencies) with the plotted numbers embedded in a comment block.
* ``--threads`` (density) fans the Monte Carlo chunks across a thread pool;
  estimates are identical for every thread count.
* Exit codes: 0 success, 1 check-suite failure, 2 usage error, 3 numerical
  failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

import exlab
from exlab import conditioning as cond
from exlab import operators as ops
from exlab import spde as flow
from exlab.path_core import (
    RandomSource,
    TimeGrid,
    bessel3_bridge_batch,
    brownian_bridge_batch,
    brownian_motion_batch,
    meander_batch,
)

CONSERVATION_TOL = 1e-8


class UsageError(Exception):
    """Bad arguments or config input (exit code 2)."""


# ---------------------------------------------------------------------------
# option tables (single source for argparse, config files, and defaults)
# ---------------------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


@dataclass(frozen=True)
class _Opt:
    parse: type | object
    default: object
    help: str
    flag: bool = False  # presence-only option (store_true)


def _common(out_default_note: str) -> dict:
    return {
        "seed": _Opt(int, None, "random seed (else EXLAB_SEED, else 0)"),
        "out": _Opt(str, None, f"output base name (default {out_default_note})"),
        "plot": _Opt(_parse_bool, False, "also write a standalone SVG plot", flag=True),
    }


_SAMPLE_OPTS = {
    "n": _Opt(int, 100, "number of sample paths"),
    "grid_points": _Opt(int, None,
                        "grid points on [0,1] (default 1025; Vc needs 3k+1, default 1537)"),
    "c": _Opt(float, None, "target time average (required for Vc / Uc / mu_c)"),
    "a": _Opt(float, None, "bridge start value (bridge only, default 0)"),
    "b": _Opt(float, None, "bridge end value (bridge only, default 0)"),
    **_common("exlab_sample_<process>"),
}

_DENSITY_OPTS = {
    "c_min": _Opt(float, 0.0, "smallest target average"),
    "c_max": _Opt(float, 3.0, "largest target average"),
    "c_step": _Opt(float, 0.05, "spacing of the target grid"),
    "n": _Opt(int, 100_000, "Monte Carlo sample count (shared across targets)"),
    "grid_points": _Opt(int, None,
                        "proposal grid points (default 1537 excursion / 1025 meander)"),
    "threads": _Opt(int, 1, "worker threads for the Monte Carlo chunks"),
    **_common("exlab_density_<target>"),
}

_SPDE_OPTS = {
    "mode": _Opt(str, "linear", "flow type: linear | penalized"),
    "eps": _Opt(float, None, "penalty strength (penalized mode only)"),
    "alpha": _Opt(float, 0.05, "penalty offset (constraint level is -alpha)"),
    "c": _Opt(float, 0.6, "conserved average"),
    "dt": _Opt(float, flow.DEFAULT_DT, "time step"),
    "t_end": _Opt(float, flow.DEFAULT_T_END, "final time"),
    "snapshots": _Opt(int, 9, "number of evenly spaced snapshots (including 0 and t_end)"),
    "grid_points": _Opt(int, flow.DEFAULT_GRID_POINTS, "grid points on [0,1]"),
    **_common("exlab_spde"),
}

_CHECK_OPTS = {
    "n": _Opt(int, 400, "trajectories (invariance suite only)"),
    "seed": _Opt(int, None, "random seed (else EXLAB_SEED, else 0)"),
}

_OPTION_TABLES = {
    "sample": _SAMPLE_OPTS,
    "density": _DENSITY_OPTS,
    "spde": _SPDE_OPTS,
    "check": _CHECK_OPTS,
}

_SAMPLE_PROCESSES = ("bm", "bridge", "meander", "excursion", "Vc", "Uc", "mu_c")
_NEEDS_C = ("Vc", "Uc", "mu_c")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exlab",
        description="Path-conditioning and conservative-flow toolkit.",
    )
    parser.add_argument("--version", action="version", version=exlab.__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add_options(p: argparse.ArgumentParser, table: dict) -> None:
        p.add_argument("--config", default=None, metavar="FILE",
                       help="flat key = value config file (flags override it)")
        for dest, opt in table.items():
            name = "--" + dest.replace("_", "-")
            if opt.flag:
                p.add_argument(name, dest=dest, action="store_true", default=None,
                               help=opt.help)
            else:
                p.add_argument(name, dest=dest, type=opt.parse, default=None,
                               help=opt.help, metavar=dest.upper())

    p_sample = sub.add_parser("sample", help="write an ensemble of sample paths")
    p_sample.add_argument("process", choices=_SAMPLE_PROCESSES)
    add_options(p_sample, _SAMPLE_OPTS)

    p_density = sub.add_parser("density", help="density of the time average on a c-grid")
    p_density.add_argument("target", choices=("excursion", "meander"))
    add_options(p_density, _DENSITY_OPTS)

    p_spde = sub.add_parser("spde", help="integrate one trajectory of the conservative flow")
    add_options(p_spde, _SPDE_OPTS)

    p_check = sub.add_parser("check", help="run a self-check suite")
    p_check.add_argument("suite", choices=("abco", "operators", "invariance"))
    add_options(p_check, _CHECK_OPTS)

    return parser


# ---------------------------------------------------------------------------
# config file merging and seed resolution
# ---------------------------------------------------------------------------

def _read_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    data: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        data[key.strip().replace("-", "_")] = value.strip()
    return data


def _merge_options(args: argparse.Namespace, table: dict) -> dict:
    merged = {dest: opt.default for dest, opt in table.items()}
    cfg_path = getattr(args, "config", None)
    if cfg_path is not None:
        for key, raw in _read_config(cfg_path).items():
            if key not in table:
                known = ", ".join(sorted(table))
                raise UsageError(
                    f"unknown config key {key!r} for this command (known: {known})"
                )
            try:
                merged[key] = table[key].parse(raw)
            except ValueError as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
    for dest in table:
        given = getattr(args, dest)
        if given is not None:
            merged[dest] = given
    return merged


def _resolve_seed(merged: dict) -> int:
    if merged.get("seed") is not None:
        return int(merged["seed"])
    env = os.environ.get("EXLAB_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(
                f"EXLAB_SEED must be an integer, got {env!r}"
            ) from None
    return 0


# ---------------------------------------------------------------------------
# writers (CSV / JSON / SVG)
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _write_csv(path: str, rows, header: list | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header is not None:
            fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in np.asarray(row).ravel()) + "\n")


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


_PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd",
    "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
)


def _svg_plot(
    path: str,
    x: np.ndarray,
    series: list,
    labels: list,
    title: str,
    x_label: str,
    y_label: str,
    data_note: str,
) -> None:
    """Standalone SVG line plot; the plotted numbers ride along in a comment."""
    width, height = 960, 560
    ml, mr, mt, mb = 72, 24, 44, 52
    x = np.asarray(x, dtype=float)
    ys = [np.asarray(s, dtype=float) for s in series]
    x_lo, x_hi = float(x.min()), float(x.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    y_lo = min(float(s.min()) for s in ys)
    y_hi = max(float(s.max()) for s in ys)
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 1.0, y_hi + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(v: float) -> float:
        return ml + (v - x_lo) / (x_hi - x_lo) * (width - ml - mr)

    def sy(v: float) -> float:
        return height - mb - (v - y_lo) / (y_hi - y_lo) * (height - mt - mb)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        "<style>text{font-family:DejaVu Sans,Helvetica,sans-serif;font-size:13px;"
        "fill:#333}.t{font-size:16px}</style>",
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text class="t" x="{width / 2:.0f}" y="26" text-anchor="middle">{title}</text>',
    ]
    # frame and ticks
    parts.append(
        f'<rect x="{ml}" y="{mt}" width="{width - ml - mr}" '
        f'height="{height - mt - mb}" fill="none" stroke="#888"/>'
    )
    for i in range(6):
        xv = x_lo + i * (x_hi - x_lo) / 5
        yv = y_lo + i * (y_hi - y_lo) / 5
        parts.append(
            f'<line x1="{sx(xv):.1f}" y1="{height - mb}" x2="{sx(xv):.1f}" '
            f'y2="{height - mb + 5}" stroke="#888"/>'
            f'<text x="{sx(xv):.1f}" y="{height - mb + 19}" '
            f'text-anchor="middle">{xv:.4g}</text>'
        )
        parts.append(
            f'<line x1="{ml - 5}" y1="{sy(yv):.1f}" x2="{ml}" y2="{sy(yv):.1f}" '
            f'stroke="#888"/>'
            f'<text x="{ml - 8}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.4g}</text>'
        )
    parts.append(
        f'<text x="{(ml + width - mr) / 2:.0f}" y="{height - 10}" '
        f'text-anchor="middle">{x_label}</text>'
    )
    parts.append(
        f'<text x="18" y="{(mt + height - mb) / 2:.0f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {(mt + height - mb) / 2:.0f})">{y_label}</text>'
    )
    for k, s in enumerate(ys):
        color = _PALETTE[k % len(_PALETTE)]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, s))
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        if k < len(labels) and labels[k]:
            ty = mt + 18 + 16 * k
            parts.append(
                f'<line x1="{width - mr - 150}" y1="{ty - 4}" x2="{width - mr - 120}" '
                f'y2="{ty - 4}" stroke="{color}" stroke-width="2"/>'
                f'<text x="{width - mr - 112}" y="{ty}">{labels[k]}</text>'
            )
    # '--' is invalid inside XML comments; the CSV file stays the canonical copy
    parts.append("<!-- data\n" + data_note.replace("--", "- -") + "\n-->")
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(parts) + "\n")


def _matrix_note(x: np.ndarray, rows: list, names: list) -> str:
    lines = ["x," + ",".join(names)]
    for j, xv in enumerate(np.asarray(x)):
        lines.append(",".join([_fmt(xv)] + [_fmt(r[j]) for r in rows]))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _grid_payload(grid: TimeGrid) -> dict:
    return {
        "t_start": grid.t_start,
        "t_end": grid.t_end,
        "n_points": grid.n_points,
    }


def cmd_sample(merged: dict) -> int:
    process = merged["process"]
    n = merged["n"]
    if n < 1:
        raise UsageError("--n must be at least 1")
    c = merged["c"]
    if process in _NEEDS_C and c is None:
        raise UsageError(f"process {process!r} requires --c")
    if process not in _NEEDS_C and c is not None:
        raise UsageError(f"--c does not apply to process {process!r}")
    if process != "bridge" and (merged["a"] is not None or merged["b"] is not None):
        raise UsageError("--a/--b only apply to the bridge process")
    g = merged["grid_points"]
    if g is None:
        g = 1537 if process == "Vc" else 1025
    grid = TimeGrid.unit(g)
    seed = _resolve_seed(merged)
    rs = RandomSource(seed)
    params: dict = {}

    if process == "bm":
        rows = brownian_motion_batch(grid, rs, n)
    elif process == "bridge":
        a = merged["a"] if merged["a"] is not None else 0.0
        b = merged["b"] if merged["b"] is not None else 0.0
        params.update(a=a, b=b)
        rows = brownian_bridge_batch(grid, a, b, rs, n)
    elif process == "meander":
        rows = meander_batch(grid, rs, n)
    elif process == "excursion":
        rows = bessel3_bridge_batch(grid, 0.0, 0.0, rs, n)
    elif process == "Vc":
        params.update(c=c)
        rows = cond.excursion_weighted_ensemble(c, n, rs, g).paths
    elif process == "Uc":
        params.update(c=c)
        rows = cond.meander_weighted_ensemble(c, n, rs, g).paths
    else:  # mu_c
        params.update(c=c)
        rows = ops.pinned_average_measure(grid, c).sample_batch(rs, n)

    out = merged["out"] or f"exlab_sample_{process}"
    _write_csv(out + ".csv", rows)
    _write_json(out + ".json", {
        "command": "sample",
        "process": process,
        "n": n,
        "grid": _grid_payload(grid),
        "params": params,
        "seed": seed,
        "version": exlab.__version__,
        "csv_layout": "one row per sample, one column per grid point",
    })
    print(f"wrote {out}.csv ({n} rows x {grid.n_points} columns)")
    print(f"wrote {out}.json")
    if merged["plot"]:
        shown = min(n, 12)
        series = [rows[i] for i in range(shown)]
        _svg_plot(
            out + ".svg", grid.points, series, [""] * shown,
            f"sample {process} (first {shown} of {n})", "t", "value",
            _matrix_note(grid.points, series, [f"path{i}" for i in range(shown)]),
        )
        print(f"wrote {out}.svg")
    return 0


def cmd_density(merged: dict) -> int:
    target = merged["target"]
    c_min, c_max, c_step = merged["c_min"], merged["c_max"], merged["c_step"]
    if c_min < 0:
        raise UsageError("--c-min must be nonnegative")
    if c_step <= 0:
        raise UsageError("--c-step must be positive")
    if c_max < c_min:
        raise UsageError("--c-max must not be below --c-min")
    n = merged["n"]
    if n < 2:
        raise UsageError("--n must be at least 2")
    threads = merged["threads"]
    if threads < 1:
        raise UsageError("--threads must be at least 1")
    g = merged["grid_points"]
    if g is None:
        g = 1537 if target == "excursion" else 1025
    count = int(math.floor((c_max - c_min) / c_step + 1e-9)) + 1
    cs = [c_min + i * c_step for i in range(count)]
    seed = _resolve_seed(merged)
    rs = RandomSource(seed)
    curve_fn = (
        cond.density_curve_excursion if target == "excursion"
        else cond.density_curve_meander
    )
    estimates = curve_fn(cs, n, rs, grid_points=g, threads=threads)

    out = merged["out"] or f"exlab_density_{target}"
    table = [(e.c, e.value, e.std_error) for e in estimates]
    _write_csv(out + ".csv", table, header=["c", "density", "std_error"])
    _write_json(out + ".json", {
        "command": "density",
        "target": target,
        "c_min": c_min,
        "c_max": c_max,
        "c_step": c_step,
        "n": n,
        "grid": _grid_payload(TimeGrid.unit(g)),
        "threads": threads,
        "seed": seed,
        "version": exlab.__version__,
        "csv_layout": "one row per target value: c, density, std_error",
    })
    print(f"wrote {out}.csv ({count} target values, {n} samples each)")
    print(f"wrote {out}.json")
    if merged["plot"]:
        c_arr = np.array([e.c for e in estimates])
        val = np.array([e.value for e in estimates])
        se = np.array([e.std_error for e in estimates])
        _svg_plot(
            out + ".svg", c_arr, [val, val + 2 * se, val - 2 * se],
            ["density", "+2 se", "-2 se"],
            f"time-average density ({target})", "c", "density",
            _matrix_note(c_arr, [val, se], ["density", "std_error"]),
        )
        print(f"wrote {out}.svg")
    return 0


def cmd_spde(merged: dict) -> int:
    mode = merged["mode"]
    if mode not in ("linear", "penalized"):
        raise UsageError("--mode must be 'linear' or 'penalized'")
    eps = merged["eps"]
    if mode == "penalized" and eps is None:
        raise UsageError("penalized mode requires --eps")
    if mode == "linear" and eps is not None:
        raise UsageError("--eps only applies to penalized mode")
    snapshots = merged["snapshots"]
    if snapshots < 2:
        raise UsageError("--snapshots must be at least 2")
    seed = _resolve_seed(merged)
    config = flow.SpdeConfig(
        epsilon=eps,
        alpha=merged["alpha"],
        c=merged["c"],
        grid=TimeGrid.unit(merged["grid_points"]),
        dt=merged["dt"],
        t_end=merged["t_end"],
        seed=seed,
        snapshot_times=tuple(np.linspace(0.0, merged["t_end"], snapshots)),
    )
    if not config.penalty_stable:
        print(
            f"warning: dt={config.dt:g} exceeds the explicit-penalty stability "
            f"bound 8*eps^2={8 * eps**2:g}; expect blow-up",
            file=sys.stderr,
        )
    log = flow.run(flow.initial_profile(config), config, RandomSource(seed))

    out = merged["out"] or "exlab_spde"
    rows = [np.concatenate(([t], snap)) for t, snap in zip(log.times, log.snapshots)]
    _write_csv(out + ".csv", rows)
    averages = np.asarray(log.averages)
    avg_drift_max = float(np.abs(averages - config.c).max())
    stats = {
        "command": "spde",
        "mode": mode,
        "eps": eps,
        "alpha": config.alpha,
        "c": config.c,
        "dt": config.dt,
        "t_end": config.t_end,
        "n_steps": config.n_steps,
        "grid": _grid_payload(config.grid),
        "seed": seed,
        "version": exlab.__version__,
        "penalty_stable": config.penalty_stable,
        "avg_drift_max": avg_drift_max,
        "final_min": log.min_values[-1],
        "overall_min": min(log.min_values),
        "eta_compact_mass": log.eta_compact_mass[-1],
        "contact": log.contact[-1],
        "snapshot_times": list(log.times),
        "csv_layout": "one row per snapshot: time, then the field at each grid point",
    }
    _write_json(out + ".json", stats)
    print(f"wrote {out}.csv ({len(rows)} snapshots)")
    print(f"wrote {out}.json (avg_drift_max = {avg_drift_max:.3e})")
    if merged["plot"]:
        shown = log.snapshots[:: max(1, len(log.snapshots) // 12)]
        times = log.times[:: max(1, len(log.snapshots) // 12)]
        labels = [f"t={t:.3g}" for t in times]
        _svg_plot(
            out + ".svg", config.grid.points, shown, labels,
            f"conservative flow ({mode})", "x", "u",
            _matrix_note(config.grid.points, shown, labels),
        )
        print(f"wrote {out}.svg")
    if avg_drift_max > CONSERVATION_TOL:
        print(
            f"error: conservation drift {avg_drift_max:.3e} exceeds "
            f"{CONSERVATION_TOL:.1e}",
            file=sys.stderr,
        )
        return 3
    return 0


# ---------------------------------------------------------------------------
# check suites
# ---------------------------------------------------------------------------

def _report(lines: list, name: str, value: float, tol: float) -> bool:
    ok = value < tol
    lines.append(f"  {name:<44s} {value:10.3e}  (tol {tol:.1e})  "
                 f"{'PASS' if ok else 'FAIL'}")
    return ok


def _check_abco() -> int:
    lines: list = []
    all_ok = True
    for name, kit, exact in (
        ("excursion", cond.excursion_average_kit(0.6), 26.0 / 27.0),
        ("meander", cond.meander_average_kit(0.6), 7.0 / 8.0),
    ):
        lines.append(f"[abco] {name} kit on {kit.grid.n_points} points:")
        all_ok &= _report(lines, "pinned-variance deviation",
                          abs(kit.pinned_variance - exact), 1e-6)
        all_ok &= _report(lines, "response orthogonality residual",
                          kit.residual_orthogonality, 1e-6)
        all_ok &= _report(lines, "variance normalization residual",
                          kit.residual_normalization, 1e-6)
    print("\n".join(lines))
    print("check abco:", "PASS" if all_ok else "FAIL")
    return 0 if all_ok else 1


def _check_operators() -> int:
    lines: list = []
    all_ok = True
    grid = TimeGrid.unit(1025)
    t = grid.points
    w = grid.quad_weights
    h2 = grid.spacing**2
    lines.append(f"[operators] kernel and flow identities on {grid.n_points} points:")

    q = ops.kernel_Q(grid)
    ones = np.ones(grid.n_points)
    all_ok &= _report(lines, "constant preserved by averaging kernel",
                      float(np.abs(q.apply(ones) - 1.0).max()), 1e-4)

    lap = ops.laplacian(grid, "neumann")
    for k in range(1, 5):
        hv = np.cos(k * math.pi * t)
        lhs = -lap.apply(q.apply(hv))
        rhs = hv - float(w @ hv)
        dev = float(np.abs(lhs - rhs).max())
        all_ok &= _report(lines, f"kernel inverts zero-flux laplacian (k={k})",
                          dev, 0.5 * (k * math.pi) ** 2 * h2)

    qd = ops.kernel_QD(grid)
    all_ok &= _report(lines, "bridge kernel average mass vs 1/12",
                      abs(float(w @ qd.apply(ones)) - 1.0 / 12.0), 1e-6)
    all_ok &= _report(lines, "stationary kernel annihilates constants",
                      float(np.abs(ops.kernel_Qinf(grid).apply(ones)).max()), 1e-6)
    all_ok &= _report(lines, "rank-one stationary kernel vs closed form",
                      ops.rank_one_stationary_deviation(6145), 1e-8)
    print("\n".join(lines))
    print("check operators:", "PASS" if all_ok else "FAIL")
    return 0 if all_ok else 1


def _check_invariance(seed: int, n_traj: int) -> int:
    if n_traj < 10:
        raise UsageError("--n must be at least 10 for the invariance suite")
    config = flow.SpdeConfig(
        epsilon=None, alpha=0.05, c=0.6,
        grid=TimeGrid.unit(flow.DEFAULT_GRID_POINTS),
        dt=1e-4, t_end=1.0,
    )
    report = flow.invariance_check(config, n_traj, RandomSource(seed))
    print(f"[invariance] linear flow, {n_traj} trajectories, unit time:")
    for th, z in zip(report["mean_points"], report["mean_z"]):
        print(f"  mean at t={th:.3f}: z = {z:+.2f}")
    for (a, b), z in zip(report["cov_pairs"], report["cov_z"]):
        print(f"  cov  at ({a:.2f},{b:.2f}): z = {z:+.2f}")
    print(f"  max |z| = {report['max_abs_z']:.2f}  (tol 3)")
    print(f"  max average deviation = {report['max_avg_deviation']:.3e}  "
          f"(tol {CONSERVATION_TOL:.1e})")
    ok = (
        report["max_abs_z"] < 3.0
        and report["max_avg_deviation"] < CONSERVATION_TOL
    )
    print("check invariance:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_check(merged: dict) -> int:
    suite = merged["suite"]
    if suite == "abco":
        return _check_abco()
    if suite == "operators":
        return _check_operators()
    return _check_invariance(_resolve_seed(merged), merged["n"])


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_DISPATCH = {
    "sample": cmd_sample,
    "density": cmd_density,
    "spde": cmd_spde,
    "check": cmd_check,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help (0) and usage errors (2)
        return int(exc.code or 0)
    try:
        merged = _merge_options(args, _OPTION_TABLES[args.command])
        for positional in ("process", "target", "suite"):
            if hasattr(args, positional):
                merged[positional] = getattr(args, positional)
        return _DISPATCH[args.command](merged)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
