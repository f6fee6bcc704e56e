"""Command-line entry point: ``rydquench <command> --config run.toml``.

Every command writes CSV (or JSON) files whose ``#`` header lines record
the command, code version, config hash, units and seed, plus PNG figures
unless ``--no-plot`` is given. Exit codes: 0 success, 2 invalid input,
3 capacity exceeded, 4 numerical failure.
"""
from __future__ import annotations

import csv
import functools
import json
import logging
import math
import os
import sys
import warnings
from typing import Dict, List, Optional

import click
import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .errors import CapacityError, ConfigError, NumericalError
from .evolve import ed_full_lattice
from .lattice import InteractionModel, LatticeGeometry
from .model import Schedule, pulse_hold_time, ramp_schedule, sudden_schedule
from .nlce import SolveOptions, nlce_correlators

log = logging.getLogger("rydquench")

EXIT_VALIDATION = 2
EXIT_CAPACITY = 3
EXIT_NUMERICAL = 4

# maximum |C10(order N) - C10(order N-1)| for an NLCE time to count as converged
CONVERGENCE_TOL = 1e-2


# ---------------------------------------------------------------- helpers

class Run:
    """Resolved config plus command-line overrides."""

    def __init__(self, cfg: RunConfig, command: str, output_dir: Optional[str], threads: int,
                 plot: Optional[bool]):
        self.cfg = cfg
        self.command = command
        base = os.path.dirname(os.path.abspath(cfg.source)) if cfg.source else os.getcwd()
        self.base = base
        out = output_dir or cfg["output"]["dir"]
        self.out = out if os.path.isabs(out) else os.path.join(os.getcwd() if output_dir else base, out)
        os.makedirs(self.out, exist_ok=True)
        self.threads = max(1, threads)
        self.plot = cfg["output"]["plot"] if plot is None else plot
        self.units = cfg.units()

    def path(self, name: str) -> str:
        return os.path.join(self.out, self.cfg["output"]["prefix"] + name)

    def resolve(self, p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(self.base, p)

    def header(self, **extra) -> Dict[str, object]:
        h = {"command": self.command, "code_version": __version__, "config_hash": self.cfg.hash,
             "seed": self.cfg.seed, "unit_system": self.cfg.unit_system,
             "units": "frequency {freq}, time {time}, c6 {c6}".format(**self.units)}
        if self.cfg.title:
            h["title"] = self.cfg.title
        h.update(extra)
        return h

    def geometry(self, nx=None, ny=None) -> LatticeGeometry:
        g = self.cfg["geometry"]
        roi = tuple(g["roi"]) if g["roi"] else None
        return LatticeGeometry.with_anisotropy(nx or g["nx"], ny or g["ny"], g["spacing_ratio"], roi)

    def interaction(self) -> InteractionModel:
        i = self.cfg["interaction"]
        if i["c6"] is None:
            raise ConfigError("[interaction].c6 is required")
        return InteractionModel(i["c6"], i["cutoff"], i["r_max"])

    def opts(self) -> SolveOptions:
        sv = self.cfg["solver"]
        return SolveOptions(n_steps=sv["steps"], shift_mode=self.cfg["interaction"]["shift_mode"],
                            tol=sv["tolerance"])

    def schedule(self, delta: float = 0.0) -> Schedule:
        return build_schedule(self.cfg, delta)

    def detunings(self) -> List[float]:
        d = self.cfg["schedule"]["detunings"]
        return [0.0] if d is None else list(d)


def build_schedule(cfg: RunConfig, delta: float = 0.0) -> Schedule:
    s = cfg["schedule"]
    if s["omega"] is None:
        raise ConfigError("[schedule].omega is required")
    rise = s["rise"] or 0.0
    fall = s["fall"] if s["fall"] is not None else rise
    if s["kind"] == "sudden":
        if s["hold"] is not None:
            hold = s["hold"]
        elif s["pulse_area"] is not None:
            hold = pulse_hold_time(s["omega"], s["pulse_area"], rise, fall)
        else:
            raise ConfigError("[schedule] needs hold or pulse_area for a sudden quench")
        return sudden_schedule(s["omega"], delta, hold, rise, fall)
    for k in ("delta_i", "delta_f", "rate"):
        if s[k] is None:
            raise ConfigError(f"[schedule].{k} is required for a ramp")
    return ramp_schedule(s["omega"], s["delta_i"], s["delta_f"], s["rate"], rise)


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.10g}"
    return str(x)


def write_table(path: str, header: Dict[str, object], columns: List[str], rows: List[dict]):
    with open(path, "w", newline="") as fh:
        for k, v in header.items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    return path


def _guard(fn):
    """Map library exceptions to exit codes."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except CapacityError as exc:
            click.echo(f"capacity error: {exc}", err=True)
            sys.exit(EXIT_CAPACITY)
        except (ConfigError, ValueError, KeyError, FileNotFoundError) as exc:
            click.echo(f"invalid input: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)
        except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(EXIT_NUMERICAL)
    return wrapper


def _common(fn):
    fn = click.option("--plot/--no-plot", default=None, help="Render PNG figures.")(fn)
    fn = click.option("--output-dir", type=click.Path(file_okay=False), default=None,
                      help="Directory for outputs (overrides [output].dir).")(fn)
    fn = click.option("--order", type=int, default=None, help="NLCE order (overrides [solver].order).")(fn)
    fn = click.option("--seed", type=int, default=None, help="Random seed (overrides config seed).")(fn)
    fn = click.option("--threads", type=int, default=os.cpu_count() or 1, show_default=True,
                      help="Worker processes for cluster solves.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True,
                      help="TOML run configuration.")(fn)
    return fn


def _setup(command, config_path, threads, seed, order, output_dir, plot) -> Run:
    cfg = load_config(config_path)
    if order is not None:
        cfg = cfg.replace("solver", order=order)
    if seed is not None:
        cfg.seed = seed
        cfg.raw = dict(cfg.raw, seed=seed)
    return Run(cfg, command, output_dir, threads, plot)


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", count=True, help="Log progress (-vv for debug).")
def main(verbose):
    """Quench dynamics of a Rydberg Ising lattice: simulate, sample, analyze, fit."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------- sudden

REPORTED = ((1, 0), (0, 1), (1, 1))


def _nlce_run(run: Run, sched: Schedule, checkpoints=None):
    """NLCE over the reported displacements; those too long for the order read NaN."""
    order = run.cfg["solver"]["order"]
    targets = [t for t in REPORTED if abs(t[0]) + abs(t[1]) <= order - 1]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = nlce_correlators(order, run.geometry(1, 1), run.interaction(), sched, targets=targets,
                               checkpoints=checkpoints, opts=run.opts(),
                               start_order=run.cfg["solver"]["start_order"], threads=run.threads)
    T = res.c_partial.shape[1]
    part = np.full((order, T, len(REPORTED)), np.nan)
    resum = np.full((T, len(REPORTED)), np.nan)
    for k, t in enumerate(targets):
        part[:, :, REPORTED.index(t)] = res.c_partial[:, :, k]
        resum[:, REPORTED.index(t)] = res.c_resummed[:, k]
    return res, part, resum


def sudden_rows(run: Run) -> List[dict]:
    cfg = run.cfg
    method = cfg["solver"]["method"]
    order = cfg["solver"]["order"]
    alpha = cfg["analysis"]["alpha"]
    inter = run.interaction()
    rows = []
    for delta in run.detunings():
        sched = run.schedule(delta)
        found = []
        if method in ("nlce", "both"):
            res, part, resum = _nlce_run(run, sched)
            for k in range(order):
                found.append((f"nlce_order_{k + 1}", res.c00_partial[k, -1], *part[k, -1],
                              res.z_partial[k, -1] + 0.5))
            found.append(("nlce_resummed", res.c00_resummed[-1], *resum[-1], res.mean_n_resummed[-1]))
        if method in ("ed", "both"):
            geom = run.geometry(cfg["solver"]["ed_nx"], cfg["solver"]["ed_ny"])
            cmap = ed_full_lattice(geom, inter, sched, n_steps=cfg["solver"]["steps"],
                                   shift_mode=cfg["interaction"]["shift_mode"], window=(1, 1))
            found.append(("ed", cmap[0, 0], cmap[1, 0], cmap[0, 1], cmap[1, 1],
                          cmap.metadata["mean_n"]))
        for src, c00, c10, c01, c11, n in found:
            d00 = 4.0 * (alpha * n - (alpha * n) ** 2)
            rows.append({"delta": delta, "source": src, "c00": c00, "c10": c10, "c01": c01,
                         "c11": c11, "mean_n": n, "c00_det": d00, "c10_det": alpha ** 2 * c10,
                         "c01_det": alpha ** 2 * c01, "c11_det": alpha ** 2 * c11})
    return rows


SUDDEN_COLUMNS = ["delta", "source", "c00", "c10", "c01", "c11", "mean_n",
                  "c00_det", "c10_det", "c01_det", "c11_det"]


@main.command()
@_common
@_guard
def sudden(config_path, threads, seed, order, output_dir, plot):
    """Correlators after a sudden quench, per detuning."""
    run = _setup("sudden", config_path, threads, seed, order, output_dir, plot)
    rows = sudden_rows(run)
    s = run.cfg["schedule"]
    sched = run.schedule(run.detunings()[0])
    hdr = run.header(method=run.cfg["solver"]["method"], order=run.cfg["solver"]["order"],
                     c6=run.cfg["interaction"]["c6"], omega=s["omega"], duration=sched.duration,
                     alpha=run.cfg["analysis"]["alpha"], shift_mode=run.cfg["interaction"]["shift_mode"],
                     columns_det="detection-scaled with efficiency alpha")
    out = write_table(run.path("sudden.csv"), hdr, SUDDEN_COLUMNS, rows)
    click.echo(out)
    if run.plot:
        from .plotting import plot_sudden
        click.echo(plot_sudden(rows, run.path("sudden.png"), run.units["freq"]))


# ---------------------------------------------------------------- ramp

def ramp_checkpoints(run: Run, sched: Schedule) -> np.ndarray:
    s = run.cfg["schedule"]
    if s["checkpoints"] is not None:
        cps = np.asarray(s["checkpoints"], dtype=float)
        if np.any(cps < 0) or np.any(cps > sched.duration * (1 + 1e-12)):
            raise ConfigError("[schedule].checkpoints must lie within the schedule")
        return np.sort(cps)
    return np.linspace(0.0, sched.duration, s["n_checkpoints"])


def ramp_rows(run: Run):
    cfg = run.cfg
    if cfg["schedule"]["kind"] != "ramp":
        raise ConfigError("the ramp command needs [schedule].kind = 'ramp'")
    sched = run.schedule()
    cps = ramp_checkpoints(run, sched)
    inter = run.interaction()
    method = cfg["solver"]["method"]
    rows = [{"t": float(t), "omega": float(sched.omega(t)), "delta": float(sched.delta(t))} for t in cps]
    if method in ("ed", "both"):
        geom = run.geometry(cfg["solver"]["ed_nx"], cfg["solver"]["ed_ny"])
        maps = ed_full_lattice(geom, inter, sched, checkpoints=cps, n_steps=cfg["solver"]["steps"],
                               shift_mode=cfg["interaction"]["shift_mode"], window=(2, 2))
        for r, m in zip(rows, maps):
            r.update(ed_c00=m[0, 0], ed_c10=m[1, 0], ed_c01=m[0, 1], ed_c11=m[1, 1],
                     ed_mean_n=m.metadata["mean_n"])
    order = cfg["solver"]["order"]
    if method in ("nlce", "both"):
        _, part, resum = _nlce_run(run, sched, cps)
        for i, r in enumerate(rows):
            for k in range(order):
                r[f"nlce{k + 1}_c10"] = part[k, i, 0]
                r[f"nlce{k + 1}_c11"] = part[k, i, 2]
            r["nlce_resummed_c10"] = resum[i, 0]
            r["nlce_resummed_c11"] = resum[i, 2]
            diff = abs(part[-1, i, 0] - part[-2, i, 0]) if order >= 2 else math.inf
            r["nlce_converged"] = int(diff < CONVERGENCE_TOL)
    return sched, cps, rows


@main.command()
@_common
@_guard
def ramp(config_path, threads, seed, order, output_dir, plot):
    """Correlator build-up at checkpoints along a detuning ramp."""
    run = _setup("ramp", config_path, threads, seed, order, output_dir, plot)
    sched, cps, rows = ramp_rows(run)
    crossings = sched.delta_crossings(0.0)
    s = run.cfg["schedule"]
    conv = [r["t"] for r in rows if r.get("nlce_converged") == 0]
    hdr = run.header(method=run.cfg["solver"]["method"], order=run.cfg["solver"]["order"],
                     c6=run.cfg["interaction"]["c6"], omega=s["omega"], delta_i=s["delta_i"],
                     delta_f=s["delta_f"], rate=s["rate"], rise=s["rise"], duration=sched.duration,
                     delta_zero_crossing=";".join(f"{t:.10g}" for t in crossings) or "none",
                     nlce_convergence_tol=CONVERGENCE_TOL,
                     nlce_horizon=(f"{min(conv):.10g}" if conv else "not reached")
                     if "nlce_converged" in rows[0] else "n/a")
    columns = list(rows[0].keys())
    out = write_table(run.path("ramp.csv"), hdr, columns, rows)
    click.echo(out)
    if run.plot:
        from .plotting import plot_ramp
        series = {}
        for key, label in (("ed_c10", "ED C(1,0)"), ("ed_c11", "ED C(1,1)"),
                           ("nlce_resummed_c10", "NLCE C(1,0)"), ("nlce_resummed_c11", "NLCE C(1,1)")):
            if key in rows[0]:
                series[label] = [r[key] for r in rows]
        click.echo(plot_ramp(cps, series, run.path("ramp.png"), crossings, run.units["time"]))


# ---------------------------------------------------------------- sample

@main.command()
@_common
@_guard
def sample(config_path, threads, seed, order, output_dir, plot):
    """Draw detected snapshots from the end-of-schedule ED state."""
    from .observables import Detection, sample_snapshots

    run = _setup("sample", config_path, threads, seed, order, output_dir, plot)
    cfg = run.cfg
    geom = run.geometry()
    delta = run.detunings()[0]
    if cfg["schedule"]["kind"] == "sudden" and len(run.detunings()) > 1:
        raise ConfigError("sampling a sudden quench needs exactly one detuning")
    sched = run.schedule(delta)
    _, psi = ed_full_lattice(geom, run.interaction(), sched, n_steps=cfg["solver"]["steps"],
                             shift_mode=cfg["interaction"]["shift_mode"], window=(1, 1),
                             return_states=True)
    sp = cfg["sampling"]
    det = Detection(sp["rydberg_removal_eff"], sp["filling"], sp["ground_detection_eff"])
    snaps = sample_snapshots(psi, sp["shots"], (geom.ny, geom.nx), det,
                             np.random.default_rng(cfg.seed), geom.mask())
    snaps.metadata = {}
    hdr = run.header(shots=sp["shots"], rydberg_removal_eff=sp["rydberg_removal_eff"],
                     filling=sp["filling"], ground_detection_eff=sp["ground_detection_eff"],
                     duration=sched.duration)
    path = run.path("snapshots.csv")
    snaps.to_csv(path, hdr)
    click.echo(path)


# ---------------------------------------------------------------- analyze

@main.command()
@_common
@click.option("--input", "input_path", type=click.Path(dir_okay=False), default=None,
              help="Snapshot file (overrides [analysis].snapshots).")
@_guard
def analyze(config_path, threads, seed, order, output_dir, plot, input_path):
    """Correlators, correlation length and pattern statistics of snapshots."""
    from .observables import SnapshotSet, correlators_from_snapshots, fit_correlation_length, \
        subsystem_statistics

    run = _setup("analyze", config_path, threads, seed, order, output_dir, plot)
    a = run.cfg["analysis"]
    src = input_path or a["snapshots"]
    if src is None:
        raise ConfigError("no snapshot file: give --input or [analysis].snapshots")
    src = src if input_path else run.resolve(src)
    snaps = SnapshotSet.from_csv(src)
    window = tuple(a["window"])
    cmap = correlators_from_snapshots(snaps, window)
    hdr = run.header(input=os.path.basename(src), shots=snaps.n_shots,
                     mean_n=f"{cmap.metadata['mean_n']:.10g}")
    p1 = run.path("correlations.csv")
    cmap.to_csv(p1, hdr)
    w, h = a["subsystem"]
    stats = subsystem_statistics(snaps, w, h)
    p2 = run.path("subsystems.csv")
    stats.to_csv(p2, dict(hdr, n_windows=stats.n_windows, enhancement=f"{stats.enhancement:.10g}",
                          **{f"class_{k}": f"{v:.10g}" for k, v in stats.classes.items()}))
    geom = run.geometry()
    fit = fit_correlation_length(cmap, a["fit_r_min"], a["fit_r_max"],
                                 (geom.spacing_x, geom.spacing_y))
    p3 = run.path("correlation_length.json")
    with open(p3, "w") as fh:
        json.dump({"header": hdr, "fit": {k: (v if not isinstance(v, float) or math.isfinite(v) else None)
                                          for k, v in vars(fit).items()}}, fh, indent=2, sort_keys=True,
                  default=_json_default)
    for p in (p1, p2, p3):
        click.echo(p)
    if run.plot:
        from .plotting import plot_correlation_map, plot_subsystem
        click.echo(plot_correlation_map(cmap, run.path("correlations.png")))
        click.echo(plot_subsystem(stats, run.path("subsystems.png")))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


# ---------------------------------------------------------------- fit

@main.command()
@_common
@click.option("--scan", "scan_path", type=click.Path(dir_okay=False), default=None,
              help="Scan CSV (overrides [fit].scan).")
@_guard
def fit(config_path, threads, seed, order, output_dir, plot, scan_path):
    """Fit (C6, alpha) of a sudden-quench scan against an NLCE grid."""
    from .fitting import CorrelatorScan, GridModel, build_nlce_grid, fit_c6_alpha

    run = _setup("fit", config_path, threads, seed, order, output_dir, plot)
    f = run.cfg["fit"]
    src = scan_path or f["scan"]
    if src is None:
        raise ConfigError("no scan file: give --scan or [fit].scan")
    src = src if scan_path else run.resolve(src)
    scan = CorrelatorScan.from_csv(src)
    if f["grid_c6"] is None:
        raise ConfigError("[fit].grid_c6 is required")
    grid_order = order or f["order"] or run.cfg["solver"]["order"]
    detunings = f["grid_detunings"] or scan.detunings.tolist()
    cache = run.resolve(f["grid_cache"]) if f["grid_cache"] else None
    i = run.cfg["interaction"]
    base = InteractionModel(f["grid_c6"][0], i["cutoff"], i["r_max"])
    grid = build_nlce_grid(f["grid_c6"], detunings, run.schedule(0.0), grid_order, run.geometry(1, 1),
                           base, run.opts(), run.cfg["solver"]["start_order"], run.threads, cache)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = fit_c6_alpha(scan, grid, f["weighting"], (f["alpha_min"], 1.0))
    for w in caught:
        click.echo(f"warning: {w.message}", err=True)
    report.settings.update(run.header(scan=os.path.basename(src)))
    path = run.path("fit.json")
    with open(path, "w") as fh:
        fh.write(report.to_json() + "\n")
    click.echo(path)
    click.echo(f"C6 = {report.c6:.4f} +- {report.stderr[0]:.4f}, alpha = {report.alpha:.4f} "
               f"+- {report.stderr[1]:.4f}, chi2 = {report.chi2:.4g} ({report.weighting}), "
               f"{'ok' if report.ok else 'FLAGGED'}")
    if run.plot:
        from .plotting import plot_fit
        model = GridModel(grid, scan.detunings).predict(report.c6, report.alpha)
        click.echo(plot_fit(scan, model, report, run.path("fit.png"), run.units["freq"]))


# ---------------------------------------------------------------- export-schedule

@main.command("export-schedule")
@_common
@click.option("--points", type=int, default=201, show_default=True, help="Samples per schedule.")
@_guard
def export_schedule(config_path, threads, seed, order, output_dir, plot, points):
    """Write Omega(t) and Delta(t) of the configured schedule."""
    run = _setup("export-schedule", config_path, threads, seed, order, output_dir, plot)
    deltas = run.detunings() if run.cfg["schedule"]["kind"] == "sudden" else [None]
    for k, d in enumerate(deltas):
        sched = run.schedule(0.0 if d is None else d)
        name = "schedule.csv" if len(deltas) == 1 else f"schedule_{k:02d}.csv"
        hdr = run.header(kind=run.cfg["schedule"]["kind"], duration=sched.duration,
                         segments=json.dumps(sched.to_dict()["segments"]),
                         delta_zero_crossing=";".join(f"{t:.10g}" for t in sched.delta_crossings(0.0))
                         or "none")
        path = run.path(name)
        sched.to_csv(path, points, hdr)
        click.echo(path)
        if run.plot:
            from .plotting import plot_schedule
            click.echo(plot_schedule(sched, path[:-4] + ".png", run.units["freq"], run.units["time"]))


if __name__ == "__main__":  # pragma: no cover
    main()
