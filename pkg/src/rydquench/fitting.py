"""Two-parameter (C6, alpha) fit of sudden-quench correlator scans.

A scan holds detected C(0,0), C(1,0) and C(0,1) versus detuning. Model
values come from a grid of expansion results over C6 and detuning; the
fit interpolates the grid along C6 with a cubic spline, applies the
detection model for efficiency alpha, and refines the best grid point by
repeated local quadratic fits of chi2.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline

from .lattice import InteractionModel, LatticeGeometry
from .model import Schedule
from .nlce import DEFAULT_ORDER, SolveOptions, nlce_correlators
from .observables import scale_correlators

log = logging.getLogger(__name__)

GRID_FORMAT_VERSION = 1
CHANNELS = ("c00", "c10", "c01")


class FitWarning(UserWarning):
    """The fit hit a bound or did not converge."""


def _opt_array(x):
    return None if x is None else np.asarray(x, dtype=float)


@dataclass
class CorrelatorScan:
    """Measured correlators at each detuning; errors are optional."""

    detunings: np.ndarray
    c00: np.ndarray
    c10: np.ndarray
    c01: np.ndarray
    c00_err: Optional[np.ndarray] = None
    c10_err: Optional[np.ndarray] = None
    c01_err: Optional[np.ndarray] = None
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.detunings = np.asarray(self.detunings, dtype=float)
        n = self.detunings.size
        if n == 0:
            raise ValueError("scan has no detunings")
        if np.any(np.diff(self.detunings) <= 0):
            raise ValueError("detunings must be strictly increasing")
        for name in CHANNELS:
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (n,):
                raise ValueError(f"{name} must have one value per detuning")
            setattr(self, name, v)
            e = _opt_array(getattr(self, name + "_err"))
            if e is not None:
                if e.shape != (n,):
                    raise ValueError(f"{name}_err must have one value per detuning")
                if np.any(~(e > 0)):
                    raise ValueError(f"{name}_err must be positive")
            setattr(self, name + "_err", e)

    @property
    def has_errors(self) -> bool:
        return all(getattr(self, c + "_err") is not None for c in CHANNELS)

    def values(self) -> np.ndarray:
        return np.stack([getattr(self, c) for c in CHANNELS])

    def errors(self) -> Optional[np.ndarray]:
        if not self.has_errors:
            return None
        return np.stack([getattr(self, c + "_err") for c in CHANNELS])

    def to_csv(self, path, header: Optional[dict] = None):
        with open(path, "w", newline="") as fh:
            for k, v in {**self.metadata, **(header or {})}.items():
                fh.write(f"# {k}: {v}\n")
            w = csv.writer(fh)
            w.writerow(["delta", "c00", "c00_err", "c10", "c10_err", "c01", "c01_err"])
            for i, d in enumerate(self.detunings):
                row = [f"{d:.12g}"]
                for c in CHANNELS:
                    e = getattr(self, c + "_err")
                    row += [f"{getattr(self, c)[i]:.12g}", "" if e is None else f"{e[i]:.12g}"]
                w.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "CorrelatorScan":
        meta, lines = {}, []
        with open(path) as fh:
            for line in fh:
                if line.startswith("#"):
                    key, _, val = line[1:].partition(":")
                    meta[key.strip()] = val.strip()
                elif line.strip():
                    lines.append(line)
        rows = list(csv.DictReader(lines))
        if not rows:
            raise ValueError(f"{path}: no scan rows")
        need = ["delta", "c00", "c00_err", "c10", "c10_err", "c01", "c01_err"]
        missing = [k for k in need if k not in rows[0]]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        data = {"detunings": [float(r["delta"]) for r in rows]}
        for c in CHANNELS:
            data[c] = [float(r[c]) for r in rows]
            errs = [r[c + "_err"].strip() for r in rows]
            data[c + "_err"] = None if all(e == "" for e in errs) else [float(e) for e in errs]
        return cls(metadata=meta, **data)


# ---------------------------------------------------------------- grid

@dataclass
class NLCEGrid:
    """Resummed predictions indexed [C6 node, detuning]."""

    c6_values: np.ndarray
    detunings: np.ndarray
    c00: np.ndarray
    c10: np.ndarray
    c01: np.ndarray
    mean_n: np.ndarray
    params: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.c6_values = np.asarray(self.c6_values, dtype=float)
        self.detunings = np.asarray(self.detunings, dtype=float)
        shape = (self.c6_values.size, self.detunings.size)
        for name in ("c00", "c10", "c01", "mean_n"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(shape)
            setattr(self, name, v)

    @property
    def param_hash(self) -> str:
        return grid_hash(self.params)

    def save(self, path):
        doc = {"format": "rydquench-nlce-grid", "version": GRID_FORMAT_VERSION,
               "hash": self.param_hash, "params": self.params,
               "c6_values": self.c6_values.tolist(), "detunings": self.detunings.tolist()}
        for name in ("c00", "c10", "c01", "mean_n"):
            doc[name] = getattr(self, name).tolist()
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            json.dump(doc, fh, indent=1)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "NLCEGrid":
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("format") != "rydquench-nlce-grid" or doc.get("version") != GRID_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported grid format")
        grid = cls(doc["c6_values"], doc["detunings"], doc["c00"], doc["c10"], doc["c01"],
                   doc["mean_n"], doc["params"])
        if grid.param_hash != doc["hash"]:
            raise ValueError(f"{path}: parameter hash mismatch")
        return grid

    def row(self, c6: float) -> Dict[str, np.ndarray]:
        k = int(np.argmin(np.abs(self.c6_values - c6)))
        if not math.isclose(self.c6_values[k], c6, abs_tol=1e-12):
            raise KeyError(f"C6 = {c6} is not a grid node")
        return {name: getattr(self, name)[k] for name in ("c00", "c10", "c01", "mean_n")}


def grid_hash(params: dict) -> str:
    blob = json.dumps(params, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def grid_params(c6_values, detunings, schedule: Schedule, order: int, geom: LatticeGeometry,
                interaction: InteractionModel, opts: SolveOptions, start_order: int) -> dict:
    return {
        "c6_values": [float(c) for c in c6_values],
        "detunings": [float(d) for d in detunings],
        "schedule": schedule.to_dict(),
        "order": int(order),
        "start_order": int(start_order),
        "anisotropy": float(geom.anisotropy),
        "cutoff": interaction.cutoff.value,
        "r_max": interaction.r_max,
        "solver": asdict(opts),
    }


def _grid_node(args):
    c6, delta, schedule, order, geom, interaction, opts, start_order = args
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r = nlce_correlators(order, geom, interaction.scaled(c6), schedule.with_delta(delta),
                             targets=((1, 0), (0, 1)), opts=opts, start_order=start_order)
    return (float(r.c00_resummed[-1]), float(r.correlator((1, 0))[-1]),
            float(r.correlator((0, 1))[-1]), float(r.mean_n_resummed[-1]))


def build_nlce_grid(c6_values: Sequence[float], detunings: Sequence[float], schedule: Schedule,
                    order: int = DEFAULT_ORDER, geom: Optional[LatticeGeometry] = None,
                    interaction: Optional[InteractionModel] = None,
                    opts: SolveOptions = SolveOptions(), start_order: int = 3,
                    threads: int = 1, cache_dir=None) -> NLCEGrid:
    """End-of-schedule predictions at every (C6, detuning) node.

    ``schedule`` supplies the drive; its detuning is replaced by each grid
    value. With ``cache_dir`` the grid is stored under its parameter hash
    and reused on the next call with identical parameters.
    """
    c6_values = np.asarray(c6_values, dtype=float)
    detunings = np.asarray(detunings, dtype=float)
    if c6_values.size == 0 or detunings.size == 0:
        raise ValueError("grid axes must be non-empty")
    if np.any(np.diff(np.sort(c6_values)) == 0) or np.any(np.diff(np.sort(detunings)) == 0):
        raise ValueError("grid axes must not repeat values")
    c6_values = np.sort(c6_values)
    detunings = np.sort(detunings)
    geom = geom or LatticeGeometry.with_anisotropy(1, 1)
    interaction = interaction or InteractionModel(float(c6_values[0]))
    params = grid_params(c6_values, detunings, schedule, order, geom, interaction, opts, start_order)
    path = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        path = os.path.join(cache_dir, f"grid-{grid_hash(params)}.json")
        if os.path.exists(path):
            log.info("loading cached grid %s", path)
            return NLCEGrid.load(path)
    jobs = [(c6, d, schedule, order, geom, interaction, opts, start_order)
            for c6 in c6_values for d in detunings]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(_grid_node, jobs))
    else:
        out = []
        for j in jobs:
            out.append(_grid_node(j))
            log.info("grid node C6=%g delta=%g done", j[0], j[1])
    arr = np.array(out).reshape(c6_values.size, detunings.size, 4)
    grid = NLCEGrid(c6_values, detunings, arr[..., 0], arr[..., 1], arr[..., 2], arr[..., 3], params)
    if path is not None:
        grid.save(path)
    return grid


# ---------------------------------------------------------------- model

class GridModel:
    """Detected correlators at arbitrary (C6, alpha) for the scan detunings."""

    def __init__(self, grid: NLCEGrid, detunings: Sequence[float]):
        detunings = np.asarray(detunings, dtype=float)
        lo, hi = grid.detunings[0], grid.detunings[-1]
        if np.any(detunings < lo - 1e-9) or np.any(detunings > hi + 1e-9):
            raise ValueError(f"scan detunings outside the grid range [{lo}, {hi}]")
        if grid.c6_values.size < 2:
            raise ValueError("fitting C6 needs at least two grid nodes")
        cols = [np.flatnonzero(np.isclose(grid.detunings, d, atol=1e-9)) for d in detunings]
        self.delta_interpolated = any(c.size == 0 for c in cols)
        if self.delta_interpolated and grid.detunings.size < 2:
            raise ValueError("detuning interpolation needs at least two grid detunings")
        self.c6_range = (float(grid.c6_values[0]), float(grid.c6_values[-1]))
        self.c6_interpolation = "cubic spline" if grid.c6_values.size >= 3 else "linear"
        self._splines = {}
        for name in ("mean_n", "c10", "c01"):
            table = getattr(grid, name)
            if self.delta_interpolated:
                kind = CubicSpline if grid.detunings.size >= 3 else None
                if kind is None:
                    table = np.array([np.interp(detunings, grid.detunings, r) for r in table])
                else:
                    table = CubicSpline(grid.detunings, table, axis=1)(detunings)
            else:
                table = table[:, [int(c[0]) for c in cols]]
            if self.c6_interpolation == "linear":
                self._splines[name] = _Linear(grid.c6_values, table)
            else:
                self._splines[name] = CubicSpline(grid.c6_values, table, axis=0)

    def raw(self, c6):
        """Undetected (mean_n, C10, C01) at each C6 in ``c6`` (array)."""
        c6 = np.asarray(c6, dtype=float)
        return tuple(self._splines[k](c6) for k in ("mean_n", "c10", "c01"))

    def predict(self, c6, alpha):
        """Detected (C00, C10, C01), shape (3, ..., n_detunings)."""
        n, c10, c01 = self.raw(c6)
        c00, off = scale_correlators(None, np.stack([c10, c01]), n, alpha)
        return np.concatenate([c00[None], off])


class _Linear:
    def __init__(self, x, table):
        self.x, self.table = np.asarray(x), np.asarray(table)

    def __call__(self, c6):
        c6 = np.asarray(c6, dtype=float)
        flat = np.atleast_1d(c6).ravel()
        out = np.array([[np.interp(v, self.x, col) for col in self.table.T] for v in flat])
        return out.reshape(c6.shape + (self.table.shape[1],))


# ---------------------------------------------------------------- fit

@dataclass
class FitReport:
    c6: float
    alpha: float
    covariance: np.ndarray
    chi2: float
    dof: int
    weighting: str
    converged: bool
    at_boundary: bool
    iterations: int
    chi2_history: List[float]
    delta_interpolated: bool
    c6_interpolation: str
    settings: Dict[str, object] = field(default_factory=dict)

    @property
    def stderr(self) -> Tuple[float, float]:
        return tuple(float(math.sqrt(max(v, 0.0))) for v in np.diag(self.covariance))

    @property
    def ok(self) -> bool:
        return self.converged and not self.at_boundary

    def mahalanobis(self, c6: float, alpha: float) -> float:
        d = np.array([self.c6 - c6, self.alpha - alpha])
        return float(d @ np.linalg.solve(self.covariance, d))

    def to_dict(self) -> dict:
        se = self.stderr
        return {"c6": self.c6, "c6_err": se[0], "alpha": self.alpha, "alpha_err": se[1],
                "covariance": np.asarray(self.covariance).tolist(), "chi2": self.chi2,
                "dof": self.dof, "weighting": self.weighting, "converged": self.converged,
                "at_boundary": self.at_boundary, "iterations": self.iterations,
                "chi2_history": self.chi2_history, "delta_interpolated": self.delta_interpolated,
                "c6_interpolation": self.c6_interpolation, "settings": self.settings}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _weights(scan: CorrelatorScan, weighting: str) -> np.ndarray:
    if weighting == "auto":
        weighting = "inverse-variance" if scan.has_errors else "uniform"
    if weighting == "inverse-variance":
        errs = scan.errors()
        if errs is None:
            raise ValueError("inverse-variance weighting needs errors on every channel")
        return 1.0 / errs ** 2
    if weighting == "uniform":
        return np.ones((len(CHANNELS), scan.detunings.size))
    raise ValueError(f"unknown weighting {weighting!r}")


def chi2_surface(scan: CorrelatorScan, grid: NLCEGrid, c6_values, alphas,
                 weighting: str = "auto") -> np.ndarray:
    """chi2 on the product of ``c6_values`` and ``alphas``, shape (n_c6, n_alpha)."""
    model = GridModel(grid, scan.detunings)
    w = _weights(scan, weighting)
    data = scan.values()
    c6_values = np.asarray(c6_values, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    n, c10, c01 = model.raw(c6_values)  # (n_c6, n_delta)
    a = alphas[None, :, None]
    c00 = 4.0 * (a * n[:, None] - (a * n[:, None]) ** 2)
    r = [c00 - data[0], a ** 2 * c10[:, None] - data[1], a ** 2 * c01[:, None] - data[2]]
    return sum((w[k] * r[k] ** 2).sum(axis=-1) for k in range(3))


def _quadratic_fit(x, y):
    """Least-squares q(u) = q0 + g.u + u.H.u/2 on 2-D points; returns q0, g, H."""
    u, v = x[:, 0], x[:, 1]
    A = np.stack([np.ones_like(u), u, v, 0.5 * u * u, u * v, 0.5 * v * v], axis=1)
    coef = np.linalg.lstsq(A, y, rcond=None)[0]
    g = coef[1:3]
    H = np.array([[coef[3], coef[4]], [coef[4], coef[5]]])
    return coef[0], g, H


_STENCIL = np.array([(i, j) for i in (-1, 0, 1) for j in (-1, 0, 1)], dtype=float)


def fit_c6_alpha(scan: CorrelatorScan, grid: NLCEGrid, weighting: str = "auto",
                 alpha_bounds: Tuple[float, float] = (0.3, 1.0), n_c6: int = 201,
                 n_alpha: int = 141, max_iter: int = 60, tol: float = 1e-7) -> FitReport:
    """Least-squares (C6, alpha) over all three correlators at all detunings.

    Grid search on a fine (C6, alpha) lattice, then local quadratic
    refinement: each step fits a quadratic to chi2 on a 3x3 stencil and
    moves to its minimum if that lowers chi2, otherwise the stencil
    shrinks. The covariance is 2 H^-1 from the final quadratic, scaled by
    chi2/dof under uniform weighting. Boundary or unconverged results are
    flagged and warned about.
    """
    model = GridModel(grid, scan.detunings)
    w = _weights(scan, weighting)
    wname = "inverse-variance" if weighting == "auto" and scan.has_errors else (
        "uniform" if weighting == "auto" else weighting)
    data = scan.values()
    lo_a, hi_a = alpha_bounds
    if not 0 < lo_a < hi_a <= 1:
        raise ValueError("alpha bounds must satisfy 0 < lo < hi <= 1")
    c6_lo, c6_hi = model.c6_range

    def chi2(c6, alpha):
        r = model.predict(c6, alpha) - data
        return float((w * r ** 2).sum())

    c6_axis = np.linspace(c6_lo, c6_hi, n_c6)
    a_axis = np.linspace(lo_a, hi_a, n_alpha)
    surf = chi2_surface(scan, grid, c6_axis, a_axis, wname)
    i, j = np.unravel_index(int(np.argmin(surf)), surf.shape)
    x = np.array([c6_axis[i], a_axis[j]])
    best = float(surf[i, j])
    scale0 = np.array([c6_axis[1] - c6_axis[0], a_axis[1] - a_axis[0]])
    scale = scale0.copy()
    history = [best]
    lo = np.array([c6_lo, lo_a])
    hi = np.array([c6_hi, hi_a])
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        pts = np.clip(x + _STENCIL * scale, lo, hi)
        vals = np.array([chi2(*p) for p in pts])
        _, g, H = _quadratic_fit((pts - x) / scale, vals)
        cand = []
        try:
            ev = np.linalg.eigvalsh(H)
            if ev.min() > 0:
                step = -np.linalg.solve(H, g)
                step = np.clip(step, -2.0, 2.0)
                cand.append(np.clip(x + step * scale, lo, hi))
        except np.linalg.LinAlgError:
            pass
        k = int(np.argmin(vals))
        cand.append(pts[k])
        moved = False
        for c in cand:
            v = chi2(*c)
            if v < best:
                shift = np.abs(c - x) / scale0
                x, best, moved = c, v, True
                history.append(best)
                break
        if not moved or np.all(shift < 0.25 * scale / scale0):
            scale = scale * 0.5
        if np.all(scale / scale0 < tol) or (best == 0.0):
            converged = True
            break
    # curvature at the optimum on a stencil of the original grid spacing
    h = scale0
    pts = x + _STENCIL * h
    vals = np.array([chi2(*p) for p in pts])
    _, _, H = _quadratic_fit(_STENCIL, vals)
    H = H / np.outer(h, h)
    n_data = data.size
    dof = n_data - 2
    try:
        cov = 2.0 * np.linalg.inv(H)
    except np.linalg.LinAlgError:
        cov = np.full((2, 2), np.inf)
        converged = False
    if wname == "uniform":
        cov = cov * (best / dof if dof > 0 else np.inf)
    if np.any(np.diag(cov) < 0):
        converged = False
    edge = 1e-6
    at_boundary = bool(x[0] - c6_lo < edge * scale0[0] * n_c6 or c6_hi - x[0] < edge * scale0[0] * n_c6
                       or x[1] - lo_a < 1e-9 or hi_a - x[1] < 1e-9)
    settings = {"grid_hash": grid.param_hash, "grid_order": grid.params.get("order"),
                "grid_c6": grid.c6_values.tolist(), "grid_detunings": grid.detunings.tolist(),
                "scan_detunings": scan.detunings.tolist(), "alpha_bounds": list(alpha_bounds),
                "search_shape": [n_c6, n_alpha], "max_iter": max_iter, "tol": tol,
                "channels": list(CHANNELS), "n_data": n_data}
    report = FitReport(float(x[0]), float(x[1]), cov, best, dof, wname, converged, at_boundary, it,
                       history, model.delta_interpolated, model.c6_interpolation, settings)
    if at_boundary:
        warnings.warn("fit optimum lies on a parameter bound", FitWarning, stacklevel=2)
    if not converged:
        warnings.warn("fit refinement did not converge", FitWarning, stacklevel=2)
    return report


def noise_scale(values: np.ndarray, level: float) -> np.ndarray:
    """Per-channel noise sigma: ``level`` times the largest |value| in that channel."""
    values = np.asarray(values, dtype=float)
    return level * np.abs(values).max(axis=-1, keepdims=True) * np.ones_like(values)


def synthetic_scan(grid: NLCEGrid, c6: float, alpha: float, detunings=None,
                   noise: float = 0.0, rng: Optional[np.random.Generator] = None) -> CorrelatorScan:
    """Scan predicted by the grid at (c6, alpha), optionally with Gaussian noise.

    Noise sigma per channel is ``noise`` times that channel's largest
    magnitude; the sigma is stored as the error column.
    """
    detunings = grid.detunings if detunings is None else np.asarray(detunings, dtype=float)
    clean = GridModel(grid, detunings).predict(c6, alpha)
    meta = {"generator": "synthetic", "c6": c6, "alpha": alpha, "noise": noise,
            "grid_hash": grid.param_hash}
    if noise <= 0:
        return CorrelatorScan(detunings, *clean, metadata=meta)
    if rng is None:
        raise ValueError("noisy synthetic scans need an explicit rng")
    sigma = noise_scale(clean, noise)
    noisy = clean + rng.normal(size=clean.shape) * sigma
    return CorrelatorScan(detunings, noisy[0], noisy[1], noisy[2], sigma[0], sigma[1], sigma[2],
                          metadata=meta)
