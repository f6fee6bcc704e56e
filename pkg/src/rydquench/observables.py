"""Connected spin correlators, detection modeling, and snapshot statistics.

Spin convention: a Rydberg atom is |up> (Sz = +1/2). Snapshots record
detected ground-state atoms, ``g = 1`` for an imaged atom, so that in the
ideal case ``Sz = 1/2 - g`` and ``C(r) = 4 Cov(g_i, g_j)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import curve_fit

from .errors import CapacityError
from .evolve import MAX_ED_SITES, magnetizations, zz_matrix


@dataclass
class CorrelationMap:
    """C(dx, dy) on the window |dx| <= wx, |dy| <= wy.

    ``values[dx + wx, dy + wy]`` holds the correlator; ``counts`` the
    number of site pairs (state mode) and ``n_samples`` the number of shots
    (snapshot mode, 0 otherwise).
    """

    window: Tuple[int, int]
    values: np.ndarray
    errors: Optional[np.ndarray] = None
    counts: Optional[np.ndarray] = None
    n_samples: int = 0
    metadata: Dict[str, object] = field(default_factory=dict)

    def __getitem__(self, d):
        dx, dy = d
        wx, wy = self.window
        if abs(dx) > wx or abs(dy) > wy:
            raise KeyError(f"displacement {d} outside window {self.window}")
        return float(self.values[dx + wx, dy + wy])

    def error(self, dx, dy) -> float:
        if self.errors is None:
            return float("nan")
        wx, wy = self.window
        return float(self.errors[dx + wx, dy + wy])

    def displacements(self):
        wx, wy = self.window
        return [(dx, dy) for dx in range(-wx, wx + 1) for dy in range(-wy, wy + 1)]

    def valid(self, dx, dy) -> bool:
        if self.counts is None:
            return True
        wx, wy = self.window
        return self.counts[dx + wx, dy + wy] > 0

    def matrix(self) -> np.ndarray:
        """Values as an image indexed [dy, dx] for plotting."""
        return self.values.T

    def to_csv(self, path_or_buf, header: Optional[dict] = None):
        own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
        fh = open(path_or_buf, "w", newline="") if own else path_or_buf
        try:
            for k, v in (header or {}).items():
                fh.write(f"# {k}: {v}\n")
            w = csv.writer(fh)
            w.writerow(["dx", "dy", "value", "error", "n"])
            wx, wy = self.window
            for dx, dy in self.displacements():
                if not self.valid(dx, dy):
                    continue
                n = self.n_samples if self.n_samples else (
                    int(self.counts[dx + wx, dy + wy]) if self.counts is not None else 0)
                w.writerow([dx, dy, f"{self[dx, dy]:.12g}", f"{self.error(dx, dy):.6g}", n])
        finally:
            if own:
                fh.close()

    @classmethod
    def from_csv(cls, path) -> "CorrelationMap":
        rows = [r for r in csv.reader(l for l in open(path) if not l.startswith("#"))][1:]
        dx = np.array([int(r[0]) for r in rows])
        dy = np.array([int(r[1]) for r in rows])
        wx, wy = int(np.abs(dx).max()), int(np.abs(dy).max())
        vals = np.zeros((2 * wx + 1, 2 * wy + 1))
        errs = np.full_like(vals, np.nan)
        counts = np.zeros(vals.shape, dtype=int)
        for r, x, y in zip(rows, dx, dy):
            vals[x + wx, y + wy] = float(r[2])
            errs[x + wx, y + wy] = float(r[3])
            counts[x + wx, y + wy] = max(int(r[4]), 1)
        return cls((wx, wy), vals, errs, counts, 0)


def _accumulate(sites, cmat, window, use=None):
    wx, wy = window
    sums = np.zeros((2 * wx + 1, 2 * wy + 1))
    counts = np.zeros(sums.shape, dtype=int)
    xy = np.asarray(sites)
    dx = xy[None, :, 0] - xy[:, None, 0]
    dy = xy[None, :, 1] - xy[:, None, 1]
    keep = (np.abs(dx) <= wx) & (np.abs(dy) <= wy)
    if use is not None:
        keep &= use
    np.add.at(sums, (dx[keep] + wx, dy[keep] + wy), cmat[keep])
    np.add.at(counts, (dx[keep] + wx, dy[keep] + wy), 1)
    vals = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return vals, counts


def connected_matrix(psi: np.ndarray) -> np.ndarray:
    """4(<Sz_i Sz_j> - <Sz_i><Sz_j>); the diagonal equals 1 - 4 <Sz_i>**2."""
    z = magnetizations(psi)
    return 4.0 * (zz_matrix(psi) - z[..., :, None] * z[..., None, :])


def correlators_from_state(psi: np.ndarray, sites: Sequence[Tuple[int, int]],
                           site_pairs: Optional[Sequence[Tuple[int, int]]] = None,
                           window: Optional[Tuple[int, int]] = None) -> CorrelationMap:
    """Site-averaged connected correlators of a state on the given sites.

    ``site_pairs`` restricts the average to those (i, j) index pairs; both
    orderings are used so the map is symmetric under r -> -r.
    """
    cmat = connected_matrix(psi)
    xy = np.asarray(sites)
    if window is None:
        ext = xy.max(axis=0) - xy.min(axis=0)
        window = (int(ext[0]), int(ext[1]))
    use = None
    if site_pairs is not None:
        use = np.zeros(cmat.shape, dtype=bool)
        for i, j in site_pairs:
            use[i, j] = use[j, i] = True
    vals, counts = _accumulate(sites, cmat, window, use)
    z = magnetizations(psi)
    return CorrelationMap(window, vals, None, counts, 0,
                          {"mean_sz": float(np.mean(z)), "mean_n": float(np.mean(z) + 0.5)})


@dataclass
class SnapshotSet:
    """Binary ground-atom images, shape (n_shots, ny, nx), with an roi mask."""

    shots: np.ndarray
    mask: np.ndarray
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.shots = np.asarray(self.shots, dtype=np.uint8)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.shots.ndim != 3 or self.shots.shape[1:] != self.mask.shape:
            raise ValueError("shots must be (n_shots, ny, nx) matching the mask")

    @property
    def n_shots(self) -> int:
        return self.shots.shape[0]

    @property
    def shape(self):
        return self.mask.shape

    def to_csv(self, path, header: Optional[dict] = None):
        ny, nx = self.mask.shape
        with open(path, "w", newline="") as fh:
            fh.write("# format: snapshot-set v1\n")
            fh.write(f"# nx: {nx}\n# ny: {ny}\n")
            fh.write("# mask: " + "".join("1" if m else "0" for m in self.mask.ravel()) + "\n")
            for k, v in {**self.metadata, **(header or {})}.items():
                fh.write(f"# {k}: {v}\n")
            w = csv.writer(fh)
            w.writerow([f"s{i}" for i in range(nx * ny)])
            for shot in self.shots.reshape(self.n_shots, -1):
                w.writerow(shot.tolist())

    @classmethod
    def from_csv(cls, path) -> "SnapshotSet":
        meta, rows = {}, []
        with open(path) as fh:
            for line in fh:
                if line.startswith("#"):
                    k, _, v = line[1:].partition(":")
                    meta[k.strip()] = v.strip()
                elif line.strip() and not line.startswith("s0"):
                    rows.append([int(x) for x in line.strip().split(",")])
        try:
            nx, ny = int(meta.pop("nx")), int(meta.pop("ny"))
        except KeyError as exc:
            raise ValueError(f"snapshot file {path} lacks dimension header") from exc
        mask_s = meta.pop("mask", "1" * nx * ny)
        meta.pop("format", None)
        mask = np.array([c == "1" for c in mask_s]).reshape(ny, nx)
        shots = np.array(rows, dtype=np.uint8).reshape(-1, ny, nx)
        return cls(shots, mask, meta)


def correlators_from_snapshots(snaps: SnapshotSet, window: Tuple[int, int] = (3, 3)) -> CorrelationMap:
    """Connected correlators of detected occupations, in spin normalization.

    For each displacement the per-shot average over in-roi pairs of
    (g_i - <g_i>)(g_j - <g_j>) is formed; its shot mean times 4 is the
    correlator (plug-in covariance, bias O(1/S)) and its shot-to-shot
    scatter gives the standard error.
    """
    S = snaps.n_shots
    if S < 2:
        raise ValueError("need at least two shots")
    mask = snaps.mask
    if not mask.any():
        raise ValueError("region of interest is empty")
    g = snaps.shots.astype(float)
    dg = g - g.mean(axis=0)
    ny, nx = mask.shape
    wx, wy = window
    vals = np.zeros((2 * wx + 1, 2 * wy + 1))
    errs = np.full(vals.shape, np.nan)
    counts = np.zeros(vals.shape, dtype=int)
    for dx in range(-wx, wx + 1):
        for dy in range(-wy, wy + 1):
            ya, yb = max(0, -dy), min(ny, ny - dy)
            xa, xb = max(0, -dx), min(nx, nx - dx)
            if ya >= yb or xa >= xb:
                continue
            m = mask[ya:yb, xa:xb] & mask[ya + dy:yb + dy, xa + dx:xb + dx]
            npairs = int(m.sum())
            if npairs == 0:
                continue
            prod = dg[:, ya:yb, xa:xb] * dg[:, ya + dy:yb + dy, xa + dx:xb + dx]
            per_shot = prod[:, m].mean(axis=1)
            vals[dx + wx, dy + wy] = 4.0 * per_shot.mean()
            errs[dx + wx, dy + wy] = 4.0 * per_shot.std(ddof=1) / math.sqrt(S)
            counts[dx + wx, dy + wy] = npairs
    mean_g = float(g[:, mask].mean())
    return CorrelationMap(window, vals, errs, counts, S,
                          {"mean_ground": mean_g, "mean_n": 1.0 - mean_g})


def apply_detection_scaling(cmap: CorrelationMap, mean_n: float, alpha: float) -> CorrelationMap:
    """Model correlators as seen with Rydberg detection efficiency ``alpha``.

    On-site: 4(alpha <n> - alpha**2 <n>**2) with <n> the Rydberg
    occupation; all other displacements scale by alpha**2.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    wx, wy = cmap.window
    vals = cmap.values * alpha ** 2
    vals[wx, wy] = 4.0 * (alpha * mean_n - (alpha * mean_n) ** 2)
    errs = None if cmap.errors is None else cmap.errors * alpha ** 2
    meta = dict(cmap.metadata, alpha=alpha)
    return CorrelationMap(cmap.window, vals, errs, cmap.counts, cmap.n_samples, meta)


def scale_correlators(c00, c_off, mean_n, alpha):
    """Array form of apply_detection_scaling for (C00, off-site C) values."""
    mean_n = np.asarray(mean_n)
    return 4.0 * (alpha * mean_n - (alpha * mean_n) ** 2), np.asarray(c_off) * alpha ** 2


@dataclass
class CorrelationLengthFit:
    xi: float
    amplitude: float
    xi_error: float
    amplitude_error: float
    success: bool
    message: str = ""
    n_points: int = 0
    r_min: float = 1.0
    r_max: float = 4.0


def _exp_model(r, amp, xi):
    return amp * np.exp(-r / xi)


def fit_correlation_length(cmap: CorrelationMap, r_min: float = 1.0, r_max: float = 4.0,
                           spacing: Tuple[float, float] = (1.0, 1.0)) -> CorrelationLengthFit:
    """Fit |(-1)**(dx+dy) C| to A exp(-r / xi).

    Distances are Euclidean, in units of a_l; r = 0 is excluded.
    """
    if r_min < 1:
        raise ValueError("r_min must be >= 1")
    rs, ys, es = [], [], []
    for dx, dy in cmap.displacements():
        if not cmap.valid(dx, dy):
            continue
        r = math.hypot(dx * spacing[0], dy * spacing[1])
        if r_min - 1e-9 <= r <= r_max + 1e-9:
            rs.append(r)
            ys.append(abs(cmap[dx, dy]))  # the staggering sign drops out of the magnitude
            es.append(cmap.error(dx, dy))
    rs, ys, es = map(np.asarray, (rs, ys, es))
    base = dict(n_points=len(rs), r_min=r_min, r_max=r_max)
    nan = float("nan")
    if len(np.unique(np.round(rs, 9))) < 3:
        return CorrelationLengthFit(nan, nan, nan, nan, False, "fewer than 3 distinct distances", **base)
    pos = ys > 0
    if pos.sum() < 2:
        return CorrelationLengthFit(nan, nan, nan, nan, False, "no correlation signal", **base)
    slope, icpt = np.polyfit(rs[pos], np.log(ys[pos]), 1)
    if slope >= -1e-6:
        return CorrelationLengthFit(nan, nan, nan, nan, False, "correlations do not decay", **base)
    sigma = es if np.all(np.isfinite(es) & (es > 0)) else None
    try:
        popt, pcov = curve_fit(_exp_model, rs, ys, p0=(math.exp(icpt), -1.0 / slope),
                               sigma=sigma, absolute_sigma=sigma is not None, maxfev=10000)
    except (RuntimeError, ValueError) as exc:
        return CorrelationLengthFit(nan, nan, nan, nan, False, f"fit failed: {exc}", **base)
    amp, xi = popt
    perr = np.sqrt(np.abs(np.diag(pcov))) if np.all(np.isfinite(pcov)) else np.array([nan, nan])
    if not (0 < xi < 100 * r_max):
        return CorrelationLengthFit(amp, xi, perr[1], perr[0], False, "non-decaying fit", **base)
    return CorrelationLengthFit(float(xi), float(amp), float(perr[1]), float(perr[0]), True, "ok", **base)


@dataclass
class SubsystemStatistics:
    width: int
    height: int
    probabilities: np.ndarray
    n_windows: int
    classes: Dict[str, float]
    enhancement: float

    def to_csv(self, path, header: Optional[dict] = None):
        with open(path, "w", newline="") as fh:
            for k, v in (header or {}).items():
                fh.write(f"# {k}: {v}\n")
            w = csv.writer(fh)
            w.writerow(["config", "pattern", "probability"])
            nb = self.width * self.height
            for c, p in enumerate(self.probabilities):
                if p > 0:
                    w.writerow([c, format(c, f"0{nb}b")[::-1], f"{p:.12g}"])


def afm_patterns(w: int, h: int) -> Tuple[int, int]:
    """Config indices of the two checkerboards; bit k is window cell k, row-major."""
    a = sum(1 << (y * w + x) for y in range(h) for x in range(w) if (x + y) % 2 == 0)
    return a, (1 << (w * h)) - 1 - a


def subsystem_statistics(snaps: SnapshotSet, sub_w: int = 3, sub_h: int = 3) -> SubsystemStatistics:
    """Histogram of w-by-h ground-atom patterns over all in-roi window placements.

    Class probabilities: two antiferromagnetic patterns, all-ground, exactly
    one Rydberg (missing atom), and everything else. The enhancement is
    P(afm) relative to the uniform value 2 / 2**(w h).
    """
    ny, nx = snaps.mask.shape
    if sub_w > nx or sub_h > ny:
        raise ValueError("sub-window larger than the image")
    nb = sub_w * sub_h
    weights = (1 << np.arange(nb, dtype=np.int64)).reshape(sub_h, sub_w)
    counts = np.zeros(2 ** nb, dtype=np.int64)
    n_win = 0
    for y0 in range(ny - sub_h + 1):
        for x0 in range(nx - sub_w + 1):
            if not snaps.mask[y0:y0 + sub_h, x0:x0 + sub_w].all():
                continue
            block = snaps.shots[:, y0:y0 + sub_h, x0:x0 + sub_w].astype(np.int64)
            idx = (block * weights).sum(axis=(1, 2))
            counts += np.bincount(idx, minlength=2 ** nb)
            n_win += 1
    if n_win == 0:
        raise ValueError("no sub-window fits inside the region of interest")
    p = counts / counts.sum()
    full = 2 ** nb - 1
    a, b = afm_patterns(sub_w, sub_h)
    singles = [full ^ (1 << k) for k in range(nb)]
    classes = {
        "afm": float(p[a] + p[b]),
        "all_ground": float(p[full]),
        "single_rydberg": float(p[singles].sum()),
    }
    classes["other"] = float(1.0 - sum(classes.values()))
    enhancement = classes["afm"] / (2.0 / 2 ** nb)
    return SubsystemStatistics(sub_w, sub_h, p, n_win, classes, enhancement)


@dataclass(frozen=True)
class Detection:
    rydberg_removal_eff: float = 1.0
    filling: float = 1.0
    ground_detection_eff: float = 1.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{k} must be a probability, got {v}")


def sample_snapshots(psi: np.ndarray, n_shots: int, shape: Tuple[int, int],
                     detection: Detection = Detection(), rng=None,
                     mask: Optional[np.ndarray] = None) -> SnapshotSet:
    """Projective Sz measurements of ``psi`` imaged through the detection model.

    ``shape`` is (ny, nx); basis bit ``iy * nx + ix`` is site (ix, iy).
    Rydberg atoms survive imaging with probability 1 - removal efficiency;
    a site is empty with probability 1 - filling.
    """
    ny, nx = shape
    n = nx * ny
    if n > MAX_ED_SITES or psi.shape[-1] != 2 ** n:
        raise CapacityError(f"state of dimension {psi.shape[-1]} does not fit a {nx}x{ny} grid "
                            f"of at most {MAX_ED_SITES} sites")
    rng = np.random.default_rng(rng)
    p = np.abs(psi) ** 2
    p = p / p.sum()
    configs = rng.choice(p.size, size=n_shots, p=p)
    up = ((configs[:, None] >> np.arange(n)) & 1).astype(bool)
    filled = rng.random((n_shots, n)) < detection.filling
    ground_seen = rng.random((n_shots, n)) < detection.ground_detection_eff
    rydberg_left = rng.random((n_shots, n)) >= detection.rydberg_removal_eff
    g = filled & np.where(up, rydberg_left, ground_seen)
    if mask is None:
        mask = np.ones((ny, nx), dtype=bool)
    return SnapshotSet(g.reshape(n_shots, ny, nx).astype(np.uint8), mask,
                       {"detection": repr(detection)})
