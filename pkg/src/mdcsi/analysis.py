"""Post-processing of spectroscopic images: mean spectra, peaks, region maps,
and the TI = 0 polarity/scale corrections for inversion-recovery data."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.optimize
from numpy.typing import NDArray
from scipy.ndimage import maximum_filter

from .model import ConfigurationError, SpectralGrid, schedule_arrays
from .phantom import MeasuredDataset
from .solver import SpectroscopicImage

log = logging.getLogger(__name__)


class ScaleCorrectionError(ValueError):
    pass


@dataclass(frozen=True)
class SpectralRegion:
    label: str
    t1_range: tuple[float, float]
    t2_range: tuple[float, float]

    def __post_init__(self) -> None:
        for name, (lo, hi) in (("t1_range", self.t1_range), ("t2_range", self.t2_range)):
            if not lo < hi:
                raise ValueError(f"{name} needs min < max, got ({lo}, {hi})")

    def node_mask(self, grid: SpectralGrid) -> NDArray[np.bool_]:
        """Flat boolean mask of grid nodes inside the box; collapsed axes always match."""
        def axis(vals, lo, hi):
            if vals.size == 1:
                return np.ones(1, dtype=bool)
            return (vals >= lo) & (vals <= hi)
        a1 = axis(grid.t1_values, *self.t1_range)
        a2 = axis(grid.t2_values, *self.t2_range)
        return (a1[:, None] & a2[None, :]).ravel()


@dataclass
class Peak:
    t1: float
    t2: float
    height: float
    region: SpectralRegion
    source: str = "auto"


@dataclass
class PeakSet:
    peaks: list[Peak] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.peaks)

    def __iter__(self):
        return iter(self.peaks)

    @property
    def regions(self) -> list[SpectralRegion]:
        return [p.region for p in self.peaks]


def mean_spectrum(image: SpectroscopicImage, mask: NDArray | None = None) -> NDArray[np.float64]:
    """Average spectrum over voxels with mask == 1 (defaults to the image mask)."""
    if mask is None:
        mask = image.mask if image.mask is not None else np.ones(image.n_voxels)
    sel = np.asarray(mask).ravel() > 0
    if not np.any(sel):
        raise ValueError("mask is empty")
    return image.values[:, sel].mean(axis=1)


def _log_coords(grid: SpectralGrid) -> list[NDArray[np.float64]]:
    return [np.log10(grid.t1_values), np.log10(grid.t2_values)]


def _line_valley(spec2d: NDArray, a: tuple[int, int], b: tuple[int, int]) -> tuple[int, int]:
    n = max(abs(b[0] - a[0]), abs(b[1] - a[1]))
    steps = np.linspace(0.0, 1.0, n + 1)
    ii = np.rint(a[0] + steps * (b[0] - a[0])).astype(int)
    jj = np.rint(a[1] + steps * (b[1] - a[1])).astype(int)
    k = int(np.argmin(spec2d[ii, jj]))
    return int(ii[k]), int(jj[k])


def _walk_extent(profile: NDArray, start: int, step: int) -> int:
    """Last index reached from ``start`` while the profile keeps decreasing and stays positive."""
    k = start
    while 0 <= k + step < profile.size:
        nxt = profile[k + step]
        if nxt <= 0 or nxt > profile[k]:
            break
        k += step
    return k


def _peak_box(spec2d: NDArray, idx: tuple[int, int], others: list[tuple[int, int]],
              coords: list[NDArray]) -> list[list[int]]:
    """Index bounds [[lo1, hi1], [lo2, hi2]] of the region around one peak."""
    bounds = []
    for axis in (0, 1):
        profile = spec2d[:, idx[1]] if axis == 0 else spec2d[idx[0], :]
        lo = _walk_extent(profile, idx[axis], -1)
        hi = _walk_extent(profile, idx[axis], +1)
        bounds.append([lo, hi])
    for other in others:
        d = [abs(coords[ax][other[ax]] - coords[ax][idx[ax]]) for ax in (0, 1)]
        ax = int(np.argmax(d))
        if other[ax] == idx[ax]:
            continue
        valley = _line_valley(spec2d, idx, other)[ax]
        if other[ax] > idx[ax]:
            cut = valley if valley != other[ax] else other[ax] - 1
            # the valley node goes to the lower-index peak
            bounds[ax][1] = min(bounds[ax][1], max(cut, idx[ax]))
        else:
            cut = valley + 1 if valley != other[ax] else other[ax] + 1
            bounds[ax][0] = max(bounds[ax][0], min(cut, idx[ax]))
    return bounds


def _region_from_bounds(grid: SpectralGrid, bounds: list[list[int]], label: str) -> SpectralRegion:
    ranges = []
    for vals, (lo, hi) in zip((grid.t1_values, grid.t2_values), bounds):
        if vals.size == 1:
            ranges.append((vals[0] * 0.5, vals[0] * 2.0))
            continue
        # box edges sit halfway (in log space) to the neighboring nodes, clipped to the grid
        lo_v = vals[lo] if lo == 0 else np.sqrt(vals[lo] * vals[lo - 1])
        hi_v = vals[hi] if hi == vals.size - 1 else np.sqrt(vals[hi] * vals[hi + 1])
        ranges.append((float(lo_v), float(hi_v)))
    return SpectralRegion(label, ranges[0], ranges[1])


def detect_peaks(spectrum: NDArray[np.float64], grid: SpectralGrid, min_height_frac: float = 0.05,
                 min_separation: float = 0.1, exclude_edges: bool = False) -> PeakSet:
    """Local maxima (8-neighborhood) above ``min_height_frac * max``, pruned greedily
    by height so that kept peaks are at least ``min_separation`` decades apart.

    With ``exclude_edges`` a maximum on the first or last node of a grid axis is
    not reported: its true position may lie outside the grid, and in noisy fits
    such nodes mostly collect noise that only the extreme atoms can express.
    Excluded maxima still bound the regions of the reported peaks, so their
    mass is not attributed to a neighbor.
    """
    if not 0 < min_height_frac < 1:
        raise ValueError("min_height_frac must be in (0, 1)")
    spec2d = np.asarray(spectrum, dtype=np.float64).reshape(grid.shape)
    top = spec2d.max()
    if not top > 0:
        return PeakSet()
    is_max = spec2d == maximum_filter(spec2d, size=3, mode="constant", cval=-np.inf)
    keep = is_max & (spec2d >= min_height_frac * top) & (spec2d > 0)
    on_edge = np.zeros_like(keep)
    if exclude_edges:
        for axis, n in enumerate(spec2d.shape):
            if n > 2:
                edge = [slice(None), slice(None)]
                for end in (0, n - 1):
                    edge[axis] = end
                    on_edge[tuple(edge)] = True
    cand = np.argwhere(keep)
    order = np.argsort(-spec2d[cand[:, 0], cand[:, 1]], kind="stable")
    coords = _log_coords(grid)
    kept: list[tuple[int, int]] = []
    for k in order:
        i, j = map(int, cand[k])
        far = all(np.hypot(coords[0][i] - coords[0][a], coords[1][j] - coords[1][b]) >= min_separation
                  for a, b in kept)
        if far:
            kept.append((i, j))
    peaks = []
    for idx in kept:
        if on_edge[idx]:
            continue
        others = [o for o in kept if o != idx]
        bounds = _peak_box(spec2d, idx, others, coords)
        region = _region_from_bounds(grid, bounds, f"peak{len(peaks) + 1}")
        peaks.append(Peak(float(grid.t1_values[idx[0]]), float(grid.t2_values[idx[1]]),
                          float(spec2d[idx]), region))
    return PeakSet(peaks)


def user_peaks(regions: Sequence[SpectralRegion], spectrum: NDArray[np.float64],
               grid: SpectralGrid) -> PeakSet:
    """Peak table for user-supplied regions: the maximum of the spectrum inside each box."""
    peaks = []
    for region in regions:
        sel = region.node_mask(grid)
        if not np.any(sel):
            peaks.append(Peak(float("nan"), float("nan"), 0.0, region, "user"))
            continue
        q = np.flatnonzero(sel)[int(np.argmax(spectrum[sel]))]
        t1, t2 = grid.nodes()
        peaks.append(Peak(float(t1[q]), float(t2[q]), float(spectrum[q]), region, "user"))
    return PeakSet(peaks)


def integrate_region(image: SpectroscopicImage, region: SpectralRegion) -> NDArray[np.float64]:
    """Quadrature-weighted spectral integral over the region box, as a (height, width) map."""
    sel = region.node_mask(image.grid)
    if not np.any(sel):
        warnings.warn(f"region {region.label!r} does not intersect the grid", stacklevel=2)
        return np.zeros((image.height, image.width))
    w = image.grid.weights[sel]
    return (w @ image.values[sel]).reshape(image.height, image.width)


# -- TI = 0 handling -----------------------------------------------------------------

def _ti0_rows(ds: MeasuredDataset) -> NDArray[np.intp]:
    _, ti = schedule_arrays(ds.schedule)
    rows = np.flatnonzero(ti == 0)
    if rows.size == 0:
        raise ScaleCorrectionError("dataset has no TI = 0 encodings")
    return rows


def signed_ti0(ds: MeasuredDataset) -> MeasuredDataset:
    """Negate the TI = 0 rows (magnitude data acquired without inversion)."""
    rows = _ti0_rows(ds)
    data = ds.data.copy()
    data[rows] *= -1.0
    return replace(ds, data=data)


def _ir_model(p, ti):
    A, B, T1 = p
    return A - B * np.exp(-ti / T1)


def _ir_jac(p, ti):
    A, B, T1 = p
    e = np.exp(-ti / T1)
    return np.column_stack([np.ones_like(ti), -e, -B * ti / T1**2 * e])


def fit_inversion_recovery(ti: NDArray[np.float64], s: NDArray[np.float64],
                           max_iters: int = 100, rtol: float = 1e-8) -> tuple[float, float, float] | None:
    """Fit ``A - B exp(-ti / T1)``; returns None when the fit does not converge to
    a finite, positive-T1 solution."""
    ti = np.asarray(ti, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    # log-linear start: A from the longest TI, then log(A - s) ~ log(B) - ti / T1
    order = np.argsort(ti)
    A0 = s[order[-1]] + 0.05 * abs(s[order[-1]] - s[order[0]]) * np.sign(s[order[-1]] - s[order[0]] or 1)
    y = A0 - s
    ok = y > 0
    if ok.sum() >= 2 and np.ptp(ti[ok]) > 0:
        slope, icept = np.polyfit(ti[ok], np.log(y[ok]), 1)
        T10 = -1.0 / slope if slope < 0 else np.median(ti)
        B0 = np.exp(icept)
    else:
        T10, B0 = float(np.median(ti)), 2 * abs(A0)
    try:
        res = scipy.optimize.least_squares(
            lambda p: _ir_model(p, ti) - s, x0=[A0, B0, T10], jac=lambda p: _ir_jac(p, ti),
            method="lm", xtol=rtol, ftol=rtol, max_nfev=max_iters)
    except (ValueError, FloatingPointError):
        return None
    A, B, T1 = res.x
    if res.status <= 0 or not np.all(np.isfinite(res.x)) or not T1 > 0:
        return None
    return float(A), float(B), float(T1)


@dataclass
class ScaleReport:
    scale: float
    voxel_scales: NDArray[np.float64]  # NaN where excluded or outside the mask
    n_used: int
    n_excluded: int
    te_used: float
    method: str = "mean"


def scale_correct_ti0(ds: MeasuredDataset, method: str = "mean",
                      mask: NDArray | None = None) -> tuple[MeasuredDataset, ScaleReport]:
    """Estimate the TI = 0 scale mismatch from a per-voxel inversion-recovery fit.

    At the shortest echo time shared by TI = 0 and TI > 0 encodings, each masked
    voxel's TI > 0 samples are fit with ``A - B exp(-TI / T1)``; the synthesized
    ``A - B`` is compared against the measured TI = 0 value. The mean (or median)
    of the voxel ratios divides every TI = 0 entry. Expects signed data, i.e.
    after `signed_ti0` for magnitude acquisitions.
    """
    if method not in ("mean", "median"):
        raise ValueError("method must be 'mean' or 'median'")
    te, ti = schedule_arrays(ds.schedule)
    rows0 = _ti0_rows(ds)
    pos = np.flatnonzero(ti > 0)
    common = sorted(set(te[rows0]) & set(te[pos]))
    if not common:
        raise ScaleCorrectionError("no echo time is shared by TI = 0 and TI > 0 encodings")
    te_min = common[0]
    fit_rows = pos[te[pos] == te_min]
    if np.unique(ti[fit_rows]).size < 3:
        raise ScaleCorrectionError(
            "scale correction needs at least 3 distinct TI > 0 values at the shortest echo time")
    row0 = rows0[te[rows0] == te_min][0]
    sel = np.asarray(mask if mask is not None else ds.mask).ravel() > 0
    scales = np.full(ds.n_voxels, np.nan)
    excluded = 0
    for i in np.flatnonzero(sel):
        fit = fit_inversion_recovery(ti[fit_rows], ds.data[fit_rows, i])
        if fit is None:
            excluded += 1
            continue
        A, B, _ = fit
        synth = A - B
        ratio = ds.data[row0, i] / synth if synth != 0 else np.nan
        if not np.isfinite(ratio):
            excluded += 1
            continue
        scales[i] = ratio
    used = np.isfinite(scales)
    if excluded:
        warnings.warn(f"{excluded} voxel(s) excluded from the TI = 0 scale estimate", stacklevel=2)
    if not np.any(used):
        raise ScaleCorrectionError("every voxel was excluded from the scale estimate")
    scale = float(np.mean(scales[used]) if method == "mean" else np.median(scales[used]))
    data = ds.data.copy()
    data[rows0] /= scale
    out = ds.with_data(data, ti0_scale=scale)
    return out, ScaleReport(scale, scales, int(used.sum()), excluded, float(te_min), method)


def pearson(a: NDArray, b: NDArray, mask: NDArray | None = None) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if mask is not None:
        m = np.asarray(mask).ravel() > 0
        a, b = a[m], b[m]
    return float(np.corrcoef(a, b)[0, 1])
