"""Volume comparison metrics and box-plot summaries."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DegenerateInput, InvalidArgument

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _pair(estimate, label):
    x = np.asarray(estimate, dtype=float)
    y = np.asarray(label, dtype=float)
    if x.shape != y.shape:
        raise InvalidArgument(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def rmse(estimate, label):
    x, y = _pair(estimate, label)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def pearson(estimate, label):
    x, y = _pair(estimate, label)
    x = x.ravel() - x.mean()
    y = y.ravel() - y.mean()
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise DegenerateInput("correlation of a constant volume is undefined")
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2
    w = np.exp(-0.5 * (r / sigma) ** 2)
    return w / w.sum()


def _local_mean(v, windows):
    for axis, w in enumerate(windows):
        r = w.size // 2
        v = correlate1d(v, w, axis=axis, mode="constant")
        sl = [slice(None)] * v.ndim
        sl[axis] = slice(r, v.shape[axis] - r)
        v = v[tuple(sl)]
    return v


def ssim(estimate, label, *, window=SSIM_WINDOW, sigma=SSIM_SIGMA, data_range="label"):
    """Mean structural similarity over all fully contained Gaussian windows.

    ``data_range`` is ``"label"`` (range of ``label``), ``"joint"`` (range of
    both volumes, which makes the index symmetric) or a number.  A zero range
    falls back to 1.  Axes shorter than ``window`` use the largest odd window
    that fits.
    """
    x, y = _pair(estimate, label)
    if isinstance(data_range, str):
        ref = y if data_range == "label" else np.concatenate([x.ravel(), y.ravel()])
        if data_range not in ("label", "joint"):
            raise InvalidArgument(f"unknown data range mode {data_range!r}")
        L = float(ref.max() - ref.min())
    else:
        L = float(data_range)
    if L <= 0:
        L = 1.0
    windows = []
    for n in x.shape:
        size = min(window, n if n % 2 else n - 1)
        windows.append(gaussian_window(size, sigma))
    mx, my = _local_mean(x, windows), _local_mean(y, windows)
    sxx = _local_mean(x * x, windows) - mx * mx
    syy = _local_mean(y * y, windows) - my * my
    sxy = _local_mean(x * y, windows) - mx * my
    c1, c2 = (K1 * L) ** 2, (K2 * L) ** 2
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


def cnr(estimate, label):
    """Contrast-to-noise ratio of ``estimate`` between the label's nonzero region and the rest.

    Region weights are voxel-count fractions and variances use the ``n - 1``
    divisor.  Zero contrast gives 0; if both variances vanish with nonzero
    contrast the result is NaN and a warning is issued.
    """
    x, y = _pair(estimate, label)
    x, y = x.ravel(), y.ravel()
    roi = y != 0
    n_roi, n_back = int(roi.sum()), int((~roi).sum())
    if n_roi < 2 or n_back < 2:
        raise InvalidArgument("need at least two ROI and two background voxels")
    a_roi, a_back = n_roi / y.size, n_back / y.size
    num = x[roi].mean() - x[~roi].mean()
    den = math.sqrt(a_roi * x[roi].var(ddof=1) + a_back * x[~roi].var(ddof=1))
    if num == 0:
        return 0.0
    if den == 0:
        warnings.warn("CNR undefined: both regions have zero variance", RuntimeWarning)
        return float("nan")
    return float(num / den)


@dataclass
class MetricsReport:
    rmse: float
    pearson: float
    ssim: float
    cnr: float
    estimate_id: str = ""
    label_id: str = ""

    def to_dict(self):
        return asdict(self)


def evaluate_pair(estimate, label, estimate_id="", label_id="", data_range="label"):
    """All four metrics; Pearson of a constant estimate is reported as 0."""
    try:
        r = pearson(estimate, label)
    except DegenerateInput:
        r = 0.0
    return MetricsReport(rmse(estimate, label), r, ssim(estimate, label, data_range=data_range),
                         cnr(estimate, label), estimate_id, label_id)


def box_stats(values):
    """Median, quartiles, 1.5 IQR whiskers and outliers of a sample."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise InvalidArgument("no finite values")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo) & (v <= hi)]
    return {
        "median": float(med),
        "q1": float(q1),
        "q3": float(q3),
        "whisker_low": float(inside.min()),
        "whisker_high": float(inside.max()),
        "outliers": sorted(float(x) for x in v[(v < lo) | (v > hi)]),
        "n": int(v.size),
    }


def batch_evaluate(pairs, data_range="label"):
    """Box-plot statistics per metric.

    ``pairs`` holds ``(estimate, label)`` tuples or ready :class:`MetricsReport`
    objects.  Returns ``(summary, reports)``.
    """
    reports = []
    for p in pairs:
        reports.append(p if isinstance(p, MetricsReport) else evaluate_pair(*p, data_range=data_range))
    if not reports:
        raise InvalidArgument("nothing to evaluate")
    summary = {}
    for k in ("rmse", "pearson", "ssim", "cnr"):
        values = np.array([getattr(r, k) for r in reports], dtype=float)
        if np.isfinite(values).any():
            summary[k] = box_stats(values)
        else:
            # e.g. CNR of piecewise-constant estimates everywhere
            summary[k] = {"median": math.nan, "q1": math.nan, "q3": math.nan,
                          "whisker_low": math.nan, "whisker_high": math.nan,
                          "outliers": [], "n": 0}
    return summary, reports
