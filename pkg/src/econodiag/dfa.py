"""Detrended fluctuation analysis and its moving-window exponent track.

The profile (cumulative sum of mean-removed values) is cut into
non-overlapping boxes of size n; a polynomial of order ``detrend_order`` is
least-squares fitted in every box and F(n) is the root of the grand mean of
squared residuals.  The scaling exponent alpha is the OLS slope of
ln F(n) against ln n: 0.5 for uncorrelated increments, 1.5 for a Brownian
path fed in directly.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .series import TimeSeries


class DfaError(ValueError):
    pass


@dataclass(frozen=True)
class DfaConfig:
    min_box: int = 4
    max_box_fraction: float = 0.25
    n_boxes: int = 16
    detrend_order: int = 1
    coverage: str = "both-ends"

    def __post_init__(self):
        if self.detrend_order < 0:
            raise DfaError("detrend_order must be >= 0")
        if self.min_box < self.detrend_order + 2:
            raise DfaError(f"min_box must be >= detrend_order + 2 = {self.detrend_order + 2}")
        if not 0 < self.max_box_fraction <= 0.5:
            raise DfaError("max_box_fraction must lie in (0, 0.5]")
        if self.n_boxes < 4:
            raise DfaError("n_boxes must be >= 4")
        if self.coverage not in ("forward", "both-ends"):
            raise DfaError(f"unknown coverage {self.coverage!r}")

    def box_sizes(self, n_points: int) -> np.ndarray:
        """Log-spaced integer box sizes between max(min_box, 4) and the cap."""
        lo = max(self.min_box, 4)
        hi = int(math.floor(self.max_box_fraction * n_points))
        if hi < lo:
            raise DfaError(f"no admissible box size for {n_points} points (min {lo}, max {hi})")
        sizes = np.unique(np.round(np.geomspace(lo, hi, self.n_boxes)).astype(np.int64))
        return sizes


@dataclass
class DfaResult:
    box_sizes: np.ndarray
    fluctuations: np.ndarray
    alpha: Optional[float] = None
    alpha_stderr: Optional[float] = None
    fit_range: Optional[tuple] = None
    excluded_zero: int = 0

    @property
    def coherence(self) -> Optional[float]:
        """Distance |alpha - 1/2| from uncorrelated behaviour."""
        return None if self.alpha is None else abs(self.alpha - 0.5)

    def to_dict(self) -> dict:
        return {
            "box_sizes": [int(n) for n in self.box_sizes],
            "fluctuations": [float(f) for f in self.fluctuations],
            "alpha": self.alpha,
            "alpha_stderr": self.alpha_stderr,
            "fit_range": None if self.fit_range is None else [int(x) for x in self.fit_range],
            "excluded_zero": self.excluded_zero,
            "coherence": self.coherence,
        }


@dataclass
class AlphaSeries:
    window_length: int
    step: int
    entries: list = field(default_factory=list)  # (end_time, alpha | None, stderr | None)

    def alphas(self) -> np.ndarray:
        return np.array([np.nan if a is None else a for _, a, _ in self.entries])

    def end_times(self) -> np.ndarray:
        return np.array([t for t, _, _ in self.entries])

    def to_csv(self) -> str:
        lines = ["end_time,alpha,stderr,coherence"]
        for t, a, se in self.entries:
            if a is None:
                lines.append(f"{t},,,")
            else:
                lines.append(f"{t},{a!r},{se!r},{abs(a - 0.5)!r}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({
            "window_length": self.window_length,
            "step": self.step,
            "entries": [{"end_time": t, "alpha": a, "stderr": se} for t, a, se in self.entries],
        }, indent=2)


def build_profile(s) -> np.ndarray:
    x = np.asarray(s.values if isinstance(s, TimeSeries) else s, dtype=float)
    if len(x) < 4:
        raise DfaError("profile needs at least 4 observations")
    return np.cumsum(x - x.mean())


def _orthonormal_basis(n: int, order: int) -> np.ndarray:
    # centred/scaled abscissa keeps the Vandermonde well conditioned
    k = np.linspace(-1.0, 1.0, n)
    vander = np.vander(k, order + 1, increasing=True)
    q, _ = np.linalg.qr(vander)
    return q


def _box_msr(boxes: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Mean squared residual of each row after projecting out span(q)."""
    resid = boxes - (boxes @ q) @ q.T
    return np.mean(resid * resid, axis=1)


def fluctuation_function(profile, cfg: DfaConfig = DfaConfig(), box_sizes=None) -> DfaResult:
    y = np.asarray(profile, dtype=float)
    n_pts = len(y)
    sizes = cfg.box_sizes(n_pts) if box_sizes is None else np.asarray(box_sizes, dtype=np.int64)
    sizes = sizes[(sizes >= cfg.detrend_order + 2) & (2 * sizes <= n_pts)]
    if len(sizes) == 0:
        raise DfaError(f"no admissible box size for profile of length {n_pts}")
    fluct = np.empty(len(sizes))
    for i, n in enumerate(sizes):
        n = int(n)
        nb = n_pts // n
        q = _orthonormal_basis(n, cfg.detrend_order)
        msr = _box_msr(y[: nb * n].reshape(nb, n), q)
        f2 = msr.mean()
        if cfg.coverage == "both-ends":
            msr_tail = _box_msr(y[n_pts - nb * n:].reshape(nb, n), q)
            f2 = 0.5 * (f2 + msr_tail.mean())
        fluct[i] = math.sqrt(max(f2, 0.0))
    return DfaResult(box_sizes=sizes, fluctuations=fluct)


def _ols_slope(x: np.ndarray, y: np.ndarray):
    """Slope, its standard error and intercept of y on x."""
    n = len(x)
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = float(dx @ dx)
    slope = float(dx @ (y - ym)) / sxx
    intercept = ym - slope * xm
    resid = y - intercept - slope * x
    s2 = float(resid @ resid) / (n - 2) if n > 2 else 0.0
    return slope, math.sqrt(s2 / sxx), intercept


def fit_exponent(r: DfaResult, fit_range: Optional[tuple] = None) -> DfaResult:
    n = np.asarray(r.box_sizes)
    f = np.asarray(r.fluctuations)
    in_range = np.ones(len(n), dtype=bool)
    if fit_range is not None:
        in_range = (n >= fit_range[0]) & (n <= fit_range[1])
    positive = f > 0
    usable = in_range & positive
    if usable.sum() < 4:
        raise DfaError(f"need >= 4 box sizes with F(n) > 0, have {int(usable.sum())}")
    slope, se, _ = _ols_slope(np.log(n[usable].astype(float)), np.log(f[usable]))
    return replace(
        r,
        alpha=slope,
        alpha_stderr=se,
        fit_range=(int(n[usable].min()), int(n[usable].max())),
        excluded_zero=int((in_range & ~positive).sum()),
    )


def dfa(s, cfg: DfaConfig = DfaConfig(), fit_range=None) -> DfaResult:
    """Profile, fluctuation function and exponent in one call."""
    return fit_exponent(fluctuation_function(build_profile(s), cfg), fit_range)


def moving_dfa(s: TimeSeries, window_length: int, step: int, cfg: DfaConfig = DfaConfig(),
               jobs: int = 1) -> AlphaSeries:
    """Right-aligned sliding-window DFA.

    Each entry is stamped with the time of the window's last observation.
    Windows whose exponent cannot be fitted are kept as ``(t, None, None)``.
    """
    n = len(s)
    if window_length > n:
        raise DfaError(f"window_length {window_length} exceeds series length {n}")
    if window_length < 4 * cfg.min_box:
        raise DfaError(f"window_length must be >= 4 * min_box = {4 * cfg.min_box}")
    if step < 1:
        raise DfaError("step must be >= 1")
    ends = list(range(window_length - 1, n, step))
    values = s.values

    def one(end):
        seg = values[end - window_length + 1: end + 1]
        try:
            res = dfa(seg, cfg)
        except DfaError:
            return (_as_time(s.times[end]), None, None)
        return (_as_time(s.times[end]), res.alpha, res.alpha_stderr)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(one, ends))
    else:
        entries = [one(e) for e in ends]
    return AlphaSeries(window_length=window_length, step=step, entries=entries)


def _as_time(t):
    return int(t) if float(t).is_integer() else float(t)


def config_dict(cfg: DfaConfig) -> dict:
    return asdict(cfg)
