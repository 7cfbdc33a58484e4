"""Log-periodic rupture-point models and their fitting.

Two model families share one interface::

    power:  y = A + B * x**(-m) * [1 + C cos(w ln x + phi)]
    log:    y = A + B * ln x    * [1 + C cos(w ln x + phi)]

with ``x = (t_c - t) / (t_c - origin)``.  ``origin`` is the time just before
the first fitted observation, so the first observation sits at local time 1.

For fixed (t_c, w, m) the model is linear in (A, B, B C cos phi,
-B C sin phi), so every fit here is a grid over at most three nonlinear
parameters with an exact linear solve per cell, optionally followed by a
bounded local polish of the nonlinear parameters (variable projection).

The rupture protocol fits the divergence and the oscillations separately:

1. envelope: ``y = A + B f(x)`` over the t_c (x m) grid;
2. oscillation: the normalised residual ``(y - A - B f) / (B f)`` is fitted
   by ``C cos(w ln x' + phi)`` with its own critical time in ``x'``;
3. the two critical times must agree within ``k`` combined standard errors.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.optimize import least_squares

from .series import TimeSeries

logger = logging.getLogger(__name__)

VARIANTS = ("power", "log")


class FitError(ValueError):
    """Raised when a fit cannot be attempted or every grid cell is degenerate."""


@dataclass(frozen=True)
class LpplParams:
    variant: str
    A: float
    B: float
    C: float
    w: Optional[float]
    phi: Optional[float]
    t_c: float
    m: Optional[float] = None
    origin: float = 0.0
    # -1: x**(-m), divergent as printed; +1: x**(+m), the bounded literature form
    exponent_sign: int = -1
    # oscillation factor 1 + C (w ln x + phi) instead of 1 + C cos(w ln x + phi)
    linear_lpo: bool = False

    def validate(self, w_band=None):
        if self.variant not in VARIANTS:
            raise FitError(f"unknown variant {self.variant!r}")
        if self.variant == "power":
            if self.m is None or not 0 < self.m <= 1:
                raise FitError("power variant needs m in (0, 1]")
        elif self.m is not None:
            raise FitError("log variant takes no exponent m")
        if self.exponent_sign not in (-1, 1):
            raise FitError("exponent_sign must be -1 or +1")
        if not self.t_c > self.origin:
            raise FitError("t_c must lie after the origin")
        if not self.linear_lpo and abs(self.C) >= 1:
            raise FitError(f"|C| = {abs(self.C)} must be < 1")
        if self.C != 0 and not self.linear_lpo:
            if self.w is None or not self.w > 0 or self.phi is None:
                raise FitError("oscillating model needs w > 0 and phi")
            if w_band is not None and not w_band[0] <= self.w <= w_band[1]:
                raise FitError(f"w = {self.w} outside band {w_band}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FitConfig:
    """Search grids and protocol thresholds; offsets are in observations."""

    tc_min_offset: float = 1.0
    tc_max_offset: Optional[float] = None  # None: half the window length
    tc_count: int = 200
    w_band: tuple = (2.0, 40.0)
    w_count: int = 120
    m_band: tuple = (0.1, 1.0)
    m_count: int = 19
    refine: bool = True
    uncertainty: str = "profile"
    min_obs: int = 30
    k: float = 2.0
    c_significance: float = 3.0
    # raise the C threshold for the number of grid cells searched
    look_elsewhere: bool = True
    exponent_sign: int = -1
    linear_lpo: bool = False
    osc_floor: float = 0.05
    osc_offset: bool = True
    residual_model: str = "ar1"
    warn_precision: float = 10.0
    warn_horizon: float = 60.0
    jobs: int = 1

    def __post_init__(self):
        if self.tc_count < 1 or self.w_count < 1 or self.m_count < 1:
            raise FitError("grids must be non-empty")
        if self.tc_min_offset <= 0:
            raise FitError("tc_min_offset must be positive")
        if self.tc_max_offset is not None and self.tc_max_offset < self.tc_min_offset:
            raise FitError("tc offsets out of order")
        if not 0 < self.w_band[0] <= self.w_band[1]:
            raise FitError("w_band must be positive and ordered")
        if not 0 < self.m_band[0] <= self.m_band[1] <= 1:
            raise FitError("m_band must be ordered within (0, 1]")
        if self.uncertainty not in ("profile", "jacobian"):
            raise FitError("uncertainty must be 'profile' or 'jacobian'")
        if self.exponent_sign not in (-1, 1):
            raise FitError("exponent_sign must be -1 or +1")
        if self.residual_model not in ("ar1", "white"):
            raise FitError("residual_model must be 'ar1' or 'white'")
        if self.min_obs < 5:
            raise FitError("min_obs must be >= 5")

    def tc_grid(self, n: int) -> np.ndarray:
        hi = 0.5 * n if self.tc_max_offset is None else self.tc_max_offset
        hi = max(hi, self.tc_min_offset)
        return n + np.linspace(self.tc_min_offset, hi, self.tc_count)

    def w_grid(self) -> np.ndarray:
        return np.linspace(self.w_band[0], self.w_band[1], self.w_count)

    def m_grid(self) -> np.ndarray:
        return np.linspace(self.m_band[0], self.m_band[1], self.m_count)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["w_band"] = list(self.w_band)
        d["m_band"] = list(self.m_band)
        return d


@dataclass
class FitReport:
    params: LpplParams
    rss: float
    sigma: float
    stderr: dict
    converged: bool
    n_obs: int
    tc_stderr: float
    stage: str = "full"
    window: tuple = (None, None)
    c_significant: Optional[bool] = None
    c_threshold: Optional[float] = None
    polished: bool = False
    grid_cell: dict = field(default_factory=dict)
    excluded: int = 0
    offset: float = 0.0
    at_bound: bool = False
    variance_inflation: float = 1.0
    message: str = ""

    @property
    def t_c(self) -> float:
        return self.params.t_c

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "rss": self.rss,
            "sigma": self.sigma,
            "stderr": dict(self.stderr),
            "converged": self.converged,
            "n_obs": self.n_obs,
            "tc_stderr": self.tc_stderr,
            "stage": self.stage,
            "window": list(self.window),
            "c_significant": self.c_significant,
            "c_threshold": self.c_threshold,
            "polished": self.polished,
            "grid_cell": dict(self.grid_cell),
            "excluded": self.excluded,
            "offset": self.offset,
            "at_bound": self.at_bound,
            "variance_inflation": self.variance_inflation,
            "message": self.message,
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)


@dataclass
class RuptureEstimate:
    tc_envelope: float
    tc_envelope_stderr: float
    tc_oscillation: float
    tc_oscillation_stderr: float
    agrees: bool
    tc_combined: Optional[float]
    tc_combined_stderr: Optional[float]
    window: tuple
    k: float
    oscillation_significant: bool = True
    interior: bool = True

    def to_dict(self) -> dict:
        return {
            "tc_envelope": {"value": self.tc_envelope, "stderr": self.tc_envelope_stderr},
            "tc_oscillation": {"value": self.tc_oscillation, "stderr": self.tc_oscillation_stderr},
            "agrees": self.agrees,
            "tc_combined": None if self.tc_combined is None
            else {"value": self.tc_combined, "stderr": self.tc_combined_stderr},
            "window": list(self.window),
            "k": self.k,
            "oscillation_significant": self.oscillation_significant,
            "interior": self.interior,
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)


@dataclass
class ScanEntry:
    window_end: float
    estimate: Optional[RuptureEstimate]
    warning: bool = False
    error: str = ""
    end_date: Optional[str] = None


SCAN_CSV_HEADER = "window_end,tc_env,tc_env_err,tc_osc,tc_osc_err,agrees,tc_combined,warning"


def scan_to_csv(entries) -> str:
    lines = [SCAN_CSV_HEADER]
    for e in entries:
        if e.estimate is None:
            lines.append(f"{_fmt(e.window_end)},,,,,,,{int(e.warning)}")
            continue
        r = e.estimate
        lines.append(",".join([
            _fmt(e.window_end), _fmt(r.tc_envelope), _fmt(r.tc_envelope_stderr),
            _fmt(r.tc_oscillation), _fmt(r.tc_oscillation_stderr), str(int(r.agrees)),
            "" if r.tc_combined is None else _fmt(r.tc_combined), str(int(e.warning)),
        ]))
    return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    if x.is_integer() and abs(x) < 2 ** 53:
        return str(int(x))
    return repr(x)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# --------------------------------------------------------------------------
# model evaluation


def _log_x(t, t_c, origin):
    x = (t_c - t) / (t_c - origin)
    return np.log(x)


def _shape(lnx, variant, m, sign):
    if variant == "log":
        return lnx
    return np.exp(sign * m * lnx)


def eval_model(p: LpplParams, t):
    """Model value(s) at time(s) ``t``; every ``t`` must be before ``p.t_c``."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr >= p.t_c):
        raise FitError("model undefined at or after t_c")
    lnx = _log_x(t_arr, p.t_c, p.origin)
    f = _shape(lnx, p.variant, p.m, p.exponent_sign)
    if p.C == 0:
        osc = 0.0
    elif p.linear_lpo:
        osc = p.C * ((p.w if p.w is not None else 1.0) * lnx + (p.phi or 0.0))
    else:
        osc = p.C * np.cos(p.w * lnx + p.phi)
    y = p.A + p.B * f * (1.0 + osc)
    return float(y) if np.ndim(y) == 0 else y


# --------------------------------------------------------------------------
# linear solves


def _batched_lstsq(X: np.ndarray, y: np.ndarray, rank_tol: float = 1e-10):
    """Least squares for a stack of design matrices ``X[b]`` against one target.

    Returns ``(coef, rss)``; rank-deficient problems get ``nan`` coefficients
    and ``inf`` rss.
    """
    norms = np.sqrt(np.einsum("bnk,bnk->bk", X, X))
    norms[norms == 0] = 1.0
    Xs = X / norms[:, None, :]
    Q, R = np.linalg.qr(Xs)
    diag = np.abs(np.diagonal(R, axis1=1, axis2=2))
    deficient = ~np.all(np.isfinite(diag), axis=1) | (diag.min(axis=1) <= rank_tol * np.maximum(diag.max(axis=1), 1e-300))
    if np.any(deficient):
        R = R.copy()
        R[deficient] = np.eye(R.shape[-1])
    qty = np.einsum("bnk,n->bk", Q, y)
    coef_s = np.linalg.solve(R, qty[..., None])[..., 0]
    coef = coef_s / norms
    resid = y[None, :] - np.einsum("bnk,bk->bn", X, coef)
    rss = np.einsum("bn,bn->b", resid, resid)
    coef[deficient] = np.nan
    rss[deficient] = np.inf
    return coef, rss


def _lstsq(X: np.ndarray, y: np.ndarray, rank_tol: float = 1e-10):
    coef, rss = _batched_lstsq(X[None], y, rank_tol)
    return coef[0], float(rss[0])


def _oscillating_cells(lnx, ws, base, amp, y, rank_tol=1e-12):
    """rss of ``y ~ base + amp*cos(w lnx) + amp*sin(w lnx)`` for every w.

    ``base`` is an (n, k0) block of w-independent columns.  Normal equations
    are assembled from matrix products so the whole w-row costs a handful of
    BLAS calls; rank-deficient cells get ``inf``.
    """
    k0 = base.shape[1]
    ang = np.outer(ws, lnx)
    cos, sin = np.cos(ang), np.sin(ang)
    amp2 = amp * amp
    V = np.column_stack([base * amp[:, None], amp * y])
    cV, sV = cos @ V, sin @ V
    k = k0 + 2
    G = np.empty((len(ws), k, k))
    G[:, :k0, :k0] = base.T @ base
    G[:, :k0, k0] = cV[:, :k0]
    G[:, :k0, k0 + 1] = sV[:, :k0]
    G[:, k0, k0] = (cos * cos) @ amp2
    G[:, k0, k0 + 1] = (cos * sin) @ amp2
    G[:, k0 + 1, k0 + 1] = (sin * sin) @ amp2
    G[:, k0:, :k0] = np.swapaxes(G[:, :k0, k0:], 1, 2)
    G[:, k0 + 1, k0] = G[:, k0, k0 + 1]
    rhs = np.empty((len(ws), k))
    rhs[:, :k0] = base.T @ y
    rhs[:, k0] = cV[:, k0]
    rhs[:, k0 + 1] = sV[:, k0]
    return _solve_normal(G, rhs, float(y @ y), rank_tol)


def _solve_normal(G, rhs, yy, rank_tol=1e-12):
    d = np.sqrt(np.diagonal(G, axis1=1, axis2=2))
    d = np.where(d > 0, d, 1.0)
    Gs = G / (d[:, :, None] * d[:, None, :])
    ev = np.linalg.eigvalsh(Gs)
    deficient = ~(ev[:, 0] > rank_tol * ev[:, -1])
    if np.any(deficient):
        Gs = Gs.copy()
        Gs[deficient] = np.eye(G.shape[-1])
    coef = np.linalg.solve(Gs, (rhs / d)[..., None])[..., 0] / d
    rss = np.maximum(yy - np.einsum("bk,bk->b", rhs, coef), 0.0)
    rss[deficient] = np.inf
    return rss


@dataclass
class LinearSubfit:
    A: float
    B: float
    D: float
    E: float
    rss: float
    C: float
    phi: float


def _full_design(t, t_c, m, w, variant, sign, linear_lpo, origin=0.0):
    lnx = _log_x(t, t_c, origin)
    f = _shape(lnx, variant, m, sign)
    if linear_lpo:
        return np.stack([np.ones_like(t), f, f * lnx], axis=-1)
    ang = w * lnx
    return np.stack([np.ones_like(t), f, f * np.cos(ang), f * np.sin(ang)], axis=-1)


def _phase_from(D, E, B):
    sb = 1.0 if B >= 0 else -1.0
    return math.atan2(-E * sb, D * sb) % (2 * math.pi)


def linear_subfit(s: TimeSeries, t_c: float, m: Optional[float], w: float, variant: str = "log",
                  exponent_sign: int = -1, linear_lpo: bool = False) -> LinearSubfit:
    """Exact least squares for (A, B, D, E) at fixed nonlinear parameters.

    ``t_c`` is in the series' own time coordinate; the origin is the time
    before its first observation.
    """
    if variant not in VARIANTS:
        raise FitError(f"unknown variant {variant!r}")
    if variant == "power" and m is None:
        raise FitError("power variant needs m")
    t = s.local_times()
    tc_local = t_c - (s.times[0] - 1)
    if not tc_local > t[-1]:
        raise FitError("all observations must precede t_c")
    X = _full_design(t, tc_local, m, w, variant, exponent_sign, linear_lpo)
    if len(t) < X.shape[1]:
        raise FitError(f"rank-deficient design: {len(t)} observations for {X.shape[1]} coefficients")
    coef, rss = _lstsq(X, s.values)
    if not math.isfinite(rss):
        raise FitError("rank-deficient design matrix")
    if linear_lpo:
        A, B, D = coef
        E = 0.0
        C = D / B if B != 0 else 0.0
        return LinearSubfit(A, B, D, E, rss, C, 0.0)
    A, B, D, E = coef
    C = math.hypot(D, E) / abs(B) if B != 0 else 0.0
    return LinearSubfit(A, B, D, E, rss, C, _phase_from(D, E, B))


# --------------------------------------------------------------------------
# grid machinery


def _map(fn, items, jobs):
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _argmin_first(rss: np.ndarray):
    """Index of the smallest finite rss; first in C order on ties."""
    if not np.any(np.isfinite(rss)):
        raise FitError("every grid cell is rank-deficient")
    return np.unravel_index(int(np.argmin(rss)), rss.shape)


def _profile_stderr(tcs: np.ndarray, profile: np.ndarray, sigma2: float) -> float:
    """t_c standard error from a parabola through 5 grid points around the minimum."""
    finite = np.isfinite(profile)
    if finite.sum() < 3 or len(tcs) < 3:
        return math.inf
    i = int(np.argmin(np.where(finite, profile, np.inf)))
    lo = max(0, min(i - 2, len(tcs) - 5))
    hi = min(len(tcs), lo + 5)
    x, yv = tcs[lo:hi], profile[lo:hi]
    ok = np.isfinite(yv)
    if ok.sum() < 3:
        return math.inf
    xc = x[ok] - x[ok].mean()
    a = np.polyfit(xc, yv[ok], 2)[0]
    if not a > 0 or not sigma2 > 0:
        return math.inf if not a > 0 else 0.0
    return math.sqrt(sigma2 / a)


def _jacobian_stderr(model, theta: np.ndarray, sigma2: float) -> np.ndarray:
    """Gauss-Newton standard errors sqrt(diag(sigma^2 (J^T J)^-1)).

    Directions the data do not constrain (all-zero Jacobian column or
    numerically singular) get an infinite standard error.
    """
    theta = np.asarray(theta, dtype=float)
    cols = []
    for j in range(len(theta)):
        h = 1e-6 * max(abs(theta[j]), 1.0)
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        cols.append((model(tp) - model(tm)) / (2 * h))
    J = np.column_stack(cols)
    norms = np.linalg.norm(J, axis=0)
    out = np.full(len(theta), math.inf)
    live = norms > 1e-12 * max(norms.max(initial=0.0), 1e-300)
    if not np.any(live):
        return out
    Js = J[:, live] / norms[live]
    u, sv, vt = np.linalg.svd(Js, full_matrices=False)
    keep = sv > 1e-10 * sv[0]
    cov_diag = np.sum((vt[keep].T / sv[keep]) ** 2, axis=1)
    if not np.all(keep):
        # unidentifiable combination: parameters loading on it are unconstrained
        cov_diag[np.any(np.abs(vt[~keep]) > 1e-6, axis=0)] = math.inf
    out[live] = np.sqrt(sigma2 * cov_diag) / norms[live]
    return out


def _variance_inflation(resid: np.ndarray, cfg: FitConfig) -> float:
    """AR(1) long-run variance factor (1 + rho) / (1 - rho) of the residuals.

    Serially correlated residuals carry less information than white ones;
    scaling sigma^2 by this factor keeps error bars honest on price data.
    """
    if cfg.residual_model == "white":
        return 1.0
    e = resid - resid.mean()
    denom = float(e @ e)
    if not denom > 0:
        return 1.0
    rho = min(max(float(e[:-1] @ e[1:]) / denom, 0.0), 0.99)
    return (1.0 + rho) / (1.0 - rho)


def _at_bound(tc_local: float, tcs: np.ndarray) -> bool:
    """True when t_c sits within one grid step of either end of its range."""
    if len(tcs) < 2:
        return True
    step = tcs[1] - tcs[0]
    return bool(tc_local <= tcs[0] + step or tc_local >= tcs[-1] - step)


def _check_window(s: TimeSeries, cfg: FitConfig):
    if len(s) < cfg.min_obs:
        raise FitError(f"window holds {len(s)} observations, below the fit floor of {cfg.min_obs}")


def _window_of(s: TimeSeries):
    return (_num(s.times[0]), _num(s.times[-1]))


def _num(x):
    x = float(x)
    return int(x) if x.is_integer() else x


# --------------------------------------------------------------------------
# full fit


def fit_full(s: TimeSeries, variant: str = "log", cfg: FitConfig = FitConfig()) -> FitReport:
    """Grid search over (t_c, w[, m]) with per-cell linear solves, then polish.

    Ties in rss resolve to the smallest t_c, then the smallest w, then the
    smallest m, independent of ``cfg.jobs``.
    """
    if variant not in VARIANTS:
        raise FitError(f"unknown variant {variant!r}")
    _check_window(s, cfg)
    t = s.local_times()
    y = s.values
    n = len(t)
    origin = float(s.times[0] - 1)
    tcs = cfg.tc_grid(int(t[-1]))
    ws = np.array([1.0]) if cfg.linear_lpo else cfg.w_grid()
    ms = cfg.m_grid() if variant == "power" else np.array([np.nan])
    sign = cfg.exponent_sign

    yc = y - y.mean()  # the intercept column absorbs the mean; keeps rss well scaled

    def cells_for_tc(tc):
        lnx = _log_x(t, tc, 0.0)
        out = np.empty((len(ws), len(ms)))
        for j, m in enumerate(ms):
            f = _shape(lnx, variant, m, sign)
            if cfg.linear_lpo:
                X = np.stack([np.ones(n), f, f * lnx], axis=-1)[None]
                out[:, j] = _batched_lstsq(X, yc)[1]
            else:
                out[:, j] = _oscillating_cells(lnx, ws, np.column_stack([np.ones(n), f]), f, yc)
        return out

    rss_grid = np.stack(_map(cells_for_tc, tcs, cfg.jobs))  # (tc, w, m)
    i_tc, i_w, i_m = _argmin_first(rss_grid)
    grid_cell = {"t_c": float(tcs[i_tc]) + origin, "w": None if cfg.linear_lpo else float(ws[i_w]),
                 "m": None if variant == "log" else float(ms[i_m]), "rss": float(rss_grid[i_tc, i_w, i_m])}

    theta = [tcs[i_tc]]
    lo, hi = [tcs[0]], [tcs[-1]]
    if not cfg.linear_lpo:
        theta.append(ws[i_w])
        lo.append(cfg.w_band[0])
        hi.append(cfg.w_band[1])
    if variant == "power":
        theta.append(ms[i_m])
        lo.append(cfg.m_band[0])
        hi.append(cfg.m_band[1])
    theta = np.array(theta, dtype=float)

    def unpack(th):
        tc = th[0]
        w = th[1] if not cfg.linear_lpo else 1.0
        m = th[-1] if variant == "power" else None
        return tc, w, m

    def design(th):
        tc, w, m = unpack(th)
        return _full_design(t, tc, m, w, variant, sign, cfg.linear_lpo)

    def vp_resid(th):
        X = design(th)
        coef, rss = _lstsq(X, y)
        if not math.isfinite(rss):
            return np.full(n, 1e6)
        return y - X @ coef

    converged, polished, message = True, False, ""
    best_rss = grid_cell["rss"]
    if cfg.refine:
        theta, best_rss, polished, converged, message = _polish(vp_resid, theta, lo, hi, best_rss)

    tc, w, m = unpack(theta)
    X = design(theta)
    coef, rss = _lstsq(X, y)
    if cfg.linear_lpo:
        A, B, D = coef
        C = D / B if B != 0 else 0.0
        phi = 0.0
    else:
        A, B, D, E = coef
        C = math.hypot(D, E) / abs(B) if B != 0 else 0.0
        phi = _phase_from(D, E, B)
    params = LpplParams(variant, float(A), float(B), float(C), float(w), float(phi), float(tc) + origin,
                        None if m is None else float(m), origin, sign, cfg.linear_lpo)

    n_par = len(theta) + X.shape[1]
    inflation = _variance_inflation(y - X @ coef, cfg)
    sigma2 = inflation * rss / max(n - n_par, 1)
    names, vec = _natural_vector(params)

    def model(vec_):
        return eval_model(_from_natural(params, names, vec_), s.times.astype(float))

    se = _jacobian_stderr(model, vec, sigma2)
    stderr = {k: float(v) for k, v in zip(names, se)}
    profile = rss_grid.min(axis=(1, 2))
    tc_se = _profile_stderr(tcs, profile, sigma2) if cfg.uncertainty == "profile" else stderr["t_c"]
    c_thr = _c_threshold(cfg, rss_grid.size)
    c_sig = _c_significant(params.C, stderr.get("C", math.inf), c_thr, cfg)
    if _flat_divergence(B, X[:, 1], y):
        converged, c_sig = False, False
        message = (message + "; " if message else "") + "divergence amplitude B is zero: t_c unidentifiable"
    elif abs(params.C) >= 1 and not cfg.linear_lpo:
        message = (message + "; " if message else "") + "|C| >= 1: oscillation overpowers trend"
    return FitReport(params=params, rss=float(rss), sigma=math.sqrt(rss / n), stderr=stderr,
                     converged=converged, n_obs=n, tc_stderr=float(tc_se), stage="full",
                     window=_window_of(s), c_significant=c_sig, c_threshold=c_thr, polished=polished,
                     grid_cell=grid_cell, at_bound=_at_bound(float(tc), tcs),
                     variance_inflation=inflation, message=message)


def _flat_divergence(B, f, y) -> bool:
    scale = max(float(np.max(np.abs(y))), float(np.ptp(y)), 1e-300)
    return abs(B) * float(np.ptp(f)) <= 1e-9 * scale


def _c_threshold(cfg: FitConfig, n_cells: int) -> float:
    """Multiple of se(C) that C must exceed.

    The fitted C is the best of ``n_cells`` grid candidates, so under pure
    noise (C/se)**2 behaves like the maximum of that many chi-square(2)
    draws rather than a single one.  A Bonferroni bound on that maximum
    keeps the per-window false-positive rate at the single-test level of
    ``c_significance``: ``z**2 = c**2 + 2 ln(n_cells)``.
    """
    z = cfg.c_significance
    if cfg.look_elsewhere and n_cells > 1:
        return math.sqrt(z * z + 2.0 * math.log(n_cells))
    return z


def _c_significant(C, se, threshold, cfg):
    return bool(abs(C) > threshold * se and (cfg.linear_lpo or abs(C) < 1))


def _polish(resid_fn, theta, lo, hi, grid_rss):
    """Bounded trust-region refinement; the grid point is kept unless improved."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(hi <= lo):
        return theta, grid_rss, False, True, ""
    try:
        res = least_squares(resid_fn, theta, bounds=(lo, hi), method="trf", x_scale="jac",
                            xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=200 * (len(theta) + 1))
    except (ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return theta, grid_rss, False, False, f"polish failed: {exc}"
    if not np.all(np.isfinite(res.x)) or not np.isfinite(res.cost):
        return theta, grid_rss, False, False, "polish diverged"
    new_rss = 2.0 * float(res.cost)
    if new_rss < grid_rss:
        return res.x, new_rss, True, True, ""
    return theta, grid_rss, False, True, ""


def _natural_vector(p: LpplParams):
    names = ["A", "B"]
    vec = [p.A, p.B]
    if p.C is not None:
        names.append("C")
        vec.append(p.C)
    if p.variant == "power":
        names.append("m")
        vec.append(p.m)
    if not p.linear_lpo:
        names += ["w", "phi"]
        vec += [p.w, p.phi]
    names.append("t_c")
    vec.append(p.t_c)
    return names, np.array(vec, dtype=float)


def _from_natural(p: LpplParams, names, vec) -> LpplParams:
    kw = dict(zip(names, (float(v) for v in vec)))
    return replace(p, **kw)


# --------------------------------------------------------------------------
# two-stage protocol


def fit_envelope(s: TimeSeries, cfg: FitConfig = FitConfig(), variant: str = "log") -> FitReport:
    """Oscillation-free fit ``y = A + B f(x)`` over the t_c (x m) grid."""
    if variant not in VARIANTS:
        raise FitError(f"unknown variant {variant!r}")
    _check_window(s, cfg)
    t = s.local_times()
    y = s.values
    n = len(t)
    origin = float(s.times[0] - 1)
    tcs = cfg.tc_grid(int(t[-1]))
    ms = cfg.m_grid() if variant == "power" else np.array([np.nan])
    sign = cfg.exponent_sign

    def cells_for_tc(tc):
        lnx = _log_x(t, tc, 0.0)
        X = np.empty((len(ms), n, 2))
        X[..., 0] = 1.0
        for j, m in enumerate(ms):
            X[j, :, 1] = _shape(lnx, variant, m, sign)
        return _batched_lstsq(X, y)[1]

    rss_grid = np.stack(_map(cells_for_tc, tcs, cfg.jobs))  # (tc, m)
    i_tc, i_m = _argmin_first(rss_grid)
    grid_cell = {"t_c": float(tcs[i_tc]) + origin, "m": None if variant == "log" else float(ms[i_m]),
                 "rss": float(rss_grid[i_tc, i_m])}

    theta = [tcs[i_tc]]
    lo, hi = [tcs[0]], [tcs[-1]]
    if variant == "power":
        theta.append(ms[i_m])
        lo.append(cfg.m_band[0])
        hi.append(cfg.m_band[1])
    theta = np.array(theta, dtype=float)

    def design(th):
        lnx = _log_x(t, th[0], 0.0)
        f = _shape(lnx, variant, th[-1] if variant == "power" else None, sign)
        return np.stack([np.ones(n), f], axis=-1)

    def vp_resid(th):
        X = design(th)
        coef, rss = _lstsq(X, y)
        if not math.isfinite(rss):
            return np.full(n, 1e6)
        return y - X @ coef

    converged, polished, message = True, False, ""
    if cfg.refine:
        theta, _, polished, converged, message = _polish(vp_resid, theta, lo, hi, grid_cell["rss"])
    X = design(theta)
    (A, B), rss = _lstsq(X, y)
    m = float(theta[-1]) if variant == "power" else None
    params = LpplParams(variant, float(A), float(B), 0.0, None, None, float(theta[0]) + origin, m,
                        origin, sign, cfg.linear_lpo)

    if _flat_divergence(B, X[:, 1], y):
        converged = False
        message = (message + "; " if message else "") + "divergence amplitude B is zero: t_c unidentifiable"

    n_par = len(theta) + 2
    inflation = _variance_inflation(y - X @ np.array([A, B]), cfg)
    sigma2 = inflation * rss / max(n - n_par, 1)
    names = ["A", "B"] + (["m"] if variant == "power" else []) + ["t_c"]
    vec = np.array([params.A, params.B] + ([m] if variant == "power" else []) + [params.t_c])

    def model(v):
        return eval_model(_from_natural(params, names, v), s.times.astype(float))

    se = _jacobian_stderr(model, vec, sigma2)
    stderr = {k: float(v) for k, v in zip(names, se)}
    profile = rss_grid.min(axis=1)
    tc_se = _profile_stderr(tcs, profile, sigma2) if cfg.uncertainty == "profile" else stderr["t_c"]
    return FitReport(params=params, rss=float(rss), sigma=math.sqrt(rss / n), stderr=stderr,
                     converged=converged, n_obs=n, tc_stderr=float(tc_se), stage="envelope",
                     window=_window_of(s), c_significant=False, polished=polished,
                     grid_cell=grid_cell, at_bound=_at_bound(float(theta[0]), tcs),
                     variance_inflation=inflation, message=message)


def fit_oscillation(s: TimeSeries, envelope: FitReport, cfg: FitConfig = FitConfig()) -> FitReport:
    """Fit ``C cos(w ln x' + phi)`` to the envelope-normalised residual.

    The residual ``rho = (y - A - B f) / (B f)`` is fitted by least squares
    weighted with ``(B f)**2``, the inverse of its noise variance, which is
    the same as fitting ``y - A - B f`` by ``B f C cos(...)``.  Points where
    ``|B f|`` is below ``cfg.osc_floor`` times its maximum are dropped.
    """
    if not envelope.converged:
        raise FitError("envelope fit did not converge")
    _check_window(s, cfg)
    ep = envelope.params
    origin = float(s.times[0] - 1)
    t_glob = s.times.astype(float)
    lnx_env = _log_x(t_glob, ep.t_c, ep.origin)
    u = ep.B * _shape(lnx_env, ep.variant, ep.m, ep.exponent_sign)
    if not np.max(np.abs(u)) > 0:
        raise FitError("envelope amplitude is zero")
    keep = np.abs(u) >= cfg.osc_floor * np.max(np.abs(u))
    excluded = int((~keep).sum())
    n = int(keep.sum())
    if n < cfg.min_obs:
        raise FitError(f"only {n} usable observations after excluding |B f| below the floor")
    t = s.local_times()[keep]
    u = u[keep]
    r = s.values[keep] - ep.A - u
    tcs = cfg.tc_grid(int(s.local_times()[-1]))
    ws = np.array([1.0]) if cfg.linear_lpo else cfg.w_grid()
    offset = cfg.osc_offset

    def columns(lnx, w_arr):
        if cfg.linear_lpo:
            cols = [u * lnx, u]
            return np.stack(cols, axis=-1)[None]
        ang = np.outer(w_arr, lnx)
        k = 3 if offset else 2
        X = np.empty((len(w_arr), n, k))
        X[..., 0] = u * np.cos(ang)
        X[..., 1] = u * np.sin(ang)
        if offset:
            X[..., 2] = u
        return X

    def cells_for_tc(tc):
        lnx = _log_x(t, tc, 0.0)
        if cfg.linear_lpo:
            return _batched_lstsq(columns(lnx, ws), r)[1]
        base = u[:, None] if offset else np.empty((n, 0))
        return _oscillating_cells(lnx, ws, base, u, r)

    rss_grid = np.stack(_map(cells_for_tc, tcs, cfg.jobs))  # (tc, w)
    i_tc, i_w = _argmin_first(rss_grid)
    grid_cell = {"t_c": float(tcs[i_tc]) + origin, "w": None if cfg.linear_lpo else float(ws[i_w]),
                 "rss": float(rss_grid[i_tc, i_w])}

    if cfg.linear_lpo:
        theta = np.array([tcs[i_tc]])
        lo, hi = [tcs[0]], [tcs[-1]]
    else:
        theta = np.array([tcs[i_tc], ws[i_w]])
        lo, hi = [tcs[0], cfg.w_band[0]], [tcs[-1], cfg.w_band[1]]

    def design(th):
        w_arr = np.array([1.0 if cfg.linear_lpo else th[1]])
        return columns(_log_x(t, th[0], 0.0), w_arr)[0]

    def vp_resid(th):
        X = design(th)
        coef, rss = _lstsq(X, r)
        if not math.isfinite(rss):
            return np.full(n, 1e6)
        return r - X @ coef

    converged, polished, message = True, False, ""
    if cfg.refine:
        theta, _, polished, converged, message = _polish(vp_resid, theta, lo, hi, grid_cell["rss"])
    X = design(theta)
    coef, rss = _lstsq(X, r)
    if cfg.linear_lpo:
        C, phi_raw = coef
        w = 1.0
        phi = float(phi_raw / C) if C != 0 else 0.0
        c0 = 0.0
    else:
        a, b = coef[0], coef[1]
        c0 = float(coef[2]) if offset else 0.0
        C = math.hypot(a, b)
        phi = math.atan2(-b, a) % (2 * math.pi)
        w = float(theta[1])
    tc_glob = float(theta[0]) + origin
    params = LpplParams(ep.variant, ep.A, ep.B, float(C), float(w), float(phi), tc_glob, ep.m,
                        origin, ep.exponent_sign, cfg.linear_lpo)

    c_thr = _c_threshold(cfg, rss_grid.size)
    p_lin = X.shape[1]
    inflation = _variance_inflation(r - X @ coef, cfg)
    sigma2 = inflation * rss / max(n - len(theta) - p_lin, 1)
    t_kept = s.times.astype(float)[keep]

    if cfg.linear_lpo:
        names = ["C", "phi", "t_c"]

        def model(v):
            lnx = _log_x(t_kept, v[2], origin)
            return u * v[0] * (lnx + v[1])
        vec = np.array([C, phi, tc_glob])
    else:
        names = ["C", "w", "phi", "t_c"] + (["offset"] if offset else [])

        def model(v):
            lnx = _log_x(t_kept, v[3], origin)
            out = u * v[0] * np.cos(v[1] * lnx + v[2])
            if offset:
                out = out + u * v[4]
            return out
        vec = np.array([C, w, phi, tc_glob] + ([c0] if offset else []))
    se = _jacobian_stderr(model, vec, sigma2)
    stderr = {k: float(v) for k, v in zip(names, se)}
    profile = rss_grid.min(axis=1)
    tc_se = _profile_stderr(tcs, profile, sigma2) if cfg.uncertainty == "profile" else stderr["t_c"]
    return FitReport(params=params, rss=float(rss), sigma=math.sqrt(rss / n), stderr=stderr,
                     converged=converged, n_obs=n, tc_stderr=float(tc_se), stage="oscillation",
                     window=_window_of(s), c_significant=_c_significant(C, stderr["C"], c_thr, cfg),
                     c_threshold=c_thr,
                     polished=polished, grid_cell=grid_cell, excluded=excluded, offset=c0,
                     at_bound=_at_bound(float(theta[0]), tcs), variance_inflation=inflation,
                     message=message)


def estimate_rupture(env: FitReport, osc: FitReport, k: float = 2.0) -> RuptureEstimate:
    """Agreement test between the envelope and oscillation critical times.

    The fits agree when ``|tc_env - tc_osc| <= k * sqrt(se_env**2 + se_osc**2)``,
    both error bars are finite, the oscillation is significant and neither
    critical time is pinned to the edge of its search range.  The
    combined estimate is the inverse-variance weighted mean.
    """
    if not env.converged or not osc.converged:
        raise FitError("both fits must be converged")
    t1, s1 = env.t_c, env.tc_stderr
    t2, s2 = osc.t_c, osc.tc_stderr
    significant = osc.c_significant is not False
    finite = math.isfinite(s1) and math.isfinite(s2)
    interior = not (env.at_bound or osc.at_bound)
    bound = k * math.hypot(s1, s2) if finite else math.inf
    agrees = bool(finite and significant and interior and abs(t1 - t2) <= bound)
    combined = combined_se = None
    if agrees:
        combined, combined_se = _inverse_variance_mean(t1, s1, t2, s2)
    window = env.window if env.window != (None, None) else osc.window
    return RuptureEstimate(t1, s1, t2, s2, agrees, combined, combined_se, tuple(window), k, significant,
                           interior)


def _inverse_variance_mean(t1, s1, t2, s2):
    if s1 == 0 and s2 == 0:
        return 0.5 * (t1 + t2), 0.0
    if s1 == 0:
        return t1, 0.0
    if s2 == 0:
        return t2, 0.0
    w1, w2 = 1.0 / s1 ** 2, 1.0 / s2 ** 2
    return (w1 * t1 + w2 * t2) / (w1 + w2), 1.0 / math.sqrt(w1 + w2)


def two_stage(s: TimeSeries, cfg: FitConfig = FitConfig(), variant: str = "log"):
    """Envelope fit, oscillation fit and their agreement for one window."""
    env = fit_envelope(s, cfg, variant)
    osc = fit_oscillation(s, env, cfg)
    return env, osc, estimate_rupture(env, osc, cfg.k)


def scan_expanding(s: TimeSeries, cfg: FitConfig = FitConfig(), first_window: int = 250, step: int = 20,
                   variant: str = "log") -> list:
    """Two-stage rupture estimates on windows growing from the series start.

    A window raises a warning when the fits agree, the combined standard
    error is below ``cfg.warn_precision`` and the combined critical time is
    no more than ``cfg.warn_horizon`` past the window end.
    """
    if first_window < cfg.min_obs:
        raise FitError(f"first_window {first_window} is below the fit floor {cfg.min_obs}")
    if step < 1:
        raise FitError("step must be >= 1")
    if first_window > len(s):
        raise FitError(f"first_window {first_window} exceeds series length {len(s)}")
    lengths = list(range(first_window, len(s) + 1, step))
    inner = replace(cfg, jobs=1)

    def one(length):
        sub = TimeSeries(s.label, s.times[:length], s.values[:length], s.kind,
                         None if s.dates is None else s.dates[:length])
        end = _num(sub.times[-1])
        try:
            _, _, est = two_stage(sub, inner, variant)
        except FitError as exc:
            return ScanEntry(end, None, False, str(exc), sub.date_at(length - 1))
        warn = bool(est.agrees and est.tc_combined_stderr is not None
                    and est.tc_combined_stderr < cfg.warn_precision
                    and est.tc_combined - end <= cfg.warn_horizon)
        return ScanEntry(end, est, warn, "", sub.date_at(length - 1))

    return _map(one, lengths, cfg.jobs)
