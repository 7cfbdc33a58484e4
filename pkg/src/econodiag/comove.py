"""Windowed correlation distances over a panel of series.

Pearson correlations c are mapped to the metric d = sqrt(2 (1 - c)), which
runs from 0 (perfect comovement) through sqrt(2) (uncorrelated) to 2
(perfect anticorrelation).  The mean off-diagonal distance tracked over
sliding windows is the comovement ("globalization") trajectory; single
linkage on a distance matrix gives the cluster hierarchy.
"""

from __future__ import annotations

import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .series import TimeSeries


class ComoveError(ValueError):
    pass


@dataclass
class Panel:
    labels: list
    series: list
    alignment_report: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.series[0].times

    def matrix(self) -> np.ndarray:
        """Values as an (n_times, n_series) array."""
        return np.column_stack([s.values for s in self.series])


@dataclass
class CorrelationMatrix:
    labels: list
    values: np.ndarray  # nan where undefined
    mask: np.ndarray  # True where undefined
    window: tuple
    degenerate: list = field(default_factory=list)


@dataclass
class DistanceMatrix:
    labels: list
    entries: np.ndarray
    mask: np.ndarray
    window: tuple = (None, None)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("," + ",".join(self.labels) + "\n")
        for i, lab in enumerate(self.labels):
            cells = ["" if self.mask[i, j] else repr(float(self.entries[i, j])) for j in range(len(self.labels))]
            out.write(lab + "," + ",".join(cells) + "\n")
        return out.getvalue()


@dataclass
class LinkageTree:
    """Agglomeration history.

    Leaves are numbered 0..n-1 in label order; the cluster made by merge i
    gets id n + i.  Each merge is ``(a, b, height, size)`` with ``a`` the
    cluster whose smallest label sorts first.
    """

    labels: list
    merges: list
    method: str = "single"

    def to_json(self) -> str:
        return json.dumps({
            "labels": list(self.labels),
            "method": self.method,
            "merges": [{"a": a, "b": b, "height": h, "size": n} for a, b, h, n in self.merges],
        }, indent=2)

    def heights(self) -> np.ndarray:
        return np.array([h for _, _, h, _ in self.merges])


def align(raw: Sequence[TimeSeries], min_common: int = 8) -> Panel:
    """Restrict every series to the time coordinates they all share."""
    raw = list(raw)
    if len(raw) < 2:
        raise ComoveError("a panel needs at least 2 series")
    labels = [s.label for s in raw]
    if len(set(labels)) != len(labels):
        raise ComoveError(f"duplicate labels in panel: {labels}")
    common = raw[0].times
    for s in raw[1:]:
        common = np.intersect1d(common, s.times)
    if len(common) < min_common:
        raise ComoveError(f"only {len(common)} common time points, need {min_common}")
    members, report = [], {}
    for s in raw:
        keep = np.isin(s.times, common)
        report[s.label] = int((~keep).sum())
        dates = None if s.dates is None else tuple(d for d, k in zip(s.dates, keep) if k)
        members.append(TimeSeries(s.label, s.times[keep], s.values[keep], s.kind, dates))
    return Panel(labels, members, report)


def _window_slice(p: Panel, window):
    t = p.times
    if window is None:
        return slice(0, len(t))
    lo = int(np.searchsorted(t, window[0], side="left"))
    hi = int(np.searchsorted(t, window[1], side="right"))
    return slice(lo, hi)


def _pearson(block: np.ndarray):
    dev = block - block.mean(axis=0)
    ss = np.einsum("ij,ij->j", dev, dev)
    degenerate = ~(ss > 0)
    norm = np.sqrt(np.where(degenerate, 1.0, ss))
    z = dev / norm
    # c = 1 - |z_i - z_j|^2 / 2 is exact for identical columns, where z_i . z_j can miss 1 by an ulp
    k = block.shape[1]
    c = np.empty((k, k))
    for i in range(k):
        diff = z - z[:, i:i + 1]
        c[i] = 1.0 - 0.5 * np.einsum("ij,ij->j", diff, diff)
    c = np.clip(0.5 * (c + c.T), -1.0, 1.0)
    mask = degenerate[:, None] | degenerate[None, :]
    np.fill_diagonal(mask, False)
    c[mask] = np.nan
    np.fill_diagonal(c, 1.0)
    return c, mask, degenerate


def corr_matrix(p: Panel, window=None) -> CorrelationMatrix:
    """Pearson correlations over the observations with times in ``window``.

    A zero-variance member makes its row and column undefined (masked); no
    number is substituted.
    """
    sl = _window_slice(p, window)
    block = p.matrix()[sl]
    if block.shape[0] < 4:
        raise ComoveError(f"window holds {block.shape[0]} common points, need 4")
    c, mask, degenerate = _pearson(block)
    t = p.times[sl]
    return CorrelationMatrix(list(p.labels), c, mask, (_num(t[0]), _num(t[-1])),
                             [lab for lab, d in zip(p.labels, degenerate) if d])


def to_distance(c: CorrelationMatrix) -> DistanceMatrix:
    vals = np.clip(np.asarray(c.values, dtype=float), -1.0, 1.0)
    d = np.sqrt(2.0 * (1.0 - vals))
    mask = np.asarray(c.mask, dtype=bool).copy()
    d[mask] = np.nan
    np.fill_diagonal(d, 0.0)
    return DistanceMatrix(list(c.labels), d, mask, c.window)


def mean_offdiagonal(d: DistanceMatrix):
    n = len(d.labels)
    iu = np.triu_indices(n, k=1)
    vals = d.entries[iu]
    ok = ~d.mask[iu]
    if not ok.any():
        return None, 0
    return float(vals[ok].mean()), int(ok.sum())


def rolling_mean_distance(p: Panel, window_len: int, step: int, jobs: int = 1) -> list:
    """``(window_end, mean distance or None, n_pairs)`` per right-aligned window."""
    n = len(p.times)
    if window_len < 4:
        raise ComoveError("window_len must be >= 4")
    if window_len > n:
        raise ComoveError(f"window_len {window_len} exceeds panel length {n}")
    if step < 1:
        raise ComoveError("step must be >= 1")
    values = p.matrix()
    t = p.times
    ends = list(range(window_len - 1, n, step))

    def one(end):
        block = values[end - window_len + 1: end + 1]
        c, mask, _ = _pearson(block)
        d = to_distance(CorrelationMatrix(p.labels, c, mask, (None, None)))
        mean, pairs = mean_offdiagonal(d)
        return (_num(t[end]), mean, pairs)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, ends))
    return [one(e) for e in ends]


def trajectory_to_csv(traj) -> str:
    lines = ["window_end,mean_distance,n_pairs"]
    for end, mean, pairs in traj:
        lines.append(f"{end},{'' if mean is None else repr(mean)},{pairs}")
    return "\n".join(lines) + "\n"


def hierarchical_cluster(d: DistanceMatrix, method: str = "single") -> LinkageTree:
    """Agglomerative clustering with a reproducible tie-break.

    Among equally close cluster pairs the one whose (smallest-label,
    smallest-label) pair sorts first lexicographically is merged.
    """
    if method not in ("single", "average"):
        raise ComoveError(f"unknown linkage {method!r}")
    if np.any(d.mask):
        raise ComoveError("distance matrix has masked entries")
    n = len(d.labels)
    D = np.array(d.entries, dtype=float)
    active = {i: (i, [i]) for i in range(n)}  # slot -> (cluster id, members)
    key = {i: d.labels[i] for i in range(n)}
    merges = []
    next_id = n
    while len(active) > 1:
        best = None
        slots = sorted(active)
        for x in range(len(slots)):
            for y in range(x + 1, len(slots)):
                i, j = slots[x], slots[y]
                pair = tuple(sorted((key[i], key[j])))
                cand = (D[i, j], pair)
                if best is None or cand < best[0]:
                    best = (cand, i, j)
        (height, _), i, j = best
        if key[j] < key[i]:
            i, j = j, i
        id_i, mem_i = active[i]
        id_j, mem_j = active[j]
        for k in active:
            if k in (i, j):
                continue
            if method == "single":
                D[i, k] = D[k, i] = min(D[i, k], D[j, k])
            else:
                D[i, k] = D[k, i] = (len(mem_i) * D[i, k] + len(mem_j) * D[j, k]) / (len(mem_i) + len(mem_j))
        merges.append((id_i, id_j, float(height), len(mem_i) + len(mem_j)))
        active[i] = (next_id, mem_i + mem_j)
        key[i] = min(key[i], key[j])
        del active[j]
        next_id += 1
    return LinkageTree(list(d.labels), merges, method)


def _num(x):
    x = float(x)
    return int(x) if x.is_integer() else x
