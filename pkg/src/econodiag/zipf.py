"""Zipf ranking of sign-coded return sequences.

Returns are coded u (up), d (down) and, for the ternary alphabet, f (flat,
|r| <= threshold).  Every length-m word is counted, words are ranked by
count, and the slope of ln(count) against ln(rank) summarises how far the
sequence is from an equiprobable one.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .series import TimeSeries

ALPHABETS = {"binary": "du", "ternary": "dfu"}


class ZipfError(ValueError):
    pass


@dataclass(frozen=True)
class SymbolSeq:
    alphabet: str
    symbols: str
    threshold: float = 0.0

    def __post_init__(self):
        if self.alphabet not in ALPHABETS:
            raise ZipfError(f"unknown alphabet {self.alphabet!r}")
        extra = set(self.symbols) - set(ALPHABETS[self.alphabet])
        if extra:
            raise ZipfError(f"symbols {sorted(extra)} not in the {self.alphabet} alphabet")

    def __len__(self):
        return len(self.symbols)


@dataclass
class ZipfResult:
    m: int
    ranking: list  # (word, count), count descending then word ascending
    n_words: int
    slope: Optional[float] = None
    r2: Optional[float] = None
    intercept: Optional[float] = None

    def to_csv(self) -> str:
        lines = ["rank,word,count"]
        lines += [f"{i},{w},{c}" for i, (w, c) in enumerate(self.ranking, start=1)]
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {"m": self.m, "slope": self.slope, "r2": self.r2, "n_words": self.n_words,
                "distinct_words": len(self.ranking)}

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def encode_signs(returns, alphabet: str = "binary", threshold: float = 0.0) -> SymbolSeq:
    """Sign coding; in binary mode a zero return is coded ``d``."""
    if isinstance(returns, TimeSeries):
        if returns.kind != "return":
            raise ZipfError(f"expected a return series, got kind={returns.kind!r}")
        r = returns.values
    else:
        r = np.asarray(returns, dtype=float)
    if threshold < 0:
        raise ZipfError("threshold must be >= 0")
    if alphabet == "binary":
        codes = np.where(r > 0, "u", "d")
        threshold = 0.0
    elif alphabet == "ternary":
        codes = np.where(r > threshold, "u", np.where(r < -threshold, "d", "f"))
    else:
        raise ZipfError(f"unknown alphabet {alphabet!r}")
    return SymbolSeq(alphabet, "".join(codes.tolist()), float(threshold))


def _word_codes(seq: SymbolSeq, m: int, stride: int) -> np.ndarray:
    letters = ALPHABETS[seq.alphabet]
    base = len(letters)
    lut = np.zeros(256, dtype=np.int64)
    for i, ch in enumerate(letters):
        lut[ord(ch)] = i
    digits = lut[np.frombuffer(seq.symbols.encode("ascii"), dtype=np.uint8)]
    n_win = len(digits) - m + 1
    codes = np.zeros(n_win, dtype=np.int64)
    # big-endian base-k value orders codes exactly as the words sort
    for j in range(m):
        codes = codes * base + digits[j: j + n_win]
    return codes[::stride]


def _decode(code: int, m: int, letters: str) -> str:
    base = len(letters)
    out = []
    for _ in range(m):
        code, d = divmod(code, base)
        out.append(letters[d])
    return "".join(reversed(out))


def _count(seq: SymbolSeq, m: int, stride: int) -> np.ndarray:
    base = len(ALPHABETS[seq.alphabet])
    return np.bincount(_word_codes(seq, m, stride), minlength=base ** m)


def rank_words(seq: SymbolSeq, m: int, disjoint: bool = False, jobs: int = 1) -> ZipfResult:
    """Census of length-m words, overlapping (stride 1) unless ``disjoint``.

    With ``jobs > 1`` the sequence is cut into shards overlapping by m - 1
    symbols and the shard censuses are summed; the result is identical to
    the serial count.
    """
    if m < 1:
        raise ZipfError("word length must be >= 1")
    if m > len(seq):
        raise ZipfError(f"word length {m} exceeds sequence length {len(seq)}")
    letters = ALPHABETS[seq.alphabet]
    base = len(letters)
    if base ** m > 50_000_000:
        raise ZipfError("word length too large for a dense census")
    stride = m if disjoint else 1
    n_win = len(seq) - m + 1
    if jobs > 1 and n_win > jobs * 1000:
        # shard window starts on stride boundaries so disjoint mode stays aligned
        per = -(-n_win // jobs)
        per = -(-per // stride) * stride
        starts = list(range(0, n_win, per))

        def shard(a):
            b = min(a + per, n_win)
            sub = replace(seq, symbols=seq.symbols[a: b - 1 + m])
            return _count(sub, m, stride)

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            counts = sum(pool.map(shard, starts))
    else:
        counts = _count(seq, m, stride)
    present = np.nonzero(counts)[0]
    # stable sort on -count keeps ascending code (= lexicographic) order within ties
    order = present[np.argsort(-counts[present], kind="stable")]
    ranking = [(_decode(int(c), m, letters), int(counts[c])) for c in order]
    return ZipfResult(m=m, ranking=ranking, n_words=int(counts.sum()))


def zipf_exponent(r: ZipfResult) -> ZipfResult:
    """OLS fit of ln(count) on ln(rank), ranks starting at 1."""
    if len(r.ranking) < 3:
        raise ZipfError(f"need >= 3 distinct words, have {len(r.ranking)}")
    counts = np.array([c for _, c in r.ranking], dtype=float)
    x = np.log(np.arange(1, len(counts) + 1, dtype=float))
    y = np.log(counts)
    xm, ym = x.mean(), y.mean()
    sxx = float((x - xm) @ (x - xm))
    slope = float((x - xm) @ (y - ym)) / sxx
    intercept = ym - slope * xm
    resid = y - intercept - slope * x
    ss_tot = float((y - ym) @ (y - ym))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else None
    return replace(r, slope=slope, r2=r2, intercept=float(intercept))


def zipf_analysis(returns, m: int = 3, alphabet: str = "binary", threshold: float = 0.0,
                  disjoint: bool = False, jobs: int = 1) -> ZipfResult:
    seq = encode_signs(returns, alphabet, threshold)
    res = rank_words(seq, m, disjoint=disjoint, jobs=jobs)
    if len(res.ranking) >= 3:
        res = zipf_exponent(res)
    return res
