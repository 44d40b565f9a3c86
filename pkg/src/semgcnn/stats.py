"""Accuracy aggregates, paired accuracy drops and the Wilcoxon signed-rank test."""
from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_N = 25
MIN_NONZERO = 5


@dataclass(frozen=True)
class AccuracyStats:
    mean: float
    std: float  # sample std (n - 1); NaN when n == 1
    se: float  # std / sqrt(n); NaN when n == 1
    n: int

    @classmethod
    def from_values(cls, values):
        v = np.asarray(list(values), dtype=np.float64)
        if v.size == 0:
            raise ValueError("cannot aggregate an empty group")
        if v.size == 1:
            return cls(float(v[0]), float("nan"), float("nan"), 1)
        std = float(v.std(ddof=1))
        return cls(float(v.mean()), std, std / math.sqrt(v.size), int(v.size))

    @property
    def available(self):
        return not math.isnan(self.std)

    def pm(self, digits=1):
        """Percent ``(mu +- SE)%`` string; SE shown as n/a for single cells."""
        se = f"{100 * self.se:.{digits}f}" if self.available else "n/a"
        return f"({100 * self.mean:.{digits}f} ± {se})%"


def _key_func(group_by):
    if group_by is None:
        return lambda cell: ()
    if callable(group_by):
        return group_by
    if isinstance(group_by, str):
        group_by = (group_by,)
    fields = tuple(group_by)
    return lambda cell: tuple(_field(cell, f) for f in fields)


def _field(cell, name):
    return cell[name] if isinstance(cell, dict) else getattr(cell, name)


def aggregate(cells, group_by=None, value="accuracy"):
    """``{group key: AccuracyStats}`` over cells, sorted by key.

    ``group_by`` is a field name, a tuple of field names or a callable.
    """
    key = _key_func(group_by)
    groups = defaultdict(list)
    for cell in cells:
        groups[key(cell)].append(_field(cell, value))
    return {k: AccuracyStats.from_values(groups[k]) for k in sorted(groups)}


def paired_drops(intra, inter):
    """Per-model drop ``intra - mean(inter over targets)``.

    ``intra`` maps a model key (e.g. ``(instance, fold)``) to its intra
    accuracy; ``inter`` maps the same keys to a list of inter accuracies.
    Keys present on one side only are ignored.
    """
    drops = {}
    for k in sorted(set(intra) & set(inter)):
        targets = inter[k]
        if len(targets) == 0:
            continue
        drops[k] = float(intra[k]) - float(np.mean(targets))
    return drops


def accuracy_drop(intra, inter):
    """AccuracyStats of the paired per-model drops (see :func:`paired_drops`)."""
    drops = paired_drops(intra, inter)
    if not drops:
        raise ValueError("no paired intra/inter cells")
    return AccuracyStats.from_values(drops.values())


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------

def signed_rank_distribution(doubled_ranks):
    """Counts of every achievable sum of a random subset of ``doubled_ranks``.

    Entry ``s`` is the number of the ``2**n`` sign assignments whose positive
    doubled ranks sum to ``s``. Ranks are doubled so midranks stay integral.
    """
    r = np.asarray(doubled_ranks, dtype=np.int64)
    counts = np.zeros(int(r.sum()) + 1)
    counts[0] = 1.0
    top = 0
    for v in r:
        # float64 counts stay exact up to 2**53, far above 2**25
        counts[v:top + v + 1] += counts[:top + 1].copy()
        top += v
    return counts


def _nonzero_differences(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"paired samples must be 1-d and of equal length, got {x.shape} and {y.shape}")
    d = x - y
    return d[d != 0]


def wilcoxon_paired(x, y):
    """Two-sided paired signed-rank p-value.

    Zero differences are dropped. Exact distribution for up to 25 non-zero
    pairs (midranks for ties), normal approximation with tie and continuity
    correction beyond.
    """
    d = _nonzero_differences(x, y)
    if d.size == 0:
        warnings.warn("all paired differences are zero; returning p = 1", RuntimeWarning, stacklevel=2)
        return 1.0
    if d.size < MIN_NONZERO:
        raise ValueError(f"need at least {MIN_NONZERO} non-zero paired differences, got {d.size}")
    ranks = rankdata(np.abs(d))
    n = d.size
    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        w = int(doubled[d > 0].sum())
        total = int(doubled.sum())
        counts = signed_rank_distribution(doubled)
        sums = np.arange(counts.size)
        # |2W - total| >= |2w - total| is the two-sided tail in integer arithmetic
        extreme = np.abs(2 * sums - total) >= abs(2 * w - total)
        return float(min(1.0, counts[extreme].sum() / 2.0 ** n))
    w = float(ranks[d > 0].sum())
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((tie_counts ** 3 - tie_counts).sum()) / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(w - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2.0 * norm.sf(z)))


def paired_values(cells_a, cells_b, key_fields, value="accuracy"):
    """Align two cell lists on ``key_fields``; returns (keys, a, b) for shared keys."""
    key = _key_func(key_fields)
    a = {key(c): _field(c, value) for c in cells_a}
    b = {key(c): _field(c, value) for c in cells_b}
    keys = sorted(set(a) & set(b))
    return keys, np.array([a[k] for k in keys]), np.array([b[k] for k in keys])
