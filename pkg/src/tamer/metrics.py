"""Threshold-free binary-classification metrics with brute-force oracles,
bootstrap uncertainty, and paired significance testing.

AUROC uses the midrank U-statistic; AUPRC is non-interpolated average
precision with tied scores handled by exact averaging over tie-block
permutations (closed form). Both have slow enumeration oracles here so the
fast paths can be verified against them. The Student-t p-value is computed
in-house via the regularized incomplete beta function.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, MetricUndefined
from .rng import substream


def _validated(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise ContractError(f"scores/labels must be parallel 1-D, got {scores.shape} vs {labels.shape}")
    if not np.all(np.isin(labels, (0, 1))):
        raise ContractError("labels must be 0/1")
    return scores, labels.astype(np.int64)


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size, dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * ((i + 1) + (j + 1))
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counting half."""
    scores, labels = _validated(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefined("auroc needs at least one positive and one negative")
    ranks = _midranks(scores)
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc_pairwise(scores, labels) -> float:
    """Enumeration oracle: wins + half-ties over all positive-negative pairs."""
    scores, labels = _validated(scores, labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise MetricUndefined("auroc needs at least one positive and one negative")
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (pos.size * neg.size)


def _tie_blocks(scores, labels):
    """(block size, positives inside) per distinct score, descending."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    blocks = []
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        blocks.append((j - i + 1, int(y[i : j + 1].sum())))
        i = j + 1
    return blocks


def auprc(scores, labels) -> float:
    """Average precision; tied scores averaged exactly over tie permutations.

    For a tie block of g items with p positives arriving after r items of
    which cum_pos are positive, the expected precision mass contributed by
    the block is sum over in-block position s of
    (p/g) * (cum_pos + 1 + (s-1)(p-1)/(g-1)) / (r+s), the hypergeometric
    mean of positives at or before a positive occupying position s.
    """
    scores, labels = _validated(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricUndefined("auprc needs at least one positive")
    total = 0.0
    r = 0
    cum_pos = 0
    for g, p in _tie_blocks(scores, labels):
        if p > 0:
            for s in range(1, g + 1):
                inner = 0.0 if g == 1 else (s - 1) * (p - 1) / (g - 1)
                total += (p / g) * (cum_pos + 1 + inner) / (r + s)
        r += g
        cum_pos += p
    return total / n_pos


def auprc_enumeration(scores, labels, max_arrangements: int = 200_000) -> float:
    """Oracle: explicit average of plain AP over all tie-block arrangements.

    Exponential; intended for small verification sets only.
    """
    scores, labels = _validated(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricUndefined("auprc needs at least one positive")
    blocks = _tie_blocks(scores, labels)
    per_block = [
        [set(c) for c in itertools.combinations(range(g), p)] for g, p in blocks
    ]
    n_arr = 1
    for options in per_block:
        n_arr *= len(options)
        if n_arr > max_arrangements:
            raise ContractError("tie structure too large to enumerate")
    total = 0.0
    for choice in itertools.product(*per_block):
        rank = 0
        seen_pos = 0
        ap = 0.0
        for (g, _p), pos_at in zip(blocks, choice):
            for s in range(g):
                rank += 1
                if s in pos_at:
                    seen_pos += 1
                    ap += seen_pos / rank
        total += ap / n_pos
    return total / n_arr


@dataclass
class BootstrapResult:
    mean: float
    std: float
    values: list = field(default_factory=list)


def bootstrap(scores, labels, metric, n_resamples: int = 100, seed: int = 0) -> BootstrapResult:
    """Full-size resampling with replacement; single-class draws are redrawn.

    Each resample has its own derived substream, so results do not depend
    on evaluation order and are bit-deterministic under the seed.
    """
    scores, labels = _validated(scores, labels)
    if n_resamples < 2:
        raise ContractError(f"need at least 2 resamples, got {n_resamples}")
    n = scores.size
    values = []
    for b in range(n_resamples):
        value = None
        for attempt in range(1000):
            rng = substream(seed, "bootstrap", b, attempt)
            idx = rng.integers(0, n, size=n)
            y = labels[idx]
            if y.min() == y.max():
                continue
            value = metric(scores[idx], y)
            break
        if value is None:
            raise MetricUndefined("bootstrap redraw budget exhausted (single-class resamples)")
        values.append(float(value))
    arr = np.array(values)
    return BootstrapResult(mean=float(arr.mean()), std=float(arr.std(ddof=1)), values=values)


# ---------------------------------------------------------------------------
# Student t


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (Lentz's algorithm)."""
    tiny = 1e-300
    eps = 3e-16
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 400):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ContractError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, dof: int) -> float:
    """Two-sided tail probability of Student's t with ``dof`` degrees."""
    if dof < 1:
        raise ContractError(f"degrees of freedom must be >= 1, got {dof}")
    if math.isinf(t):
        return 0.0
    x = dof / (dof + t * t)
    return regularized_incomplete_beta(dof / 2.0, 0.5, x)


def paired_t_test(resamples_a, resamples_b):
    """Two-sided paired t-test over matched resample vectors.

    Degenerate zero-variance differences follow the documented convention:
    p = 1 when the common difference is zero, p = 0 otherwise (with a
    warning, since the statistic is then unbounded).
    """
    a = np.asarray(resamples_a, dtype=np.float64)
    b = np.asarray(resamples_b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape or a.size < 2:
        raise ContractError(f"need equal-length vectors of >= 2 values, got {a.shape} vs {b.shape}")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        if d.mean() == 0.0:
            return 0.0, 1.0
        warnings.warn("zero-variance nonzero-mean differences; p degenerates to 0")
        return math.copysign(math.inf, d.mean()), 0.0
    t = d.mean() / (sd / math.sqrt(d.size))
    return float(t), student_t_two_sided_p(t, d.size - 1)


# ---------------------------------------------------------------------------
# report assembly


@dataclass
class MetricsReport:
    """Point values plus bootstrap blocks per metric, JSON-serializable."""

    metrics: dict
    significance: dict | None = None

    def to_json_dict(self) -> dict:
        out = {"metrics": self.metrics}
        if self.significance is not None:
            out["significance"] = self.significance
        return out


METRIC_FNS = {"auprc": auprc, "auroc": auroc}


def score_report(scores, labels, n_resamples: int = 100, seed: int = 0) -> MetricsReport:
    """AUPRC and AUROC with bootstrap mean/std over shared resample seeds."""
    blocks = {}
    for name, fn in METRIC_FNS.items():
        boot = bootstrap(scores, labels, fn, n_resamples=n_resamples, seed=seed)
        blocks[name] = {
            "point": float(fn(scores, labels)),
            "bootstrap_mean": boot.mean,
            "bootstrap_std": boot.std,
            "resamples": boot.values,
        }
    return MetricsReport(metrics=blocks)
