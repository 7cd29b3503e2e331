"""Worst-case accuracy statistics over a set of episodes.

Accuracies are fractions in [0, 1] throughout; :func:`render_table` and the
report writers convert to percentage points with two decimals.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

WORST_KS = (1, 10, 100)
Z95 = 1.96


@dataclass
class MetricsReport:
    acc_m: float
    sigma: float
    z95: float
    acc_worst: dict[int, float]
    surrogate: float
    n_episodes: int
    n_runs: int = 1
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["acc_worst"] = {str(k): v for k, v in sorted(self.acc_worst.items())}
        return d

    @classmethod
    def from_dict(cls, d) -> "MetricsReport":
        d = dict(d)
        d["acc_worst"] = {int(k): v for k, v in d["acc_worst"].items()}
        return cls(**d)


def _sample(values) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("empty accuracy sample")
    return a


def acc_mean(values) -> float:
    return float(np.mean(_sample(values)))


def acc_worst_k(values, k: int) -> float:
    """Mean of the ``k`` smallest accuracies."""
    a = _sample(values)
    if not 1 <= k <= a.size:
        raise ValueError(f"k={k} outside [1, {a.size}]")
    if k == a.size:
        return float(np.mean(a))
    # sort the selected block so the sum is order-independent
    return float(np.mean(np.sort(np.partition(a, k - 1)[:k])))


def std_dev(values) -> float:
    """Sample standard deviation (n-1 denominator)."""
    a = _sample(values)
    if a.size < 2:
        raise ValueError(f"standard deviation needs at least 2 values, got {a.size}")
    return float(np.std(a, ddof=1))


def z95_to_sigma(z95: float, n: int) -> float:
    """Per-episode std implied by a 95% half-width over ``n`` episodes."""
    if n <= 0:
        raise ValueError(f"number of episodes must be positive, got {n}")
    if z95 < 0:
        raise ValueError(f"z95 must be nonnegative, got {z95}")
    return z95 * math.sqrt(n) / Z95


def sigma_to_z95(sigma: float, n: int) -> float:
    if n <= 0:
        raise ValueError(f"number of episodes must be positive, got {n}")
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    return sigma * Z95 / math.sqrt(n)


def surrogate_mu_minus_3sigma(mu: float, sigma: float) -> float:
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    return mu - 3.0 * sigma


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_pdf(x, mu=0.0, sigma=1.0):
    z = (np.asarray(x, dtype=np.float64) - mu) / sigma
    return np.exp(-0.5 * z * z) / (sigma * math.sqrt(2.0 * math.pi))


def chebyshev_tail_bound(k: float) -> float:
    """One-sided bound on ``Pr(X <= mu - k*sigma)``."""
    if not k > 0:
        raise ValueError(f"k must be positive, got {k}")
    return 1.0 / (1.0 + k * k)


def compute_report(values, ks: Sequence[int] = WORST_KS, provenance=None) -> MetricsReport:
    """All metrics for one run. ``ACC_k`` is only reported for ``k <= n``."""
    a = _sample(values)
    mu = acc_mean(a)
    sigma = std_dev(a)
    return MetricsReport(
        acc_m=mu,
        sigma=sigma,
        z95=sigma_to_z95(sigma, a.size),
        acc_worst={k: acc_worst_k(a, k) for k in ks if k <= a.size},
        surrogate=surrogate_mu_minus_3sigma(mu, sigma),
        n_episodes=int(a.size),
        n_runs=1,
        provenance=dict(provenance or {}),
    )


def aggregate_runs(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Field-wise arithmetic mean of per-run reports."""
    if not reports:
        raise ValueError("no reports to aggregate")
    ns = {r.n_episodes for r in reports}
    if len(ns) != 1:
        raise ValueError(f"runs disagree on the number of episodes: {sorted(ns)}")
    ks = set(reports[0].acc_worst)
    if any(set(r.acc_worst) != ks for r in reports):
        raise ValueError("runs report different ACC_k sets")
    mean = lambda xs: float(np.mean(xs))
    return MetricsReport(
        acc_m=mean([r.acc_m for r in reports]),
        sigma=mean([r.sigma for r in reports]),
        z95=mean([r.z95 for r in reports]),
        acc_worst={k: mean([r.acc_worst[k] for r in reports]) for k in sorted(ks)},
        surrogate=mean([r.surrogate for r in reports]),
        n_episodes=ns.pop(),
        n_runs=sum(r.n_runs for r in reports),
        provenance=dict(reports[0].provenance),
    )


def pooled_report(samples: Sequence[Sequence[float]], ks=WORST_KS) -> MetricsReport:
    """Alternative aggregation: one report over all runs' episodes pooled together."""
    rep = compute_report(np.concatenate([_sample(s) for s in samples]), ks)
    rep.n_runs = len(samples)
    return rep


# -- histogram ------------------------------------------------------------------

@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    normal_fit: np.ndarray
    mu: float
    sigma: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count", "normal_fit"])
        for i, c in enumerate(self.counts):
            w.writerow([repr(float(self.edges[i])), repr(float(self.edges[i + 1])), int(c),
                        repr(float(self.normal_fit[i]))])
        return buf.getvalue()


def histogram_export(values, n_bins: int = 20) -> Histogram:
    """Equal-width histogram over [min, max] with a fitted normal curve in count units."""
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    a = _sample(values)
    mu = acc_mean(a)
    sigma = std_dev(a) if a.size >= 2 else 0.0
    lo, hi = float(a.min()), float(a.max())
    if lo == hi:
        return Histogram(np.array([lo, hi]), np.array([a.size]), np.array([float(a.size)]), mu, 0.0)
    counts, edges = np.histogram(a, bins=n_bins, range=(lo, hi))
    width = edges[1] - edges[0]
    centers = 0.5 * (edges[:-1] + edges[1:])
    fit = a.size * width * normal_pdf(centers, mu, sigma) if sigma > 0 else np.where(counts == counts.max(), a.size, 0.0)
    return Histogram(edges, counts, np.asarray(fit, dtype=np.float64), mu, sigma)


# -- rendering ------------------------------------------------------------------

def pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


TABLE_COLUMNS = ("ACC_m", "ACC_1", "ACC_10", "ACC_100", "sigma", "mu-3sigma")


def table_row(report: MetricsReport) -> list[str]:
    worst = [pct(report.acc_worst[k]) if k in report.acc_worst else "-" for k in WORST_KS]
    return [pct(report.acc_m), *worst, pct(report.sigma), pct(report.surrogate)]


def render_table(named: dict[str, MetricsReport], sort_by: str = "acc1") -> str:
    """Aligned text table; rows sorted by ACC_1 (default) or ACC_m, descending."""
    if sort_by == "acc1":
        key = lambda item: item[1].acc_worst.get(1, float("-inf"))
    elif sort_by == "accm":
        key = lambda item: item[1].acc_m
    else:
        raise ValueError(f"unknown sort key {sort_by!r}")
    rows = [[name, *table_row(rep)] for name, rep in sorted(named.items(), key=key, reverse=True)]
    header = ["method", *TABLE_COLUMNS]
    widths = [max(len(r[i]) for r in rows + [header]) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(r))
    return "\n".join([fmt(header), fmt(["-" * w for w in widths]), *map(fmt, rows)]) + "\n"


def report_json(report: MetricsReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
