"""
Out-of-distribution decisions from per-window likelihood scores.

Two statistics are averaged over repeated size-N subsamples of a reference
and a candidate score set: the two-sided Welch t-test p-value and the 1-d
Wasserstein distance. A candidate is flagged OoD when its mean p-value
falls below alpha.
"""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, special, stats

from utils import ShapeError, format_float

logger = logging.getLogger(__name__)

STATISTICS = ("t-test", "wasserstein")


@dataclass(frozen=True)
class LikelihoodSamples:
    dataset_id: str
    values: np.ndarray
    estimator: str = ""

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.size == 0:
            raise ValueError(f"{self.dataset_id}: empty likelihood set")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"{self.dataset_id}: likelihood set has non-finite values")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class SubsampleTestConfig:
    sizes: Tuple[int, ...] = (100, 200)
    repetitions: int = 100
    seed: int = 0
    alpha: float = 0.01

    def __post_init__(self) -> None:
        object.__setattr__(self, "sizes", tuple(int(n) for n in self.sizes))
        if not self.sizes or min(self.sizes) < 2:
            raise ValueError("subsample sizes must be >= 2")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")


# ----- two-sample statistics -------------------------------------------------------------
def t_cdf(x, df):
    """Student-t CDF through the regularized incomplete beta function."""
    df = np.asarray(df, dtype=np.float64)
    if np.any(~(df > 0)):
        raise ValueError("degrees of freedom must be > 0")
    x = np.asarray(x, dtype=np.float64)
    tail = 0.5 * special.betainc(df / 2.0, 0.5, df / (df + x * x))
    out = np.where(x > 0, 1.0 - tail, tail)
    return float(out) if out.ndim == 0 else out


def welch_statistic(a, b) -> Tuple[float, float]:
    """Welch t statistic and Welch-Satterthwaite degrees of freedom."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("welch_t_test needs at least 2 values per sample")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se2 = va + vb
    if se2 == 0.0:
        return (0.0 if a.mean() == b.mean() else np.copysign(np.inf, a.mean() - b.mean())), np.inf
    t = (a.mean() - b.mean()) / np.sqrt(se2)
    df = se2 * se2 / (va * va / (len(a) - 1) + vb * vb / (len(b) - 1))
    return float(t), float(df)


def welch_t_test(a, b) -> float:
    """Two-sided p-value of Welch's unequal-variance t-test."""
    t, df = welch_statistic(a, b)
    if not np.isfinite(df):
        return 1.0 if t == 0.0 else 0.0
    return float(min(1.0, special.betainc(df / 2.0, 0.5, df / (df + t * t))))


def wasserstein_1d(a, b) -> float:
    """W1 between two empirical distributions (area between quantile functions)."""
    a, b = np.asarray(a, dtype=np.float64).reshape(-1), np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein_1d needs non-empty samples")
    return float(stats.wasserstein_distance(a, b))


_STAT_FUNCS = {"t-test": welch_t_test, "wasserstein": wasserstein_1d}


# ----- subsampled averages ---------------------------------------------------------------
def _values(samples: Union[LikelihoodSamples, np.ndarray]) -> np.ndarray:
    return samples.values if isinstance(samples, LikelihoodSamples) else np.asarray(samples, dtype=np.float64)


def _is_self_comparison(reference, candidate) -> bool:
    if reference is candidate:
        return True
    return (isinstance(reference, LikelihoodSamples) and isinstance(candidate, LikelihoodSamples)
            and reference.dataset_id == candidate.dataset_id and reference.estimator == candidate.estimator)


def subsampled_stats(reference, candidate, size: int, repetitions: int, stat: str,
                     seed: Union[int, np.random.SeedSequence] = 0) -> np.ndarray:
    """
    One statistic per repetition; each repetition draws size-N subsamples
    without replacement from its own seed stream. Comparing a set with
    itself reuses one subsample for both sides.
    """
    if stat not in _STAT_FUNCS:
        raise ValueError(f"unknown statistic '{stat}' (choose from {STATISTICS})")
    ref, cand = _values(reference), _values(candidate)
    if size > min(len(ref), len(cand)):
        raise ValueError(f"subsample size N={size} exceeds set sizes ({len(ref)}, {len(cand)})")
    func = _STAT_FUNCS[stat]
    same = _is_self_comparison(reference, candidate)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    out = np.empty(repetitions)
    for r, child in enumerate(root.spawn(repetitions)):
        rng = np.random.default_rng(child)
        a = ref[rng.choice(len(ref), size=size, replace=False)]
        b = a if same else cand[rng.choice(len(cand), size=size, replace=False)]
        out[r] = func(a, b)
    return out


def avg_subsampled_stat(reference, candidate, config: SubsampleTestConfig, stat: str,
                        rng: Optional[np.random.Generator] = None, size: Optional[int] = None) -> float:
    """Mean of `stat` over config.repetitions subsample pairs of size N (default: the first configured size)."""
    seed = config.seed if rng is None else np.random.SeedSequence(int(rng.integers(2 ** 63)))
    return float(np.mean(subsampled_stats(reference, candidate, size or config.sizes[0],
                                          config.repetitions, stat, seed)))


# ----- report ------------------------------------------------------------------------------
@dataclass(frozen=True)
class ReportRow:
    estimator: str
    reference: str
    candidate: str
    size: int
    mean_p: float
    mean_w: float
    ood: bool


@dataclass
class TestReport:
    alpha: float
    rows: List[ReportRow] = field(default_factory=list)

    __test__ = False  # not a pytest class

    @property
    def estimators(self) -> List[str]:
        return list(dict.fromkeys(r.estimator for r in self.rows))

    @property
    def candidates(self) -> List[str]:
        return list(dict.fromkeys(r.candidate for r in self.rows))

    @property
    def sizes(self) -> List[int]:
        return list(dict.fromkeys(r.size for r in self.rows))

    def lookup(self, estimator: str, candidate: str, size: int) -> ReportRow:
        for row in self.rows:
            if (row.estimator, row.candidate, row.size) == (estimator, candidate, size):
                return row
        raise KeyError((estimator, candidate, size))

    def flagged(self, estimator: str, size: Optional[int] = None) -> List[str]:
        size = size or self.sizes[0]
        return [r.candidate for r in self.rows if r.estimator == estimator and r.size == size and r.ood]


ScoreSets = Mapping[str, Mapping[str, LikelihoodSamples]]


def ood_report(scores: ScoreSets, config: SubsampleTestConfig, reference_id: str = "train",
               candidates: Optional[Sequence[str]] = None) -> TestReport:
    """
    scores[estimator][dataset_id] -> LikelihoodSamples. Every candidate
    (default: every dataset the first estimator has) is compared with the
    reference for every estimator and configured subsample size.
    """
    if not scores:
        raise ValueError("no estimator scores given")
    estimators = list(scores)
    if candidates is None:
        candidates = list(scores[estimators[0]])
    missing = [f"{est}:{ds}" for est in estimators for ds in [reference_id, *candidates] if ds not in scores[est]]
    if missing:
        raise ValueError(f"missing estimator scores for: {', '.join(sorted(set(missing)))}")

    report = TestReport(alpha=config.alpha)
    for est in estimators:
        ref = scores[est][reference_id]
        for ds in candidates:
            cand = scores[est][ds]
            for size in config.sizes:
                mean_p = float(np.mean(subsampled_stats(ref, cand, size, config.repetitions, "t-test", config.seed)))
                mean_w = float(np.mean(subsampled_stats(ref, cand, size, config.repetitions, "wasserstein", config.seed)))
                report.rows.append(ReportRow(est, reference_id, ds, size, mean_p, mean_w, mean_p < config.alpha))
        logger.info("[report] %s flags %s", est, report.flagged(est) or "nothing")
    return report


def format_report(report: TestReport, value: str = "mean_p") -> str:
    """Aligned text table: one row per candidate, one column per (estimator, N)."""
    columns = [(est, n) for n in report.sizes for est in report.estimators]
    header = ["dataset"] + [f"{est} N={n}" for est, n in columns]
    body = []
    for ds in report.candidates:
        cells = [ds]
        for est, n in columns:
            v = getattr(report.lookup(est, ds, n), value)
            cells.append(f"{v:.2e}" if value == "mean_p" and 0.0 < v < 0.01 else f"{v:.2f}")
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header] + body]
    return "\n".join(lines) + "\n"


def report_csv(report: TestReport) -> str:
    out = io.StringIO()
    out.write("estimator,reference,candidate,N,mean_p,mean_w,ood\n")
    for r in report.rows:
        out.write(f"{r.estimator},{r.reference},{r.candidate},{r.size},"
                  f"{format_float(r.mean_p)},{format_float(r.mean_w)},{int(r.ood)}\n")
    return out.getvalue()


# ----- NLL table / aggregation -----------------------------------------------------------
def nll_table(scores: ScoreSets, datasets: Sequence[str] = ("train", "test")) -> Dict[str, Dict[str, float]]:
    """Mean negative log-likelihood per estimator and dataset."""
    return {est: {ds: float(-np.mean(sets[ds].values)) for ds in datasets if ds in sets}
            for est, sets in scores.items()}


def format_nll_table(table: Mapping[str, Mapping[str, float]]) -> str:
    datasets = list(dict.fromkeys(ds for row in table.values() for ds in row))
    width = max([len("estimator")] + [len(e) for e in table])
    lines = ["estimator".ljust(width) + "".join(f"  {ds:>10}" for ds in datasets)]
    for est, row in table.items():
        lines.append(est.ljust(width) + "".join(f"  {row[ds]:>10.2f}" if ds in row else f"  {'-':>10}" for ds in datasets))
    return "\n".join(lines) + "\n"


def aggregate_by_trajectory(trajectory_ids, values) -> Tuple[np.ndarray, np.ndarray]:
    """Average per-window values within each trajectory; returns (sorted ids, means)."""
    trajectory_ids = np.asarray(trajectory_ids, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    if trajectory_ids.shape != values.shape:
        raise ShapeError(f"ids {trajectory_ids.shape} and values {values.shape} differ in shape")
    ids, inverse = np.unique(trajectory_ids, return_inverse=True)
    sums = np.bincount(inverse, weights=values)
    counts = np.bincount(inverse)
    return ids, sums / counts


# ----- densities -------------------------------------------------------------------------
@dataclass(frozen=True)
class DensityCurve:
    dataset_id: str
    bin_centers: np.ndarray
    hist_density: np.ndarray
    kde_x: np.ndarray
    kde_y: np.ndarray


def density_export(sets: Sequence[LikelihoodSamples], bins: int = 100) -> List[DensityCurve]:
    """
    Histogram densities on a range shared by all sets plus a Gaussian KDE
    (Silverman bandwidth) sampled on the same number of points; both
    integrate to 1.
    """
    if not sets:
        raise ValueError("density_export needs at least one set")
    lo = min(float(s.values.min()) for s in sets)
    hi = max(float(s.values.max()) for s in sets)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])

    curves = []
    for s in sets:
        hist, _ = np.histogram(np.clip(s.values, lo, hi), bins=edges, density=True)
        try:
            kde = stats.gaussian_kde(s.values, bw_method="silverman")
            pad = 3.0 * float(np.sqrt(kde.covariance[0, 0]))
            kde_x = np.linspace(lo - pad, hi + pad, bins)
            kde_y = kde(kde_x)
            kde_y = kde_y / integrate.trapezoid(kde_y, kde_x)
        except (np.linalg.LinAlgError, ValueError):
            kde_x, kde_y = centers, hist
        curves.append(DensityCurve(s.dataset_id, centers, hist, kde_x, kde_y))
    return curves


def density_csv(curves: Sequence[DensityCurve]) -> str:
    out = io.StringIO()
    out.write("dataset_id,bin_center,hist_density,kde_x,kde_y\n")
    for c in curves:
        for row in zip(c.bin_centers, c.hist_density, c.kde_x, c.kde_y):
            out.write(c.dataset_id + "," + ",".join(format_float(v) for v in row) + "\n")
    return out.getvalue()
