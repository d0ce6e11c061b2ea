"""Experiment-analysis toolkit: filtering, nonparametric tests, reports.

Attempt records are filtered before analysis: times under the guessing
threshold (default 2.1 s) are treated as guesses, times over the outlier
threshold (default 1500 s, i.e. 25 minutes) as distraction noise. Boundary
values are kept: the cutoffs are strict ("less than", "more than").

Group comparisons use the two-tailed Mann-Whitney U test with a Bonferroni
correction across comparisons. The U statistic is always exact (pair
counting with half credit for ties, reported as min(U_a, U_b)); the p-value
route depends on the data: a tie-free null distribution by counting
recurrence for small samples, full label-permutation enumeration for small
tied samples, and a normal approximation with tie and continuity corrections
otherwise.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .catalog import AttemptRecord, group_by_student

EXACT_PAIR_LIMIT = 400  # n_a * n_b at or under this: exact null when tie-free
ENUM_COMB_LIMIT = 200_000  # full permutation enumeration budget for tied data


@dataclass(frozen=True)
class FilterConfig:
    guess_threshold_sec: float = 2.1
    outlier_threshold_sec: float = 1500.0

    def __post_init__(self) -> None:
        if self.guess_threshold_sec <= 0 or self.outlier_threshold_sec <= 0:
            raise ValueError("thresholds must be positive")
        if self.guess_threshold_sec >= self.outlier_threshold_sec:
            raise ValueError("guess threshold must be below the outlier threshold")


def filter_records(
    events: Sequence[AttemptRecord], cfg: FilterConfig = FilterConfig()
) -> tuple[list[AttemptRecord], list[AttemptRecord], list[AttemptRecord]]:
    """Partition records into (kept, guesses, outliers); exhaustive and
    disjoint by construction."""
    kept: list[AttemptRecord] = []
    guesses: list[AttemptRecord] = []
    outliers: list[AttemptRecord] = []
    for rec in events:
        if rec.time_to_success > cfg.outlier_threshold_sec:
            outliers.append(rec)
        elif rec.time_to_success < cfg.guess_threshold_sec:
            guesses.append(rec)
        else:
            kept.append(rec)
    return kept, guesses, outliers


def total_time_spent(
    events: Sequence[AttemptRecord], cfg: FilterConfig = FilterConfig()
) -> float:
    """Sum of solve times for one student, outliers excluded (guesses still
    count toward total time; they only get excluded from per-exercise time
    analyses)."""
    kept, guesses, _ = filter_records(events, cfg)
    return sum(r.time_to_success for r in kept) + sum(r.time_to_success for r in guesses)


def guessing_rate(
    events: Sequence[AttemptRecord], cfg: FilterConfig = FilterConfig()
) -> Optional[float]:
    """Fraction of non-outlier records under the guessing threshold; None
    when there is nothing to rate."""
    kept, guesses, _ = filter_records(events, cfg)
    denom = len(kept) + len(guesses)
    if denom == 0:
        return None
    return len(guesses) / denom


@dataclass(frozen=True)
class StatTestResult:
    u_statistic: float
    p_value_raw: float
    p_value_corrected: float
    n_a: int
    n_b: int
    median_a: float
    median_b: float
    method: str  # exact | enumeration | approx


def _u_by_pair_count(a: Sequence[float], b: Sequence[float]) -> float:
    u = 0.0
    for x in a:
        for y in b:
            if x > y:
                u += 1.0
            elif x == y:
                u += 0.5
    return u


def _null_counts_tiefree(n: int, m: int) -> np.ndarray:
    """Arrangement counts of each U value under the tie-free null.

    Uses the classic two-term recurrence
    ``c(u; n, m) = c(u - m; n - 1, m) + c(u; n, m - 1)``
    rolled as a two-row dynamic program over (A size, B size).
    """
    # Row for A size i: entry j holds the counts array for (i, j).
    prev_row: list[np.ndarray] = [np.ones(1, dtype=np.int64) for _ in range(m + 1)]
    for i in range(1, n + 1):
        cur_row: list[np.ndarray] = [np.ones(1, dtype=np.int64)]
        for j in range(1, m + 1):
            arr = np.zeros(i * j + 1, dtype=np.int64)
            shifted = prev_row[j]  # c(u - j; i - 1, j)
            arr[j : j + len(shifted)] += shifted
            left = cur_row[j - 1]  # c(u; i, j - 1)
            arr[: len(left)] += left
            cur_row.append(arr)
        prev_row = cur_row
    return prev_row[m]


def _exact_null_cdf_tiefree(u_obs: float, n: int, m: int) -> float:
    """P(U <= u_obs) under the tie-free null distribution."""
    counts = _null_counts_tiefree(n, m)
    limit = min(int(math.floor(u_obs + 1e-9)), n * m)
    return float(counts[: limit + 1].sum()) / math.comb(n + m, n)


def _enumerated_p(a: Sequence[float], b: Sequence[float], u_obs: float) -> float:
    """Two-tailed p by full enumeration of label assignments (handles ties)."""
    combined = list(a) + list(b)
    n = len(a)
    total = 0
    at_or_below = 0
    nm = len(a) * len(b)
    idx = range(len(combined))
    for subset in combinations(idx, n):
        chosen = set(subset)
        ga = [combined[i] for i in subset]
        gb = [combined[i] for i in idx if i not in chosen]
        u = min(_u_by_pair_count(ga, gb), nm - _u_by_pair_count(ga, gb))
        # min-U convention on both sides keeps the tail symmetric.
        total += 1
        if u <= u_obs + 1e-9:
            at_or_below += 1
    return min(1.0, at_or_below / total)


def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _approx_p(a: Sequence[float], b: Sequence[float], u_min: float) -> float:
    n, m = len(a), len(b)
    nm = n * m
    combined = sorted(list(a) + list(b))
    size = len(combined)
    tie_term = 0.0
    i = 0
    while i < size:
        j = i
        while j + 1 < size and combined[j + 1] == combined[i]:
            j += 1
        t = j - i + 1
        tie_term += t**3 - t
        i = j + 1
    if size < 2 or tie_term >= size**3 - size:
        return 1.0  # every value identical: no evidence of any difference
    var = nm * (size + 1) / 12.0 * (1.0 - tie_term / (size**3 - size))
    if var <= 0:
        return 1.0
    z = (u_min - nm / 2.0 + 0.5) / math.sqrt(var)  # continuity correction
    return min(1.0, 2.0 * (1.0 - _norm_sf(z)))  # 2 * Phi(z), z <= ~0 by min-U


def mann_whitney_u(
    sample_a: Sequence[float], sample_b: Sequence[float], method: str = "auto"
) -> StatTestResult:
    """Two-tailed Mann-Whitney U test.

    U counts, over all (a, b) pairs, the a-wins plus half the ties, and is
    reported under the min convention, so the result is symmetric in the
    order of the samples. ``method`` is "auto", "exact" (small-sample null
    distribution) or "approx" (normal approximation).
    """
    a = [float(x) for x in sample_a]
    b = [float(x) for x in sample_b]
    if not a or not b:
        raise ValueError("both samples must be non-empty")
    n, m = len(a), len(b)
    nm = n * m
    u_a = _u_by_pair_count(a, b)
    u_min = min(u_a, nm - u_a)
    has_ties = len(set(a) | set(b)) < n + m

    use_exact = method == "exact" or (method == "auto" and nm <= EXACT_PAIR_LIMIT)
    if method not in ("auto", "exact", "approx"):
        raise ValueError(f"unknown method {method!r}")
    if use_exact:
        if not has_ties:
            p = min(1.0, 2.0 * _exact_null_cdf_tiefree(u_min, n, m))
        elif math.comb(n + m, n) <= ENUM_COMB_LIMIT:
            p = _enumerated_p(a, b, u_min)  # already two-sided via min-U tail
        else:
            p = _approx_p(a, b, u_min)
    else:
        p = _approx_p(a, b, u_min)
    p = min(1.0, max(0.0, p))
    return StatTestResult(
        u_statistic=u_min,
        p_value_raw=p,
        p_value_corrected=p,
        n_a=n,
        n_b=m,
        median_a=float(np.median(a)),
        median_b=float(np.median(b)),
        method=(
            "approx"
            if not use_exact or (has_ties and math.comb(n + m, n) > ENUM_COMB_LIMIT)
            else ("enumeration" if has_ties else "exact")
        ),
    )


def bonferroni(p_values: Sequence[float]) -> list[float]:
    """Multiply each p by the family size, capped at 1."""
    k = len(p_values)
    for p in p_values:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p-values must be in [0, 1], got {p}")
    return [min(1.0, p * k) for p in p_values]


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation; NaN when either side has zero variance."""
    if len(x) != len(y):
        raise ValueError("samples must have equal length")
    if len(x) < 2:
        raise ValueError("need at least two points")
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    xd = xa - xa.mean()
    yd = ya - ya.mean()
    denom = math.sqrt(float(np.sum(xd * xd)) * float(np.sum(yd * yd)))
    if denom == 0.0:
        return float("nan")
    return float(np.sum(xd * yd) / denom)


# ---------------------------------------------------------------------------
# Report pipeline


@dataclass(frozen=True)
class GroupLabel:
    school: str
    condition: str


def load_groups(source) -> dict[str, GroupLabel]:
    """Group file: CSV with columns student_id,school,condition."""
    data = source.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    reader = csv.DictReader(io.StringIO(data))
    required = {"student_id", "school", "condition"}
    if reader.fieldnames is None or not required <= set(reader.fieldnames):
        raise ValueError("group file needs columns student_id,school,condition")
    groups: dict[str, GroupLabel] = {}
    for row in reader:
        groups[row["student_id"]] = GroupLabel(
            school=row["school"], condition=row["condition"]
        )
    return groups


def _per_student_metrics(
    events: Sequence[AttemptRecord], cfg: FilterConfig
) -> dict[str, dict[str, Optional[float]]]:
    metrics: dict[str, dict[str, Optional[float]]] = {}
    for student_id, recs in group_by_student(events).items():
        kept, guesses, _ = filter_records(recs, cfg)
        tts_values = [r.time_to_success for r in kept]  # guess-filtered
        scored = kept + guesses
        cfa_values = [1.0 if r.correct_first_attempt else 0.0 for r in scored]
        metrics[student_id] = {
            "total_time": total_time_spent(recs, cfg),
            "tts_median": float(np.median(tts_values)) if tts_values else None,
            "cfa_rate": float(np.mean(cfa_values)) if cfa_values else None,
            "guessing_rate": guessing_rate(recs, cfg),
        }
    return metrics


METRIC_COLUMNS = ("total_time", "tts_median", "cfa_rate", "guessing_rate")


def _comparison_table(
    metrics: dict[str, dict[str, Optional[float]]],
    groups: dict[str, GroupLabel],
    metric: str,
    conditions: tuple[str, str],
) -> list[dict]:
    by_school: dict[str, dict[str, list[float]]] = {}
    for student_id, m in metrics.items():
        label = groups.get(student_id)
        if label is None or m[metric] is None:
            continue
        by_school.setdefault(label.school, {}).setdefault(label.condition, []).append(
            float(m[metric])
        )
    rows: list[dict] = []
    tests: list[StatTestResult] = []
    for school in sorted(by_school):
        cond = by_school[school]
        a = cond.get(conditions[0], [])
        b = cond.get(conditions[1], [])
        if not a or not b:
            continue
        tests.append(mann_whitney_u(a, b))
        rows.append({"school": school})
    corrected = bonferroni([t.p_value_raw for t in tests]) if tests else []
    for row, test, p_corr in zip(rows, tests, corrected):
        row.update(
            {
                f"median_{conditions[0]}": test.median_a,
                f"median_{conditions[1]}": test.median_b,
                f"n_{conditions[0]}": test.n_a,
                f"n_{conditions[1]}": test.n_b,
                "u": test.u_statistic,
                "p_raw": test.p_value_raw,
                "p_corrected": p_corr,
            }
        )
    return rows


def _write_csv(path: Path, fieldnames: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def tts_histogram(
    events: Sequence[AttemptRecord], n_bins: int = 60, cap: Optional[float] = None
) -> list[tuple[float, float, int]]:
    """(bin_left, bin_right, count) over solve times, linear bins."""
    values = [r.time_to_success for r in events]
    if not values:
        return []
    hi = cap if cap is not None else max(values)
    counts, edges = np.histogram(values, bins=n_bins, range=(0.0, hi))
    return [
        (float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(len(counts))
    ]


def run_report(
    events: Sequence[AttemptRecord],
    groups: dict[str, GroupLabel],
    cfg: FilterConfig,
    out_dir,
) -> dict[str, Path]:
    """Emit per-metric comparison tables and plot-data files into ``out_dir``.

    Conditions are discovered from the group labels (exactly two expected);
    with no events the files still appear, header-only.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    conditions = tuple(sorted({g.condition for g in groups.values()}))
    if len(conditions) == 0:
        conditions = ("a", "b")
    if len(conditions) == 1:
        conditions = (conditions[0], "other")
    if len(conditions) > 2:
        raise ValueError(f"expected two conditions, found {conditions}")
    metrics = _per_student_metrics(events, cfg)
    paths: dict[str, Path] = {}
    for metric in METRIC_COLUMNS:
        rows = _comparison_table(metrics, groups, metric, conditions)
        fieldnames = [
            "school",
            f"median_{conditions[0]}",
            f"median_{conditions[1]}",
            f"n_{conditions[0]}",
            f"n_{conditions[1]}",
            "u",
            "p_raw",
            "p_corrected",
        ]
        path = out / f"{metric}.csv"
        _write_csv(path, fieldnames, rows)
        paths[metric] = path

    hist_path = out / "tts_histogram.csv"
    _write_csv(
        hist_path,
        ["bin_left", "bin_right", "count"],
        [
            {"bin_left": lo, "bin_right": hi, "count": c}
            for lo, hi, c in tts_histogram(events)
        ],
    )
    paths["tts_histogram"] = hist_path
    markers_path = out / "tts_histogram_markers.csv"
    _write_csv(
        markers_path,
        ["guess_threshold_sec", "outlier_threshold_sec"],
        [
            {
                "guess_threshold_sec": cfg.guess_threshold_sec,
                "outlier_threshold_sec": cfg.outlier_threshold_sec,
            }
        ],
    )
    paths["tts_histogram_markers"] = markers_path

    bars: list[dict] = []
    by_cell: dict[tuple[str, str], list[float]] = {}
    for student_id, m in metrics.items():
        label = groups.get(student_id)
        if label is None or m["guessing_rate"] is None:
            continue
        by_cell.setdefault((label.school, label.condition), []).append(
            float(m["guessing_rate"])
        )
    for (school, condition), values in sorted(by_cell.items()):
        bars.append(
            {
                "school": school,
                "condition": condition,
                "mean_guessing_rate": float(np.mean(values)),
                "n": len(values),
            }
        )
    bars_path = out / "guessing_bars.csv"
    _write_csv(bars_path, ["school", "condition", "mean_guessing_rate", "n"], bars)
    paths["guessing_bars"] = bars_path
    return paths
