"""Paired t-tests and relative-improvement summaries over result tables."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence


class DegenerateDataError(ValueError):
    pass


def _betacf(a: float, b: float, x: float, max_iter: int = 500, tol: float = 1e-16) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)``."""
    return betainc(0.5 * df, 0.5, df / (df + t * t))


@dataclass
class TTestResult:
    t: float
    p: float
    df: int
    mean_diff: float


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    if len(a) != len(b):
        raise ValueError(f"paired samples differ in length ({len(a)} vs {len(b)})")
    n = len(a)
    if n < 2:
        raise ValueError("need at least two pairs")
    d = [float(x) - float(y) for x, y in zip(a, b)]
    mean = math.fsum(d) / n
    var = math.fsum((x - mean) ** 2 for x in d) / (n - 1)
    if var <= 1e-24 * max(1.0, mean * mean):
        raise DegenerateDataError("differences have zero variance")
    t = mean / math.sqrt(var / n)
    return TTestResult(t, student_t_sf2(t, n - 1), n - 1, mean)


# ---------------------------------------------------------------------------
# Result tables
# ---------------------------------------------------------------------------


@dataclass
class ResultTable:
    """``values[(row, metric)][method]`` in meV or meV/A."""

    rows: list[str]
    metrics: list[str]
    methods: list[str]
    values: dict

    def column(self, method: str, metric: str) -> list[float]:
        return [self.values[(r, metric)][method] for r in self.rows]


def read_long_table(path) -> ResultTable:
    """CSV with columns ``row,metric,method,value``."""
    rows, metrics, methods, values = [], [], [], {}
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            r, m, meth = rec["row"], rec["metric"], rec["method"]
            v = float(rec["value"])
            if v <= 0:
                raise ValueError(f"{path}: non-positive value for {r}/{m}/{meth}")
            for lst, item in ((rows, r), (metrics, m), (methods, meth)):
                if item not in lst:
                    lst.append(item)
            values.setdefault((r, m), {})[meth] = v
    for key, by_method in values.items():
        if set(by_method) != set(methods):
            raise ValueError(f"{path}: table is not rectangular at {key}")
    return ResultTable(rows, metrics, methods, values)


def read_column_file(path) -> dict[str, list[float]]:
    """CSV with a label column followed by numeric metric columns."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        cols = {h: [] for h in header[1:]}
        for rec in reader:
            for h, v in zip(header[1:], rec[1:]):
                cols[h].append(float(v))
    return cols


@dataclass
class Improvement:
    metric: str
    percent: float
    rows_used: int
    excluded: list[str]


def relative_improvement(table: ResultTable, baseline: str, method: str) -> dict[str, Improvement]:
    for m in (baseline, method):
        if m not in table.methods:
            raise KeyError(f"method {m!r} not in table ({table.methods})")
    out = {}
    for metric in table.metrics:
        ratios, excluded = [], []
        for r in table.rows:
            base = table.values[(r, metric)][baseline]
            if base == 0:
                excluded.append(r)
                continue
            ratios.append((base - table.values[(r, metric)][method]) / base)
        pct = 100.0 * math.fsum(ratios) / len(ratios) if ratios else math.nan
        out[metric] = Improvement(metric, pct, len(ratios), excluded)
    return out


def fixture_path(name: str) -> Path:
    return Path(__file__).with_name("fixtures") / name
