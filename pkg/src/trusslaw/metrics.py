"""Error metrics: range-normalized RMSE and family-normalized R^2."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

COMPONENTS = ("S11", "S22", "S33", "S23", "S13", "S12")
NORMAL_COMPONENTS = COMPONENTS[:3]


def rmse(y_true, y_pred) -> float:
    d = np.asarray(y_pred, float) - np.asarray(y_true, float)
    return float(np.sqrt(np.mean(d * d)))


def nrmse(y_true, y_pred) -> float:
    """RMSE divided by the range of the true values."""
    y = np.asarray(y_true, float)
    span = float(np.max(y) - np.min(y))
    if span == 0:
        raise ValueError("true values have zero range")
    return rmse(y, y_pred) / span


def family_scale(y_true, families) -> np.ndarray:
    """Per-sample standard deviation of the true values within its family.

    Families whose spread is at round-off level (below 1e-8 of the overall
    standard deviation) fall back to the overall standard
    deviation (or 1 if that vanishes too).
    """
    y = np.asarray(y_true, float)
    fam = np.asarray(families)
    overall = float(np.std(y)) or 1.0
    out = np.empty_like(y)
    for f in np.unique(fam):
        sel = fam == f
        s = float(np.std(y[sel]))
        out[sel] = s if s > 1e-8 * overall else overall
    return out


def r2(y_true, y_pred, families=None) -> float:
    """Coefficient of determination on family-standardized values."""
    y = np.asarray(y_true, float)
    p = np.asarray(y_pred, float)
    if families is not None:
        s = family_scale(y, families)
        y, p = y / s, p / s
    ss_res = float(np.sum((y - p) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    if ss_tot == 0:
        raise ValueError("true values are constant")
    return 1.0 - ss_res / ss_tot


@dataclass
class ComponentStats:
    """Sufficient statistics from which every reported number is recomputed."""

    n: int
    sum_sq_err: float
    y_min: float
    y_max: float
    ss_res_std: float
    ss_tot_std: float

    @property
    def rmse(self) -> float:
        return float(np.sqrt(self.sum_sq_err / self.n))

    @property
    def nrmse(self) -> float:
        span = self.y_max - self.y_min
        return self.rmse / span if span > 0 else float("nan")

    @property
    def r2(self) -> float:
        return 1.0 - self.ss_res_std / self.ss_tot_std if self.ss_tot_std > 0 else float("nan")

    @classmethod
    def compute(cls, y_true, y_pred, families=None) -> "ComponentStats":
        y = np.asarray(y_true, float)
        p = np.asarray(y_pred, float)
        s = family_scale(y, families) if families is not None else np.ones_like(y)
        z, zp = y / s, p / s
        return cls(
            n=int(y.size),
            sum_sq_err=float(np.sum((p - y) ** 2)),
            y_min=float(np.min(y)),
            y_max=float(np.max(y)),
            ss_res_std=float(np.sum((z - zp) ** 2)),
            ss_tot_std=float(np.sum((z - np.mean(z)) ** 2)),
        )


@dataclass
class MetricsReport:
    """Rows keyed by (split, component, family); family "all" is the pooled row."""

    rows: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)

    def add(self, split: str, component: str, family: str, stats: ComponentStats) -> None:
        self.rows[(split, component, family)] = stats

    def get(self, split: str, component: str, family: str = "all") -> ComponentStats:
        return self.rows[(split, component, family)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["split", "component", "family", "n", "rmse", "nrmse", "r2",
                        "sum_sq_err", "y_min", "y_max", "ss_res_std", "ss_tot_std"])
            for (split, comp, fam), s in sorted(self.rows.items()):
                w.writerow([split, comp, fam, s.n, repr(s.rmse), repr(s.nrmse), repr(s.r2),
                            repr(s.sum_sq_err), repr(s.y_min), repr(s.y_max),
                            repr(s.ss_res_std), repr(s.ss_tot_std)])

    @classmethod
    def read_csv(cls, path) -> "MetricsReport":
        rep = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rep.add(row["split"], row["component"], row["family"], ComponentStats(
                    int(row["n"]), float(row["sum_sq_err"]), float(row["y_min"]),
                    float(row["y_max"]), float(row["ss_res_std"]), float(row["ss_tot_std"])))
        return rep


def stress_report(split: str, S_true, S_pred, families, report: MetricsReport | None = None,
                  W_true=None, W_pred=None) -> MetricsReport:
    """Per-component pooled and per-family statistics of Voigt stresses."""
    report = report or MetricsReport()
    S_true = np.asarray(S_true, float)
    S_pred = np.asarray(S_pred, float)
    fam = np.asarray(families)
    series = [(c, S_true[:, i], S_pred[:, i]) for i, c in enumerate(COMPONENTS)]
    if W_true is not None:
        series.append(("W", np.asarray(W_true, float), np.asarray(W_pred, float)))
    for comp, y, p in series:
        report.add(split, comp, "all", ComponentStats.compute(y, p, fam))
        for f in np.unique(fam):
            sel = fam == f
            report.add(split, comp, str(f), ComponentStats.compute(y[sel], p[sel]))
    return report
