"""Temporal train/test protocol shared by the CLI and the comparison runs."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from .datagen import TemporalDataset, add_months
from .envsplit import EnvironmentAssignment, Granularity, split
from .metrics import aut, classification_report, cosine, fcs
from .model import TIFModel
from .trainer import TrainConfig, TrainReport, prepare, train

METRIC_COLUMNS = ("window", "macro_f1", "precision_mal", "recall_mal", "fcs_total", "cosine_mean_mal")


def month_start(d: dt.date) -> dt.date:
    return d.replace(day=1)


def train_end_date(ds: TemporalDataset, train_months: int) -> dt.date:
    """First day after ``train_months`` calendar months counted from the first sample."""
    return add_months(month_start(ds.t_min), train_months)


def time_windows(
    ds: TemporalDataset,
    start: dt.date,
    granularity: str | Granularity = "monthly",
    end: dt.date | None = None,
) -> list[tuple[str, TemporalDataset]]:
    """Consecutive calendar windows from ``start`` until ``end`` (default: past the last sample)."""
    gran = Granularity.parse(granularity)
    if gran.months is None:
        raise ValueError("test windows need a calendar granularity (monthly or quarterly)")
    if end is None:
        end = add_months(month_start(ds.t_max), 1) if len(ds) else start
    out = []
    lo = start
    while lo < end:
        hi = min(add_months(lo, gran.months), end)
        out.append((lo.strftime("%Y-%m"), ds.between(lo, hi)))
        lo = hi
    return out


@dataclass
class WindowMetrics:
    window: str
    macro_f1: float
    precision_mal: float
    recall_mal: float
    fcs_total: float
    cosine_mean_mal: float

    def row(self) -> list[str]:
        return [self.window] + [f"{getattr(self, c):.6f}" for c in METRIC_COLUMNS[1:]]


def reference_malware(ds: TemporalDataset, ids) -> np.ndarray:
    """Dense rows of the malware samples among ``ids`` (the held-out training slice)."""
    wanted = set(ids)
    return ds.subset([s for s in ds.samples if s.id in wanted and s.label == 1]).features()


def evaluate_windows(
    model: TIFModel,
    windows: list[tuple[str, TemporalDataset]],
    reference: np.ndarray | None = None,
    with_fcs: bool = True,
    fcs_samples: int | None = 200,
    seed: int = 0,
) -> list[WindowMetrics]:
    """Per-window detection metrics, FCS total, and malware-embedding drift."""
    ref_mean = model.embed_numpy(reference).mean(axis=0) if reference is not None and len(reference) else None
    out = []
    nan = float("nan")
    for label, win in windows:
        if len(win) == 0:
            out.append(WindowMetrics(label, nan, nan, nan, nan, nan))
            continue
        X, y = win.features(), win.labels()
        report = classification_report(y, model.predict(X))
        fcs_total = nan
        if with_fcs and 0 < y.sum() < len(y):
            fcs_total = fcs(model, X, y, seed=seed, max_samples=fcs_samples).total
        cos = nan
        if ref_mean is not None and y.sum() > 0:
            cos = cosine(model.embed_numpy(X[y == 1]).mean(axis=0), ref_mean)
        out.append(WindowMetrics(label, report.macro_f1, report.precision[1], report.recall[1], fcs_total, cos))
    return out


def aut_summary(rows: list[WindowMetrics], horizons=(6, 12)) -> dict:
    f1 = [r.macro_f1 for r in rows if not np.isnan(r.macro_f1)]
    summary = {"n_windows": len(rows), "aut_macro_f1": aut(f1) if len(f1) >= 2 else None}
    for h in horizons:
        if len(f1) >= h:
            summary[f"aut_macro_f1_{h}"] = aut(f1[:h])
    return summary


@dataclass
class TrainedRun:
    method: str
    model: TIFModel
    report: TrainReport
    train_ds: TemporalDataset
    assignment: EnvironmentAssignment
    validation_ids: list[str] = field(default_factory=list)


def fit(
    ds: TemporalDataset, train_months: int, config: TrainConfig, method: str = "tif"
) -> TrainedRun:
    """Train on the first ``train_months`` months of ``ds``."""
    train_ds = ds.between(None, train_end_date(ds, train_months))
    assignment = split(train_ds, config.granularity)
    model, report = train(train_ds, config, method, assignment)
    data = prepare(train_ds, assignment, config)
    val_ids = [train_ds.samples[i].id for i in data.val_idx]
    return TrainedRun(method, model, report, train_ds, assignment, val_ids)
