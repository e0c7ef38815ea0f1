"""Evaluation metrics and feature-level diagnostics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Classification metrics


@dataclass
class ClassReport:
    f1: tuple[float, float]
    precision: tuple[float, float]
    recall: tuple[float, float]
    undefined: tuple[bool, bool]  # class absent from truth and prediction

    @property
    def macro_f1(self) -> float:
        return float(np.mean(self.f1))


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def classification_report(y_true, y_pred) -> ClassReport:
    y_true = np.asarray(y_true).astype(int)
    y_pred = np.asarray(y_pred).astype(int)
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise ValueError("y_true and y_pred must be non-empty and equally long")
    f1, prec, rec, undefined = [], [], [], []
    for c in (0, 1):
        tp = int(np.sum((y_true == c) & (y_pred == c)))
        fp = int(np.sum((y_true != c) & (y_pred == c)))
        fn = int(np.sum((y_true == c) & (y_pred != c)))
        prec.append(_safe_div(tp, tp + fp))
        rec.append(_safe_div(tp, tp + fn))
        f1.append(_safe_div(2 * tp, 2 * tp + fp + fn))
        undefined.append(tp + fp + fn == 0)
    return ClassReport(tuple(f1), tuple(prec), tuple(rec), tuple(undefined))


def macro_f1(y_true, y_pred) -> float:
    """Unweighted mean of the benign and malware F1.

    A class absent from both truth and prediction contributes 0 (0/0 -> 0)
    and is logged.
    """
    report = classification_report(y_true, y_pred)
    if any(report.undefined):
        logger.debug("macro_f1: class absent from truth and prediction, F1 taken as 0")
    return report.macro_f1


@dataclass
class MetricSeries:
    window_labels: list
    values: list[float]

    def __post_init__(self) -> None:
        if len(self.window_labels) != len(self.values):
            raise ValueError("window_labels and values differ in length")
        for a, b in zip(self.window_labels, self.window_labels[1:]):
            if not a < b:
                raise ValueError("window labels must be strictly increasing")


def aut(series: "MetricSeries | Sequence[float]") -> float:
    """Area under time: trapezoidal mean of a per-window metric."""
    values = np.asarray(series.values if isinstance(series, MetricSeries) else series, dtype=float)
    n = len(values)
    if n < 2:
        raise ValueError("AUT needs at least two time points")
    return float(np.sum((values[1:] + values[:-1]) / 2.0) / (n - 1))


# ---------------------------------------------------------------------------
# Active ratios and feature properties


def active_ratio(X: np.ndarray, feature: int | None = None) -> np.ndarray | float:
    """Fraction of rows in which a feature is present (all features if ``feature`` is None)."""
    X = np.asarray(X)
    if X.shape[0] == 0:
        raise ValueError("active ratio of an empty subset")
    if feature is None:
        return X.mean(axis=0, dtype=np.float64)
    return float(X[:, feature].mean(dtype=np.float64))


def class_gap(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-feature ``|r(f, S_malware) - r(f, S_benign)|``."""
    y = np.asarray(y)
    return np.abs(active_ratio(X[y == 1]) - active_ratio(X[y == 0]))


@dataclass
class StabilityResult:
    stable: bool
    max_deviation: float
    overall_ratio: float


def max_ratio_deviation(
    X: np.ndarray,
    months: np.ndarray,
    n0: int,
    n_subsets: int = 200,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Largest deviation of each column's active ratio over sampled subsets.

    Monte Carlo surrogate for the all-subsets stability definition: the
    deviation from the overall ratio is measured on ``n_subsets`` uniform
    random subsets with sizes drawn from ``[n0, |S|]`` and on every run of
    consecutive months starting at each month, extended until it holds at
    least ``n0`` samples.  Returns ``(max_deviation, overall_ratio)``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    months = np.asarray(months)
    n = len(X)
    if n0 > n:
        raise ValueError(f"n0={n0} exceeds sample count {n}")
    if n0 < 1:
        raise ValueError("n0 must be >= 1")
    overall = X.mean(axis=0)
    rng = np.random.default_rng(seed)
    rows = []  # subset indicator vectors; dividing sums by sizes keeps constant columns exact
    for _ in range(n_subsets):
        size = int(rng.integers(n0, n + 1))
        row = np.zeros(n)
        row[rng.choice(n, size=size, replace=False)] = 1.0
        rows.append(row)

    order = np.argsort(months, kind="stable")
    _, starts = np.unique(months[order], return_index=True)
    bounds = list(starts) + [n]
    for a in range(len(starts)):
        for b in range(a + 1, len(bounds)):
            lo, hi = bounds[a], bounds[b]
            if hi - lo >= n0:
                row = np.zeros(n)
                row[order[lo:hi]] = 1.0
                rows.append(row)
                break
    worst = np.zeros(X.shape[1])
    for chunk in range(0, len(rows), 50):
        block = np.stack(rows[chunk:chunk + 50])
        means = (block @ X) / block.sum(axis=1, keepdims=True)
        worst = np.maximum(worst, np.abs(means - overall).max(axis=0))
    return worst, overall


def stability_check(
    column: np.ndarray,
    months: np.ndarray,
    epsilon: float,
    n0: int,
    n_subsets: int = 200,
    seed: int = 0,
) -> StabilityResult:
    """Whether one feature's active ratio stays within ``epsilon`` on large subsets.

    ``column`` is the 0/1 activation over the sample set and ``months`` the
    month index of each sample; see :func:`max_ratio_deviation`.
    """
    worst, overall = max_ratio_deviation(np.asarray(column)[:, None], months, n0, n_subsets, seed)
    return StabilityResult(bool(worst[0] <= epsilon), float(worst[0]), float(overall[0]))


@dataclass
class DiscriminabilityResult:
    discriminative: bool
    gap: float
    min_subsample_gap: float


def discriminability_check(
    column: np.ndarray,
    labels: np.ndarray,
    delta: float,
    n_subsets: int = 100,
    rate: float = 0.5,
    seed: int = 0,
) -> DiscriminabilityResult:
    """Class gap of one feature and its minimum over random class subsamples."""
    column = np.asarray(column, dtype=np.float64)
    labels = np.asarray(labels)
    mal, ben = column[labels == 1], column[labels == 0]
    if len(mal) == 0 or len(ben) == 0:
        raise ValueError("both classes are needed")
    gap = abs(mal.mean() - ben.mean())
    rng = np.random.default_rng(seed)
    worst = gap
    for _ in range(n_subsets):
        sm = rng.choice(mal, size=max(1, int(rate * len(mal))), replace=False)
        sb = rng.choice(ben, size=max(1, int(rate * len(ben))), replace=False)
        worst = min(worst, abs(sm.mean() - sb.mean()))
    return DiscriminabilityResult(bool(gap >= delta), float(gap), float(worst))


# ---------------------------------------------------------------------------
# Attribution


def integrated_gradients(
    forward: Callable[[torch.Tensor], torch.Tensor],
    X: np.ndarray | torch.Tensor,
    steps: int = 64,
    runs: int = 1,
    flip_prob: float = 0.0,
    seed: int = 0,
    chunk: int = 4096,
    dtype: torch.dtype = torch.float32,
) -> np.ndarray:
    """Midpoint-rule integrated gradients from the all-zeros baseline.

    ``forward`` maps a ``(n, d)`` batch to ``n`` scalar outputs (the malware
    logit).  With ``runs > 1`` each run flips every input bit independently
    with probability ``flip_prob`` and the attributions are averaged.
    Returns an ``(n, d)`` array.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    X = torch.as_tensor(np.asarray(X), dtype=dtype)
    single = X.dim() == 1
    if single:
        X = X[None]
    n, d = X.shape
    gen = torch.Generator().manual_seed(seed)
    alphas = (torch.arange(steps, dtype=dtype) + 0.5) / steps
    total = torch.zeros((n, d), dtype=torch.float64)
    per_chunk = max(1, chunk // steps)
    for _ in range(runs):
        Xr = X
        if flip_prob > 0:
            flips = torch.rand((n, d), generator=gen, dtype=torch.float64) < flip_prob
            Xr = torch.where(flips, 1 - X, X)
        for start in range(0, n, per_chunk):
            xb = Xr[start:start + per_chunk]
            path = (alphas[None, :, None] * xb[:, None, :]).reshape(-1, d).requires_grad_(True)
            out = forward(path)
            (grad,) = torch.autograd.grad(out.sum(), path)
            avg_grad = grad.reshape(len(xb), steps, d).mean(dim=1)
            total[start:start + len(xb)] += (avg_grad * xb).double()
    attr = (total / runs).numpy()
    return attr[0] if single else attr


def importance_scores(attributions: np.ndarray) -> np.ndarray:
    """Mean positive attribution per feature."""
    return np.clip(attributions, 0.0, None).mean(axis=0)


def fcs_from_parts(gap: np.ndarray, importance: np.ndarray) -> tuple[np.ndarray, float]:
    scores = np.abs(np.asarray(gap, dtype=float)) * np.asarray(importance, dtype=float)
    return scores, float(scores.sum())


@dataclass
class FCSResult:
    scores: np.ndarray
    total: float
    gap: np.ndarray
    importance: np.ndarray

    def fraction_on(self, indices) -> float:
        if self.total <= 0:
            return 0.0
        return float(self.scores[list(indices)].sum() / self.total)


def fcs(
    model,
    X: np.ndarray,
    y: np.ndarray,
    steps: int = 64,
    runs: int = 5,
    flip_prob: float = 0.01,
    seed: int = 0,
    max_samples: int | None = None,
) -> FCSResult:
    """Feature contribution scores of ``model`` on one window.

    ``gap`` is measured on the whole window; importance is the mean positive
    IG toward the malware logit over the window's malware samples (at most
    ``max_samples`` of them, chosen at random).
    """
    X = np.asarray(X)
    y = np.asarray(y)
    gap = class_gap(X, y)
    Xm = X[y == 1]
    if max_samples is not None and len(Xm) > max_samples:
        idx = np.sort(np.random.default_rng(seed).choice(len(Xm), max_samples, replace=False))
        Xm = Xm[idx]
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    attr = integrated_gradients(model.logit, Xm, steps, runs, flip_prob, seed, dtype=dtype)
    model.train(was_training)
    imp = importance_scores(attr)
    scores, total = fcs_from_parts(gap, imp)
    return FCSResult(scores, total, gap, imp)


# ---------------------------------------------------------------------------
# Representation stability


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


@dataclass
class SimilarityReport:
    cosines: list[float]
    variance: float


def representation_similarity_variance(
    model, X_reference_malware: np.ndarray, windows_malware: Sequence[np.ndarray]
) -> SimilarityReport:
    """Cosine between each window's mean malware embedding and the reference mean."""
    ref = model.embed_numpy(X_reference_malware).mean(axis=0)
    cos = []
    for Xw in windows_malware:
        if len(Xw) == 0:
            cos.append(float("nan"))
            continue
        cos.append(cosine(model.embed_numpy(Xw).mean(axis=0), ref))
    valid = [c for c in cos if not np.isnan(c)]
    var = float(np.var(valid)) if valid else float("nan")
    return SimilarityReport(cos, var)
