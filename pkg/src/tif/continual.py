"""Drift-triggered model maintenance over a monthly test stream.

Each month the current model is scored.  When macro-F1 falls below the
threshold, the least confident samples of that month are labeled, appended
to the most recent training environment, and the model is retrained from
its current weights.
"""

from __future__ import annotations

import copy
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import TemporalDataset
from .envsplit import EnvironmentAssignment
from .metrics import macro_f1
from .model import TIFModel
from .trainer import ConfigError, TrainConfig, train_erm, train_tif

logger = logging.getLogger(__name__)

RETRAIN_MODES = ("full_two_stage", "stage2_only")


@dataclass
class ContinualConfig:
    f1_threshold: float = 0.90
    budget_per_update: int = 100
    retrain_mode: str = "full_two_stage"
    max_updates: int | None = None

    def validate(self) -> None:
        if not 0.0 <= self.f1_threshold <= 1.0:
            raise ConfigError(f"f1_threshold must lie in [0, 1], got {self.f1_threshold}")
        if self.budget_per_update < 1:
            raise ConfigError("budget_per_update must be >= 1")
        if self.retrain_mode not in RETRAIN_MODES:
            raise ConfigError(f"retrain_mode must be one of {RETRAIN_MODES}")
        if self.max_updates is not None and self.max_updates < 0:
            raise ConfigError("max_updates must be >= 0")


@dataclass
class MonthRecord:
    window: str
    macro_f1: float
    updated: bool
    n_labeled: int
    cumulative_cost: int


@dataclass
class ContinualReport:
    method: str
    config: dict
    months: list[MonthRecord] = field(default_factory=list)

    @property
    def update_months(self) -> list[str]:
        return [m.window for m in self.months if m.updated]

    @property
    def n_updates(self) -> int:
        return len(self.update_months)

    @property
    def first_update(self) -> int | None:
        """Position in the stream of the first triggered update."""
        for i, m in enumerate(self.months):
            if m.updated:
                return i
        return None

    @property
    def total_cost(self) -> int:
        return self.months[-1].cumulative_cost if self.months else 0

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "config": self.config,
            "n_updates": self.n_updates,
            "update_months": self.update_months,
            "total_cost": self.total_cost,
            "months": [asdict(m) for m in self.months],
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def select_low_confidence(proba: np.ndarray, budget: int) -> np.ndarray:
    """Indices of the ``budget`` probabilities closest to 0.5 (ties by position)."""
    margin = np.abs(np.asarray(proba) - 0.5)
    return np.sort(np.argsort(margin, kind="stable")[:budget])


def _retrain_config(base: TrainConfig, mode: str) -> TrainConfig:
    cfg = copy.deepcopy(base)
    if mode == "stage2_only":
        cfg.stage1_epochs = 0
    return cfg


def run_continual(
    model: TIFModel,
    train_ds: TemporalDataset,
    assignment: EnvironmentAssignment,
    stream: Sequence[tuple[str, TemporalDataset]],
    config: ContinualConfig,
    train_config: TrainConfig,
    method: str = "tif",
) -> tuple[TIFModel, ContinualReport]:
    """Walk ``stream`` month by month, retraining whenever macro-F1 drops below the threshold.

    ``stream`` holds ``(label, window)`` pairs in time order.  Retraining uses
    the same trainer as ``method`` and starts from the current weights.
    """
    config.validate()
    if method not in ("tif", "erm"):
        raise ConfigError(f"unknown training method {method!r}")
    for (_, a), (_, b) in zip(stream, stream[1:]):
        if len(a) and len(b) and a.t_max > b.t_min:
            raise ConfigError("stream windows must be time-ordered")

    report = ContinualReport(method, asdict(config))
    retrain_cfg = _retrain_config(train_config, config.retrain_mode)
    samples = list(train_ds.samples)
    env_of = dict(assignment.env_of_sample)
    last_env = assignment.env_count - 1
    cost = 0

    for label, window in stream:
        if len(window) == 0:
            report.months.append(MonthRecord(label, float("nan"), False, 0, cost))
            continue
        X, y = window.features(), window.labels()
        proba = model.predict_proba(X)
        f1 = macro_f1(y, (proba >= 0.5).astype(int))
        can_update = config.max_updates is None or report.n_updates < config.max_updates
        if f1 >= config.f1_threshold or not can_update:
            report.months.append(MonthRecord(label, f1, False, 0, cost))
            continue

        budget = config.budget_per_update
        if budget > len(window):
            warnings.warn(f"budget {budget} exceeds the {len(window)} samples of {label}; labeling all")
            budget = len(window)
        picked = [window.samples[i] for i in select_low_confidence(proba, budget)]
        samples.extend(picked)
        for s in picked:
            env_of[s.id] = last_env
        cost += len(picked)

        grown = TemporalDataset(train_ds.dim, samples, train_ds.feature_roles)
        grown_assignment = EnvironmentAssignment(
            assignment.granularity, dict(env_of), assignment.env_count,
            list(assignment.boundaries), [],
        )
        if method == "tif":
            model, _ = train_tif(grown, grown_assignment, retrain_cfg, model=model)
        else:
            model, _ = train_erm(grown, retrain_cfg, grown_assignment, model=model)
        logger.info("update at %s: macro-F1 %.4f, %d samples labeled", label, f1, len(picked))
        report.months.append(MonthRecord(label, f1, True, len(picked), cost))
    return model, report
