"""Two-stage invariant training and the plain ERM control trainer.

Stage 1 draws one mini-batch per environment and minimizes the
environment-averaged classification + multi-proxy contrastive loss.  The
optimizer is then rebuilt from scratch and Stage 2 minimizes
classification + contrastive loss over the union batch plus the invariant
gradient alignment penalty over the per-environment partition.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import losses
from .datagen import TemporalDataset
from .envsplit import EnvironmentAssignment, merge_single_class, split
from .losses import LossWeights
from .metrics import macro_f1
from .model import ModelConfig, TIFModel, init_model

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class NumericalError(ArithmeticError):
    def __init__(self, stage: str, epoch: int, message: str = "non-finite loss"):
        self.stage = stage
        self.epoch = epoch
        super().__init__(f"{message} in {stage} epoch {epoch}")


@dataclass
class Ablation:
    mpc1: bool = True
    mpc2: bool = True
    iga: bool = True

    def any(self) -> bool:
        return self.mpc1 or self.mpc2 or self.iga

    @classmethod
    def parse(cls, value: "str | dict | Ablation") -> "Ablation":
        """Accept a dict, or a string like ``"none"``, ``"all"``, ``"mpc1,iga"``."""
        if isinstance(value, Ablation):
            return value
        if isinstance(value, dict):
            return cls(**value)
        value = value.strip().lower()
        if value in ("none", "erm", ""):
            return cls(False, False, False)
        if value in ("all", "full", "tif"):
            return cls()
        parts = {p.strip() for p in value.split(",")}
        unknown = parts - {"mpc1", "mpc2", "iga"}
        if unknown:
            raise ConfigError(f"unknown ablation components {sorted(unknown)}")
        return cls("mpc1" in parts, "mpc2" in parts, "iga" in parts)


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    total_epochs: int = 20
    stage1_epochs: int | None = None  # None -> total_epochs // 2
    batch_size_per_env: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    granularity: str = "monthly"
    seed: int = 0
    ablation: Ablation = field(default_factory=Ablation)
    val_fraction: float = 0.2
    select_best: bool = True

    @property
    def n_stage1(self) -> int:
        return self.total_epochs // 2 if self.stage1_epochs is None else self.stage1_epochs

    def validate(self) -> None:
        if self.total_epochs < 0:
            raise ConfigError("total_epochs must be >= 0")
        if self.n_stage1 < 0:
            raise ConfigError("stage1_epochs must be >= 0")
        if self.n_stage1 > self.total_epochs:
            raise ConfigError(
                f"stage1_epochs ({self.n_stage1}) exceeds total_epochs ({self.total_epochs})"
            )
        if self.batch_size_per_env < 2:
            raise ConfigError("batch_size_per_env must be >= 2")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["layer_widths"] = list(self.model.layer_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        try:
            if "weights" in d:
                d["weights"] = LossWeights(**d["weights"])
            if "model" in d:
                m = dict(d["model"])
                if "layer_widths" in m:
                    m["layer_widths"] = tuple(m["layer_widths"])
                d["model"] = ModelConfig(**m)
            if "ablation" in d:
                d["ablation"] = Ablation.parse(d["ablation"])
            cfg = cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg


@dataclass
class TrainReport:
    trainer: str
    config: dict
    stages: dict[str, list[dict]] = field(default_factory=dict)
    iga_full: list[float] = field(default_factory=list)
    selected_epoch: int | None = None
    wall_clock: float = 0.0
    warnings: list[str] = field(default_factory=list)

    def epochs(self, stage: str) -> list[dict]:
        return self.stages.get(stage, [])

    def series(self, key: str, stage: str | None = None) -> list[float]:
        stages = [stage] if stage else list(self.stages)
        return [ep[key] for s in stages for ep in self.stages.get(s, [])]

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Data preparation


@dataclass
class PreparedData:
    X: torch.Tensor
    y: torch.Tensor
    env: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    n_envs: int

    def env_indices(self) -> list[np.ndarray]:
        tr_env = self.env[self.train_idx]
        return [self.train_idx[tr_env == e] for e in range(self.n_envs)]


def prepare(
    ds: TemporalDataset, assignment: EnvironmentAssignment, config: TrainConfig
) -> PreparedData:
    """Dense tensors plus a label-stratified 80/20 hold-out inside every environment."""
    if len(ds) == 0:
        raise ConfigError("empty training set")
    missing = [s.id for s in ds.samples if s.id not in assignment.env_of_sample]
    if missing:
        raise ConfigError(f"{len(missing)} training samples have no environment, e.g. {missing[0]}")
    if assignment.single_class_envs:
        assignment = merge_single_class(ds, assignment)
    X = torch.from_numpy(ds.features(np.float32))
    y_np = ds.labels()
    env = np.array([assignment.env_of_sample[s.id] for s in ds.samples], dtype=np.int64)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    val = []
    for e in range(assignment.env_count):
        for c in (0, 1):
            idx = np.flatnonzero((env == e) & (y_np == c))
            n_val = int(round(config.val_fraction * len(idx)))
            if n_val >= len(idx):
                n_val = len(idx) - 1
            if n_val > 0:
                val.append(rng.permutation(idx)[:n_val])
    val_idx = np.sort(np.concatenate(val)) if val else np.zeros(0, dtype=np.int64)
    mask = np.ones(len(ds), dtype=bool)
    mask[val_idx] = False
    return PreparedData(
        X, torch.from_numpy(y_np).float(), env, np.flatnonzero(mask), val_idx, assignment.env_count
    )


class EnvSampler:
    """Cycles through a shuffled environment; draws with replacement if it is too small."""

    def __init__(self, indices: np.ndarray, batch_size: int, rng: np.random.Generator):
        self.indices = indices
        self.batch_size = batch_size
        self.rng = rng
        self.with_replacement = len(indices) < batch_size
        self._perm = rng.permutation(indices)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self.with_replacement:
            return self.rng.choice(self.indices, size=self.batch_size, replace=True)
        if self._pos + self.batch_size > len(self._perm):
            self._perm = self.rng.permutation(self.indices)
            self._pos = 0
        out = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


def _make_optimizer(model: TIFModel, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=config.learning_rate)


def _val_f1(model: TIFModel, data: PreparedData) -> float:
    if len(data.val_idx) == 0:
        return float("nan")
    pred = model.predict(data.X[data.val_idx])
    return macro_f1(data.y[data.val_idx].numpy(), pred)


@torch.no_grad()
def full_iga(model: TIFModel, data: PreparedData) -> float:
    """IGA penalty over the complete training partition (monitoring only)."""
    logits = torch.from_numpy(model.predict_logits(data.X))
    parts_z, parts_y = [], []
    for idx in data.env_indices():
        if len(idx):
            parts_z.append(logits[idx])
            parts_y.append(data.y[idx].double())
    return float(losses.iga_penalty_from_logits(parts_z, parts_y))


class _Selector:
    """Keeps the best validation checkpoint among the last quarter of epochs."""

    def __init__(self, n_epochs: int, enabled: bool):
        self.first = n_epochs - max(1, math.ceil(n_epochs / 4)) if n_epochs else 0
        self.enabled = enabled
        self.best = -math.inf
        self.state = None
        self.epoch = None

    def offer(self, epoch: int, score: float, model: TIFModel) -> None:
        if not self.enabled or epoch < self.first or not score > self.best:
            return
        self.best = score
        self.state = copy.deepcopy(model.state_dict())
        self.epoch = epoch

    def restore(self, model: TIFModel) -> int | None:
        if self.enabled and self.state is not None:
            model.load_state_dict(self.state)
        return self.epoch


def _check_finite(value: torch.Tensor, stage: str, epoch: int) -> None:
    if not torch.isfinite(value):
        raise NumericalError(stage, epoch)


def _mean_dict(rows: list[dict]) -> dict:
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]} if rows else {}


# ---------------------------------------------------------------------------
# Trainers


StageCallback = Callable[[str, TIFModel, torch.optim.Optimizer], None]


def train_erm(
    ds: TemporalDataset,
    config: TrainConfig,
    assignment: EnvironmentAssignment | None = None,
    model: TIFModel | None = None,
) -> tuple[TIFModel, TrainReport]:
    """Mini-batch BCE over the shuffled training set.

    The environment split is only used to stratify the validation hold-out
    and to size batches like the invariant trainer
    (``batch_size_per_env * n_envs``).
    """
    config.validate()
    start = time.perf_counter()
    if assignment is None:
        assignment = split(ds, config.granularity)
    data = prepare(ds, assignment, config)
    model = copy.deepcopy(model) if model is not None else init_model(ds.dim, config.model, config.seed)
    report = TrainReport("erm", config.to_dict())
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11]))
    batch = config.batch_size_per_env * data.n_envs
    opt = _make_optimizer(model, config)
    selector = _Selector(config.total_epochs, config.select_best)
    rows_out = []
    for epoch in range(config.total_epochs):
        perm = rng.permutation(data.train_idx)
        rows = []
        for s in range(0, len(perm), batch):
            idx = perm[s:s + batch]
            logits = model.logit(data.X[idx])
            loss = losses.cls_loss(logits, data.y[idx])
            _check_finite(loss, "erm", epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            rows.append({"cls": loss.item(), "total": loss.item()})
        row = _mean_dict(rows)
        row["val_macro_f1"] = _val_f1(model, data)
        rows_out.append(row)
        selector.offer(epoch, row["val_macro_f1"], model)
    report.stages["erm"] = rows_out
    report.selected_epoch = selector.restore(model)
    report.wall_clock = time.perf_counter() - start
    return model, report


def train_tif(
    ds: TemporalDataset,
    assignment: EnvironmentAssignment,
    config: TrainConfig,
    model: TIFModel | None = None,
    on_stage_start: StageCallback | None = None,
) -> tuple[TIFModel, TrainReport]:
    """Two-stage invariant training.

    With every ablation flag off the framework contributes nothing, and the
    run is delegated to :func:`train_erm` (same batches, same updates).
    """
    config.validate()
    if not config.ablation.any():
        model, report = train_erm(ds, config, assignment, model)
        report.trainer = "tif(ablation=none)"
        return model, report

    start = time.perf_counter()
    data = prepare(ds, assignment, config)
    model = copy.deepcopy(model) if model is not None else init_model(ds.dim, config.model, config.seed)
    report = TrainReport("tif", config.to_dict())
    w = config.weights
    ab = config.ablation

    env_idx = [idx for idx in data.env_indices() if len(idx)]
    if len(env_idx) < 2 and config.total_epochs > config.n_stage1 and ab.iga:
        raise ConfigError("invariant gradient alignment needs at least two environments")
    seeds = np.random.SeedSequence([config.seed, 13]).spawn(len(env_idx))
    samplers = [EnvSampler(idx, config.batch_size_per_env, np.random.default_rng(s))
                for idx, s in zip(env_idx, seeds)]
    for e, smp in enumerate(samplers):
        if smp.with_replacement:
            msg = f"environment {e} has {len(smp.indices)} samples < batch size; sampling with replacement"
            logger.warning(msg)
            report.warnings.append(msg)
    steps_per_epoch = max(1, math.ceil(max(len(i) for i in env_idx) / config.batch_size_per_env))

    def draw() -> tuple[torch.Tensor, torch.Tensor, list[int]]:
        parts = [smp.next() for smp in samplers]
        idx = np.concatenate(parts)
        return data.X[idx], data.y[idx], [len(p) for p in parts]

    def stage1_step() -> tuple[torch.Tensor, dict]:
        xb, yb, sizes = draw()
        emb, logits = model(xb)
        rows, totals = [], []
        for emb_e, z_e, y_e in zip(emb.split(sizes), logits.split(sizes), yb.split(sizes)):
            cls = losses.cls_loss(z_e, y_e)
            row = {"cls": cls.item()}
            total = cls
            if ab.mpc1:
                terms = losses.mpc_loss(emb_e, y_e, model.proxies, w)
                total = total + w.alpha * terms.total
                row.update(pal=terms.pal.item(), intra=terms.intra.item(), inter=terms.inter.item())
            totals.append(total)
            rows.append(row)
        loss = torch.stack(totals).mean()
        with torch.no_grad():
            iga = losses.iga_penalty_from_logits(logits.split(sizes), yb.split(sizes))
        row = _mean_dict(rows)
        row.update(iga=iga.item(), total=loss.item())
        return loss, row

    def stage2_step() -> tuple[torch.Tensor, dict]:
        xb, yb, sizes = draw()
        emb, logits = model(xb)
        cls = losses.cls_loss(logits, yb)
        loss = cls
        row = {"cls": cls.item()}
        if ab.mpc2:
            terms = losses.mpc_loss(emb, yb, model.proxies, w)
            loss = loss + w.alpha * terms.total
            row.update(pal=terms.pal.item(), intra=terms.intra.item(), inter=terms.inter.item())
        iga = losses.iga_penalty_from_logits(logits.split(sizes), yb.split(sizes))
        if ab.iga:
            loss = loss + w.beta * iga
        row.update(iga=iga.item(), total=loss.item())
        return loss, row

    n1 = config.n_stage1
    n2 = config.total_epochs - n1
    plan = [("stage1", n1, stage1_step), ("stage2", n2, stage2_step)]
    final_stage = "stage2" if n2 > 0 else "stage1"
    for stage, n_epochs, step in plan:
        if n_epochs == 0:
            report.stages[stage] = []
            continue
        opt = _make_optimizer(model, config)  # fresh optimizer state for each stage
        if on_stage_start is not None:
            on_stage_start(stage, model, opt)
        if stage == "stage2":
            report.iga_full.append(full_iga(model, data))
        selector = _Selector(n_epochs, config.select_best)
        rows_out = []
        for epoch in range(n_epochs):
            rows = []
            for _ in range(steps_per_epoch):
                loss, row = step()
                _check_finite(loss, stage, epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                model.project_proxies()
                rows.append(row)
            row = _mean_dict(rows)
            row["val_macro_f1"] = _val_f1(model, data)
            rows_out.append(row)
            if stage == "stage2":
                report.iga_full.append(full_iga(model, data))
            selector.offer(epoch, row["val_macro_f1"], model)
        report.stages[stage] = rows_out
        chosen = selector.restore(model)
        if stage == final_stage:
            report.selected_epoch = chosen
    report.wall_clock = time.perf_counter() - start
    return model, report


def train(
    ds: TemporalDataset,
    config: TrainConfig,
    method: str = "tif",
    assignment: EnvironmentAssignment | None = None,
    model: TIFModel | None = None,
) -> tuple[TIFModel, TrainReport]:
    """Dispatch to :func:`train_tif` or :func:`train_erm`."""
    if assignment is None:
        assignment = split(ds, config.granularity)
    if method == "erm":
        return train_erm(ds, config, assignment, model)
    if method == "tif":
        return train_tif(ds, assignment, config, model)
    raise ConfigError(f"unknown training method {method!r}")
