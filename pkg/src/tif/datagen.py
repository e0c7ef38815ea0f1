"""Synthetic drifting datasets and the on-disk dataset format.

A dataset on disk is a directory holding ``meta.json`` and ``samples.jsonl``.
Synthetic datasets are built month by month from a :class:`GeneratorSpec`
that plants four kinds of binary features: stable (constant class gap),
unstable (malware-side rate ramps to a new value after a drift month),
family signatures, and class-independent noise.
"""

from __future__ import annotations

import calendar
import datetime as dt
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DRIFT_RAMP_MONTHS = 6


class SpecError(ValueError):
    """Raised when a GeneratorSpec violates its invariants."""


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed."""

    def __init__(self, path: str | Path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{Path(path).name}:{line}: {message}")


@dataclass(frozen=True)
class Sample:
    id: str
    timestamp: dt.date
    label: int
    family: str | None
    active_features: tuple[int, ...]

    def validate(self, dim: int) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"sample {self.id}: label must be 0 or 1")
        if (self.family is None) != (self.label == 0):
            raise ValueError(f"sample {self.id}: family must be null iff label is 0")
        prev = -1
        for j in self.active_features:
            if j <= prev:
                raise ValueError(f"sample {self.id}: features not strictly increasing")
            if j >= dim:
                raise ValueError(f"sample {self.id}: feature index {j} out of range [0, {dim})")
            prev = j


def _sort_key(s: Sample) -> tuple[dt.date, str]:
    return (s.timestamp, s.id)


@dataclass
class TemporalDataset:
    dim: int
    samples: list[Sample] = field(default_factory=list)
    feature_roles: dict[str, list[int]] | None = None

    def __post_init__(self) -> None:
        self.samples = sorted(self.samples, key=_sort_key)

    @property
    def t_min(self) -> dt.date | None:
        return self.samples[0].timestamp if self.samples else None

    @property
    def t_max(self) -> dt.date | None:
        return self.samples[-1].timestamp if self.samples else None

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, samples: Iterable[Sample]) -> "TemporalDataset":
        return TemporalDataset(self.dim, list(samples), self.feature_roles)

    def between(self, start: dt.date | None = None, end: dt.date | None = None) -> "TemporalDataset":
        """Samples with ``start <= timestamp < end``."""
        return self.subset(
            s for s in self.samples
            if (start is None or s.timestamp >= start) and (end is None or s.timestamp < end)
        )

    def labels(self) -> np.ndarray:
        return np.fromiter((s.label for s in self.samples), dtype=np.int64, count=len(self.samples))

    def features(self, dtype=np.float32) -> np.ndarray:
        """Dense 0/1 matrix of shape (n_samples, dim)."""
        return to_dense(self.samples, self.dim, dtype)


def to_dense(samples: Sequence[Sample], dim: int, dtype=np.float32) -> np.ndarray:
    X = np.zeros((len(samples), dim), dtype=dtype)
    for i, s in enumerate(samples):
        if s.active_features:
            X[i, list(s.active_features)] = 1
    return X


# ---------------------------------------------------------------------------
# Calendar helpers


def add_months(d: dt.date, n: int) -> dt.date:
    """First day of the month ``n`` calendar months after ``d``'s month."""
    total = d.year * 12 + (d.month - 1) + n
    return dt.date(total // 12, total % 12 + 1, 1)


def month_offset(t: dt.date, origin: dt.date) -> int:
    return (t.year - origin.year) * 12 + (t.month - origin.month)


# ---------------------------------------------------------------------------
# Generator


@dataclass
class GeneratorSpec:
    """Parameters of a synthetic drifting dataset.

    ``family_schedule[m][f]`` is the prevalence of family ``f`` among malware
    in month ``m``.  Feature tuples:

    * stable: ``(index, p_benign, p_malware)``
    * unstable: ``(index, p_benign, p_malware_initial, drift_month, p_malware_final)``
    * family: ``(index, family, p_active_in_family)``; family may be the
      family name or its integer position
    * noise: ``(index, p_both)``
    """

    dim: int
    n_train_months: int
    n_test_months: int
    samples_per_month: int
    benign_malware_ratio: float
    n_families: int
    family_schedule: list[list[float]]
    stable_features: list[tuple] = field(default_factory=list)
    unstable_features: list[tuple] = field(default_factory=list)
    family_features: list[tuple] = field(default_factory=list)
    noise_features: list[tuple] = field(default_factory=list)
    seed: int = 0
    start_date: str = "2014-01-01"
    drift_ramp_months: int = DRIFT_RAMP_MONTHS

    @property
    def n_months(self) -> int:
        return self.n_train_months + self.n_test_months

    @property
    def family_names(self) -> list[str]:
        return [f"fam{f:02d}" for f in range(self.n_families)]

    def family_index(self, family: Any) -> int:
        if isinstance(family, (int, np.integer)):
            idx = int(family)
        else:
            try:
                idx = self.family_names.index(str(family))
            except ValueError:
                raise SpecError(f"unknown family {family!r}") from None
        if not 0 <= idx < self.n_families:
            raise SpecError(f"family index {idx} out of range")
        return idx

    def feature_roles(self) -> dict[str, list[int]]:
        return {
            "stable": sorted(int(f[0]) for f in self.stable_features),
            "unstable": sorted(int(f[0]) for f in self.unstable_features),
            "family": sorted(int(f[0]) for f in self.family_features),
            "noise": sorted(int(f[0]) for f in self.noise_features),
        }

    def malware_rate(self, feature: tuple, month: int) -> float:
        """Malware-side activation probability of an unstable feature in ``month``."""
        _, _, p0, drift_month, p1 = feature
        frac = (month - drift_month) / self.drift_ramp_months
        frac = min(max(frac, 0.0), 1.0)
        return p0 + (p1 - p0) * frac

    def validate(self) -> None:
        if self.dim < 1:
            raise SpecError("dim must be positive")
        for name in ("n_train_months", "n_test_months", "samples_per_month"):
            if getattr(self, name) < 0:
                raise SpecError(f"{name} must be non-negative")
        if self.benign_malware_ratio <= 0:
            raise SpecError("benign_malware_ratio must be positive")
        if self.drift_ramp_months < 1:
            raise SpecError("drift_ramp_months must be >= 1")

        seen: dict[int, str] = {}
        groups = {
            "stable": self.stable_features,
            "unstable": self.unstable_features,
            "family": self.family_features,
            "noise": self.noise_features,
        }
        for role, feats in groups.items():
            for f in feats:
                j = int(f[0])
                if not 0 <= j < self.dim:
                    raise SpecError(f"{role} feature index {j} out of range [0, {self.dim})")
                if j in seen:
                    raise SpecError(f"feature {j} listed as both {seen[j]} and {role}")
                seen[j] = role

        probs = [p for f in self.stable_features for p in f[1:3]]
        probs += [p for f in self.unstable_features for p in (f[1], f[2], f[4])]
        probs += [f[2] for f in self.family_features]
        probs += [f[1] for f in self.noise_features]
        if any(not 0.0 <= float(p) <= 1.0 for p in probs):
            raise SpecError("all feature probabilities must lie in [0, 1]")
        for f in self.family_features:
            self.family_index(f[1])

        if len(self.family_schedule) != self.n_months:
            raise SpecError(
                f"family_schedule has {len(self.family_schedule)} months, expected {self.n_months}"
            )
        n_mal = self.malware_per_month()
        for m, weights in enumerate(self.family_schedule):
            if len(weights) != self.n_families:
                raise SpecError(f"family_schedule[{m}] must have {self.n_families} weights")
            w = np.asarray(weights, dtype=float)
            if np.any(w < 0):
                raise SpecError(f"family_schedule[{m}] has negative weights")
            if w.sum() == 0:
                if n_mal > 0:
                    raise SpecError(f"family_schedule[{m}] is empty but month has malware")
                continue
            if abs(w.sum() - 1.0) > 1e-6:
                raise SpecError(f"family_schedule[{m}] sums to {w.sum():.6f}, expected 1")

    def malware_per_month(self) -> int:
        return int(round(self.samples_per_month / (1.0 + self.benign_malware_ratio)))

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("stable_features", "unstable_features", "family_features", "noise_features"):
            d[key] = [list(f) for f in d[key]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        for key in ("stable_features", "unstable_features", "family_features", "noise_features"):
            d[key] = [tuple(f) for f in d.get(key, [])]
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**d)


def generate(spec: GeneratorSpec) -> TemporalDataset:
    """Draw a dataset month by month; deterministic given ``spec.seed``."""
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    month_seeds = root.spawn(spec.n_months)
    start = dt.date.fromisoformat(spec.start_date)
    n_mal = spec.malware_per_month()
    n = spec.samples_per_month

    stable = np.array([(f[0], f[1], f[2]) for f in spec.stable_features], dtype=float).reshape(-1, 3)
    noise = np.array([(f[0], f[1]) for f in spec.noise_features], dtype=float).reshape(-1, 2)
    fam_idx = np.array([int(f[0]) for f in spec.family_features], dtype=int)
    fam_of = np.array([spec.family_index(f[1]) for f in spec.family_features], dtype=int)
    fam_p = np.array([float(f[2]) for f in spec.family_features], dtype=float)
    names = spec.family_names

    samples: list[Sample] = []
    for m in range(spec.n_months):
        rng = np.random.default_rng(month_seeds[m])
        first = add_months(start, m)
        n_days = calendar.monthrange(first.year, first.month)[1]

        labels = np.zeros(n, dtype=np.int64)
        labels[rng.permutation(n)[:n_mal]] = 1
        days = rng.integers(0, n_days, size=n)
        weights = np.asarray(spec.family_schedule[m], dtype=float)
        families = np.full(n, -1)
        if n_mal:
            families[labels == 1] = rng.choice(spec.n_families, size=n_mal, p=weights / weights.sum())

        X = np.zeros((n, spec.dim), dtype=bool)
        mal = labels == 1
        if len(stable):
            p = np.where(mal[:, None], stable[:, 2], stable[:, 1])
            X[:, stable[:, 0].astype(int)] = rng.random(p.shape) < p
        if spec.unstable_features:
            idx = np.array([int(f[0]) for f in spec.unstable_features])
            p_b = np.array([f[1] for f in spec.unstable_features], dtype=float)
            p_m = np.array([spec.malware_rate(f, m) for f in spec.unstable_features])
            p = np.where(mal[:, None], p_m, p_b)
            X[:, idx] = rng.random(p.shape) < p
        if len(fam_idx):
            in_family = families[:, None] == fam_of[None, :]
            X[:, fam_idx] = in_family & (rng.random((n, len(fam_idx))) < fam_p)
        if len(noise):
            X[:, noise[:, 0].astype(int)] = rng.random((n, len(noise))) < noise[:, 1]

        for i in range(n):
            samples.append(
                Sample(
                    id=f"m{m:03d}-{i:06d}",
                    timestamp=first + dt.timedelta(days=int(days[i])),
                    label=int(labels[i]),
                    family=names[families[i]] if labels[i] else None,
                    active_features=tuple(int(j) for j in np.flatnonzero(X[i])),
                )
            )
    return TemporalDataset(spec.dim, samples, spec.feature_roles())


def default_spec(seed: int = 0, samples_per_month: int = 1000) -> GeneratorSpec:
    """The reference drifting benchmark used by the experiments.

    2,000 features: 10 stable (gap 0.7), 10 unstable (gap 0.8 while fresh,
    ramping down to 0.05 by month 12), 20 family signature features for
    five families, the rest noise.  Family ``fam04`` first appears in the
    first test month (open world).
    """
    dim = 2000
    n_train, n_test = 12, 12
    n_months = n_train + n_test
    stable = [(j, 0.05, 0.75) for j in range(0, 10)]
    unstable = [(j, 0.05, 0.85, 6, 0.10) for j in range(10, 20)]
    family = [(20 + 4 * f + k, f, 0.8) for f in range(5) for k in range(4)]

    noise_rng = np.random.default_rng(12345)
    noise_p = noise_rng.uniform(0.005, 0.06, size=dim - 40)
    noise = [(j, round(float(p), 4)) for j, p in zip(range(40, dim), noise_p)]

    schedule = []
    for m in range(n_months):
        # families 0-3 trade prevalence smoothly; family 4 is new from month 12
        t = m / (n_months - 1)
        w = np.array([0.45 - 0.3 * t, 0.25, 0.15 + 0.1 * t, 0.15 + 0.2 * t, 0.0])
        if m >= n_train:
            w[4] = 0.3
        schedule.append([float(v) for v in w / w.sum()])

    return GeneratorSpec(
        dim=dim,
        n_train_months=n_train,
        n_test_months=n_test,
        samples_per_month=samples_per_month,
        benign_malware_ratio=8.3,
        n_families=5,
        family_schedule=schedule,
        stable_features=stable,
        unstable_features=unstable,
        family_features=family,
        noise_features=noise,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# File format


def _dump_sample(s: Sample) -> str:
    record = {
        "id": s.id,
        "timestamp": s.timestamp.isoformat(),
        "label": s.label,
        "family": s.family,
        "features": list(s.active_features),
    }
    return json.dumps(record, separators=(",", ":"), ensure_ascii=False)


def write_dataset(ds: TemporalDataset, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta: dict[str, Any] = {
        "dim": ds.dim,
        "t_min": ds.t_min.isoformat() if ds.t_min else None,
        "t_max": ds.t_max.isoformat() if ds.t_max else None,
    }
    if ds.feature_roles is not None:
        meta["feature_roles"] = ds.feature_roles
    with open(path / "meta.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(path / "samples.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for s in ds.samples:
            fh.write(_dump_sample(s))
            fh.write("\n")


def _parse_date(value: Any, path: Path, line: int, what: str) -> dt.date:
    if not isinstance(value, str):
        raise DatasetFormatError(path, line, f"{what} must be a YYYY-MM-DD string")
    try:
        return dt.date.fromisoformat(value)
    except ValueError:
        raise DatasetFormatError(path, line, f"bad {what} {value!r}") from None


def read_meta(path: str | Path) -> dict:
    meta_path = Path(path) / "meta.json"
    try:
        text = meta_path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DatasetFormatError(meta_path, 0, "missing meta.json") from None
    try:
        meta = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(meta_path, exc.lineno, exc.msg) from None
    if not isinstance(meta, dict) or not isinstance(meta.get("dim"), int) or meta["dim"] < 1:
        raise DatasetFormatError(meta_path, 1, "meta.json needs a positive integer 'dim'")
    return meta


def read_dataset(path: str | Path) -> TemporalDataset:
    path = Path(path)
    meta = read_meta(path)
    meta_path = path / "meta.json"
    dim = meta["dim"]
    t_min = t_max = None
    if meta.get("t_min") is not None or meta.get("t_max") is not None:
        t_min = _parse_date(meta.get("t_min"), meta_path, 1, "t_min")
        t_max = _parse_date(meta.get("t_max"), meta_path, 1, "t_max")
        if t_min > t_max:
            raise DatasetFormatError(meta_path, 1, f"t_min {t_min} is after t_max {t_max}")
    roles = meta.get("feature_roles")

    samples_path = path / "samples.jsonl"
    samples: list[Sample] = []
    prev_key: tuple[dt.date, str] | None = None
    with open(samples_path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(samples_path, lineno, f"malformed record: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise DatasetFormatError(samples_path, lineno, "record must be an object")
            missing = {"id", "timestamp", "label", "family", "features"} - set(rec)
            if missing:
                raise DatasetFormatError(samples_path, lineno, f"missing keys {sorted(missing)}")
            if not isinstance(rec["id"], str):
                raise DatasetFormatError(samples_path, lineno, "id must be a string")
            ts = _parse_date(rec["timestamp"], samples_path, lineno, "timestamp")
            label = rec["label"]
            if label not in (0, 1) or isinstance(label, bool):
                raise DatasetFormatError(samples_path, lineno, f"label must be 0 or 1, got {label!r}")
            family = rec["family"]
            if family is not None and not isinstance(family, str):
                raise DatasetFormatError(samples_path, lineno, "family must be a string or null")
            feats = rec["features"]
            if not isinstance(feats, list) or not all(
                isinstance(j, int) and not isinstance(j, bool) for j in feats
            ):
                raise DatasetFormatError(samples_path, lineno, "features must be an array of ints")
            sample = Sample(rec["id"], ts, label, family, tuple(feats))
            try:
                sample.validate(dim)
            except ValueError as exc:
                raise DatasetFormatError(samples_path, lineno, str(exc)) from None
            key = _sort_key(sample)
            if prev_key is not None and key < prev_key:
                raise DatasetFormatError(samples_path, lineno, "samples out of (timestamp, id) order")
            if t_min is not None and not t_min <= ts <= t_max:
                raise DatasetFormatError(samples_path, lineno, f"timestamp {ts} outside [t_min, t_max]")
            prev_key = key
            samples.append(sample)

    ds = TemporalDataset(dim, samples, roles)
    if samples and (ds.t_min != t_min or ds.t_max != t_max):
        raise DatasetFormatError(meta_path, 1, "t_min/t_max disagree with sample timestamps")
    return ds
