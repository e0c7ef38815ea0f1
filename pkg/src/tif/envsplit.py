"""Temporal environment segmentation.

Date-based granularities place a sample in window
``floor((t - T_min) / delta)`` where ``delta`` is one or three calendar
months; ``equal_count`` cuts the time-ordered sample list into n blocks.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import TemporalDataset, add_months, month_offset

logger = logging.getLogger(__name__)

_EQUAL_COUNT = re.compile(r"^equal_count\((\d+)\)$|^n=(\d+)$")


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class Granularity:
    kind: str  # "monthly" | "quarterly" | "equal_count"
    n: int | None = None

    @classmethod
    def parse(cls, value: "str | Granularity") -> "Granularity":
        if isinstance(value, Granularity):
            return value
        value = value.strip()
        if value in ("monthly", "quarterly"):
            return cls(value)
        m = _EQUAL_COUNT.match(value)
        if m:
            n = int(m.group(1) or m.group(2))
            if n < 1:
                raise SplitError("equal_count needs n >= 1")
            return cls("equal_count", n)
        raise SplitError(f"unknown granularity {value!r}")

    @property
    def months(self) -> int | None:
        return {"monthly": 1, "quarterly": 3}.get(self.kind)

    def __str__(self) -> str:
        return f"equal_count({self.n})" if self.kind == "equal_count" else self.kind


def window_index(t: dt.date, t_min: dt.date, months: int) -> int:
    """Calendar-aligned window index of ``t`` relative to ``t_min``."""
    return month_offset(t, t_min) // months


@dataclass
class EnvironmentAssignment:
    granularity: Granularity
    env_of_sample: dict[str, int]
    env_count: int
    boundaries: list  # window start dates, or start positions for equal_count
    single_class_envs: list[int] = field(default_factory=list)

    def members(self) -> list[list[str]]:
        out: list[list[str]] = [[] for _ in range(self.env_count)]
        for sid, e in self.env_of_sample.items():
            out[e].append(sid)
        return out

    def to_json(self, ds: TemporalDataset | None = None) -> dict:
        if ds is not None:
            groups: list[list[str]] = [[] for _ in range(self.env_count)]
            for s in ds.samples:
                if s.id in self.env_of_sample:
                    groups[self.env_of_sample[s.id]].append(s.id)
        else:
            groups = [sorted(g) for g in self.members()]
        return {
            "granularity": str(self.granularity),
            "envs": [{"index": e, "sample_ids": ids} for e, ids in enumerate(groups)],
        }

    def write(self, path: str | Path, ds: TemporalDataset | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_json(ds), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, data: dict) -> "EnvironmentAssignment":
        env_of = {}
        for env in data["envs"]:
            for sid in env["sample_ids"]:
                env_of[sid] = int(env["index"])
        return cls(Granularity.parse(data["granularity"]), env_of, len(data["envs"]), [])


def split(ds: TemporalDataset, granularity: "str | Granularity") -> EnvironmentAssignment:
    g = Granularity.parse(granularity)
    if len(ds) == 0:
        raise SplitError("cannot split an empty dataset")

    if g.kind == "equal_count":
        n = g.n
        if n > len(ds):
            raise SplitError(f"equal_count({n}) exceeds dataset size {len(ds)}")
        size, extra = divmod(len(ds), n)
        starts, raw = [], []
        pos = 0
        for e in range(n):
            starts.append(pos)
            block = size + (1 if e < extra else 0)
            raw.extend([e] * block)
            pos += block
        boundaries: list = starts
    else:
        t_min = ds.t_min
        raw = [window_index(s.timestamp, t_min, g.months) for s in ds.samples]
        # compact empty windows so indices stay contiguous
        used = sorted(set(raw))
        remap = {w: i for i, w in enumerate(used)}
        origin = dt.date(t_min.year, t_min.month, 1)
        boundaries = [add_months(origin, w * g.months) for w in used]
        raw = [remap[w] for w in raw]

    env_of = {s.id: e for s, e in zip(ds.samples, raw)}
    count = max(raw) + 1
    labels_in = [set() for _ in range(count)]
    for s, e in zip(ds.samples, raw):
        labels_in[e].add(s.label)
    single = [e for e in range(count) if len(labels_in[e]) < 2]
    if single:
        logger.warning("environments with a single class: %s", single)
    return EnvironmentAssignment(g, env_of, count, boundaries, single)


def merge_single_class(ds: TemporalDataset, assignment: EnvironmentAssignment) -> EnvironmentAssignment:
    """Fold single-class environments into their nearest neighbour in time.

    The earlier neighbour is preferred; the first environment merges forward.
    Returns a new assignment with contiguous indices.
    """
    groups = [set(m) for m in assignment.members()]
    label_of = {s.id: s.label for s in ds.samples}

    def classes(g: set) -> set:
        return {label_of[sid] for sid in g if sid in label_of}

    bounds = list(assignment.boundaries)
    changed = True
    while changed and len(groups) > 1:
        changed = False
        for e, g in enumerate(groups):
            if len(classes(g)) < 2:
                target = e - 1 if e > 0 else e + 1
                logger.warning("merging single-class environment %d into %d", e, target)
                groups[target] |= g
                del groups[e]
                if len(bounds) > max(e, target):
                    del bounds[max(e, target)]
                changed = True
                break
    env_of = {sid: e for e, g in enumerate(groups) for sid in g}
    single = [e for e, g in enumerate(groups) if len(classes(g)) < 2]
    return EnvironmentAssignment(assignment.granularity, env_of, len(groups), bounds, single)
