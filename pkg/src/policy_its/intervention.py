"""Intervention timing from per-area rollout counts.

An area becomes "aware" of the policy in the first month its recipient count
reaches a percentage of its final-month count (or, for the introduction
definition, the first month with any recipient). The calendar year of that
month is the area's intervention year, and observations are centered on it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .cohort import StudyWindow
from .errors import ValidationError

NEVER = None
_MONTH = re.compile(r"^(\d{4})-(0[1-9]|1[0-2])$")


def month_year(month: str) -> int:
    m = _MONTH.match(month)
    if not m:
        raise ValidationError(f"month {month!r} is not in YYYY-MM form")
    return int(m.group(1))


@dataclass(frozen=True)
class RolloutSeries:
    area_id: str
    months: tuple
    counts: tuple

    def __post_init__(self):
        if len(self.months) != len(self.counts):
            raise ValidationError(f"area {self.area_id}: months and counts differ in length")
        for m in self.months:
            month_year(m)
        if any(b <= a for a, b in zip(self.months, self.months[1:])):
            raise ValidationError(f"area {self.area_id}: months must be strictly increasing")
        if any(c < 0 for c in self.counts):
            raise ValidationError(f"area {self.area_id}: negative recipient count")

    @classmethod
    def from_counts(cls, area_id, start, counts):
        """Series of consecutive months beginning at ``start`` (YYYY-MM)."""
        year, month = month_year(start), int(start[5:])
        months = []
        for _ in counts:
            months.append(f"{year:04d}-{month:02d}")
            month += 1
            if month == 13:
                year, month = year + 1, 1
        return cls(area_id, tuple(months), tuple(int(c) for c in counts))


@dataclass(frozen=True)
class InterventionDefinition:
    """Either ``awareness`` at ``pct`` percent of the final count, or ``introduction``."""

    kind: str = "awareness"
    pct: float | None = 25.0

    def __post_init__(self):
        if self.kind == "introduction":
            object.__setattr__(self, "pct", None)
        elif self.kind == "awareness":
            if self.pct is None or not 0 < self.pct <= 100:
                raise ValidationError(f"threshold_pct must lie in (0, 100], got {self.pct}")
        else:
            raise ValidationError(f"unknown intervention definition {self.kind!r}")

    @property
    def label(self):
        if self.kind == "introduction":
            return "introduction"
        pct = int(self.pct) if float(self.pct).is_integer() else self.pct
        return f"awareness_{pct}pct"

    def to_dict(self):
        if self.kind == "introduction":
            return {"type": "introduction"}
        return {"type": "awareness", "pct": self.pct}

    @classmethod
    def from_dict(cls, raw):
        kind = raw.get("type", "awareness")
        return cls(kind, raw.get("pct", 25.0) if kind == "awareness" else None)


@dataclass(frozen=True)
class InterventionTimeline:
    area_id: str
    awareness_year: int | None
    definition: InterventionDefinition


@dataclass(frozen=True)
class CenteredTime:
    year: int
    intervention: int
    year_post: int


def awareness_month(series: RolloutSeries, threshold_pct: float):
    """First month whose count reaches ``threshold_pct`` % of the final count.

    Crossing is permanent: later dips below the threshold are ignored. A
    month only qualifies with a positive count, so an all-zero series is
    never aware.
    """
    if not 0 < threshold_pct <= 100:
        raise ValidationError(f"threshold_pct must lie in (0, 100], got {threshold_pct}")
    if not series.counts:
        raise ValidationError(f"area {series.area_id}: empty rollout series")
    final = series.counts[-1]
    for month, count in zip(series.months, series.counts):
        # count >= pct/100 * final, kept in exact arithmetic for integer pct
        if count > 0 and count * 100 >= threshold_pct * final:
            return month
    return NEVER


def introduction_month(series: RolloutSeries):
    """First month with at least one recipient."""
    if not series.counts:
        raise ValidationError(f"area {series.area_id}: empty rollout series")
    for month, count in zip(series.months, series.counts):
        if count >= 1:
            return month
    return NEVER


def intervention_month(series: RolloutSeries, definition: InterventionDefinition):
    if definition.kind == "introduction":
        return introduction_month(series)
    return awareness_month(series, definition.pct)


def derive_timelines(
    series: Iterable[RolloutSeries], definition: InterventionDefinition
) -> dict:
    """Map area_id to its :class:`InterventionTimeline` under ``definition``."""
    out = {}
    for s in series:
        month = intervention_month(s, definition)
        year = NEVER if month is NEVER else month_year(month)
        out[s.area_id] = InterventionTimeline(s.area_id, year, definition)
    return out


def never_count(timelines: Mapping[str, InterventionTimeline]) -> int:
    return sum(t.awareness_year is NEVER for t in timelines.values())


def center_time(interview_year: int, awareness_year, window: StudyWindow) -> CenteredTime:
    """Center a calendar year on the area's intervention year.

    Never-aware areas are centered on ``window.end + 1`` so every row is
    pre-intervention.
    """
    if not window.contains(interview_year):
        raise ValidationError(f"interview year {interview_year} outside {window}")
    anchor = window.end + 1 if awareness_year is NEVER else awareness_year
    year = int(interview_year - anchor)
    return CenteredTime(year, int(year >= 0), max(year, 0))


def center_times(interview_years, awareness_years, window: StudyWindow):
    """Vectorized :func:`center_time`; ``awareness_years`` may hold None or NaN."""
    iy = np.asarray(interview_years, dtype=np.int64)
    aw = pd.to_numeric(pd.Series(list(awareness_years), dtype=object), errors="coerce")
    anchor = aw.fillna(window.end + 1).to_numpy(dtype=np.int64)
    if np.any((iy < window.start) | (iy > window.end)):
        raise ValidationError("interview year outside study window")
    year = iy - anchor
    intervention = (year >= 0).astype(np.int64)
    return year, intervention, np.maximum(year, 0)


def read_rollout(path) -> list[RolloutSeries]:
    """Read a long-format rollout CSV (area_id, month, count)."""
    frame = pd.read_csv(path, dtype={"area_id": str, "month": str})
    return rollout_from_frame(frame, source=str(path))


def rollout_from_frame(frame: pd.DataFrame, source="rollout") -> list[RolloutSeries]:
    missing = [c for c in ("area_id", "month", "count") if c not in frame.columns]
    if missing:
        raise ValidationError(f"{source}: missing columns {missing}")
    counts = pd.to_numeric(frame["count"], errors="coerce")
    bad = counts.isna() | (counts < 0) | (counts != counts.round())
    if bad.any():
        lines = [int(i) + 2 for i in np.flatnonzero(bad.to_numpy())[:10]]
        raise ValidationError(f"{source}: invalid count at CSV line(s) {lines}")
    frame = frame.assign(count=counts.astype(np.int64))
    out = []
    for area, grp in frame.groupby("area_id", sort=True):
        grp = grp.sort_values("month", kind="stable")
        try:
            out.append(RolloutSeries(str(area), tuple(grp["month"]), tuple(int(c) for c in grp["count"])))
        except ValidationError as exc:
            raise ValidationError(f"{source}: {exc}") from exc
    return out


def rollout_to_frame(series: Sequence[RolloutSeries]) -> pd.DataFrame:
    rows = [(s.area_id, m, c) for s in series for m, c in zip(s.months, s.counts)]
    return pd.DataFrame(rows, columns=["area_id", "month", "count"])
