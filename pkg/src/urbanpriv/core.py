"""Shared temporal and data vocabulary.

Time is integer seconds since the simulation epoch. Tracking contexts (TCs)
partition a locality's timeline, aggregation windows (AWs) group whole TCs,
and a system container spans ``N`` AWs with ``N`` a power of two.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Iterator, Sequence

DEFAULT_MAX_EC_SYS = 86_400


class ValidationError(ValueError):
    """Raised when a configuration value violates a structural constraint."""


class StateError(RuntimeError):
    """Raised when an operation is invoked in a state that does not allow it."""


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Locality:
    id: str
    label: str = ""


@dataclass(frozen=True)
class TrackingContext:
    tc_id: str
    locality: str
    start: int
    end: int

    @property
    def duration(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class AggregationWindowSpec:
    aw_duration: int
    max_ec_sys: int
    tau_tc: int

    @property
    def n(self) -> int:
        return self.max_ec_sys // self.aw_duration

    @property
    def height(self) -> int:
        return self.n.bit_length() - 1

    @property
    def tcs_per_aw(self) -> int:
        return self.aw_duration // self.tau_tc

    def aw_index(self, tc: TrackingContext, container_start: int = 0) -> int:
        """Absolute AW index containing ``tc``."""
        return (tc.start - container_start) // self.aw_duration


class _ContextCounter:
    """Monotone per-locality counter; ids are ``<locality>:<n>``."""

    def __init__(self) -> None:
        self._counters: dict[str, Iterator[int]] = {}

    def next_id(self, locality: str) -> str:
        counter = self._counters.setdefault(locality, itertools.count())
        return f"{locality}:{next(counter)}"


_default_counter = _ContextCounter()


def partition_timeline(
    tau_tc: int,
    horizon: int,
    locality: Locality | str,
    start: int = 0,
    counter: _ContextCounter | None = None,
) -> list[TrackingContext]:
    """Split ``[start, start + horizon)`` into consecutive TCs of length ``tau_tc``."""
    if tau_tc <= 0:
        raise ValidationError(f"tau_tc must be positive, got {tau_tc}")
    if horizon <= 0 or horizon % tau_tc != 0:
        raise ValidationError(
            f"horizon {horizon} is not a positive multiple of tau_tc {tau_tc}"
        )
    loc = locality.id if isinstance(locality, Locality) else locality
    counter = counter or _default_counter
    out = []
    for k in range(horizon // tau_tc):
        t0 = start + k * tau_tc
        out.append(TrackingContext(counter.next_id(loc), loc, t0, t0 + tau_tc))
    return out


def validate_aw_spec(aw_duration: int, max_ec_sys: int, tau_tc: int) -> AggregationWindowSpec:
    if min(aw_duration, max_ec_sys, tau_tc) <= 0:
        raise ValidationError("all durations must be positive")
    if aw_duration % tau_tc != 0:
        raise ValidationError(
            f"aggregation window {aw_duration}s is not a multiple of the TC length {tau_tc}s"
        )
    if max_ec_sys % aw_duration != 0:
        raise ValidationError(
            f"aggregation window {aw_duration}s does not divide maxEC_sys {max_ec_sys}s"
        )
    n = max_ec_sys // aw_duration
    if not is_power_of_two(n) or n < 2:
        raise ValidationError(f"N = {n} leaves per container is not a power of two >= 2")
    return AggregationWindowSpec(aw_duration, max_ec_sys, tau_tc)


class ObjectType(str, enum.Enum):
    PEDESTRIAN = "pedestrian"
    BICYCLE = "bicycle"
    CAR = "car"
    TRUCK = "truck"
    BUS = "bus"


@dataclass(frozen=True)
class Detection:
    track_id: str
    object_type: str
    value: float = 0.0


@dataclass
class DetectionRecord:
    """Frame detection sequence for one aggregation window.

    ``raw_output`` carries the application-supplied scalar for untrusted
    queries; trusted queries ignore it.
    """

    aw: int
    frames: list[frozenset[Detection]] = field(default_factory=list)
    v_max: float = float("inf")
    raw_output: float | None = None

    def __post_init__(self) -> None:
        clamped = []
        for frame in self.frames:
            fixed = set()
            for d in frame:
                if d.value < 0 or d.value > self.v_max:
                    d = Detection(d.track_id, d.object_type, min(max(d.value, 0.0), self.v_max))
                fixed.add(d)
            clamped.append(frozenset(fixed))
        self.frames = clamped

    def track_ids(self) -> set[str]:
        return {d.track_id for frame in self.frames for d in frame}


class ContextDatabase:
    """Set of ``(locality, context_id, y)`` records, one ``y`` per key."""

    def __init__(self, records: Sequence[tuple[str, str, float]] = ()) -> None:
        self._rows: dict[tuple[str, str], float] = {}
        for loc, ctx, y in records:
            self.insert(loc, ctx, y)

    def insert(self, locality: str, context_id: str, y: float) -> None:
        if y < 0:
            raise ValidationError(f"per-context outputs are non-negative, got {y}")
        key = (locality, context_id)
        if key in self._rows:
            raise ValidationError(f"duplicate record for {key}")
        self._rows[key] = float(y)

    def get(self, locality: str, context_id: str) -> float | None:
        return self._rows.get((locality, context_id))

    def __len__(self) -> int:
        return len(self._rows)

    def __iter__(self):
        for (loc, ctx), y in self._rows.items():
            yield loc, ctx, y
