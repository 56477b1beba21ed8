"""Ephemeral container rotation, sliding visibility and localized release.

A :class:`ContainerSlot` hosts one logical application. Internally it runs a
sequence of container instances: the active instance sees every frame, and
once it has been alive for ``max_ec - min_ec`` frames a shadow is launched.
The shadow takes over when it holds ``min_ec`` frames and the old instance is
torn down, together with every output it produced.

Boundaries are exact: with ``min_ec=2, max_ec=10`` the shadow is launched
when frame 8 arrives, the switch happens when frame 10 arrives, and the old
instance has seen frames 0..9.
"""

from __future__ import annotations

import csv
import enum
import itertools
import logging
import warnings
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Iterable

from .core import StateError, ValidationError

logger = logging.getLogger(__name__)


class Role(str, enum.Enum):
    APPLICATION = "application"
    SYSTEM = "system"


class InstanceState(str, enum.Enum):
    WARMING = "warming"
    ACTIVE = "active"
    TORN_DOWN = "tornDown"


class RotationEvent(str, enum.Enum):
    SHADOW_LAUNCHED = "shadowLaunched"
    SWITCHED = "switched"
    TORN_DOWN = "tornDown"


@dataclass(frozen=True)
class ContainerConfig:
    min_ec: int
    max_ec: int
    role: Role = Role.APPLICATION
    max_ec_app: int | None = None
    max_ec_sys: int | None = None

    def validate(self) -> None:
        if self.min_ec < 0 or self.max_ec <= 0:
            raise ValidationError("min_ec must be >= 0 and max_ec > 0")
        if self.min_ec >= self.max_ec:
            raise ValidationError(f"min_ec={self.min_ec} must be < max_ec={self.max_ec}")
        bound = self.max_ec_app if self.role is Role.APPLICATION else self.max_ec_sys
        if bound is not None and self.max_ec > bound:
            raise ValidationError(f"max_ec={self.max_ec} exceeds the {self.role.value} bound {bound}")
        if self.min_ec > self.max_ec / 2:
            warnings.warn(
                f"min_ec={self.min_ec} is more than half of max_ec={self.max_ec}; "
                "two overlapping instances cannot keep the window within max_ec",
                stacklevel=3,
            )


@dataclass
class ContainerInstance:
    instance_id: str
    state: InstanceState
    first_frame: int
    frame_count: int = 0
    frames: deque = field(default_factory=deque)

    def feed(self, index: int, frame: Any) -> None:
        self.frames.append((index, frame))
        self.frame_count += 1

    def destroy(self) -> None:
        self.frames.clear()
        self.state = InstanceState.TORN_DOWN


@dataclass(frozen=True)
class OutputRecord:
    record_id: int
    payload: bytes
    producer_instance: str
    evict_at_teardown_of: str
    hop_budget: int
    origin_locality: str
    warmup: bool = False


@dataclass(frozen=True)
class Window:
    """Result of :meth:`ContainerSlot.visible_window`."""

    frames: tuple
    indices: tuple[int, ...]
    warming: bool

    def __len__(self) -> int:
        return len(self.frames)


class OutputBuffer:
    """Per-node output buffer; records die with their producing instance."""

    def __init__(self, locality: str = "node") -> None:
        self.locality = locality
        self._records: dict[int, OutputRecord] = {}
        self._downstream: list[OutputBuffer] = []
        self._ids = itertools.count()

    def _put(self, record: OutputRecord) -> OutputRecord:
        self._records[record.record_id] = record
        return record

    def new_record(self, payload: bytes, producer: str, hop_budget: int, warmup: bool) -> OutputRecord:
        rec = OutputRecord(next(self._ids), payload, producer, producer, hop_budget, self.locality, warmup)
        return self._put(rec)

    def readable(self, record: OutputRecord) -> bool:
        return self._records.get(record.record_id) is record

    def read(self, record: OutputRecord) -> bytes:
        if not self.readable(record):
            raise StateError(f"record {record.record_id} has been evicted")
        return record.payload

    def records(self) -> list[OutputRecord]:
        return list(self._records.values())

    def evict_producer(self, instance_id: str) -> int:
        doomed = [k for k, r in self._records.items() if r.evict_at_teardown_of == instance_id]
        for k in doomed:
            del self._records[k]
        for buf in self._downstream:
            buf.evict_producer(instance_id)
        return len(doomed)

    def link(self, neighbor: OutputBuffer) -> None:
        if neighbor not in self._downstream:
            self._downstream.append(neighbor)


class ForwardDenied(Exception):
    """Forwarding refused by policy (no permission or no hops left)."""


def forward_output(
    record: OutputRecord,
    source: OutputBuffer,
    neighbor: OutputBuffer,
    admin_permitted: bool,
) -> OutputRecord:
    """Deliver a copy of ``record`` to ``neighbor`` with one hop consumed.

    The copy is evicted together with the original when the producer is torn
    down.
    """
    if not source.readable(record):
        raise StateError(f"record {record.record_id} was evicted before forwarding")
    if not admin_permitted:
        raise ForwardDenied("forwarding requires administrative permission")
    if record.hop_budget <= 0:
        raise ForwardDenied("hop budget exhausted")
    source.link(neighbor)
    copy = replace(record, record_id=next(neighbor._ids), hop_budget=record.hop_budget - 1)
    return neighbor._put(copy)


class ContainerSlot:
    """One application slot driven frame by frame."""

    def __init__(self, config: ContainerConfig, buffer: OutputBuffer | None = None, name: str = "slot") -> None:
        self.config = config
        self.name = name
        self.buffer = buffer if buffer is not None else OutputBuffer()
        self._config_error: ValidationError | None = None
        try:
            config.validate()
        except ValidationError as exc:
            self._config_error = exc
        self.active: ContainerInstance | None = None
        self.shadow: ContainerInstance | None = None
        self.next_index = 0
        self.warmed_up = False
        self.trace: list[tuple[int, str, str]] = []
        self.history: list[ContainerInstance] = []
        self._ids = itertools.count()

    def _spawn(self, state: InstanceState, first_frame: int) -> ContainerInstance:
        inst = ContainerInstance(f"{self.name}-i{next(self._ids)}", state, first_frame)
        self.history.append(inst)
        return inst

    def live_instances(self) -> list[ContainerInstance]:
        return [i for i in (self.active, self.shadow) if i is not None and i.state is not InstanceState.TORN_DOWN]

    def advance_frame(self, frame: Any = None) -> list[tuple[RotationEvent, str]]:
        if self._config_error is not None:
            raise StateError(f"slot has an invalid configuration: {self._config_error}")
        idx = self.next_index
        cfg = self.config
        events: list[tuple[RotationEvent, str]] = []
        if self.active is None:
            self.active = self._spawn(InstanceState.ACTIVE, idx)
        # switch before launching so a new shadow can start on the switch frame
        # (minEC = maxEC/2); the second switch covers tumbling slots (minEC = 0)
        self._maybe_switch(events)
        if self.shadow is None and self.active.frame_count >= cfg.max_ec - cfg.min_ec:
            self.shadow = self._spawn(InstanceState.WARMING, idx)
            events.append((RotationEvent.SHADOW_LAUNCHED, self.shadow.instance_id))
        self._maybe_switch(events)
        self.active.feed(idx, frame)
        if self.shadow is not None:
            self.shadow.feed(idx, frame)
        if not self.warmed_up and self.active.frame_count >= cfg.min_ec:
            self.warmed_up = True
        for ev, iid in events:
            self.trace.append((idx, ev.value, iid))
        self.next_index += 1
        return events

    def _maybe_switch(self, events: list) -> None:
        if self.shadow is None or self.shadow.frame_count < self.config.min_ec:
            return
        old = self.active
        self.shadow.state = InstanceState.ACTIVE
        self.active, self.shadow = self.shadow, None
        events.append((RotationEvent.SWITCHED, self.active.instance_id))
        old.destroy()
        self.buffer.evict_producer(old.instance_id)
        events.append((RotationEvent.TORN_DOWN, old.instance_id))

    def visible_window(self) -> Window:
        if self.active is None:
            return Window((), (), True)
        items = tuple(self.active.frames)
        return Window(tuple(f for _, f in items), tuple(i for i, _ in items), not self.warmed_up)

    def emit_output(self, payload: bytes, hop_budget: int = 0) -> OutputRecord:
        if self.active is None or self.active.state is not InstanceState.ACTIVE:
            raise StateError("no active instance to emit from")
        if hop_budget < 0:
            raise ValidationError("hop_budget must be non-negative")
        return self.buffer.new_record(payload, self.active.instance_id, hop_budget, not self.warmed_up)

    def emit_from(self, instance: ContainerInstance, payload: bytes, hop_budget: int = 0) -> OutputRecord:
        """Emit on behalf of a specific instance; only the active one may emit."""
        if instance is not self.active or instance.state is not InstanceState.ACTIVE:
            raise StateError(f"instance {instance.instance_id} is {instance.state.value} and cannot emit")
        return self.emit_output(payload, hop_budget)


def write_rotation_trace(slot: ContainerSlot, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frameIndex", "event", "instanceId"])
        w.writerows(slot.trace)


def run_frames(slot: ContainerSlot, frames: Iterable[Any]) -> list[tuple[int, RotationEvent, str]]:
    out = []
    for f in frames:
        idx = slot.next_index
        out.extend((idx, ev, iid) for ev, iid in slot.advance_frame(f))
    return out
