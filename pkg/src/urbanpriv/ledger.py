"""Device-side privacy ledger.

Two loss components are tracked. Node broadcasts are per (user, TC) and are
deduplicated by TC id. Cross-locality reports are charged against a
per-epoch budget. ``total_loss`` adds the two for display only; the units
differ and no joint guarantee is implied.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum

from .core import ValidationError
from .query import BroadcastMessage

SECONDS_PER_WEEK = 7 * 86_400


class ReportOutcome(str, Enum):
    REAL = "real"
    NULL = "null"


@dataclass
class EpochBudget:
    epoch_id: int
    capacity: float
    spent: float = 0.0

    @property
    def remaining(self) -> float:
        return self.capacity - self.spent


@dataclass
class DeviceLedger:
    device_id: str
    epoch_capacity: float = math.inf
    # (locality, tc_id) -> rho_node, first delivery wins
    seen_tc_ids: dict = field(default_factory=dict)
    epochs: dict[int, EpochBudget] = field(default_factory=dict)

    @property
    def epsilon_acc(self) -> float:
        # fsum is exactly rounded, so delivery order cannot change the total
        return math.fsum(self.seen_tc_ids.values())

    def receive_broadcast(self, msg: BroadcastMessage) -> bool:
        """Record a node broadcast; returns False for a duplicate TC."""
        if msg.rho_node < 0:
            raise ValidationError(f"negative privacy loss {msg.rho_node}")
        key = (msg.locality, msg.tc_id)
        if key in self.seen_tc_ids:
            return False
        self.seen_tc_ids[key] = float(msg.rho_node)
        return True

    def epoch(self, epoch_id: int) -> EpochBudget:
        if epoch_id not in self.epochs:
            self.epochs[epoch_id] = EpochBudget(epoch_id, self.epoch_capacity)
        return self.epochs[epoch_id]

    def charge_report(self, epoch_id: int, eps_rep: float) -> ReportOutcome:
        """Atomically charge one report; exhausted budgets yield a null report."""
        if not eps_rep > 0:
            raise ValidationError(f"report cost must be positive, got {eps_rep}")
        budget = self.epoch(epoch_id)
        # tolerate float drift in sums such as 10 * 0.1
        if budget.spent + eps_rep <= budget.capacity * (1 + 1e-12):
            budget.spent += eps_rep
            return ReportOutcome.REAL
        return ReportOutcome.NULL

    @property
    def api3_loss(self) -> float:
        return sum(e.spent for e in self.epochs.values())

    @property
    def api2_loss(self) -> float:
        return self.epsilon_acc

    def total_loss(self) -> float:
        return self.epsilon_acc + self.api3_loss


def receive_broadcast(ledger: DeviceLedger, msg: BroadcastMessage) -> DeviceLedger:
    ledger.receive_broadcast(msg)
    return ledger


def charge_report(ledger: DeviceLedger, epoch_id: int, eps_rep: float) -> ReportOutcome:
    return ledger.charge_report(epoch_id, eps_rep)


def total_loss(ledger: DeviceLedger) -> float:
    return ledger.total_loss()


def epoch_of(t_seconds: int) -> int:
    return t_seconds // SECONDS_PER_WEEK


def write_ledger_csv(ledgers, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["deviceId", "epsilonAcc", "epochId", "spent", "capacity"])
        for led in ledgers:
            if not led.epochs:
                w.writerow([led.device_id, repr(led.epsilon_acc), "", "", ""])
            for e in sorted(led.epochs.values(), key=lambda e: e.epoch_id):
                w.writerow([led.device_id, repr(led.epsilon_acc), e.epoch_id, repr(e.spent), repr(e.capacity)])
