"""Node-side single-locality aggregation service.

Queries are registered against a node, evaluated once per aggregation window
over detection records, fed into a per-query continual-release tree, and the
per-TC privacy cost ``rho_node = sum_q (log2 N_q + 2) * eps_q`` is broadcast.
"""

from __future__ import annotations

import csv
import enum
import itertools
import math
import operator
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import (
    DEFAULT_MAX_EC_SYS,
    Detection,
    DetectionRecord,
    StateError,
    TrackingContext,
    ValidationError,
    validate_aw_spec,
)
from .dp.noise import NoiseKind, NoiseSampler, NoiseSpec
from .dp.tree import BinaryTreeMechanism, ReleaseLog, ReleaseRecord

# Trusted-mode tracking error presets: worst case over the benchmark, and p95.
RHO_TRACK_CONSERVATIVE = 9.0
RHO_TRACK_P95 = 5.0
UNTRUSTED_OPERATOR_BOUND = 100.0

# Track IDs per person (1..9) fitted to the reported benchmark quantiles:
# =1: 56.5%, <=2: 77.0%, <=3: 88.5%, <=5: 96.9%, p90=4, p99=7, max=9.
TRACK_MULTIPLICITY_PMF = (0.565, 0.205, 0.115, 0.050, 0.034, 0.013, 0.010, 0.004, 0.004)


class Aggregate(str, enum.Enum):
    COUNT = "count"
    SUM = "sum"
    AVG = "avg"


class Mode(str, enum.Enum):
    TRUSTED = "trusted"
    UNTRUSTED = "untrusted"


@dataclass(frozen=True)
class FrameScope:
    """Which frames of an AW the aggregate reads.

    ``last``: the final frame. ``cumulative``: the last ``k`` frames, each
    detection counted once per frame. ``distinct``: every frame, each track
    ID counted once.
    """

    kind: str = "last"
    k: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("last", "cumulative", "distinct"):
            raise ValidationError(f"unknown frame scope {self.kind!r}")
        if self.kind == "cumulative" and self.k < 1:
            raise ValidationError("cumulative scope needs k >= 1")

    @property
    def multiplier(self) -> int:
        return self.k if self.kind == "cumulative" else 1

    @classmethod
    def parse(cls, text: str) -> "FrameScope":
        text = text.strip().lower()
        m = re.fullmatch(r"cumulative\((\d+)\)", text)
        if m:
            return cls("cumulative", int(m.group(1)))
        return cls({"lastframe": "last"}.get(text, text))


_OPS: dict[str, Callable] = {
    "=": operator.eq, "==": operator.eq, "!=": operator.ne,
    "<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge,
}


@dataclass(frozen=True)
class Condition:
    attribute: str  # "value" or "objectType"
    op: str
    constant: object

    def __post_init__(self) -> None:
        if self.op not in _OPS:
            raise ValidationError(f"unsupported operator {self.op!r}")
        if self.attribute not in ("value", "objectType"):
            raise ValidationError(f"unknown attribute {self.attribute!r}")

    def holds(self, d: Detection) -> bool:
        lhs = d.value if self.attribute == "value" else d.object_type
        return _OPS[self.op](lhs, self.constant)


@dataclass(frozen=True)
class QuerySpec:
    aggregate: Aggregate
    object_types: frozenset
    aw_duration: int
    sigma_q: float
    mode: Mode = Mode.TRUSTED
    predicate: tuple[Condition, ...] = ()
    declared_s: float | None = None
    v_max: float | None = None
    frame_scope: FrameScope = FrameScope()
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "aggregate", Aggregate(self.aggregate))
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "object_types", frozenset(self.object_types))

    def matches(self, d: Detection) -> bool:
        if self.object_types and d.object_type not in self.object_types:
            return False
        return all(c.holds(d) for c in self.predicate)

    def per_id_sensitivity(self) -> dict[str, float]:
        """``mu_Q`` for each released stream (AVG releases a sum and a count)."""
        mult = self.frame_scope.multiplier
        if self.aggregate is Aggregate.COUNT:
            return {"count": float(mult)}
        if self.aggregate is Aggregate.SUM:
            return {"sum": mult * self.v_max}
        return {"sum": mult * self.v_max, "count": float(mult)}

    def validate(self, max_ec_sys: int, tau_tc: int):
        if not self.sigma_q > 0:
            raise ValidationError("sigma must be positive")
        spec = validate_aw_spec(self.aw_duration, max_ec_sys, tau_tc)
        if self.mode is Mode.UNTRUSTED:
            if self.declared_s is None or not self.declared_s > 0:
                raise ValidationError("untrusted queries must declare a positive sensitivity bound")
        elif self.aggregate in (Aggregate.SUM, Aggregate.AVG):
            if self.v_max is None or not self.v_max > 0:
                raise ValidationError(f"{self.aggregate.value} queries need a positive v_max")
        return spec


@dataclass(frozen=True)
class SensitivityModel:
    mode: Mode
    effective_delta: float
    mu_q: float | None = None
    rho_track: float | None = None
    declared_s: float | None = None


def derive_sensitivity(spec: QuerySpec, rho_track: float = 1.0, stream: str | None = None) -> SensitivityModel:
    if spec.mode is Mode.UNTRUSTED:
        return SensitivityModel(Mode.UNTRUSTED, float(spec.declared_s), declared_s=float(spec.declared_s))
    if rho_track < 1:
        raise ValidationError(f"rho_track must be >= 1, got {rho_track}")
    mus = spec.per_id_sensitivity()
    mu = mus[stream] if stream else max(mus.values())
    return SensitivityModel(Mode.TRUSTED, rho_track * mu, mu_q=mu, rho_track=rho_track)


def epsilon_for(delta: float, sigma_q: float) -> float:
    """Per-tree-node epsilon implied by Laplace noise with std ``sigma_q``."""
    return delta * math.sqrt(2.0) / sigma_q


def _scope_frames(spec: QuerySpec, record: DetectionRecord):
    if not record.frames:
        return []
    sc = spec.frame_scope
    if sc.kind == "last":
        return record.frames[-1:]
    if sc.kind == "cumulative":
        return record.frames[-sc.k:]
    return record.frames


def evaluate_query(spec: QuerySpec, record: DetectionRecord, aw: int | None = None) -> dict[str, float]:
    """Per-AW aggregate value(s) that enter the release mechanism."""
    if aw is not None and record.aw != aw:
        raise ValidationError(f"record covers AW {record.aw}, expected {aw}")
    if spec.mode is Mode.UNTRUSTED:
        raw = record.raw_output if record.raw_output is not None else 0.0
        return {"value": float(min(max(raw, 0.0), spec.declared_s))}
    frames = _scope_frames(spec, record)
    vmax = spec.v_max if spec.v_max is not None else math.inf
    if spec.frame_scope.kind == "distinct":
        latest: dict[str, float] = {}
        for frame in frames:
            for d in frame:
                if spec.matches(d):
                    latest[d.track_id] = min(d.value, vmax)
        count, total = float(len(latest)), float(sum(latest.values()))
    else:
        count = total = 0.0
        for frame in frames:
            hits = {d.track_id: d for d in frame if spec.matches(d)}
            count += len(hits)
            total += sum(min(d.value, vmax) for d in hits.values())
    if spec.aggregate is Aggregate.COUNT:
        return {"count": count}
    if spec.aggregate is Aggregate.SUM:
        return {"sum": total}
    return {"sum": total, "count": count}


@dataclass
class QueryStream:
    """One released stream of a query: its own tree, noise and epsilon."""

    name: str
    delta: float
    epsilon: float
    n: int
    tree: BinaryTreeMechanism
    log: ReleaseLog

    @property
    def per_tc_cost(self) -> float:
        return (math.log2(self.n) + 2) * self.epsilon


@dataclass
class QueryHandle:
    query_id: str
    spec: QuerySpec
    n: int
    tcs_per_aw: int
    streams: list[QueryStream]
    active: bool = False
    aw_index: int = 0
    _frames: list = field(default_factory=list)
    _tcs_buffered: int = 0
    _raw: float = 0.0

    @property
    def epsilons(self) -> list[float]:
        return [s.epsilon for s in self.streams]


@dataclass(frozen=True)
class BroadcastMessage:
    locality: str
    tc_id: str
    rho_node: float


@dataclass(frozen=True)
class CloudRelease:
    locality: str
    query_id: str
    stream: str
    record: ReleaseRecord


def compute_node_filter(queries: Iterable) -> float:
    """``sum_q (log2 N_q + 2) * eps_q``.

    Accepts handles, streams or ``(N, epsilon)`` pairs.
    """
    total = 0.0
    for q in queries:
        if isinstance(q, QueryHandle):
            total += sum(s.per_tc_cost for s in q.streams)
        elif isinstance(q, QueryStream):
            total += q.per_tc_cost
        else:
            n, eps = q
            total += (math.log2(n) + 2) * eps
    return total


class QueryEngine:
    """API 2 service at one locality.

    Drive it with :meth:`process_tc` once per tracking context. Queries
    registered mid-container start at the next container boundary so the
    per-TC pre-charge stays sound.
    """

    def __init__(self, locality: str, tau_tc: int, max_ec_sys: int = DEFAULT_MAX_EC_SYS,
                 rho_track: float = 1.0, seed: int = 0, noiseless: bool = False) -> None:
        if rho_track < 1:
            raise ValidationError(f"rho_track must be >= 1, got {rho_track}")
        self.locality = locality
        self.tau_tc = tau_tc
        self.max_ec_sys = max_ec_sys
        self.rho_track = rho_track
        self.noiseless = noiseless
        self._seeds = np.random.SeedSequence(seed)
        self._ids = itertools.count()
        self.queries: list[QueryHandle] = []
        self.tc_count = 0
        self.current_broadcast: BroadcastMessage | None = None
        self.broadcasts: list[BroadcastMessage] = []
        self.cloud: list[CloudRelease] = []

    @property
    def tcs_per_container(self) -> int:
        return self.max_ec_sys // self.tau_tc

    @property
    def at_container_boundary(self) -> bool:
        return self.tc_count % self.tcs_per_container == 0

    def active_queries(self) -> list[QueryHandle]:
        return [q for q in self.queries if q.active]

    def register_query(self, spec: QuerySpec) -> QueryHandle:
        aw = spec.validate(self.max_ec_sys, self.tau_tc)
        qid = spec.name or f"q{next(self._ids)}"
        streams = []
        for name in (["value"] if spec.mode is Mode.UNTRUSTED else list(spec.per_id_sensitivity())):
            sens = derive_sensitivity(spec, self.rho_track, None if spec.mode is Mode.UNTRUSTED else name)
            eps = epsilon_for(sens.effective_delta, spec.sigma_q)
            kind = NoiseKind.NONE if self.noiseless else NoiseKind.LAPLACE
            seed = int(self._seeds.spawn(1)[0].generate_state(1)[0])
            noise = NoiseSpec(kind, sens.effective_delta / eps, seed)
            streams.append(QueryStream(name, sens.effective_delta, eps, aw.n,
                                       BinaryTreeMechanism(aw.n, noise), ReleaseLog(aw.n)))
        handle = QueryHandle(qid, spec, aw.n, aw.tcs_per_aw, streams)
        handle.active = self.at_container_boundary
        self.queries.append(handle)
        return handle

    def deregister_query(self, handle: QueryHandle) -> None:
        if handle.active and not self.at_container_boundary:
            raise StateError("queries cannot be removed inside a container")
        self.queries.remove(handle)

    def node_filter(self) -> float:
        return compute_node_filter(self.active_queries())

    def begin_tc(self, tc: TrackingContext) -> BroadcastMessage | None:
        if self.at_container_boundary:
            for q in self.queries:
                q.active = True
        rho = self.node_filter()
        self.current_broadcast = BroadcastMessage(self.locality, tc.tc_id, rho) if self.active_queries() else None
        if self.current_broadcast is not None:
            self.broadcasts.append(self.current_broadcast)
        return self.current_broadcast

    def on_aw_release(self, handle: QueryHandle, values: Mapping[str, float] | float):
        if isinstance(values, (int, float)):
            values = {handle.streams[0].name: float(values)}
        out: list[CloudRelease] = []
        for s in handle.streams:
            recs = s.tree.add_leaf(values[s.name])
            if s.tree.leaf_idx == s.n:
                recs.append(s.tree.container_end())
            s.log.extend(recs)
            out.extend(CloudRelease(self.locality, handle.query_id, s.name, r) for r in recs)
        handle.aw_index += 1
        self.cloud.extend(out)
        return out, self.current_broadcast

    def process_tc(self, tc: TrackingContext, record: DetectionRecord | None = None,
                   raw_outputs: Mapping[str, float] | None = None):
        """Run one TC: broadcast, buffer detections, release completed AWs."""
        msg = self.begin_tc(tc)
        releases: list[CloudRelease] = []
        for q in self.active_queries():
            if record is not None:
                q._frames.extend(record.frames)
            if raw_outputs and q.query_id in raw_outputs:
                q._raw += raw_outputs[q.query_id]
            q._tcs_buffered += 1
            if q._tcs_buffered == q.tcs_per_aw:
                aw_rec = DetectionRecord(q.aw_index, q._frames, raw_output=q._raw)
                vals = evaluate_query(q.spec, aw_rec)
                rel, _ = self.on_aw_release(q, vals)
                releases.extend(rel)
                q._frames, q._tcs_buffered, q._raw = [], 0, 0.0
        self.tc_count += 1
        return releases, msg


_QUERY_RE = re.compile(
    r"^\s*(?P<agg>COUNT|SUM|AVG)(?:\s+DISTINCT)?\s+OVER\s+\w+"
    r"(?:\s+WHERE\s+(?P<where>.+?))?"
    r"\s+WINDOWED\s+BY\s+(?P<aw>\d+)\s*s?"
    r"\s+WITH\s+SIGMA\s+(?P<sigma>[0-9.eE+-]+)"
    r"(?P<rest>.*)$",
    re.IGNORECASE,
)
_TYPES_RE = re.compile(r"objectType\s+(?:IN\s*\(([^)]*)\)|=\s*(\w+))", re.IGNORECASE)
_COND_RE = re.compile(r"^\s*(value|objectType)\s*(==|!=|<=|>=|=|<|>)\s*(\S+)\s*$", re.IGNORECASE)


def parse_query(text: str, name: str = "") -> QuerySpec:
    """Parse the textual registration form.

    ``COUNT OVER stream WHERE objectType IN (bicycle) AND value > 2
    WINDOWED BY 60 WITH SIGMA 1 MODE trusted [SENSITIVITY 100] [VMAX 30]
    [SCOPE distinct]``
    """
    m = _QUERY_RE.match(text)
    if not m:
        raise ValidationError(f"cannot parse query: {text!r}")
    distinct = bool(re.search(r"\bDISTINCT\b", text, re.IGNORECASE))
    types: set[str] = set()
    preds: list[Condition] = []
    if m.group("where"):
        for clause in re.split(r"\s+AND\s+", m.group("where"), flags=re.IGNORECASE):
            tm = _TYPES_RE.fullmatch(clause.strip())
            if tm:
                raw = tm.group(1) if tm.group(1) is not None else tm.group(2)
                types.update(t.strip().lower() for t in raw.split(",") if t.strip())
                continue
            cm = _COND_RE.match(clause)
            if not cm:
                raise ValidationError(f"unsupported predicate {clause!r}")
            attr = "value" if cm.group(1).lower() == "value" else "objectType"
            const: object = cm.group(3)
            if attr == "value":
                const = float(const)
            preds.append(Condition(attr, cm.group(2), const))
    opts = dict(re.findall(r"(MODE|SENSITIVITY|VMAX|SCOPE)\s+(\S+)", m.group("rest"), re.IGNORECASE))
    opts = {k.upper(): v for k, v in opts.items()}
    scope = FrameScope.parse(opts["SCOPE"]) if "SCOPE" in opts else FrameScope("distinct" if distinct else "last")
    return QuerySpec(
        aggregate=Aggregate(m.group("agg").lower()),
        object_types=frozenset(types),
        aw_duration=int(m.group("aw")),
        sigma_q=float(m.group("sigma")),
        mode=Mode(opts.get("MODE", "trusted").lower()),
        predicate=tuple(preds),
        declared_s=float(opts["SENSITIVITY"]) if "SENSITIVITY" in opts else None,
        v_max=float(opts["VMAX"]) if "VMAX" in opts else None,
        frame_scope=scope,
        name=name,
    )


def write_cloud_csv(releases: Iterable[CloudRelease], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["locality", "query", "containerIdx", "node", "value", "sigma"])
        for c in releases:
            r = c.record
            node = "shadow" if r.is_shadow else f"{r.depth}:{r.position}"
            w.writerow([c.locality, f"{c.query_id}.{c.stream}", r.container_index, node,
                        repr(float(r.noisy_value)), repr(r.sigma)])


# --- synthetic stand-in for the detection and tracking service -------------


@dataclass(frozen=True)
class Individual:
    ind_id: str
    object_type: str
    value: float = 0.0


@dataclass
class Scenario:
    """Ground truth per TC: who is present, and how many frames each TC has."""

    tcs: Sequence[TrackingContext]
    present: Sequence[Sequence[Individual]]
    frames_per_tc: int = 4
    v_max: float = math.inf


def multiplicity_pmf(rho_track: float, base: Sequence[float] = TRACK_MULTIPLICITY_PMF) -> np.ndarray:
    cap = int(math.floor(rho_track))
    pmf = np.asarray(base, dtype=float)
    pmf = pmf / pmf.sum()
    if cap < len(pmf):
        pmf = np.concatenate([pmf[: cap - 1], [pmf[cap - 1:].sum()]])
    return pmf


def sample_multiplicities(rho_track: float, size: int, rng: np.random.Generator,
                          base: Sequence[float] = TRACK_MULTIPLICITY_PMF) -> np.ndarray:
    if rho_track < 1:
        raise ValidationError(f"rho_track must be >= 1, got {rho_track}")
    pmf = multiplicity_pmf(rho_track, base)
    return rng.choice(np.arange(1, len(pmf) + 1), size=size, p=pmf)


def tracked_detection_stream(scenario: Scenario, rho_track: float, seed: int = 0,
                             base: Sequence[float] = TRACK_MULTIPLICITY_PMF) -> list[DetectionRecord]:
    """One record per TC; each individual's frames are split across 1..rho_track IDs.

    Track IDs are prefixed with the TC id, so they never survive a TC boundary.
    """
    if rho_track < 1:
        raise ValidationError(f"rho_track must be >= 1, got {rho_track}")
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for idx, (tc, people) in enumerate(zip(scenario.tcs, scenario.present)):
        nf = scenario.frames_per_tc
        frames: list[set] = [set() for _ in range(nf)]
        mult = sample_multiplicities(rho_track, len(people), rng, base)
        counter = itertools.count()
        for person, m in zip(people, mult):
            m = int(min(m, nf))
            ids = [f"{tc.tc_id}/t{next(counter)}" for _ in range(m)]
            # ID switches split the person's frames into m contiguous segments
            bounds = np.linspace(0, nf, m + 1).round().astype(int)
            for seg in range(m):
                for f in range(bounds[seg], bounds[seg + 1]):
                    frames[f].add(Detection(ids[seg], person.object_type, person.value))
        out.append(DetectionRecord(idx, [frozenset(f) for f in frames], v_max=scenario.v_max))
    return out
