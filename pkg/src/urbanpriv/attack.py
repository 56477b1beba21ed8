"""Sniffing attack on localized output buffers.

An attacker moves through a grid city and, at every intersection it reaches,
reads whatever that node's output buffer currently holds. Buffers are
cleared on a synchronized global schedule of period ``max_ec``, so the
attacker can see at most ``max_ec`` seconds of history per visit.

Capture is measured in person-seconds of activity relative to the whole
city over the run.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import shortest_path

from .core import ValidationError

DEFAULT_SPEEDS = {"pedestrian": 1.3, "cyclist": 5.4, "car": 13.4, "static": 0.0}
DEFAULT_MAX_EC_SWEEP = (30, 60, 120, 180, 240, 300)


class ProfileKind(str, enum.Enum):
    PEDESTRIAN = "pedestrian"
    CYCLIST = "cyclist"
    CAR = "car"
    STATIC = "static"


@dataclass
class CityGrid:
    """Rectangular street grid. Node id is ``row * cols + col``.

    The defaults give 540 intersections over roughly 3.5 x 3.4 km with short
    avenue blocks and long street blocks, like a Manhattan extract.
    """

    rows: int = 45
    cols: int = 12
    row_spacing: float = 80.0
    col_spacing: float = 280.0
    hub: int | None = None

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1 or self.rows * self.cols < 2:
            raise ValidationError("grid needs at least two intersections")
        if self.hub is None:
            self.hub = (self.rows // 2) * self.cols + self.cols // 2
        if not 0 <= self.hub < self.size:
            raise ValidationError(f"hub {self.hub} outside grid")
        self._dist = None
        self._pred = None

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def block_length(self) -> float:
        return min(self.row_spacing, self.col_spacing)

    @property
    def positions(self) -> np.ndarray:
        r, c = np.divmod(np.arange(self.size), self.cols)
        return np.stack([c * self.col_spacing, r * self.row_spacing], axis=1)

    def edges(self) -> list[tuple[int, int, float]]:
        out = []
        for r in range(self.rows):
            for c in range(self.cols):
                v = r * self.cols + c
                if c + 1 < self.cols:
                    out.append((v, v + 1, self.col_spacing))
                if r + 1 < self.rows:
                    out.append((v, v + self.cols, self.row_spacing))
        return out

    def _solve(self) -> None:
        e = np.array(self.edges(), dtype=float)
        i, j, w = e[:, 0].astype(int), e[:, 1].astype(int), e[:, 2]
        adj = coo_matrix((np.r_[w, w], (np.r_[i, j], np.r_[j, i])), shape=(self.size, self.size)).tocsr()
        self._dist, self._pred = shortest_path(adj, directed=False, return_predecessors=True)

    @property
    def distances(self) -> np.ndarray:
        if self._dist is None:
            self._solve()
        return self._dist

    def next_hop(self, src: int, dst: int) -> int:
        """First node after ``src`` on a shortest path to ``dst``."""
        if self._pred is None:
            self._solve()
        return int(self._pred[dst, src])


@dataclass(frozen=True)
class AttackerProfile:
    kind: ProfileKind
    speed: float
    start: int

    @classmethod
    def default(cls, kind: ProfileKind | str, grid: CityGrid) -> "AttackerProfile":
        kind = ProfileKind(kind)
        return cls(kind, DEFAULT_SPEEDS[kind.value], grid.hub)

    @property
    def mobile(self) -> bool:
        return self.kind is not ProfileKind.STATIC


@dataclass
class Traffic:
    """Per-intersection presence (persons) sampled once per second.

    ``cumulative[v, k]`` holds person-seconds at ``v`` during ``[0, k)``.
    """

    presence: np.ndarray
    cumulative: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        v, t = self.presence.shape
        self.cumulative = np.zeros((v, t + 1))
        np.cumsum(self.presence, axis=1, out=self.cumulative[:, 1:])

    @property
    def duration(self) -> int:
        return self.presence.shape[1]

    @property
    def total(self) -> float:
        return float(self.cumulative[:, -1].sum())

    def activity(self, v: int, t: float) -> float:
        """Person-seconds at ``v`` during ``[0, t)``, linear within a step."""
        t = min(max(t, 0.0), float(self.duration))
        k = int(math.floor(t))
        if k >= self.duration:
            return float(self.cumulative[v, -1])
        return float(self.cumulative[v, k] + (t - k) * self.presence[v, k])


def hub_weights(grid: CityGrid, gain: float = 1.0, radius: float = 500.0) -> np.ndarray:
    pos = grid.positions
    d2 = np.sum((pos - pos[grid.hub]) ** 2, axis=1)
    return 1.0 + gain * np.exp(-d2 / (2 * radius**2))


def generate_traffic(grid: CityGrid, intensity: float = 1.0, seed: int = 0, duration: int = 3600,
                     gain: float = 1.0, radius: float = 500.0, shape: float = 4.0) -> Traffic:
    """Synthetic presence: ``intensity * w_v * m[v, t]`` with Gamma(mean 1) fluctuations.

    The fluctuation field depends only on the seed, so totals scale exactly
    linearly with ``intensity`` under a fixed seed.
    """
    if intensity < 0:
        raise ValidationError("intensity must be non-negative")
    if duration <= 0:
        raise ValidationError("duration must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    m = rng.gamma(shape, 1.0 / shape, size=(grid.size, duration))
    return Traffic(intensity * hub_weights(grid, gain, radius)[:, None] * m)


def greedy_route(grid: CityGrid, profile: AttackerProfile, duration: float,
                 max_ec: float = math.inf) -> list[tuple[float, int]]:
    """Timed visits ``(t, node)``.

    At each intersection the attacker heads one edge toward the nearest node
    it has not visited in the current buffer window (ties to the lower id).
    """
    if not profile.mobile:
        return [(0.0, profile.start)]
    if not profile.speed > 0:
        raise ValidationError("mobile profile needs a positive speed")
    dist = grid.distances
    cur, t = profile.start, 0.0
    visits = [(t, cur)]
    window = _window(t, max_ec)
    seen = np.zeros(grid.size, dtype=bool)
    seen[cur] = True
    while True:
        cand = np.where(seen, np.inf, dist[cur])
        if not np.isfinite(cand).any():
            cand = np.where(np.arange(grid.size) == cur, np.inf, dist[cur])
        target = int(np.argmin(cand))
        nxt = grid.next_hop(cur, target)
        t += dist[cur, nxt] / profile.speed
        if t > duration:
            break
        cur = nxt
        w = _window(t, max_ec)
        if w != window:
            window = w
            seen[:] = False
        seen[cur] = True
        visits.append((t, cur))
    return visits


def _window(t: float, max_ec: float) -> int:
    return 0 if math.isinf(max_ec) else int(math.floor(t / max_ec))


@dataclass
class CaptureLog:
    captured_person_seconds: float
    total_person_seconds: float
    visited_intersections: set = field(default_factory=set)

    def __post_init__(self) -> None:
        if self.captured_person_seconds > self.total_person_seconds * (1 + 1e-12):
            raise ValidationError("captured activity exceeds total")

    @property
    def fraction(self) -> float:
        if self.total_person_seconds == 0:
            return 0.0
        return self.captured_person_seconds / self.total_person_seconds


def run_attack(grid: CityGrid, traffic: Traffic, profile: AttackerProfile, max_ec: float) -> CaptureLog:
    if not max_ec > 0:
        raise ValidationError("max_ec must be positive")
    total = traffic.total
    if not profile.mobile:
        # a parked attacker drains its buffer continuously
        return CaptureLog(float(traffic.cumulative[profile.start, -1]), total, {profile.start})
    captured = 0.0
    last: dict[int, float] = {}
    route = greedy_route(grid, profile, traffic.duration, max_ec)
    for t, v in route:
        start = max(math.floor(t / max_ec) * max_ec, last.get(v, 0.0))
        captured += traffic.activity(v, t) - traffic.activity(v, start)
        last[v] = t
    return CaptureLog(captured, total, {v for _, v in route})


def sniff_sweep(grid: CityGrid, traffic: Traffic, kinds=tuple(ProfileKind),
                max_ecs=DEFAULT_MAX_EC_SWEEP) -> list[tuple[str, int, float, int]]:
    rows = []
    for kind in kinds:
        prof = AttackerProfile.default(kind, grid)
        for ec in max_ecs:
            log = run_attack(grid, traffic, prof, ec)
            rows.append((prof.kind.value, int(ec), log.fraction, len(log.visited_intersections)))
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["profile", "maxEC_seconds", "captureFraction", "intersectionsVisited"])
        for kind, ec, frac, n in rows:
            w.writerow([kind, ec, f"{frac:.10g}", n])
