"""Binary tree continual release with a shadow bridging sum.

Each container holds ``N = 2**h`` leaves. Node ``(depth, pos)`` covers the
1-based leaves ``pos * 2**(h - depth) + 1 .. (pos + 1) * 2**(h - depth)``;
the root is ``(0, 0)`` and leaves sit at depth ``h``. A node is released
(with fresh noise) when its last leaf arrives. At container end the shadow
releases the noisy sum of the second half and every raw counter is wiped.

Leaf values may be floats or numpy arrays; arrays are treated as independent
Monte-Carlo trials sharing one tree layout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from ..core import StateError, ValidationError, is_power_of_two
from .noise import NoiseSampler, NoiseSpec

SHADOW = "shadow"


def v_bound(n: int) -> int:
    """Worst-case canonical decomposition size ``V(N)``."""
    if not is_power_of_two(n) or n < 2:
        raise ValidationError(f"N must be a power of two >= 2, got {n}")
    if n == 2:
        return 1
    return 2 * (n.bit_length() - 2)


def popcount(n: int) -> int:
    return bin(n).count("1")


@dataclass(frozen=True)
class ReleaseRecord:
    container_index: int
    depth: int | None  # None for the shadow bridge
    position: int | None
    noisy_value: object
    sigma: float
    first_leaf: int  # 1-based, within the container
    last_leaf: int

    @property
    def is_shadow(self) -> bool:
        return self.depth is None

    @property
    def node(self):
        return SHADOW if self.is_shadow else (self.depth, self.position)


def node_leaves(depth: int, pos: int, n: int) -> tuple[int, int]:
    h = n.bit_length() - 1
    span = 1 << (h - depth)
    return pos * span + 1, (pos + 1) * span


class BinaryTreeMechanism:
    """Single-owner mutable tree state for one query."""

    def __init__(self, n: int, noise: NoiseSpec | NoiseSampler) -> None:
        v_bound(n)
        self.n = n
        self.h = n.bit_length() - 1
        self.sampler = noise if isinstance(noise, NoiseSampler) else NoiseSampler(noise)
        self.sigma = self.sampler.spec.std
        self.container_index = 0
        self.leaf_idx = 0
        self.path_sums: dict[int, object] = {}
        self.shadow_sum: object = 0.0
        self.max_path_len = 0

    def _noisy(self, value):
        return value + self.sampler.draw(np.shape(value))

    def add_leaf(self, y) -> list[ReleaseRecord]:
        if self.leaf_idx >= self.n:
            raise StateError("container is full; call container_end first")
        pos = self.leaf_idx
        for d in range(self.h + 1):
            self.path_sums[d] = self.path_sums.get(d, 0.0) + y
        self.max_path_len = max(self.max_path_len, len(self.path_sums))
        self.leaf_idx += 1
        if self.leaf_idx > self.n // 2:
            self.shadow_sum = self.shadow_sum + y
        out = []
        for d in range(self.h, -1, -1):
            span = 1 << (self.h - d)
            if self.leaf_idx % span:
                break
            p = pos // span
            total = self.path_sums.pop(d)
            lo, hi = node_leaves(d, p, self.n)
            out.append(ReleaseRecord(self.container_index, d, p, self._noisy(total), self.sigma, lo, hi))
        return out

    def container_end(self) -> ReleaseRecord:
        if self.leaf_idx != self.n:
            raise StateError(f"container end after {self.leaf_idx} of {self.n} leaves")
        rec = ReleaseRecord(
            self.container_index, None, None, self._noisy(self.shadow_sum), self.sigma,
            self.n // 2 + 1, self.n,
        )
        self.path_sums = {}
        self.shadow_sum = 0.0
        self.leaf_idx = 0
        self.container_index += 1
        return rec

    def feed(self, values: Iterable) -> list[ReleaseRecord]:
        """Add leaves in order, closing containers as they fill."""
        out: list[ReleaseRecord] = []
        for y in values:
            out.extend(self.add_leaf(y))
            if self.leaf_idx == self.n:
                out.append(self.container_end())
        return out


@dataclass(frozen=True)
class CanonicalDecomposition:
    interval: tuple[int, int]
    nodes: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.nodes)


def canonical_decompose(i: int, j: int, n: int) -> CanonicalDecomposition:
    """Maximal dyadic blocks partitioning the 1-based leaf range ``[i, j]``."""
    v_bound(n)
    if not (1 <= i <= j <= n):
        raise ValidationError(f"interval [{i}, {j}] outside [1, {n}]")
    h = n.bit_length() - 1
    nodes = []

    def visit(depth: int, pos: int) -> None:
        lo, hi = node_leaves(depth, pos, n)
        if hi < i or lo > j:
            return
        if i <= lo and hi <= j:
            nodes.append((depth, pos))
            return
        visit(depth + 1, 2 * pos)
        visit(depth + 1, 2 * pos + 1)

    visit(0, 0)
    assert h >= 1
    return CanonicalDecomposition((i, j), tuple(nodes))


@dataclass
class IntervalEstimate:
    estimate: object
    variance_bound: float
    nodes: list = field(default_factory=list)


class ReleaseLog:
    """Cloud-side store of tree and shadow releases for one query."""

    def __init__(self, n: int, releases: Iterable[ReleaseRecord] = ()) -> None:
        v_bound(n)
        self.n = n
        self.tree: dict[tuple[int, int, int], ReleaseRecord] = {}
        self.shadow: dict[int, ReleaseRecord] = {}
        self.extend(releases)

    def extend(self, releases: Iterable[ReleaseRecord]) -> None:
        for r in releases:
            if r.is_shadow:
                self.shadow[r.container_index] = r
            else:
                self.tree[(r.container_index, r.depth, r.position)] = r

    def _node(self, c: int, depth: int, pos: int) -> ReleaseRecord:
        try:
            return self.tree[(c, depth, pos)]
        except KeyError:
            raise ValidationError(f"node {(depth, pos)} of container {c} has not been released") from None

    def _local(self, c: int, lo: int, hi: int, used: list) -> None:
        for d, p in canonical_decompose(lo, hi, self.n).nodes:
            used.append(self._node(c, d, p))

    def decompose(self, start: int, end: int) -> list[ReleaseRecord]:
        """Releases whose sum estimates leaves ``start..end`` (0-based, absolute, inclusive)."""
        n, half = self.n, self.n // 2
        if start < 0 or end < start:
            raise ValidationError(f"bad interval [{start}, {end}]")
        used: list[ReleaseRecord] = []
        c0, c1 = start // n, end // n
        if c0 == c1:
            self._local(c0, start - c0 * n + 1, end - c0 * n + 1, used)
            return used
        first_block = -(-start // half)
        last_block = (end + 1) // half - 1
        if first_block * half > start:
            blk_end = first_block * half - 1
            c = start // n
            self._local(c, start - c * n + 1, blk_end - c * n + 1, used)
        for b in range(first_block, last_block + 1):
            c, second = divmod(b, 2)
            if second and c in self.shadow:
                used.append(self.shadow[c])
            else:
                used.append(self._node(c, 1, second))
        if (last_block + 1) * half <= end:
            blk_start = (last_block + 1) * half
            c = blk_start // n
            self._local(c, blk_start - c * n + 1, end - c * n + 1, used)
        return used

    def estimate_interval(self, start: int, end: int) -> IntervalEstimate:
        used = self.decompose(start, end)
        est = sum((r.noisy_value for r in used[1:]), used[0].noisy_value)
        var = float(sum(r.sigma**2 for r in used))
        return IntervalEstimate(est, var, used)


def estimate_interval(releases: Iterable[ReleaseRecord], n: int, start: int, end: int) -> IntervalEstimate:
    return ReleaseLog(n, releases).estimate_interval(start, end)


def write_release_csv(releases: Iterable[ReleaseRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["containerIndex", "nodeDepth", "nodePos", "noisyValue", "sigma"])
        for r in releases:
            if r.is_shadow:
                w.writerow([r.container_index, "", SHADOW, repr(float(r.noisy_value)), repr(r.sigma)])
            else:
                w.writerow([r.container_index, r.depth, r.position, repr(float(r.noisy_value)), repr(r.sigma)])
