"""Set-associative cache model with LRU, tree-PLRU and random replacement."""

from typing import Optional

import numpy as np

from cpudse.schemas import CacheGeometry, Replacement


class _Set:
    __slots__ = ("tags", "dirty", "stamps", "tree", "where")

    def __init__(self, ways: int, leaves: int):
        self.tags: list[Optional[int]] = [None] * ways
        self.dirty = [False] * ways
        self.stamps = [0] * ways
        # PLRU tree: node i has children 2i and 2i+1, leaves at [leaves, 2*leaves)
        self.tree = [0] * leaves
        self.where: dict[int, int] = {}


class Cache:
    """
    One cache level (also used for TLBs with line = page).

    Sets are materialised on first touch so multi-megabyte geometries cost
    nothing until used.
    """

    def __init__(self, geometry: CacheGeometry, rng: Optional[np.random.Generator] = None, name: str = ""):
        self.geometry = geometry
        self.name = name
        self.ways = geometry.associativity
        self.num_sets = geometry.num_sets
        self.line = geometry.line_bytes
        self.policy = Replacement(geometry.replacement)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._leaves = 1 << max(self.ways - 1, 0).bit_length()
        self._sets: dict[int, _Set] = {}
        self._clock = 0
        self.hits = 0
        self.misses = 0
        self.writebacks = 0

    def _locate(self, addr: int) -> tuple[int, int]:
        block = addr // self.line
        return block % self.num_sets, block // self.num_sets

    def _get_set(self, index: int) -> _Set:
        s = self._sets.get(index)
        if s is None:
            s = self._sets[index] = _Set(self.ways, self._leaves)
        return s

    def _touch(self, s: _Set, way: int) -> None:
        self._clock += 1
        s.stamps[way] = self._clock
        if self.policy == Replacement.PLRU and self.ways > 1:
            # point every node on the path away from this way
            idx = way + self._leaves
            while idx > 1:
                parent = idx // 2
                s.tree[parent] = 1 if idx % 2 == 0 else 0
                idx = parent

    def _victim(self, s: _Set) -> int:
        for way, tag in enumerate(s.tags):
            if tag is None:
                return way
        if self.ways == 1:
            return 0
        if self.policy == Replacement.LRU:
            return min(range(self.ways), key=s.stamps.__getitem__)
        if self.policy == Replacement.RANDOM:
            return int(self.rng.integers(0, self.ways))
        idx = 1
        while idx < self._leaves:
            idx = 2 * idx + 1 if s.tree[idx] == 1 else 2 * idx
        return (idx - self._leaves) % self.ways

    def probe(self, addr: int) -> bool:
        """Hit check without side effects."""
        index, tag = self._locate(addr)
        s = self._sets.get(index)
        return s is not None and tag in s.where

    def access(self, addr: int, is_write: bool = False) -> bool:
        """Access one address; returns True on a hit and updates replacement state."""
        index, tag = self._locate(addr)
        s = self._get_set(index)
        way = s.where.get(tag)
        if way is not None:
            self.hits += 1
            s.dirty[way] = s.dirty[way] or is_write
            self._touch(s, way)
            return True

        self.misses += 1
        self._install(s, tag, is_write)
        return False

    def fill(self, addr: int) -> None:
        """Install a line without counting an access (prefetch)."""
        index, tag = self._locate(addr)
        s = self._get_set(index)
        if tag not in s.where:
            self._install(s, tag, False)

    def _install(self, s: _Set, tag: int, dirty: bool) -> None:
        way = self._victim(s)
        old = s.tags[way]
        if old is not None:
            del s.where[old]
            if s.dirty[way]:
                self.writebacks += 1
        s.tags[way] = tag
        s.dirty[way] = dirty
        s.where[tag] = way
        self._touch(s, way)

    def reset_counters(self) -> None:
        self.hits = self.misses = self.writebacks = 0

    @property
    def accesses(self) -> int:
        return self.hits + self.misses


def fully_associative(lines: int, line_bytes: int = 64,
                      replacement: Replacement = Replacement.LRU, seed: int = 0) -> Cache:
    """Single-set cache holding `lines` lines."""
    geometry = CacheGeometry(size_bytes=lines * line_bytes, line_bytes=line_bytes,
                             associativity=lines, replacement=replacement)
    return Cache(geometry, rng=np.random.default_rng(seed))


def cache_access(cache: Cache, addr: int, is_write: bool = False) -> bool:
    return cache.access(addr, is_write)
