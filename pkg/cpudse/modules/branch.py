"""Branch prediction: 2-bit direction table, loop predictor, BTB, indirect table, RAS."""

from collections import OrderedDict
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from cpudse.modules.trace import CALL, COND, INDIRECT, JUMP, RET


@dataclass(frozen=True)
class BranchParams:
    """Predictor sizing; defaults match the catalog baseline."""
    history_buffer: int = 512
    shift: int = 3
    reset_timer: int = 0x100000
    path_bits: int = 48
    tag_bits: int = 13
    loop_entries: int = 256
    loop_assoc: int = 2
    loop_max_age: int = 31
    loop_max_iter: int = 128
    btb_entries: int = 8192
    btb_assoc: int = 4
    btb_granularity: int = 2
    ittage_path_bits: int = 48
    ittage_reset_timer: int = 0x100000
    ittage_tag_bits: int = 11
    ras_size: int = 64

    @property
    def table_size(self) -> int:
        # 2^ceil(log2(history buffer size))
        return 1 << max(self.history_buffer - 1, 0).bit_length()


class Prediction(NamedTuple):
    taken: bool
    target: Optional[int]


class _LoopEntry:
    __slots__ = ("tag", "trip", "current", "confidence", "age")

    def __init__(self, tag: int, max_age: int):
        self.tag = tag
        self.trip = 0
        self.current = 0
        self.confidence = 0
        self.age = max_age


class _SetAssocTable:
    """Tag -> value table with LRU sets."""

    def __init__(self, entries: int, assoc: int):
        self.assoc = max(1, min(assoc, entries))
        self.num_sets = max(1, entries // self.assoc)
        self.sets: dict[int, OrderedDict] = {}

    def get(self, key: int):
        s = self.sets.get(key % self.num_sets)
        if s is None:
            return None
        tag = key // self.num_sets
        if tag not in s:
            return None
        s.move_to_end(tag)
        return s[tag]

    def put(self, key: int, value) -> None:
        s = self.sets.setdefault(key % self.num_sets, OrderedDict())
        tag = key // self.num_sets
        s[tag] = value
        s.move_to_end(tag)
        if len(s) > self.assoc:
            s.popitem(last=False)

    def clear(self) -> None:
        self.sets.clear()


class BranchPredictor:
    """
    Front-end branch predictor.

    Direction comes from a table of 2-bit saturating counters (initialised
    weakly not-taken) indexed by shifted pc XOR path history, guarded by
    partial tags; a loop predictor overrides it for confident backward loops.
    Targets come from the BTB, an indirect-target table and a return stack.
    """

    def __init__(self, params: BranchParams = BranchParams()):
        self.params = params
        n = params.table_size
        self.counters = np.ones(n, dtype=np.int8)
        self.tags = np.full(n, -1, dtype=np.int64)
        self.tag_mask = (1 << params.tag_bits) - 1
        self.path_len = max(params.path_bits // 16, 1)
        self.path = 0
        self.reset_period = max(params.reset_timer >> 10, 1)
        self.updates = 0

        self.loops = _SetAssocTable(params.loop_entries, params.loop_assoc)
        self.btb = _SetAssocTable(params.btb_entries, params.btb_assoc)
        self.btb_shift = max(params.btb_granularity.bit_length() - 1, 0)

        self.indirect = _SetAssocTable(max(params.btb_entries // 16, 16), 4)
        self.ind_tag_mask = (1 << params.ittage_tag_bits) - 1
        self.ind_path_len = max(params.ittage_path_bits // 16, 1)
        self.ind_path = 0
        self.ind_reset_period = max(params.ittage_reset_timer >> 10, 1)
        self.ind_updates = 0

        self.ras: list[int] = []

    # -- indexing -----------------------------------------------------------

    def _index(self, pc: int) -> tuple[int, int]:
        key = pc >> (1 + self.params.shift)
        n = len(self.counters)
        index = (key ^ self.path) % n
        tag = (key // n) & self.tag_mask
        return index, tag

    def _indirect_key(self, pc: int) -> int:
        key = pc >> 1
        tag = (key >> 4) & self.ind_tag_mask
        return ((key ^ self.ind_path) & 0xFFFF) | (tag << 16)

    # -- prediction ---------------------------------------------------------

    def _direction(self, pc: int) -> bool:
        index, tag = self._index(pc)
        if self.tags[index] != tag:
            return False
        return bool(self.counters[index] >= 2)

    def _loop_direction(self, pc: int) -> Optional[bool]:
        entry = self.loops.get(pc >> 1)
        if entry is None or entry.confidence < 2:
            return None
        return entry.current + 1 < entry.trip

    def predict(self, pc: int, kind: str = COND, fallthrough: Optional[int] = None) -> Prediction:
        """Predict a branch at fetch; calls and returns update the return stack here."""
        if fallthrough is None:
            fallthrough = pc + 4
        btb_target = self.btb.get(pc >> self.btb_shift)

        if kind == COND:
            taken = self._loop_direction(pc)
            if taken is None:
                taken = self._direction(pc)
            return Prediction(taken, btb_target if taken else None)

        if kind == RET:
            target = self.ras.pop() if self.ras else btb_target
            return Prediction(True, target)

        if kind == CALL:
            self.ras.append(fallthrough)
            if len(self.ras) > self.params.ras_size:
                del self.ras[0]
            return Prediction(True, btb_target)

        if kind == INDIRECT:
            target = self.indirect.get(self._indirect_key(pc))
            return Prediction(True, target if target is not None else btb_target)

        return Prediction(True, btb_target)

    # -- update -------------------------------------------------------------

    def _update_direction(self, pc: int, taken: bool) -> None:
        index, tag = self._index(pc)
        if self.tags[index] != tag:
            self.tags[index] = tag
            self.counters[index] = 2 if taken else 1
        elif taken:
            self.counters[index] = min(3, self.counters[index] + 1)
        else:
            self.counters[index] = max(0, self.counters[index] - 1)

        self.updates += 1
        if self.updates % self.reset_period == 0:
            # periodic decay of strong counters toward weak
            self.counters[self.counters == 3] = 2
            self.counters[self.counters == 0] = 1

    def _update_loop(self, pc: int, taken: bool, target: int, mispredicted: bool) -> None:
        if target >= pc:
            return
        key = pc >> 1
        entry = self.loops.get(key)
        if entry is None:
            if not mispredicted:
                return
            entry = _LoopEntry(key, self.params.loop_max_age)
            self.loops.put(key, entry)
        if taken:
            entry.current += 1
            if entry.current > self.params.loop_max_iter:
                entry.confidence = 0
                entry.current = 0
            return
        trip = entry.current + 1
        if trip == entry.trip:
            entry.confidence = min(entry.confidence + 1, 3)
            entry.age = self.params.loop_max_age
        else:
            entry.trip = trip
            entry.confidence = 0
            entry.age -= 1
            if entry.age <= 0:
                entry.age = self.params.loop_max_age
                entry.trip = 0
        entry.current = 0

    def update(self, pc: int, kind: str, taken: bool, target: int, mispredicted: bool = False) -> None:
        """Train with a resolved outcome."""
        if kind == COND:
            self._update_loop(pc, taken, target, mispredicted)
            self._update_direction(pc, taken)
        elif kind == INDIRECT:
            self.indirect.put(self._indirect_key(pc), target)
            self.ind_updates += 1
            if self.ind_updates % self.ind_reset_period == 0:
                self.indirect.clear()
            self.ind_path = ((self.ind_path << 1) | ((target >> 2) & 1)) & ((1 << self.ind_path_len) - 1)

        if taken:
            self.btb.put(pc >> self.btb_shift, target)
            self.path = ((self.path << 1) | ((target >> 2) & 1)) & ((1 << self.path_len) - 1)


def predict_branch(predictor: BranchPredictor, pc: int, kind: str = COND) -> Prediction:
    return predictor.predict(pc, kind)


def update_branch(predictor: BranchPredictor, pc: int, taken: bool, target: int, kind: str = COND) -> None:
    predictor.update(pc, kind, taken, target)


__all__ = ["BranchParams", "BranchPredictor", "Prediction", "predict_branch", "update_branch",
           "COND", "JUMP", "CALL", "RET", "INDIRECT"]
