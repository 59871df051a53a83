"""Trace-driven out-of-order CPU performance model."""

import heapq
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from cpudse.config import (
    FLUSH_PENALTY,
    L2_HIT_LATENCY,
    L3_HIT_LATENCY,
    MEMORY_LATENCY,
    TLB_WALK_LATENCY,
)
from cpudse.errors import SimulationError
from cpudse.modules.branch import BranchParams, BranchPredictor
from cpudse.modules.cache import Cache
from cpudse.modules.design_space import baseline_config, decode_named, default_space, validate_config
from cpudse.modules.trace import (
    BRANCH, DIV, FP, LOAD, MUL, STORE,
    branch_kind, instruction_class,
)
from cpudse.schemas import (
    CacheGeometry,
    Chunk,
    Configuration,
    DesignSpace,
    LatencyTable,
    ParamValue,
    Replacement,
    SimStats,
)

INF = float("inf")
ARCH_REGS = 32
KB = 1024


def default_latencies() -> LatencyTable:
    return LatencyTable(
        mispredict_flush_penalty=FLUSH_PENALTY,
        l2_hit=L2_HIT_LATENCY,
        l3_hit=L3_HIT_LATENCY,
        memory=MEMORY_LATENCY,
        tlb_walk=TLB_WALK_LATENCY,
    )


def resolve_values(config: Configuration, space: DesignSpace) -> dict[str, ParamValue]:
    """Raw value of every catalog parameter; parameters outside `space` sit at baseline."""
    validate_config(config, space)
    catalog = default_space()
    values = decode_named(baseline_config(catalog), catalog)
    values.update(decode_named(config, space))
    return values


@dataclass
class MachineParams:
    """Simulator view of a configuration."""
    # memory hierarchy
    itlb: CacheGeometry
    icache: CacheGeometry
    dtlb: CacheGeometry
    dcache: CacheGeometry
    l2: CacheGeometry
    l3: CacheGeometry
    fetch_buffer: int
    l2_icache_req: int
    l2_icache_resp: int
    prefetch_depth: int
    lsu_bank_q: int
    load_buffer: int
    store_buffer: int
    tlb_miss_q: int
    mem_req_q: int
    data_miss_q: int
    eviction_q: int
    l2_read_req: int
    l2_write_req: int
    l2_read_resp: int
    l2_pipe_req: int
    l2_banks: int
    l2_rows: int
    # core
    issue_width: int
    dispatch_width: int
    write_ports: int
    read_ports: int
    fetch_width: int
    decode_width: int
    decode_queue: int
    rename_width: int
    int_renames: int
    fp_renames: int
    dispatch_count: int
    scheduler: int
    biu_q: int
    retire_width: int
    rob: int
    branch: BranchParams

    @property
    def dispatch_limit(self) -> int:
        return min(self.rename_width, self.dispatch_width, self.dispatch_count)


def _geometry(size: int, line: int, assoc: int, replacement: str = "LRU",
              hit_latency: int = 1, miss_penalty: int = 1) -> CacheGeometry:
    return CacheGeometry(size_bytes=size, line_bytes=line, associativity=assoc,
                         replacement=Replacement(replacement), hit_latency=hit_latency,
                         miss_penalty_next_level=miss_penalty)


def dcache_hit_latency(size_kb: int, assoc: int) -> int:
    return 2 + (size_kb >= 256) + (size_kb >= 1024) + (assoc >= 8)


def machine_params(values: dict[str, ParamValue], lat: LatencyTable) -> MachineParams:
    """Map raw parameter values onto simulator structures."""
    v = {k: (int(x) if not isinstance(x, str) else x) for k, x in values.items()}
    try:
        itlb_page = v["immu/il2mmu tlb page size (kb)"] * KB
        itlb_entries = v["immu/il2mmu tlb num entries"]
        dtlb_page = v["dmmu/dl2mmu tlb page size (kb)"] * KB
        dtlb_entries = v["dmmu/dl2mmu tlb num entries"]
        dcache_kb = v["dcache size (kb)"]
        mem_path = lat.memory + lat.l3_hit + lat.l2_hit

        return MachineParams(
            itlb=_geometry(itlb_entries * itlb_page, itlb_page,
                           min(v["immu/il2mmu tlb associativity"], itlb_entries),
                           miss_penalty=lat.tlb_walk),
            icache=_geometry(v["icache size (kb)"] * KB, v["icache line size"],
                             v["icache associativity"], miss_penalty=lat.l2_hit),
            dtlb=_geometry(dtlb_entries * dtlb_page, dtlb_page,
                           min(v["dmmu/dl2mmu tlb associativity"], dtlb_entries),
                           miss_penalty=lat.tlb_walk),
            dcache=_geometry(dcache_kb * KB, v["dcache line size"], v["dcache associativity"],
                             v["dcache replacement policy"],
                             hit_latency=dcache_hit_latency(dcache_kb, v["dcache associativity"]),
                             miss_penalty=lat.l2_hit),
            l2=_geometry(v["l2 cache size (kb)"] * KB, v["l2 cache line size"],
                         v["l2 cache associativity"], v["l2 cache replacement policy"],
                         hit_latency=lat.l2_hit, miss_penalty=lat.l3_hit),
            l3=_geometry(v["l3 cache size (kb)"] * KB, v["l3 cache line size"],
                         v["l3 cache associativity"], v["l3 cache replacement policy"],
                         hit_latency=lat.l3_hit, miss_penalty=mem_path),
            fetch_buffer=max(v["fetch-icache queue size (bytes)"] // 4, 1),
            l2_icache_req=v["l2-icache request queue size"],
            l2_icache_resp=v["l2-icache response queue size"],
            prefetch_depth=min(v["l2-icache request queue size"], v["l2-icache response queue size"]) // 16,
            lsu_bank_q=v["lsu data bank queue size"],
            load_buffer=v["lsu load buffer queue size"],
            store_buffer=v["lsu store buffer queue size"],
            tlb_miss_q=v["lsu tlb miss queue size"],
            mem_req_q=v["lsu memory request queue size"],
            data_miss_q=v["lsu data miss queue size"],
            eviction_q=v["lsu data eviction queue size"],
            l2_read_req=v["l2-lsu read request queue size"],
            l2_write_req=v["l2-lsu write request queue size"],
            l2_read_resp=v["l2-lsu read response queue size"],
            l2_pipe_req=v["l2-l1 pipe read request queue size"],
            l2_banks=v["l2 no. of banks"],
            l2_rows=v["l2 no. of rows per bank"],
            issue_width=v["issue width"],
            dispatch_width=v["dispatch width"],
            write_ports=v["physical register file write ports"],
            read_ports=v["physical register file read ports"],
            fetch_width=v["no. to fetch"],
            decode_width=v["no. to decode"],
            decode_queue=v["decode: scalar instruction queue size"],
            rename_width=v["no. to rename"],
            int_renames=max(v["no. of integer renames"] - ARCH_REGS, 1),
            fp_renames=max(v["no. of float renames"] - ARCH_REGS, 1),
            dispatch_count=v["no. to dispatch"],
            scheduler=v["dispatch queue depth"],
            biu_q=v["bus interface unit request queue size"],
            retire_width=v["reorder buffer no. to retire"],
            rob=v["reorder buffer retire queue depth"],
            branch=BranchParams(
                history_buffer=v["tage history buffer size"],
                shift=v["tage instruction shift amount"],
                reset_timer=v["tage initial reset timer value"],
                path_bits=v["tage path history bits"],
                tag_bits=v["tage table tag widths x16"],
                loop_entries=v["loop predictor (lpred) no. of entries"],
                loop_assoc=v["lpred associativity"],
                loop_max_age=v["lpred max age"],
                loop_max_iter=v["lpred no. of loop iterations max"],
                btb_entries=v["btb total entries"],
                btb_assoc=v["btb associativity"],
                btb_granularity=v["branch target buffer (btb) granularity"],
                ittage_path_bits=v["ittage path history bits"],
                ittage_reset_timer=v["ittage initial reset timer value"],
                ittage_tag_bits=v["ittage table tag widths x16"],
                ras_size=v["btb raas size"],
            ),
        )
    except KeyError as e:
        raise SimulationError(f"Simulator needs parameter {e}")
    except (TypeError, ValueError) as e:
        raise SimulationError(f"Configuration does not describe a buildable machine: {e}")


class _SlotPool:
    """Queue with `capacity` entries; each request holds one entry for a fixed duration."""

    def __init__(self, capacity: int):
        self.busy = [0] * max(capacity, 1)

    def acquire(self, t: int, duration: int) -> int:
        """Earliest start >= t at which an entry is free."""
        start = max(t, heapq.heappop(self.busy))
        heapq.heappush(self.busy, start + duration)
        return start


def _is_fp_dest(mnemonic: str) -> bool:
    return (mnemonic.startswith("f") and mnemonic != "fence") or mnemonic.startswith("c.f")


class _Core:
    """One simulation: owns every mutable structure."""

    def __init__(self, p: MachineParams, lat: LatencyTable, seed: int):
        self.p = p
        self.lat = lat
        rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(6)]
        self.itlb = Cache(p.itlb, rngs[0], "itlb")
        self.icache = Cache(p.icache, rngs[1], "icache")
        self.dtlb = Cache(p.dtlb, rngs[2], "dtlb")
        self.dcache = Cache(p.dcache, rngs[3], "dcache")
        self.l2 = Cache(p.l2, rngs[4], "l2")
        self.l3 = Cache(p.l3, rngs[5], "l3")
        self.bp = BranchPredictor(p.branch)
        self.d_hit = p.dcache.hit_latency

        self.bank_q = _SlotPool(p.lsu_bank_q)
        self.tlb_miss_q = _SlotPool(p.tlb_miss_q)
        self.mem_req_q = _SlotPool(p.mem_req_q)
        self.data_miss_q = _SlotPool(p.data_miss_q)
        self.eviction_q = _SlotPool(p.eviction_q)
        self.l2_read_req = _SlotPool(p.l2_read_req)
        self.l2_write_req = _SlotPool(p.l2_write_req)
        self.l2_read_resp = _SlotPool(p.l2_read_resp)
        self.l2_pipe_req = _SlotPool(p.l2_pipe_req)
        self.l2_icache_req = _SlotPool(p.l2_icache_req)
        self.l2_icache_resp = _SlotPool(p.l2_icache_resp)
        self.biu_q = _SlotPool(p.biu_q)
        self.l2_banks = [_SlotPool(p.l2_rows) for _ in range(p.l2_banks)]

    # -- memory paths -------------------------------------------------------

    def _beyond_l1(self, addr: int, t: int, request: _SlotPool, response: _SlotPool) -> int:
        """L2 -> L3 -> memory; returns the time data is back at the L1."""
        t = request.acquire(t, self.lat.l2_hit)
        bank = self.l2_banks[(addr // self.p.l2.line_bytes) % len(self.l2_banks)]
        t = bank.acquire(t, 2)
        if self.l2.access(addr):
            t += self.lat.l2_hit
        else:
            t = self.mem_req_q.acquire(t + self.lat.l2_hit, self.lat.l3_hit)
            if self.l3.access(addr):
                t += self.lat.l3_hit
            else:
                t = self.biu_q.acquire(t + self.lat.l3_hit, self.lat.memory)
                t += self.lat.memory
        return response.acquire(t, 2) + 1

    def _translate(self, addr: int, t: int) -> int:
        if self.dtlb.access(addr):
            return t
        return self.tlb_miss_q.acquire(t, self.lat.tlb_walk) + self.lat.tlb_walk

    def _evict(self, before: int, t: int) -> int:
        if self.dcache.writebacks > before:
            return self.eviction_q.acquire(t, self.lat.l2_hit)
        return t

    def load(self, addr: int, t: int) -> int:
        """Issue a load at t; returns its completion time."""
        t = self.bank_q.acquire(self._translate(addr, t), 1)
        wb = self.dcache.writebacks
        if self.dcache.access(addr):
            return t + self.d_hit
        t = self._evict(wb, t + self.d_hit)
        # probe the lower levels to size the miss-queue occupancy
        nominal = self.lat.l2_hit
        if not self.l2.probe(addr):
            nominal += self.lat.l3_hit if self.l3.probe(addr) else self.lat.l3_hit + self.lat.memory
        t = self.data_miss_q.acquire(t, nominal)
        t = self.l2_pipe_req.acquire(t, 1)
        return self._beyond_l1(addr, t, self.l2_read_req, self.l2_read_resp)

    def drain_store(self, addr: int, t: int) -> int:
        """Write a retired store into the dcache; returns when its buffer entry frees."""
        t = self.bank_q.acquire(self._translate(addr, t), 1)
        wb = self.dcache.writebacks
        if self.dcache.access(addr, is_write=True):
            return t + 1
        t = self._evict(wb, t + 1)
        return self._beyond_l1(addr, t, self.l2_write_req, self.l2_read_resp)

    def fetch_line(self, pc: int, t: int) -> int:
        """Instruction fetch of the line holding pc; returns when it is available."""
        if not self.itlb.access(pc):
            t += self.lat.tlb_walk
        if self.icache.access(pc):
            return t
        t = self._beyond_l1(pc, t, self.l2_icache_req, self.l2_icache_resp)
        line = self.p.icache.line_bytes
        for k in range(1, self.p.prefetch_depth + 1):
            self.icache.fill((pc // line + k) * line)
        return t

    # -- functional warm-up -------------------------------------------------

    def warm(self, chunk: Chunk) -> None:
        line_bytes = self.p.icache.line_bytes
        last_line = None
        for r in chunk.records:
            line = r.pc // line_bytes
            if line != last_line:
                self.itlb.access(r.pc)
                if not self.icache.access(r.pc):
                    self.l2.access(r.pc) or self.l3.access(r.pc)
                last_line = line
            if r.flags.branch:
                kind = branch_kind(r)
                pred = self.bp.predict(r.pc, kind, r.pc + (2 if r.flags.compressed else 4))
                miss = pred.taken != r.taken or (r.taken and pred.target != r.target)
                self.bp.update(r.pc, kind, r.taken, r.target, miss)
            if r.mem_addr is not None:
                self.dtlb.access(r.mem_addr)
                if not self.dcache.access(r.mem_addr, is_write=r.flags.store):
                    self.l2.access(r.mem_addr) or self.l3.access(r.mem_addr)
        for cache in (self.itlb, self.icache, self.dtlb, self.dcache, self.l2, self.l3):
            cache.reset_counters()

    # -- timed pass ---------------------------------------------------------

    def run(self, chunk: Chunk, max_cycles: int) -> SimStats:
        p, lat = self.p, self.lat
        records = chunk.records
        n = len(records)

        classes = [instruction_class(r) for r in records]
        exec_lat = {BRANCH: 1, MUL: lat.mul, DIV: lat.div, FP: lat.fp, STORE: lat.store}
        srcs = [tuple(x for x in (r.rs1, r.rs2) if x) for r in records]
        dsts = [r.rd if r.rd else None for r in records]
        fp_dest = [_is_fp_dest(r.mnemonic) for r in records]

        done = [INF] * n
        producers: list[tuple[int, ...]] = [()] * n
        mispredicted = [False] * n
        last_writer: dict[int, int] = {}

        fetch_buffer: deque = deque()
        decode_queue: deque = deque()
        rob: deque = deque()
        scheduler: list[int] = []
        updates: list = []
        store_drains: list[int] = []

        free_int, free_fp = p.int_renames, p.fp_renames
        lq_used = sq_used = 0
        fetch_idx = 0
        fetch_resume = 0
        blocked_by: Optional[int] = None
        current_line = None
        line_bytes = p.icache.line_bytes
        retired = 0
        last_retire = 0
        br_correct = br_miss = 0
        stall_fe = stall_rob = stall_lsu = 0

        cycle = 0
        while retired < n:
            if cycle > max_cycles:
                raise SimulationError(f"chunk {chunk.id} did not finish within {max_cycles} cycles")
            progress = False

            while updates and updates[0][0] <= cycle:
                _, i = heapq.heappop(updates)
                r = records[i]
                self.bp.update(r.pc, branch_kind(r), r.taken, r.target, mispredicted[i])
                progress = True
            while store_drains and store_drains[0] <= cycle:
                heapq.heappop(store_drains)
                sq_used -= 1
                progress = True

            # retire
            count = 0
            while rob and count < p.retire_width and done[rob[0]] <= cycle:
                i = rob.popleft()
                cls = classes[i]
                if dsts[i] is not None:
                    if fp_dest[i]:
                        free_fp += 1
                    else:
                        free_int += 1
                if cls == LOAD:
                    lq_used -= 1
                elif cls == STORE:
                    heapq.heappush(store_drains, self.drain_store(records[i].mem_addr, cycle))
                retired += 1
                count += 1
                last_retire = cycle
            if count:
                progress = True

            # issue
            issued = reads = writes = 0
            remaining = []
            for i in scheduler:
                if issued >= p.issue_width:
                    remaining.append(i)
                    continue
                if any(done[j] > cycle for j in producers[i]):
                    remaining.append(i)
                    continue
                need_w = 1 if dsts[i] is not None else 0
                if reads + len(srcs[i]) > p.read_ports or writes + need_w > p.write_ports:
                    remaining.append(i)
                    continue
                reads += len(srcs[i])
                writes += need_w
                issued += 1
                cls = classes[i]
                if cls == LOAD:
                    done[i] = self.load(records[i].mem_addr, cycle)
                else:
                    done[i] = cycle + exec_lat.get(cls, lat.alu)
                if cls == BRANCH:
                    heapq.heappush(updates, (done[i], i))
                    if i == blocked_by:
                        fetch_resume = done[i] + lat.mispredict_flush_penalty
                        blocked_by = None
            scheduler = remaining
            if issued:
                progress = True

            # rename / dispatch
            count = 0
            rob_full = lsu_full = False
            while decode_queue and count < p.dispatch_limit:
                i = decode_queue[0]
                if len(rob) >= p.rob:
                    rob_full = True
                    break
                if len(scheduler) >= p.scheduler:
                    break
                cls = classes[i]
                if (cls == LOAD and lq_used >= p.load_buffer) or (cls == STORE and sq_used >= p.store_buffer):
                    lsu_full = True
                    break
                if dsts[i] is not None:
                    if fp_dest[i]:
                        if free_fp == 0:
                            break
                        free_fp -= 1
                    else:
                        if free_int == 0:
                            break
                        free_int -= 1
                if cls == LOAD:
                    lq_used += 1
                elif cls == STORE:
                    sq_used += 1
                producers[i] = tuple(last_writer[r] for r in srcs[i] if r in last_writer)
                if dsts[i] is not None:
                    last_writer[dsts[i]] = i
                decode_queue.popleft()
                rob.append(i)
                scheduler.append(i)
                count += 1
            if count:
                progress = True

            # decode
            count = 0
            while fetch_buffer and count < p.decode_width and len(decode_queue) < p.decode_queue:
                decode_queue.append(fetch_buffer.popleft())
                count += 1
            if count:
                progress = True

            # fetch
            fe_stalled = False
            if fetch_idx < n:
                if blocked_by is not None or cycle < fetch_resume:
                    fe_stalled = True
                else:
                    count = 0
                    while fetch_idx < n and count < p.fetch_width and len(fetch_buffer) < p.fetch_buffer:
                        r = records[fetch_idx]
                        line = r.pc // line_bytes
                        if line != current_line:
                            current_line = line
                            ready = self.fetch_line(r.pc, cycle)
                            if ready > cycle:
                                fetch_resume = ready
                                break
                        fetch_buffer.append(fetch_idx)
                        fetch_idx += 1
                        count += 1
                        if r.flags.branch:
                            size = 2 if r.flags.compressed else 4
                            pred = self.bp.predict(r.pc, branch_kind(r), r.pc + size)
                            if pred.taken != r.taken or (r.taken and pred.target != r.target):
                                mispredicted[fetch_idx - 1] = True
                                blocked_by = fetch_idx - 1
                                br_miss += 1
                                break
                            br_correct += 1
                            if r.taken:
                                break
                    if count:
                        progress = True
                    else:
                        fe_stalled = True

            step = 1
            if not progress:
                pending = [done[j] for j in rob if cycle < done[j] < INF]
                if fetch_idx < n and blocked_by is None and fetch_resume > cycle:
                    pending.append(fetch_resume)
                if updates:
                    pending.append(updates[0][0])
                if store_drains:
                    pending.append(store_drains[0])
                if pending:
                    step = max(int(min(pending)) - cycle, 1)
            if fe_stalled:
                stall_fe += step
            if rob_full:
                stall_rob += step
            if lsu_full:
                stall_lsu += step
            cycle += step

        return SimStats(
            instructions=n,
            cycles=last_retire + 1 if n else 0,
            icache_hits=self.icache.hits, icache_misses=self.icache.misses,
            dcache_hits=self.dcache.hits, dcache_misses=self.dcache.misses,
            l2_hits=self.l2.hits, l2_misses=self.l2.misses,
            l3_hits=self.l3.hits, l3_misses=self.l3.misses,
            itlb_hits=self.itlb.hits, itlb_misses=self.itlb.misses,
            dtlb_hits=self.dtlb.hits, dtlb_misses=self.dtlb.misses,
            br_correct=br_correct, br_mispredict=br_miss,
            stall_cycles_frontend=stall_fe,
            stall_cycles_rob_full=stall_rob,
            stall_cycles_lsu_full=stall_lsu,
        )


def simulate(chunk: Chunk, config: Configuration, space: DesignSpace, seed: int = 0,
             latencies: Optional[LatencyTable] = None, warm: bool = True) -> SimStats:
    """
    Simulate one chunk on one configuration.

    Caches, TLBs and predictors are first warmed by a functional pass over
    the chunk; the timed pass then models fetch, decode, rename/dispatch,
    issue and in-order retire cycle by cycle. Parameters that `space` does
    not contain are held at the catalog baseline.

    Args:
        chunk: Non-empty chunk of trace records
        config: Configuration over `space`
        space: Design space (full catalog or any sub-space of it)
        seed: Seed for RANDOM replacement
        latencies: Latency table (defaults from settings)
        warm: Run the functional warm-up pass

    Returns:
        SimStats of the timed pass
    """
    if not chunk.records:
        raise SimulationError(f"chunk {chunk.id} is empty")
    lat = latencies or default_latencies()
    params = machine_params(resolve_values(config, space), lat)
    core = _Core(params, lat, seed)
    if warm:
        core.warm(chunk)
    n = len(chunk.records)
    max_cycles = 10_000 + n * (lat.memory + lat.l3_hit + lat.l2_hit + lat.tlb_walk + lat.div) * 4
    return core.run(chunk, max_cycles)


def format_stats(stats: SimStats) -> str:
    """Flat key=value dump."""
    return "".join(f"{k}={v}\n" for k, v in stats.counters().items())


def stats_row(stats: SimStats, **keys) -> dict:
    """One tabular row: identifying keys followed by every counter."""
    return {**keys, **stats.counters()}
