"""Instruction traces: parse, format, generate, chunk and tokenize."""

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from cpudse.errors import TokenizationError, TraceParseError, TraceValidationError
from cpudse.schemas import Chunk, TraceFlags, TraceRecord, WorkloadProfile

# Instruction classes understood by the simulator
ALU, FP, MUL, DIV, LOAD, STORE, BRANCH = "alu", "fp", "mul", "div", "load", "store", "branch"

# Branch kinds
COND, JUMP, CALL, RET, INDIRECT = "cond", "jump", "call", "ret", "indirect"

MNEMONICS: dict[str, tuple[str, ...]] = {
    ALU: (
        # RV64I
        "lui", "auipc", "addi", "slti", "sltiu", "xori", "ori", "andi", "slli", "srli",
        "srai", "add", "sub", "sll", "slt", "sltu", "xor", "srl", "sra", "or", "and",
        "addiw", "slliw", "srliw", "sraiw", "addw", "subw", "sllw", "srlw", "sraw",
        "fence", "ecall", "ebreak", "csrrw", "csrrs", "csrrc", "csrrwi", "csrrsi",
        "csrrci", "nop", "mv",
        # bit manipulation
        "sh1add", "sh2add", "sh3add", "add.uw", "andn", "orn", "xnor", "clz", "ctz",
        "cpop", "max", "maxu", "min", "minu", "sext.b", "sext.h", "zext.h", "rol",
        "ror", "rori", "rev8",
        # compressed
        "c.addi", "c.li", "c.lui", "c.mv", "c.add", "c.sub", "c.and", "c.slli", "c.srli",
    ),
    FP: (
        "fadd.s", "fsub.s", "fmul.s", "fmin.s", "fmax.s", "fcvt.w.s", "fcvt.s.w",
        "fmv.x.w", "fmv.w.x", "feq.s", "flt.s", "fadd.d", "fsub.d", "fmul.d",
        "fcvt.d.s", "fcvt.s.d", "fmv.x.d", "fmv.d.x", "fmadd.d", "fmsub.d",
    ),
    MUL: ("mul", "mulh", "mulhsu", "mulhu", "mulw"),
    DIV: (
        "div", "divu", "rem", "remu", "divw", "divuw", "remw", "remuw",
        "fdiv.s", "fdiv.d", "fsqrt.d",
    ),
    LOAD: (
        "lb", "lh", "lw", "ld", "lbu", "lhu", "lwu", "flw", "fld",
        "c.lw", "c.ld", "c.lwsp", "c.ldsp", "lr.d",
    ),
    STORE: (
        "sb", "sh", "sw", "sd", "fsw", "fsd", "c.sw", "c.sd", "c.swsp", "c.sdsp", "sc.d",
    ),
    BRANCH: (),
}

BRANCH_MNEMONICS: dict[str, tuple[str, ...]] = {
    COND: ("beq", "bne", "blt", "bge", "bltu", "bgeu", "c.beqz", "c.bnez"),
    JUMP: ("j", "c.j"),
    CALL: ("jal", "call", "c.jal"),
    RET: ("ret",),
    INDIRECT: ("jalr", "jr", "c.jr", "c.jalr"),
}
MNEMONICS[BRANCH] = tuple(m for kind in BRANCH_MNEMONICS.values() for m in kind)

MNEMONIC_CLASS: dict[str, str] = {m: cls for cls, ms in MNEMONICS.items() for m in ms}
BRANCH_KIND: dict[str, str] = {m: kind for kind, ms in BRANCH_MNEMONICS.items() for m in ms}
ALL_MNEMONICS: tuple[str, ...] = tuple(MNEMONIC_CLASS)

UNK_TOKEN = "<unk>"
CODE_BASE = 0x10000
DATA_BASE = 0x80000000
RETURN_REG = 1

_FLAG_NAMES = {"C": "compressed", "LD": "load", "ST": "store", "BR": "branch"}
_KEYS = ("tgt", "rd", "rs1", "rs2", "addr")


def instruction_class(record: TraceRecord) -> str:
    """Execution class of a record; unknown mnemonics fall back to their flags."""
    cls = MNEMONIC_CLASS.get(record.mnemonic)
    if cls is not None:
        return cls
    if record.flags.branch:
        return BRANCH
    if record.flags.load:
        return LOAD
    if record.flags.store:
        return STORE
    return ALU


def branch_kind(record: TraceRecord) -> str:
    return BRANCH_KIND.get(record.mnemonic, COND)


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------

def _parse_int(token: str, base: int, line_no: int) -> int:
    try:
        return int(token, base)
    except ValueError:
        raise TraceParseError(f"bad number '{token}'", line_no)


def parse_line(line: str, line_no: int = 0) -> Optional[TraceRecord]:
    """Parse one trace line; returns None for blank and comment lines."""
    line = line.split("#", 1)[0].strip()
    if not line:
        return None

    parts = line.split()
    if len(parts) < 3:
        raise TraceParseError("expected '<pc> <mnemonic> <flags>'", line_no)

    pc = _parse_int(parts[0], 16, line_no)
    mnemonic = parts[1]

    flags = {}
    taken = None
    if parts[2] != "-":
        for flag in parts[2].split(","):
            if flag == "T":
                taken = True
            elif flag in _FLAG_NAMES:
                flags[_FLAG_NAMES[flag]] = True
            else:
                raise TraceParseError(f"unknown flag '{flag}'", line_no)

    fields: dict = {}
    for item in parts[3:]:
        key, sep, value = item.partition("=")
        if not sep or key not in _KEYS:
            raise TraceParseError(f"unexpected field '{item}'", line_no)
        if key in fields:
            raise TraceParseError(f"repeated field '{key}'", line_no)
        fields[key] = _parse_int(value, 16 if key in ("tgt", "addr") else 10, line_no)

    cls = MNEMONIC_CLASS.get(mnemonic)
    if cls in (LOAD, STORE) and "addr" not in fields:
        raise TraceValidationError(f"{mnemonic} record needs addr=", line_no)
    if cls == BRANCH and not flags.get("branch"):
        raise TraceValidationError(f"{mnemonic} record needs the BR flag and tgt=", line_no)

    if flags.get("branch"):
        taken = bool(taken)
    elif taken:
        raise TraceValidationError("T flag without BR", line_no)

    try:
        return TraceRecord(
            pc=pc,
            mnemonic=mnemonic,
            flags=TraceFlags(**flags),
            target=fields.get("tgt"),
            taken=taken,
            rd=fields.get("rd"),
            rs1=fields.get("rs1"),
            rs2=fields.get("rs2"),
            mem_addr=fields.get("addr"),
        )
    except ValidationError as e:
        detail = "; ".join(err["msg"] for err in e.errors())
        raise TraceValidationError(detail, line_no)


def parse_trace(text: str) -> list[TraceRecord]:
    """One TraceRecord per non-comment line, in file order."""
    records = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        record = parse_line(line, line_no)
        if record is not None:
            records.append(record)
    return records


def format_record(record: TraceRecord) -> str:
    f = record.flags
    flags = [name for name, attr in _FLAG_NAMES.items() if getattr(f, attr)]
    if record.taken:
        flags.append("T")
    parts = [f"0x{record.pc:x}", record.mnemonic, ",".join(flags) or "-"]
    if record.target is not None:
        parts.append(f"tgt=0x{record.target:x}")
    for key in ("rd", "rs1", "rs2"):
        value = getattr(record, key)
        if value is not None:
            parts.append(f"{key}={value}")
    if record.mem_addr is not None:
        parts.append(f"addr=0x{record.mem_addr:x}")
    return " ".join(parts)


def format_trace(records: Iterable[TraceRecord]) -> str:
    return "".join(format_record(r) + "\n" for r in records)


def parse_profile(text: str) -> WorkloadProfile:
    """Parse a flat key=value workload profile."""
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise TraceParseError(f"expected key=value, got '{line}'", line_no)
        values[key.strip()] = value.strip()
    try:
        return WorkloadProfile(**values)
    except ValidationError as e:
        raise ValueError(f"Invalid workload profile: {e}")


def format_profile(profile: WorkloadProfile) -> str:
    return "".join(f"{k} = {v}\n" for k, v in profile.model_dump().items())


# ---------------------------------------------------------------------------
# Chunking and tokenization
# ---------------------------------------------------------------------------

def chunk_trace(records: Sequence[TraceRecord], s: int, first_id: int = 0) -> list[Chunk]:
    """Split records into ceil(N/s) chunks of length s (the last may be shorter)."""
    if s < 1:
        raise ValueError(f"Chunk length must be >= 1, got {s}")
    return [
        Chunk(id=first_id + i, records=tuple(records[start:start + s]))
        for i, start in enumerate(range(0, len(records), s))
    ]


@dataclass(frozen=True)
class TokenDict:
    """Mnemonic to dense token id; pad id = size, unk (if reserved) = pad - 1."""

    mnemonics: tuple[str, ...] = ()
    ids: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.mnemonics)) != len(self.mnemonics):
            raise TokenizationError("duplicate mnemonic in dictionary")
        object.__setattr__(self, "ids", {m: i for i, m in enumerate(self.mnemonics)})

    def __len__(self) -> int:
        return len(self.mnemonics)

    def __contains__(self, mnemonic: str) -> bool:
        return mnemonic in self.ids

    @property
    def size(self) -> int:
        return len(self.mnemonics)

    @property
    def pad(self) -> int:
        return len(self.mnemonics)

    @property
    def vocab(self) -> int:
        return len(self.mnemonics) + 1

    @property
    def unk(self) -> Optional[int]:
        return self.ids.get(UNK_TOKEN)


def build_dictionary(records: Iterable[TraceRecord], reserve_unknown: bool = False) -> TokenDict:
    """Distinct mnemonics in order of first appearance."""
    seen: dict[str, None] = {}
    for record in records:
        seen.setdefault(record.mnemonic, None)
    mnemonics = list(seen)
    if reserve_unknown:
        mnemonics.append(UNK_TOKEN)
    return TokenDict(tuple(mnemonics))


def tokenize_chunk(chunk: Chunk, dictionary: TokenDict, s: int, strict: bool = True) -> np.ndarray:
    """Token ids in record order, padded with the pad id to length s."""
    if len(chunk) > s:
        raise TokenizationError(f"chunk {chunk.id} has {len(chunk)} records, longer than s={s}")

    tokens = np.full(s, dictionary.pad, dtype=np.int64)
    for i, record in enumerate(chunk.records):
        token = dictionary.ids.get(record.mnemonic)
        if token is None:
            if strict or dictionary.unk is None:
                raise TokenizationError(f"unknown mnemonic '{record.mnemonic}' in chunk {chunk.id}")
            token = dictionary.unk
        tokens[i] = token
    return tokens


def detokenize(tokens: Iterable[int], dictionary: TokenDict) -> list[str]:
    """Inverse of tokenize_chunk; pad tokens are dropped."""
    return [dictionary.mnemonics[t] for t in tokens if t != dictionary.pad]


# ---------------------------------------------------------------------------
# Synthetic traces
# ---------------------------------------------------------------------------

_CLASS_ORDER = (ALU, MUL, DIV, LOAD, STORE, BRANCH)
_KIND_WEIGHTS = ((COND, 0.70), (JUMP, 0.08), (CALL, 0.08), (RET, 0.08), (INDIRECT, 0.06))
_DEST_REGS = tuple(range(5, 32))
_SEQUENTIAL_SHARE = 0.7


@dataclass
class _BranchSite:
    mnemonic: str
    kind: str
    targets: tuple[int, ...]
    bias: float = 0.5
    trip: int = 0
    count: int = 0


def _polarized_bias(taken_prob: float, rng: np.random.Generator) -> float:
    """Per-site bias of 0.95 or 0.05 such that the mean over sites is taken_prob."""
    if taken_prob <= 0.05 or taken_prob >= 0.95:
        return taken_prob
    return 0.95 if rng.random() < (taken_prob - 0.05) / 0.9 else 0.05


class _TraceGenerator:
    def __init__(self, profile: WorkloadProfile):
        self.profile = profile
        self.rng = np.random.default_rng(profile.seed)
        self.code_end = CODE_BASE + profile.code_bytes
        self.sites: dict[int, _BranchSite] = {}
        self.call_stack: list[int] = []
        self.writers: list[int] = []
        self.stream = 0
        self.reg_cursor = 0

    def _wrap(self, pc: int) -> int:
        return CODE_BASE + (pc - CODE_BASE) % self.profile.code_bytes

    def _code_addr(self) -> int:
        return CODE_BASE + 4 * int(self.rng.integers(0, self.profile.code_bytes // 4))

    def _data_addr(self) -> int:
        ws = self.profile.working_set_bytes
        if self.rng.random() < _SEQUENTIAL_SHARE:
            self.stream = (self.stream + 8) % ws
            offset = self.stream
        else:
            offset = int(self.rng.integers(0, max(ws // 8, 1))) * 8
        return DATA_BASE + offset

    def _source(self) -> int:
        # distance to the producing instruction, geometric with mean dep_chain_len
        distance = int(self.rng.geometric(1.0 / self.profile.dep_chain_len))
        if distance <= len(self.writers):
            return self.writers[-distance]
        return int(self.rng.integers(1, 32))

    def _dest(self) -> int:
        rd = _DEST_REGS[self.reg_cursor % len(_DEST_REGS)]
        self.reg_cursor += 1
        self.writers.append(rd)
        if len(self.writers) > 64:
            del self.writers[0]
        return rd

    def _new_site(self, pc: int) -> _BranchSite:
        kinds, weights = zip(*_KIND_WEIGHTS)
        kind = kinds[int(self.rng.choice(len(kinds), p=weights))]
        names = BRANCH_MNEMONICS[kind]
        mnemonic = names[int(self.rng.integers(0, len(names)))]
        if kind == COND and self.rng.random() < self.profile.loop_frac:
            body = 4 * int(self.rng.integers(2, 33))
            return _BranchSite(mnemonic, kind, (self._wrap(pc - body),),
                               trip=int(self.rng.integers(2, 17)))
        if kind == COND:
            return _BranchSite(mnemonic, kind, (self._code_addr(),),
                               bias=_polarized_bias(self.profile.taken_prob, self.rng))
        if kind == INDIRECT:
            return _BranchSite(mnemonic, kind, (self._code_addr(), self._code_addr()))
        return _BranchSite(mnemonic, kind, (self._code_addr(),))

    def _branch(self, pc: int) -> tuple[TraceRecord, int]:
        site = self.sites.get(pc)
        if site is None:
            site = self.sites[pc] = self._new_site(pc)
        fallthrough = self._wrap(pc + (2 if site.mnemonic.startswith("c.") else 4))
        rd = rs1 = rs2 = None

        if site.kind == COND:
            rs1, rs2 = self._source(), self._source()
            if site.trip:
                site.count += 1
                taken = site.count % site.trip != 0
            else:
                taken = bool(self.rng.random() < site.bias)
            target = site.targets[0]
        elif site.kind == CALL:
            taken, target, rd = True, site.targets[0], RETURN_REG
            self.call_stack.append(fallthrough)
            if len(self.call_stack) > 64:
                del self.call_stack[0]
        elif site.kind == RET:
            taken, rs1 = True, RETURN_REG
            target = self.call_stack.pop() if self.call_stack else fallthrough
        elif site.kind == INDIRECT:
            taken, rs1 = True, self._source()
            target = site.targets[int(self.rng.integers(0, len(site.targets)))]
        else:
            taken, target = True, site.targets[0]

        record = TraceRecord(
            pc=pc, mnemonic=site.mnemonic,
            flags=TraceFlags(compressed=site.mnemonic.startswith("c."), branch=True),
            target=target, taken=taken, rd=rd, rs1=rs1, rs2=rs2,
        )
        return record, target if taken else fallthrough

    def generate(self, n: int) -> list[TraceRecord]:
        records = []
        fractions = np.array(self.profile.class_fractions())
        classes = self.rng.choice(len(_CLASS_ORDER), size=n, p=fractions / fractions.sum())
        pc = CODE_BASE

        for idx in classes:
            cls = _CLASS_ORDER[idx]
            if cls == BRANCH:
                record, pc = self._branch(pc)
                records.append(record)
                continue

            if cls == ALU and self.rng.random() < self.profile.fp_share:
                cls = FP
            names = MNEMONICS[cls]
            mnemonic = names[int(self.rng.integers(0, len(names)))]
            compressed = mnemonic.startswith("c.")

            if cls == LOAD:
                record = TraceRecord(pc=pc, mnemonic=mnemonic,
                                     flags=TraceFlags(compressed=compressed, load=True),
                                     rs1=self._source(), rd=self._dest(), mem_addr=self._data_addr())
            elif cls == STORE:
                record = TraceRecord(pc=pc, mnemonic=mnemonic,
                                     flags=TraceFlags(compressed=compressed, store=True),
                                     rs1=self._source(), rs2=self._source(), mem_addr=self._data_addr())
            else:
                rs1 = self._source()
                rs2 = self._source() if self.rng.random() < 0.5 else None
                record = TraceRecord(pc=pc, mnemonic=mnemonic,
                                     flags=TraceFlags(compressed=compressed),
                                     rs1=rs1, rs2=rs2, rd=self._dest())
            records.append(record)
            pc = self._wrap(pc + (2 if compressed else 4))

        return records


def generate_synthetic_trace(profile: WorkloadProfile, n: int) -> list[TraceRecord]:
    """
    Generate a deterministic synthetic trace.

    Instruction classes are drawn independently from the profile fractions.
    Branch behaviour is static per pc (kind, target, bias or loop trip count),
    data addresses mix a sequential stream with uniform accesses inside the
    working set, and source registers point back to a producer whose distance
    is geometric with mean dep_chain_len.

    Args:
        profile: Workload profile (seeded)
        n: Number of instructions

    Returns:
        List of TraceRecord
    """
    if n < 0:
        raise ValueError(f"Instruction count must be >= 0, got {n}")
    if not isinstance(profile, WorkloadProfile):
        raise ValueError("generate_synthetic_trace needs a WorkloadProfile")
    return _TraceGenerator(profile).generate(n)


def _profile(seed: int, **fractions) -> WorkloadProfile:
    return WorkloadProfile(seed=seed, **fractions)


PRESET_PROFILES: dict[str, WorkloadProfile] = {
    "compute": _profile(11, alu_frac=0.55, mul_frac=0.12, div_frac=0.03, load_frac=0.12,
                        store_frac=0.06, branch_frac=0.12, taken_prob=0.6, dep_chain_len=6.0,
                        working_set_bytes=16 * 1024, fp_share=0.3),
    "memory": _profile(12, alu_frac=0.30, mul_frac=0.02, div_frac=0.01, load_frac=0.42,
                       store_frac=0.13, branch_frac=0.12, taken_prob=0.5, dep_chain_len=3.0,
                       working_set_bytes=8 * 1024 * 1024),
    "branchy": _profile(13, alu_frac=0.45, mul_frac=0.02, div_frac=0.01, load_frac=0.17,
                        store_frac=0.07, branch_frac=0.28, taken_prob=0.5, dep_chain_len=4.0,
                        working_set_bytes=64 * 1024, loop_frac=0.1, code_bytes=64 * 1024),
    "streaming": _profile(14, alu_frac=0.40, mul_frac=0.05, div_frac=0.0, load_frac=0.30,
                          store_frac=0.15, branch_frac=0.10, taken_prob=0.8, dep_chain_len=8.0,
                          working_set_bytes=2 * 1024 * 1024, loop_frac=0.6),
    "pointer-chase": _profile(15, alu_frac=0.35, mul_frac=0.01, div_frac=0.01, load_frac=0.35,
                              store_frac=0.08, branch_frac=0.20, taken_prob=0.55, dep_chain_len=1.5,
                              working_set_bytes=32 * 1024 * 1024),
    "balanced": _profile(16, alu_frac=0.45, mul_frac=0.04, div_frac=0.02, load_frac=0.22,
                         store_frac=0.10, branch_frac=0.17, taken_prob=0.6, dep_chain_len=4.0,
                         working_set_bytes=256 * 1024),
}
