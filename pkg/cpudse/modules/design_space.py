"""Design-space catalog, rank encoding, normalization, sampling and subsystem subsets."""

import itertools
import math
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

from cpudse.errors import ConfigurationError, DesignSpaceError, EncodingError
from cpudse.schemas import Configuration, DesignSpace, ParamSpec, ParamValue, Subsystem

# Built-in catalog: name | subsystem | values (in ordinal order)
CATALOG_TEXT = """\
[Imem]
immu/il2mmu tlb page size (kb)      | Imem   | 4,8,16,1024,1048576
immu/il2mmu tlb num entries         | Imem   | 8,16,32,64
immu/il2mmu tlb associativity       | Imem   | 1,2,4,8
icache line size                    | Imem   | 32,64
icache size (kb)                    | Imem   | 32,64,128,256,512,1024
icache associativity                | Imem   | 2,4,8,16
fetch-icache queue size (bytes)     | Imem   | 64,128,256,512,1024

[Dmem]
l2 cache line size                  | Dmem   | 32,64,128,256,512
l2 cache size (kb)                  | Dmem   | 512,1024,2048,4096,8192
l2 cache associativity              | Dmem   | 1,2,4,8,16,32
l2 cache replacement policy         | Dmem   | PLRU,LRU,RANDOM
l2-icache request queue size        | Dmem   | 8,16,32,64
l2-icache response queue size       | Dmem   | 8,16,32,64
l3 cache line size                 | Dmem   | 32,64,128,256,512
l3 cache size (kb)                  | Dmem   | 16384,32768,65536,131072
l3 cache associativity              | Dmem   | 1,2,4,8,16,32,64
l3 cache replacement policy         | Dmem   | PLRU,LRU,RANDOM
dcache line size                    | Dmem   | 16,32,64,128,256
dcache size (kb)                    | Dmem   | 32,64,128,256,512,1024
dcache associativity                | Dmem   | 2,4,8,16
dcache replacement policy           | Dmem   | PLRU,LRU,RANDOM
dmmu/dl2mmu tlb page size (kb)      | Dmem   | 4,8,16,1024,1048576
dmmu/dl2mmu tlb num entries         | Dmem   | 8,16,32,64
dmmu/dl2mmu tlb associativity       | Dmem   | 1,2,4,8
lsu data bank queue size            | Dmem   | 4,8,16,32,64
lsu load buffer queue size          | Dmem   | 32,64,128
lsu store buffer queue size         | Dmem   | 32,64,128
lsu tlb miss queue size             | Dmem   | 2,4,8,16,32,64,128,256
lsu memory request queue size       | Dmem   | 4,8,16,32,64,128
lsu data miss queue size            | Dmem   | 4,8,16,32,64,128
lsu data eviction queue size        | Dmem   | 2,4,8,16
l2-lsu read request queue size      | Dmem   | 8,16,32,64
l2-lsu write request queue size     | Dmem   | 8,16,32,64
l2-lsu read response queue size     | Dmem   | 8,16,32,64
l2-l1 pipe read request queue size  | Dmem   | 8,16,32,64
l2 no. of banks                     | Dmem   | 8,16,32,64
l2 no. of rows per bank             | Dmem   | 1,2,4

[Core]
issue width                                 | Core | 4,8,12,16
dispatch width                              | Core | 4,8,12,16
physical register file write ports          | Core | 8,12,16
physical register file read ports           | Core | 16,32,64,128
no. to fetch                                | Core | 8,16,32,64
no. to decode                               | Core | 8,16,32,64
decode: scalar instruction queue size       | Core | 8,16,32,64,128
no. to rename                               | Core | 8,16,32,64
no. of integer renames                      | Core | 128,160,192,224,256
no. of float renames                        | Core | 128,160,192,224,256
no. to dispatch                             | Core | 8,16,32,64
dispatch queue depth                        | Core | 4,8,10,16,32
bus interface unit request queue size       | Core | 4,8,16,32,64,128
reorder buffer no. to retire                | Core | 8,16,32,64,128
reorder buffer retire queue depth           | Core | 128,192,256,384,512

[Branch]
loop predictor (lpred) no. of entries       | Branch | 64,128,256,512,1024,2048
lpred associativity                         | Branch | 2,4
lpred max age                               | Branch | 15,31,63,127
lpred no. of loop iterations max            | Branch | 32,64,128,256,512,1024
tage instruction shift amount               | Branch | 0,1,2,3,4,5,6,7
tage history buffer size                    | Branch | 128,256,512,768,1024,2048
tage initial reset timer value              | Branch | 0x10000,0x100000,0x1000000
tage path history bits                      | Branch | 32,48,64
tage table tag widths x16                   | Branch | 9,10,11,12,13,14,15,16,17
ittage path history bits                    | Branch | 32,48,64
ittage initial reset timer value            | Branch | 0x10000,0x100000,0x1000000
ittage table tag widths x16                 | Branch | 8,9,10,11,12,13,14,15
branch target buffer (btb) granularity      | Branch | 2,4
btb total entries                           | Branch | 4096,8192,16384,32768
btb associativity                           | Branch | 2,4,8
btb raas size                               | Branch | 32,64,128,256
"""

_SUBSYSTEMS = {s.value.lower(): s for s in Subsystem}

RawValues = Union[Sequence[ParamValue], Mapping[str, ParamValue]]


def _parse_value(token: str) -> ParamValue:
    token = token.strip()
    try:
        return int(token, 0)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        return token


def parse_subsystem(tag: Union[str, Subsystem]) -> Subsystem:
    """Subsystem from a case-insensitive tag."""
    if isinstance(tag, Subsystem):
        return tag
    subsystem = _SUBSYSTEMS.get(str(tag).strip().lower())
    if subsystem is None:
        raise DesignSpaceError(f"Unknown subsystem tag '{tag}' (expected one of Imem, Dmem, Core, Branch)")
    return subsystem


def parse_design_space(text: str) -> DesignSpace:
    """Parse design-space text: `name | subsystem | v1,v2,...`; `[section]` and `#` lines are ignored."""
    params = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        fields = [f.strip() for f in line.split("|")]
        if len(fields) != 3:
            raise DesignSpaceError(f"line {line_no}: expected 'name | subsystem | values'")
        name, tag, values = fields
        try:
            subsystem = parse_subsystem(tag)
        except DesignSpaceError as e:
            raise DesignSpaceError(f"line {line_no}: {e}")
        tokens = [t for t in values.split(",") if t.strip()]
        try:
            params.append(ParamSpec(name=name, subsystem=subsystem,
                                    values=tuple(_parse_value(t) for t in tokens)))
        except ValidationError as e:
            raise DesignSpaceError(f"line {line_no}: {e.errors()[0]['msg']}")

    try:
        return DesignSpace(params=tuple(params))
    except ValidationError as e:
        raise DesignSpaceError(e.errors()[0]["msg"])


@lru_cache(maxsize=1)
def default_space() -> DesignSpace:
    """The built-in 68-parameter catalog."""
    return parse_design_space(CATALOG_TEXT)


def load_design_space(path: Optional[Path] = None) -> DesignSpace:
    """Load a design-space file, or the built-in catalog when no path is given."""
    if path is None:
        return default_space()
    path = Path(path)
    if not path.exists():
        raise DesignSpaceError(f"Design-space file not found: {path}")
    return parse_design_space(path.read_text(encoding="utf-8"))


def _format_value(value: ParamValue) -> str:
    return str(value)


def dump_design_space(space: DesignSpace) -> str:
    """Text form accepted by parse_design_space, grouped in runs of one subsystem."""
    lines = []
    current = None
    width = max((len(p.name) for p in space.params), default=0)
    for p in space.params:
        if p.subsystem != current:
            if lines:
                lines.append("")
            lines.append(f"[{p.subsystem.value}]")
            current = p.subsystem
        values = ",".join(_format_value(v) for v in p.values)
        lines.append(f"{p.name:<{width}} | {p.subsystem.value} | {values}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Configurations
# ---------------------------------------------------------------------------

def validate_config(config: Configuration, space: DesignSpace) -> None:
    if len(config.ranks) != len(space):
        raise ConfigurationError(
            f"Configuration has {len(config.ranks)} ranks but the design space has {len(space)} parameters"
        )
    for rank, p in zip(config.ranks, space.params):
        if not 0 <= rank < p.cardinality:
            raise EncodingError(f"Rank {rank} out of range for '{p.name}' ({p.cardinality} values)", p.name)


def _match(param: ParamSpec, value: ParamValue) -> int:
    if isinstance(value, str) and param.is_numeric:
        value = _parse_value(value)
    for i, candidate in enumerate(param.values):
        if isinstance(candidate, str) != isinstance(value, str):
            continue
        if candidate == value:
            return i
    raise EncodingError(f"Value {value!r} is not in the value list of '{param.name}'", param.name)


def rank_encode(values: RawValues, space: DesignSpace) -> Configuration:
    """Ranks of raw values; accepts a sequence in catalog order or a name -> value mapping."""
    if isinstance(values, Mapping):
        missing = [p.name for p in space.params if p.name not in values]
        if missing:
            raise EncodingError(f"Missing value for '{missing[0]}'", missing[0])
        values = [values[p.name] for p in space.params]
    if len(values) != len(space):
        raise ConfigurationError(f"Got {len(values)} values for {len(space)} parameters")
    return Configuration(ranks=tuple(_match(p, v) for p, v in zip(space.params, values)))


def rank_decode(config: Configuration, space: DesignSpace) -> list[ParamValue]:
    validate_config(config, space)
    return [p.values[r] for p, r in zip(space.params, config.ranks)]


def decode_named(config: Configuration, space: DesignSpace) -> dict[str, ParamValue]:
    return dict(zip(space.names, rank_decode(config, space)))


def normalize(config: Configuration, space: DesignSpace) -> np.ndarray:
    """rank / (count - 1) per parameter; single-valued parameters map to 0."""
    validate_config(config, space)
    out = np.zeros(len(space), dtype=np.float64)
    for i, (rank, p) in enumerate(zip(config.ranks, space.params)):
        if p.cardinality > 1:
            out[i] = rank / (p.cardinality - 1)
    return out


def sample_config(space: DesignSpace, rng: np.random.Generator) -> Configuration:
    """Uniform independent rank per parameter."""
    ranks = rng.integers(0, np.array(space.cardinalities, dtype=np.int64))
    return Configuration(ranks=tuple(int(r) for r in ranks))


def baseline_config(space: DesignSpace) -> Configuration:
    """Middle rank of every parameter (lower middle for even counts)."""
    return Configuration(ranks=tuple((c - 1) // 2 for c in space.cardinalities))


def space_size(space: DesignSpace) -> int:
    return math.prod(space.cardinalities)


def enumerate_configs(space: DesignSpace) -> Iterator[Configuration]:
    """All configurations in lexicographic rank order."""
    for ranks in itertools.product(*(range(c) for c in space.cardinalities)):
        yield Configuration(ranks=ranks)


# ---------------------------------------------------------------------------
# Subsets
# ---------------------------------------------------------------------------

def subsystem_subset(space: DesignSpace, tag: Union[str, Subsystem]) -> DesignSpace:
    subsystem = parse_subsystem(tag)
    return DesignSpace(params=tuple(p for p in space.params if p.subsystem == subsystem))


def select_params(space: DesignSpace, names: Sequence[str]) -> DesignSpace:
    """Sub-space with the named parameters, in catalog order."""
    unknown = [n for n in names if n not in space.names]
    if unknown:
        raise DesignSpaceError(f"Unknown parameter '{unknown[0]}'")
    wanted = set(names)
    return DesignSpace(params=tuple(p for p in space.params if p.name in wanted))


def restrict_config(config: Configuration, space: DesignSpace, subset: DesignSpace) -> Configuration:
    """Project a configuration of `space` onto `subset`."""
    validate_config(config, space)
    by_name = dict(zip(space.names, config.ranks))
    try:
        return Configuration(ranks=tuple(by_name[n] for n in subset.names))
    except KeyError as e:
        raise ConfigurationError(f"Parameter {e} is not part of the source space")


def merge_configs(parts: Sequence[tuple[DesignSpace, Configuration]], space: DesignSpace) -> Configuration:
    """Assemble sub-configurations into one configuration in catalog order."""
    ranks: dict[str, int] = {}
    for subset, config in parts:
        validate_config(config, subset)
        for name, rank in zip(subset.names, config.ranks):
            if name in ranks:
                raise ConfigurationError(f"Parameter '{name}' is predicted by more than one subset")
            ranks[name] = rank
    missing = [n for n in space.names if n not in ranks]
    if missing:
        raise ConfigurationError(f"No subset covers parameter '{missing[0]}'")
    extra = set(ranks) - set(space.names)
    if extra:
        raise ConfigurationError(f"Parameter '{sorted(extra)[0]}' is not part of the design space")
    return Configuration(ranks=tuple(ranks[n] for n in space.names))
