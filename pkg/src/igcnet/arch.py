"""Declarative network descriptions shared by the builder and the budget code."""
from dataclasses import asdict, dataclass, field, replace
import hashlib
import json
from importlib import resources

from .errors import ConfigError

BLOCK_TYPES = ("IGC", "RegConv", "SumFusion", "GPC")
WIDEN_RULES = ("double_M", "double_L")
PRESETS = ("regconv_w16", "regconv_w18", "sumfusion", "igc_l4m8", "igc_l24m2", "igc_l32m26")


@dataclass(frozen=True)
class StageSpec:
    """One stage.

    IGC/GPC stages use ``L`` and ``M``; RegConv uses ``width``; SumFusion uses
    ``L`` (branch count) and ``width`` (channels per branch output).
    """

    blocks: int
    L: int = None
    M: int = None
    width: int = None
    map_size: int = None

    def channels(self, block_type):
        if block_type in ("IGC", "GPC"):
            return self.L * self.M
        return self.width


@dataclass(frozen=True)
class ArchSpec:
    block_type: str
    stages: tuple
    widen_rule: str = "double_M"
    identity_mappings: bool = False
    n_classes: int = 10
    k: int = 3
    in_channels: int = 3
    name: str = ""

    def __post_init__(self):
        stages = tuple(s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        self.validate()

    @property
    def widths(self):
        return [s.channels(self.block_type) for s in self.stages]

    @property
    def depth(self):
        return sum(s.blocks for s in self.stages) + 2

    def validate(self):
        if self.block_type not in BLOCK_TYPES:
            raise ConfigError(f"block_type must be one of {BLOCK_TYPES}, got {self.block_type!r}")
        if self.widen_rule not in WIDEN_RULES:
            raise ConfigError(f"widen_rule must be one of {WIDEN_RULES}, got {self.widen_rule!r}")
        if not self.stages:
            raise ConfigError("an architecture needs at least one stage")
        if self.k < 1 or self.k % 2 == 0:
            raise ConfigError(f"kernel side k must be odd and positive, got {self.k}")
        if self.n_classes < 1 or self.in_channels < 1:
            raise ConfigError("n_classes and in_channels must be positive")
        for i, s in enumerate(self.stages):
            if s.blocks < 0:
                raise ConfigError(f"stage {i}: negative block count {s.blocks}")
            if self.block_type in ("IGC", "GPC"):
                if not s.L or not s.M or s.L < 1 or s.M < 1:
                    raise ConfigError(f"stage {i}: {self.block_type} stages need positive L and M")
            elif not s.width or s.width < 1:
                raise ConfigError(f"stage {i}: {self.block_type} stages need a positive width")
            if self.block_type == "SumFusion" and (not s.L or s.L < 1):
                raise ConfigError(f"stage {i}: SumFusion stages need a positive branch count L")
            if self.identity_mappings and s.blocks % 2:
                raise ConfigError(f"stage {i}: identity mappings pair blocks, so B must be even (got {s.blocks})")
        widths = self.widths
        for i in range(1, len(self.stages)):
            prev, cur = self.stages[i - 1], self.stages[i]
            if widths[i] != 2 * widths[i - 1]:
                raise ConfigError(
                    f"stage {i}: width {widths[i]} is not double the previous width {widths[i - 1]}"
                )
            if self.block_type in ("IGC", "GPC"):
                if self.widen_rule == "double_M" and cur.L != prev.L:
                    raise ConfigError(f"stage {i}: double_M keeps L fixed, got L {prev.L} -> {cur.L}")
                if self.widen_rule == "double_L":
                    if cur.M != prev.M:
                        raise ConfigError(f"stage {i}: double_L keeps M fixed, got M {prev.M} -> {cur.M}")
                    if widths[i - 1] % cur.L:
                        raise ConfigError(
                            f"stage {i}: {widths[i - 1]} input channels do not split into {cur.L} partitions"
                        )
            if prev.map_size and cur.map_size and prev.map_size != 2 * cur.map_size:
                raise ConfigError(f"stage {i}: map size must halve, got {prev.map_size} -> {cur.map_size}")

    def with_blocks(self, blocks):
        """Same family with ``blocks`` per stage (depth 3B+2 for three stages)."""
        return replace(self, stages=tuple(replace(s, blocks=blocks) for s in self.stages))

    def with_depth(self, depth):
        n = len(self.stages)
        if (depth - 2) % n:
            raise ConfigError(f"depth {depth} is not {n}*B + 2 for any integer B")
        return self.with_blocks((depth - 2) // n)

    def to_dict(self):
        d = asdict(self)
        d["stages"] = [{k: v for k, v in s.items() if v is not None} for s in d["stages"]]
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self):
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown ArchSpec fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def load_preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("igcnet.presets").joinpath(f"{name}.json").read_text()
    return ArchSpec.from_dict(json.loads(text))


def resolve_arch(ref):
    """A preset name or a path to an ArchSpec JSON file."""
    if ref in PRESETS:
        return load_preset(ref)
    return ArchSpec.load(ref)


def three_stage(block_type, blocks, *, L=None, M=None, width=None, widen_rule="double_M",
                identity_mappings=False, n_classes=10, input_hw=32, name=""):
    """The Table-style three-stage family: widths double, maps halve."""
    stages = []
    for i in range(3):
        f = 2 ** i
        if block_type in ("IGC", "GPC"):
            s = StageSpec(blocks, L=L * (f if widen_rule == "double_L" else 1),
                          M=M * (f if widen_rule == "double_M" else 1))
        else:
            s = StageSpec(blocks, L=L, width=width * f)
        stages.append(replace(s, map_size=input_hw // f))
    return ArchSpec(block_type, tuple(stages), widen_rule, identity_mappings, n_classes, name=name)
