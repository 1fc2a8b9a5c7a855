"""Parameter, width and multiply-add accounting.

Block counts are per spatial position (kernel weights only).  Network
counts follow one convention throughout:

* parameters: every convolution kernel, every batch-norm (gamma, beta) pair,
  FC weights and bias; no conv biases exist;
* FLOPs: multiply-adds of convolutions (kernel MACs per output position x
  output H x W) plus FC multiply-adds; BN, ReLU, pooling and branch sums
  are not counted.
"""
from dataclasses import dataclass, field
import math
from typing import NamedTuple

from .arch import ArchSpec
from .errors import ConfigError

CONVENTION = (
    "params = conv kernels + BN (gamma, beta) + FC weight and bias; "
    "FLOPs = conv multiply-adds at output resolution + FC multiply-adds"
)


def igc_param_count(L, M, S):
    return L * M * M * S + M * L * L


def gpc_param_count(L, M, S):
    return L * M * M * S + (L * M) ** 2


def regular_param_count(C, S):
    return C * C * S


def regular_width_for_budget(T, S):
    """Largest C with C*C*S <= T."""
    c = math.isqrt(T // S)
    while (c + 1) ** 2 * S <= T:
        c += 1
    while c > 0 and c * c * S > T:
        c -= 1
    return c


def is_wider(L, M, S):
    """True when an IGC block is wider than a regular conv of equal budget."""
    if L <= 1:
        return False
    return L / (L - 1) < M * S


def width_upper_bound(T, S):
    return (T / (2.0 * math.sqrt(S))) ** (2.0 / 3.0)


_COUNTERS = {"igc": igc_param_count, "gpc": gpc_param_count}


def param_count(block_type, L, M, S):
    try:
        return _COUNTERS[block_type.lower()](L, M, S)
    except KeyError:
        raise ConfigError(f"block type must be 'igc' or 'gpc', got {block_type!r}") from None


class BudgetEntry(NamedTuple):
    L: int
    M: int
    params: int
    width: int


@dataclass
class BudgetReport:
    entries: list
    target_params: int
    S: int
    block_type: str = "igc"
    tol_fraction: float = 0.03

    def lookup(self, L):
        for e in self.entries:
            if e.L == L:
                return e
        return None


def enumerate_configs(target, S, tol_fraction=0.03, block_type="igc"):
    """For each L, the widest M whose count is within ``tol_fraction`` of target."""
    if target <= 0:
        raise ConfigError(f"target must be positive, got {target}")
    count = _COUNTERS.get(block_type.lower())
    if count is None:
        raise ConfigError(f"block type must be 'igc' or 'gpc', got {block_type!r}")
    slack = tol_fraction * target
    entries = []
    L = 1
    while count(L, 1, S) - target <= slack:
        M = 1
        while count(L, M + 1, S) - target <= slack:
            M += 1
        params = count(L, M, S)
        if abs(params - target) <= slack:
            entries.append(BudgetEntry(L, M, params, L * M))
        L += 1
    return BudgetReport(entries, target, S, block_type.lower(), tol_fraction)


def widest_config(target, S, tol_fraction=0.03, block_type="igc"):
    """(L, M) of greatest width.

    Equal widths go to the cheaper configuration, then to the smaller L: at
    target 4672, S=9 both (21, 4) and (28, 3) reach width 84 but (28, 3)
    spends 4620 parameters against 4788.
    """
    report = enumerate_configs(target, S, tol_fraction, block_type)
    if not report.entries:
        return None
    best = max(report.entries, key=lambda e: (e.width, -e.params, -e.L))
    return best.L, best.M


# -- whole networks ----------------------------------------------------------

@dataclass
class NetworkBudget:
    total_params: int
    flops: int
    per_stage: list = field(default_factory=list)
    convention: str = CONVENTION


def _block_cost(arch, stage, c_in, hw_out):
    """(params, MACs) of one block's kernels, excluding its BN."""
    S = arch.k * arch.k
    pos = hw_out * hw_out
    bt = arch.block_type
    if bt == "RegConv":
        w = stage.width
        return w * c_in * S, w * c_in * S * pos
    if bt == "SumFusion":
        k_params = stage.L * stage.width * c_in * S
        return k_params, k_params * pos
    L, M = stage.L, stage.M
    if c_in % L:
        raise ConfigError(f"{c_in} input channels do not split into {L} partitions")
    m_in = c_in // L
    primary = L * M * m_in * S
    mixer = M * L * L if bt == "IGC" else (L * M) ** 2
    return primary + mixer, (primary + mixer) * pos


def network_budget(arch: ArchSpec, input_hw=32, n_classes=None):
    """Closed-form parameter and FLOP totals for ``arch``."""
    if not isinstance(arch, ArchSpec):
        raise ConfigError(f"expected an ArchSpec, got {type(arch).__name__}")
    n_classes = arch.n_classes if n_classes is None else n_classes
    S = arch.k * arch.k
    widths = arch.widths
    breakdown = []
    hw = input_hw
    stem_params = arch.in_channels * widths[0] * S
    breakdown.append({"stage": "stem", "params": stem_params + 2 * widths[0],
                      "flops": stem_params * hw * hw})
    c_in = widths[0]
    for i, stage in enumerate(arch.stages):
        w = widths[i]
        if i and stage.blocks:
            if hw % 2:
                raise ConfigError(f"stage {i}: map size {hw} cannot be halved")
            hw //= 2
        params = flops = 0
        for b in range(stage.blocks):
            p, f = _block_cost(arch, stage, c_in if b == 0 else w, hw)
            params += p + 2 * w
            flops += f
        if arch.identity_mappings and i and stage.blocks:
            params += w * c_in + 2 * w
            flops += w * c_in * hw * hw
        breakdown.append({"stage": f"stage{i + 1}", "params": params, "flops": flops})
        if stage.blocks:
            c_in = w
    head = c_in * n_classes
    breakdown.append({"stage": "head", "params": head + n_classes, "flops": head})
    return NetworkBudget(
        total_params=sum(r["params"] for r in breakdown),
        flops=sum(r["flops"] for r in breakdown),
        per_stage=breakdown,
    )
