"""Interleaved group convolutions: blocks, kernel algebra, budgets and training."""
from .algebra import (
    assemble_factors,
    channelwise_extreme_as_igc,
    compose_kernel,
    composite_conv_kernel,
    regular_conv_as_igc,
    summation_fusion_as_igc,
    verify_equivalence,
)
from .arch import ArchSpec, StageSpec, load_preset, resolve_arch
from .block import IgcConfig, init_igc_params, igc_block_backward, igc_block_forward, permutation_indices
from .budget import enumerate_configs, gpc_param_count, igc_param_count, network_budget, widest_config
from .data import load_checkpoint, load_cifar_binary, save_checkpoint, synth_dataset
from .errors import CheckpointError, ConfigError, FormatError, GeometryError, IgcError, InputError, ShapeError
from .network import TrainConfig, build_network, evaluate, predict, train
from .rng import CounterRNG

__version__ = "0.1.0"
