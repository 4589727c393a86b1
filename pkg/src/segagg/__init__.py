"""Dynamic Segment Aggregation (DSA) for snippet-based video networks, in numpy."""

from .backbone import (
    BlockSpec,
    DsaPlacement,
    OrderDataset,
    ToyNet,
    TrainingDiverged,
    consensus,
    make_order_dataset,
    make_toy_net,
    split_dataset,
    temporal_shift,
    train_toy,
)
from .cost import ArchSpec, ArchSpecError, CostReport, arch_cost, dsa_overhead, load_arch
from .dsa import DsaConfig, DsaParams, dsa_forward, generate_kernel, pool_context, segment_conv
from .io import TensorFormatError, load_bundle, load_tensor, save_bundle, save_tensor
from .oracle import conv4d, embed_dsa_kernel
from .tensor import BatchNormState, GradTape, Tensor, backward

__all__ = [
    "ArchSpec",
    "ArchSpecError",
    "BatchNormState",
    "BlockSpec",
    "CostReport",
    "DsaConfig",
    "DsaParams",
    "DsaPlacement",
    "GradTape",
    "OrderDataset",
    "Tensor",
    "TensorFormatError",
    "ToyNet",
    "TrainingDiverged",
    "arch_cost",
    "backward",
    "consensus",
    "conv4d",
    "dsa_forward",
    "dsa_overhead",
    "embed_dsa_kernel",
    "generate_kernel",
    "load_arch",
    "load_bundle",
    "load_tensor",
    "make_order_dataset",
    "make_toy_net",
    "pool_context",
    "save_bundle",
    "save_tensor",
    "segment_conv",
    "split_dataset",
    "temporal_shift",
    "train_toy",
]
