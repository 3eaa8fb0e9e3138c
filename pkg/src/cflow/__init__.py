"""Conditional normalizing flow with two coupled branches, built on a small numpy autodiff engine."""

from .coupling import ADDITIVE, AFFINE, Coupling
from .couplingnet import CouplingNet
from .data import PairedDataset, ingest_pairs, read_pnm, write_pnm
from .layers import ActNorm, GaussianPrior, InvConv1x1, NotInitializedError, SingularWeightError, squeeze, unsqueeze
from .metrics import bpd, ssim
from .model import (
    CheckpointError,
    ConditionalFlowModel,
    DivergenceError,
    LatentStack,
    ModelConfig,
    cycle_reconstruct,
    decode,
    densify,
    encode,
    evaluate,
    interpolate,
    load_checkpoint,
    log_likelihood,
    manipulate,
    partial_embedding,
    sample_conditional,
    save_checkpoint,
    style_transfer,
    total_loss,
    train,
)
from .pointcloud import HilbertConfig, PointCloud, chamfer, hilbert_index, hilbert_sort, resample_reshape
from .tensor import ShapeError, Tensor, load_tsr, no_grad, save_tsr

__version__ = "0.1.0"

__all__ = [
    "ADDITIVE",
    "AFFINE",
    "Coupling",
    "CouplingNet",
    "PairedDataset",
    "ingest_pairs",
    "read_pnm",
    "write_pnm",
    "ActNorm",
    "GaussianPrior",
    "InvConv1x1",
    "NotInitializedError",
    "SingularWeightError",
    "squeeze",
    "unsqueeze",
    "bpd",
    "ssim",
    "CheckpointError",
    "ConditionalFlowModel",
    "DivergenceError",
    "LatentStack",
    "ModelConfig",
    "cycle_reconstruct",
    "decode",
    "densify",
    "encode",
    "evaluate",
    "interpolate",
    "load_checkpoint",
    "log_likelihood",
    "manipulate",
    "partial_embedding",
    "sample_conditional",
    "save_checkpoint",
    "style_transfer",
    "total_loss",
    "train",
    "HilbertConfig",
    "PointCloud",
    "chamfer",
    "hilbert_index",
    "hilbert_sort",
    "resample_reshape",
    "ShapeError",
    "Tensor",
    "load_tsr",
    "no_grad",
    "save_tsr",
]
