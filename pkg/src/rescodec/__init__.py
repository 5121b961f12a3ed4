"""rescodec: lossless image codec with a learned residual entropy model."""

from .container import BpspReport, Container, bpsp_report
from .entropy_coder import BitStream, FreqTable, ac_decode, ac_encode, quantize_pmf
from .errors import CodecError
from .gmm import GmmParams, canonical_round, discretized_pmf, nll_loss
from .model import EntropyModel, ModelCheckpoint, ModelConfig, load_checkpoint, save_checkpoint
from .pipeline import (
    IdentityBackend,
    QdownBackend,
    ExternalBackend,
    bpsp,
    compute_residual,
    decode,
    encode,
    resolve_backend,
)
from .trainer import EvalReport, PatchDataset, TrainConfig, TrainReport, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BitStream", "BpspReport", "CodecError", "Container", "EntropyModel",
    "EvalReport", "ExternalBackend", "FreqTable", "GmmParams", "IdentityBackend",
    "ModelCheckpoint", "ModelConfig", "PatchDataset", "QdownBackend",
    "TrainConfig", "TrainReport", "ac_decode", "ac_encode", "bpsp",
    "bpsp_report", "canonical_round", "compute_residual", "decode",
    "discretized_pmf", "encode", "evaluate", "load_checkpoint", "nll_loss",
    "quantize_pmf", "resolve_backend", "save_checkpoint", "train",
]
