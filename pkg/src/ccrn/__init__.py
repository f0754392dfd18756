"""Progressive speech dereverberation toolkit.

Constant-channel residual networks (plain and state-path variants) with a
probe output after every block, progressive supervision training, a
synthetic reverberation corpus, and LLR/SRMR quality metrics.
"""

from .diffcore import Node, backprop, grad_check
from .frontend import (
    FeatureSequence,
    LogSpectrogram,
    PhaseSpectrogram,
    Waveform,
    assemble_features,
    reconstruct,
    target_spectrum,
)
from .netmodel import (
    ModelConfig,
    ModelParams,
    ProbeTrace,
    build_model,
    forward,
    load_checkpoint,
    save_checkpoint,
    select_depth,
    truncate,
)
from .objectives import CostReport, OptimizerState, TrainConfig, adamw_step, mse_cost, progressive_cost, train
from .corpus import CorruptionSpec, RirSpec, corrupt, read_wav, synth_rir, synth_speech, write_wav
from .quality import QualityReport, llr, lpc, srmr, vad_mask

__all__ = [
    "Node",
    "backprop",
    "grad_check",
    "Waveform",
    "LogSpectrogram",
    "FeatureSequence",
    "PhaseSpectrogram",
    "assemble_features",
    "target_spectrum",
    "reconstruct",
    "ModelConfig",
    "ModelParams",
    "ProbeTrace",
    "build_model",
    "forward",
    "truncate",
    "select_depth",
    "save_checkpoint",
    "load_checkpoint",
    "TrainConfig",
    "OptimizerState",
    "CostReport",
    "mse_cost",
    "progressive_cost",
    "adamw_step",
    "train",
    "RirSpec",
    "CorruptionSpec",
    "synth_rir",
    "synth_speech",
    "corrupt",
    "read_wav",
    "write_wav",
    "QualityReport",
    "vad_mask",
    "lpc",
    "llr",
    "srmr",
]
