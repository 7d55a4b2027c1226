"""Desk-scale decoder-only LM training lifecycle: data curation, stable
pre-training with dynamic loss scaling and restart machinery, evaluation."""

__version__ = "0.1.0"

from .bpe import BPEVocab, bpe_decode, bpe_encode, bpe_train
from .checkpoint import Checkpoint, HealthRecord, TrainerState, load_checkpoint, save_checkpoint
from .config import RunConfig, build_config, parse_config
from .corpus import DedupConfig, Document, dedup_corpus, extract_longest_chain, normalize_whitespace
from .health import HealthPolicy, detect_divergence, select_restart_checkpoint
from .model import (
    PRESETS,
    ModelConfig,
    Parameters,
    decode_greedy,
    forward,
    get_preset,
    init_parameters,
    sample_nucleus,
)
from .optim import AdamWConfig, ClipConfig, PredivideConfig, ScheduleConfig, adamw_step, clip_grad_norm, lr_at, predivide_reduce
from .precision import LossScaler, PrecisionConfig, emulate_half, is_healthy, scale_loss, scaler_update, unscale_grads
from .tensor import Tape, Tensor, backward
from .trainer import FaultEntry, FaultSchedule, TrainResult, train

__all__ = [
    "__version__",
    "BPEVocab", "bpe_decode", "bpe_encode", "bpe_train",
    "Checkpoint", "HealthRecord", "TrainerState", "load_checkpoint", "save_checkpoint",
    "RunConfig", "build_config", "parse_config",
    "DedupConfig", "Document", "dedup_corpus", "extract_longest_chain", "normalize_whitespace",
    "HealthPolicy", "detect_divergence", "select_restart_checkpoint",
    "PRESETS", "ModelConfig", "Parameters", "decode_greedy", "forward", "get_preset",
    "init_parameters", "sample_nucleus",
    "AdamWConfig", "ClipConfig", "PredivideConfig", "ScheduleConfig", "adamw_step",
    "clip_grad_norm", "lr_at", "predivide_reduce",
    "LossScaler", "PrecisionConfig", "emulate_half", "is_healthy", "scale_loss",
    "scaler_update", "unscale_grads",
    "Tape", "Tensor", "backward",
    "FaultEntry", "FaultSchedule", "TrainResult", "train",
]
