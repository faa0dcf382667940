"""Contrastive audio-visual alignment, parsing metrics and collocation selection on synthetic data."""
from .core import Dataset, EventInterval, ModalSequence, VideoSample, load_dataset, save_dataset, split_dataset
from .datagen import ExtractorFamily, GenConfig, apply_extractor_family, family_divergence, generate_dataset, make_family
from .losses import LossConfig, TimeLagKernel, mtsc, nt_xent, time_lag_kernel, weighted_nt_xent
from .metrics import alignment_metrics, event_f_scores, parsing_report, segment_f_scores
from .model import ModelDims, forward, init_model
from .selector import compare_collocations, run_protocol, spearman
from .trainer import TrainConfig, evaluate, lr_schedule, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EventInterval",
    "ModalSequence",
    "VideoSample",
    "load_dataset",
    "save_dataset",
    "split_dataset",
    "ExtractorFamily",
    "GenConfig",
    "apply_extractor_family",
    "family_divergence",
    "generate_dataset",
    "make_family",
    "LossConfig",
    "TimeLagKernel",
    "mtsc",
    "nt_xent",
    "time_lag_kernel",
    "weighted_nt_xent",
    "alignment_metrics",
    "event_f_scores",
    "parsing_report",
    "segment_f_scores",
    "ModelDims",
    "forward",
    "init_model",
    "compare_collocations",
    "run_protocol",
    "spearman",
    "TrainConfig",
    "evaluate",
    "lr_schedule",
    "train",
]
