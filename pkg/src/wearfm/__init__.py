"""wearfm: a tiny sensor-sequence foundation model with a swappable adapter library.

Pre-train a compact encoder-only transformer on healthy-wearer sensor
sequences by masked data modeling, then fine-tune it per disease-detection
task with LoRA, DoRA, or CoLA adapters kept in a memory-accounted library.
"""

__version__ = "0.1.0"

from .datapipe import (
    SensorSequence,
    SplitDataset,
    align_and_window,
    chronological_split,
    ctrl_clean,
    minmax_apply,
    minmax_fit,
    pca_apply,
    pca_fit,
)
from .encoder import EncoderConfig, EncoderWeights, classify, encoder_forward, pool, reconstruct
from .library import AdapterLibrary, bundle_load, bundle_save, memory_report
from .peft import AdapterBundle, adapter_init, cola_advance_stage, effective_weight, trainable_params
from .synth import GmmModel, gmm_fit, gmm_sample, make_corpus, make_synthetic_task
from .trainer import TrainConfig, evaluate, finetune, mdm_mask, predict, pretrain

__all__ = [
    "AdapterBundle",
    "AdapterLibrary",
    "EncoderConfig",
    "EncoderWeights",
    "GmmModel",
    "SensorSequence",
    "SplitDataset",
    "TrainConfig",
    "adapter_init",
    "align_and_window",
    "bundle_load",
    "bundle_save",
    "chronological_split",
    "classify",
    "cola_advance_stage",
    "ctrl_clean",
    "effective_weight",
    "encoder_forward",
    "evaluate",
    "finetune",
    "gmm_fit",
    "gmm_sample",
    "make_corpus",
    "make_synthetic_task",
    "mdm_mask",
    "memory_report",
    "minmax_apply",
    "minmax_fit",
    "pca_apply",
    "pca_fit",
    "pool",
    "predict",
    "pretrain",
    "reconstruct",
    "trainable_params",
]
