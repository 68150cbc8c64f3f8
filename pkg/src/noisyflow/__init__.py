"""Noise-robust malicious encrypted-traffic detection.

Stages: flow assembly and tokenization, a sequence autoencoder for features,
density-guided label correction, region-targeted GAN augmentation and a
co-teaching detector, plus a synthetic evaluation harness.
"""

from .augment import Region, RegionThresholds, region_of, resolve_thresholds, synthesize, train_gan
from .autoencoder import AeSpec, encode, encode_batch, train_ae
from .bench import CorpusConfig, NoiseSpec, compute_metrics, inject_noise, run_experiment, synth_corpus
from .config import PipelineConfig, parse_config
from .density import fit_density, log_density, mask_check
from .detector import ForgetSchedule, predict, train_detector
from .flows import Flow, PacketRecord, assemble_flows, tokenize
from .relabel import CorrectionConfig, LabeledSample, correct_labels, correction_report

__version__ = "0.1.0"

__all__ = [
    "AeSpec", "CorpusConfig", "CorrectionConfig", "Flow", "ForgetSchedule", "LabeledSample", "NoiseSpec",
    "PacketRecord", "PipelineConfig", "Region", "RegionThresholds", "assemble_flows", "compute_metrics",
    "correct_labels", "correction_report", "encode", "encode_batch", "fit_density", "inject_noise",
    "log_density", "mask_check", "parse_config", "predict", "region_of", "resolve_thresholds",
    "run_experiment", "synth_corpus", "synthesize", "tokenize", "train_ae", "train_detector", "train_gan",
]
