"""Continuous diffusion language modeling on learned embeddings, with
rounding, clamping, plug-and-play classifier guidance, infilling and MBR
decoding, evaluated against exact-likelihood synthetic corpora."""

from .checkpoint import load_checkpoint, save_checkpoint
from .control import (ControlTask, GuidanceConfig, LatentClassifier,
                      anchor_infill, guided_generate, length_control,
                      train_latent_classifier)
from .corpus import (CorpusSpec, OracleCorpus, control_success, easy_spec,
                     generate_corpus, hard_spec, lm_score, micro_spec)
from .denoiser import BERT_BASE, Denoiser, ModelConfig
from .diffusion import forward_marginal_sample, mu_from_x0, posterior_coeffs
from .embedding import EmbeddingTable
from .estimator import DiffusionLMEstimator
from .objectives import AdamW, TrainConfig, loss_e2e_simple, nll_bound, train
from .sampler import SampleConfig, bleu, generate, mbr_select
from .schedules import Schedule, build_schedule, downsample

__version__ = "0.1.0"

__all__ = [
    "AdamW", "BERT_BASE", "ControlTask", "CorpusSpec", "Denoiser",
    "DiffusionLMEstimator", "EmbeddingTable", "GuidanceConfig",
    "LatentClassifier", "ModelConfig", "OracleCorpus", "SampleConfig",
    "Schedule", "TrainConfig", "anchor_infill", "bleu", "build_schedule",
    "control_success", "downsample", "easy_spec", "forward_marginal_sample",
    "generate", "generate_corpus", "guided_generate", "hard_spec",
    "length_control", "lm_score", "load_checkpoint", "loss_e2e_simple",
    "mbr_select", "micro_spec", "mu_from_x0", "nll_bound",
    "posterior_coeffs", "save_checkpoint", "train", "train_latent_classifier",
]
