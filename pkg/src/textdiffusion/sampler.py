"""Unconditional generation: ancestral reverse diffusion with the clamping
trick, downsampled decoding, add-1 smoothed BLEU, and minimum-Bayes-risk
selection over sample sets.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .denoiser import Denoiser
from .diffusion import mu_from_x0, posterior_coeffs
from .embedding import EmbeddingTable, PAD_ID, seq_length
from .exceptions import InvalidScheduleError
from .objectives import predicted_x0
from .schedules import Schedule


@dataclass
class SampleConfig:
    clamping: str = "always"         # "off" | "always" | "from_step"
    clamp_from_step: int | None = None
    resample_mode: str = "marginal_anchor"  # "marginal_anchor" | "posterior"
    parametrization: str = "x0"
    seed: int = 0

    def __post_init__(self):
        if self.clamping not in ("off", "always", "from_step"):
            raise ValueError(f"unknown clamping mode {self.clamping!r}")
        if self.resample_mode not in ("marginal_anchor", "posterior"):
            raise ValueError(f"unknown resample mode {self.resample_mode!r}")
        if self.clamping == "from_step" and self.clamp_from_step is None:
            raise ValueError("clamping='from_step' needs clamp_from_step")

    def clamp_active(self, t: int) -> bool:
        if self.clamping == "always":
            return True
        if self.clamping == "from_step":
            return t <= self.clamp_from_step
        return False


def predict_x0(denoiser: Denoiser, table: EmbeddingTable, sched: Schedule,
               xt: np.ndarray, t: int, cfg: SampleConfig) -> np.ndarray:
    """Network x0 estimate at step t, clamped to embedding rows if active."""
    out = denoiser.forward(xt, sched.model_step(t)).data
    x0hat = predicted_x0(sched, cfg.parametrization, out, xt, t)
    if cfg.clamp_active(t):
        x0hat = table.clamp(x0hat)
    return x0hat


def reverse_step(denoiser: Denoiser, table: EmbeddingTable, sched: Schedule,
                 xt: np.ndarray, t: int, cfg: SampleConfig,
                 rng: np.random.Generator,
                 noise_scale: float = 1.0) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1}; at t=1 returns the x0 estimate
    deterministically."""
    if not 1 <= t <= sched.T:
        raise InvalidScheduleError(f"step {t} outside [1, {sched.T}]")
    x0hat = predict_x0(denoiser, table, sched, xt, t, cfg)
    if t == 1:
        return x0hat
    if cfg.resample_mode == "marginal_anchor":
        ab_prev = sched.alpha_bar_t(t - 1)
        mean = np.sqrt(ab_prev) * x0hat
        std = np.sqrt(1.0 - ab_prev)
    else:
        mean = mu_from_x0(sched, x0hat, xt, t)
        std = np.sqrt(posterior_coeffs(sched, t).var)
    return mean + noise_scale * std * rng.standard_normal(xt.shape)


def generate(denoiser: Denoiser, table: EmbeddingTable, sched: Schedule,
             cfg: SampleConfig, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw k sequences by full reverse diffusion from N(0, I).

    Returns (tokens (k, n), final latents (k, n, d)); deterministic per seed."""
    n, d = denoiser.cfg.seq_len, denoiser.cfg.embed_dim
    if k == 0:
        return np.zeros((0, n), dtype=np.int64), np.zeros((0, n, d))
    rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal((k, n, d))
    for t in range(sched.T, 0, -1):
        x = reverse_step(denoiser, table, sched, x, t, cfg, rng)
    return table.decode_argmax(x), x


# ---------------------------------------------------------------------------
# BLEU and MBR


def _strip_pad(seq) -> tuple:
    toks = [int(t) for t in seq if t != PAD_ID]
    return tuple(toks)


def bleu(candidate, reference, max_n: int = 4) -> float:
    """Geometric mean of add-1-smoothed n-gram precisions times the brevity
    penalty; tokens are compared as ids, PAD stripped."""
    cand = _strip_pad(candidate)
    ref = _strip_pad(reference)
    if not cand:
        return 0.0
    log_prec = 0.0
    for order in range(1, max_n + 1):
        cand_ngrams = Counter(cand[i:i + order] for i in range(len(cand) - order + 1))
        ref_ngrams = Counter(ref[i:i + order] for i in range(len(ref) - order + 1))
        matched = sum(min(c, ref_ngrams[g]) for g, c in cand_ngrams.items())
        total = max(sum(cand_ngrams.values()), 0)
        log_prec += np.log((matched + 1.0) / (total + 1.0))
    bp = 1.0 if len(cand) >= len(ref) else np.exp(1.0 - len(ref) / max(len(cand), 1))
    return float(bp * np.exp(log_prec / max_n))


def neg_bleu_loss(a, b) -> float:
    return 1.0 - bleu(a, b)


def mbr_select(samples, loss=neg_bleu_loss) -> np.ndarray:
    """Pick the sample with minimum mean pairwise loss against the set;
    ties break toward the earliest sample."""
    samples = list(samples)
    if not samples:
        raise ValueError("mbr_select needs a non-empty sample set")
    risks = [
        float(np.mean([loss(w, w2) for w2 in samples])) for w in samples
    ]
    return samples[int(np.argmin(risks))]


# ---------------------------------------------------------------------------
# sample files


def save_samples(path, tokens: np.ndarray, vocab, oracle_nll=None) -> None:
    """One detokenized sequence per line; optional sidecar with per-sample
    oracle NLL."""
    with open(path, "w") as f:
        for seq in tokens:
            words = vocab.words(seq[: seq_length(seq) + 1])
            f.write(" ".join(words) + "\n")
    if oracle_nll is not None:
        with open(str(path) + ".nll", "w") as f:
            for v in oracle_nll:
                f.write(f"{v:.6f}\n")
