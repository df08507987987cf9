"""Scikit-learn style wrapper around the diffusion language model.

DiffusionLMEstimator exposes fit/sample/score with get_params/set_params so
the model slots into sklearn tooling (cloning, grid search). X is an integer
array (n_sequences, seq_len) of token ids.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .denoiser import Denoiser, ModelConfig
from .embedding import EmbeddingTable
from .objectives import TrainConfig, nll_bound, train
from .sampler import SampleConfig, generate
from .schedules import build_schedule


def _check_tokens(X, seq_len=None, vocab_size=None):
    X = check_array(X, dtype=np.int64, ensure_2d=True)
    if X.min() < 0:
        raise ValueError("token ids must be nonnegative")
    if seq_len is not None and X.shape[1] != seq_len:
        raise ValueError(f"expected sequences of length {seq_len}, got {X.shape[1]}")
    if vocab_size is not None and X.max() >= vocab_size:
        raise ValueError("token id out of vocabulary range")
    return X


class DiffusionLMEstimator(BaseEstimator):
    """Continuous diffusion language model with learned embeddings.

    Parameters mirror the training configuration; all are plain values so
    get_params/clone work unchanged."""

    def __init__(self, embed_dim=16, hidden=128, blocks=4, heads=4,
                 timesteps=2000, schedule="sqrt", parametrization="x0",
                 objective="simple", iterations=4000, batch_size=32,
                 lr=1e-4, clamping="always", seed=0):
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.blocks = blocks
        self.heads = heads
        self.timesteps = timesteps
        self.schedule = schedule
        self.parametrization = parametrization
        self.objective = objective
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.clamping = clamping
        self.seed = seed

    def fit(self, X, y=None):
        X = _check_tokens(X)
        vocab_size = int(X.max()) + 1
        cfg = ModelConfig(seq_len=X.shape[1], embed_dim=self.embed_dim,
                          hidden=self.hidden, blocks=self.blocks,
                          heads=self.heads, max_steps=self.timesteps)
        rng = np.random.default_rng(self.seed)
        self.schedule_ = build_schedule(self.schedule, self.timesteps)
        self.table_ = EmbeddingTable(vocab_size, self.embed_dim, rng=rng)
        self.denoiser_ = Denoiser(cfg, rng)
        tc = TrainConfig(iterations=self.iterations, batch_size=self.batch_size,
                         lr=self.lr, seed=self.seed,
                         parametrization=self.parametrization,
                         objective=self.objective)
        self.train_result_ = train(tc, X, self.denoiser_, self.table_, self.schedule_)
        return self

    def sample(self, n_samples=1, seed=None):
        """Generate token sequences by reverse diffusion."""
        check_is_fitted(self, "denoiser_")
        cfg = SampleConfig(clamping=self.clamping,
                           parametrization=self.parametrization,
                           seed=self.seed if seed is None else seed)
        tokens, _ = generate(self.denoiser_, self.table_, self.schedule_, cfg,
                             n_samples)
        return tokens

    def score(self, X, y=None):
        """Negative variational bound in nats per position (higher is better,
        following the sklearn score convention)."""
        check_is_fitted(self, "denoiser_")
        X = _check_tokens(X, self.denoiser_.cfg.seq_len, self.table_.vocab_size)
        bound, _ = nll_bound(X, self.denoiser_, self.table_, self.schedule_,
                             np.random.default_rng(self.seed),
                             parametrization=self.parametrization)
        return -bound
