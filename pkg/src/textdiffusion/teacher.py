"""Autoregressive teacher language model used as an independent scorer of
generated text. A small causal transformer trained by next-token NLL; scores
are per-sequence totals in nats, comparable with the corpus oracles.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import ModelConfig, apply_trunk, init_trunk
from .embedding import END_ID
from .objectives import AdamW, clip_grad_norm


class TeacherLM:
    """Causal transformer over token ids; END doubles as the start symbol."""

    def __init__(self, vocab_size: int, cfg: ModelConfig, rng: np.random.Generator):
        self.vocab_size = vocab_size
        self.cfg = cfg
        h = cfg.hidden
        p = {
            "tok": Tensor(rng.standard_normal((vocab_size, h)) * 0.02, requires_grad=True),
            "pos": Tensor(rng.standard_normal((cfg.seq_len, h)) * 0.02, requires_grad=True),
            "head_w": Tensor(rng.standard_normal((h, vocab_size)) * 0.02, requires_grad=True),
            "head_b": Tensor(np.zeros(vocab_size), requires_grad=True),
        }
        p.update(init_trunk(cfg, rng))
        self.params = p

    def logits(self, tokens: np.ndarray, rng=None) -> Tensor:
        """Next-token logits at every position; input is shifted right with
        END as the start symbol."""
        tokens = np.asarray(tokens)
        B, n = tokens.shape
        if n != self.cfg.seq_len:
            raise ValueError(f"sequence length {n} != {self.cfg.seq_len}")
        shifted = np.concatenate(
            [np.full((B, 1), END_ID, dtype=np.int64), tokens[:, :-1]], axis=1)
        h = ad.gather_rows(self.params["tok"], shifted)
        h = ad.add(h, self.params["pos"])
        h = apply_trunk(self.params, h, self.cfg, causal=True, rng=rng)
        return ad.add(ad.matmul(h, self.params["head_w"]), self.params["head_b"])

    def nll(self, tokens: np.ndarray) -> np.ndarray:
        """Per-sequence total NLL in nats, same units as the corpus oracles."""
        tokens = np.asarray(tokens)
        ce = ad.cross_entropy(self.logits(tokens), tokens)
        return ce.data.sum(axis=1)


def train_teacher(
    tokens: np.ndarray,
    vocab_size: int,
    cfg: ModelConfig | None = None,
    iterations: int = 2000,
    batch_size: int = 32,
    lr: float = 3e-4,
    seed: int = 0,
) -> TeacherLM:
    if cfg is None:
        cfg = ModelConfig(seq_len=tokens.shape[1], embed_dim=16, hidden=128,
                          blocks=2, heads=4, dropout=0.1)
    rng = np.random.default_rng(seed)
    model = TeacherLM(vocab_size, cfg, rng)
    opt = AdamW(model.params, lr=lr, weight_decay=0.01, total_iters=iterations)
    for _ in range(iterations):
        idx = rng.integers(0, len(tokens), size=batch_size)
        batch = tokens[idx]
        with ad.Tape() as tape:
            loss = ad.tmean(ad.cross_entropy(model.logits(batch, rng=rng), batch))
        grads = ad.backward(tape, loss)
        named = {k: grads[p] for k, p in model.params.items()}
        clip_grad_norm(named, 1.0)
        opt.step(named)
    return model
