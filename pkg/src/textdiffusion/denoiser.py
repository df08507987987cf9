"""Trainable denoising network f(x_t, t): a bidirectional pre-LN transformer
over latent sequences with sinusoidal+MLP step conditioning.

The transformer trunk (blocks + final layer norm) is factored out so latent
classifiers and the autoregressive teacher reuse the same block design.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ShapeMismatchError


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int = 16
    embed_dim: int = 16
    hidden: int = 128
    blocks: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    max_steps: int = 2000
    dropout: float = 0.1

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError("hidden must be divisible by heads")


# a BERT-base-sized preset; the desk-scale default above trains in minutes
BERT_BASE = ModelConfig(seq_len=64, embed_dim=16, hidden=768, blocks=12, heads=12)


def _param(rng, shape, std=0.02) -> Tensor:
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def init_trunk(cfg: ModelConfig, rng: np.random.Generator, prefix: str = "") -> dict:
    h, m = cfg.hidden, cfg.hidden * cfg.mlp_ratio
    p = {}
    for i in range(cfg.blocks):
        b = f"{prefix}blk{i}."
        p[b + "ln1_g"], p[b + "ln1_b"] = _ones(h), _zeros(h)
        for name in ("wq", "wk", "wv", "wo"):
            p[b + name] = _param(rng, (h, h))
            p[b + name[1] + "b"] = _zeros(h)
        p[b + "ln2_g"], p[b + "ln2_b"] = _ones(h), _zeros(h)
        p[b + "mw1"], p[b + "mb1"] = _param(rng, (h, m)), _zeros(m)
        p[b + "mw2"], p[b + "mb2"] = _param(rng, (m, h)), _zeros(h)
    p[prefix + "lnf_g"], p[prefix + "lnf_b"] = _ones(h), _zeros(h)
    return p


def _dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or p <= 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return ad.mul(x, ad.constant(mask))


def _attention(p: dict, b: str, x: Tensor, cfg: ModelConfig, causal: bool,
               rng: np.random.Generator | None) -> Tensor:
    B, n, h = x.shape
    H, dh = cfg.heads, cfg.hidden // cfg.heads

    def heads(w, bias):
        y = ad.add(ad.matmul(x, p[b + w]), p[b + bias])
        return ad.transpose(ad.reshape(y, (B, n, H, dh)), (0, 2, 1, 3))

    q, k, v = heads("wq", "qb"), heads("wk", "kb"), heads("wv", "vb")
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dh))
    if causal:
        mask = np.triu(np.full((n, n), -1e9), k=1)
        scores = ad.add(scores, ad.constant(mask))
    ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, n, h))
    out = ad.add(ad.matmul(ctx, p[b + "wo"]), p[b + "ob"])
    return _dropout(out, cfg.dropout, rng)


def apply_trunk(p: dict, x: Tensor, cfg: ModelConfig, prefix: str = "",
                causal: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Run the transformer blocks and the final layer norm on (B, n, hidden)."""
    for i in range(cfg.blocks):
        b = f"{prefix}blk{i}."
        a_in = ad.layer_norm(x, p[b + "ln1_g"], p[b + "ln1_b"])
        x = ad.add(x, _attention(p, b, a_in, cfg, causal, rng))
        m_in = ad.layer_norm(x, p[b + "ln2_g"], p[b + "ln2_b"])
        m = ad.gelu(ad.add(ad.matmul(m_in, p[b + "mw1"]), p[b + "mb1"]))
        m = ad.add(ad.matmul(m, p[b + "mw2"]), p[b + "mb2"])
        x = ad.add(x, _dropout(m, cfg.dropout, rng))
    return ad.layer_norm(x, p[prefix + "lnf_g"], p[prefix + "lnf_b"])


def sinusoidal_steps(t: np.ndarray, dim: int) -> np.ndarray:
    """Classic sin/cos step embedding; rows for distinct t are distinct."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Denoiser:
    """f(x_t, t) -> prediction in latent space (x0 under the default
    parametrization). Output shape always equals the input latent shape."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, h, n = cfg.embed_dim, cfg.hidden, cfg.seq_len
        p = {
            "in_w": _param(rng, (d, h)),
            "in_b": _zeros(h),
            "pos": _param(rng, (n, h)),
            "t_w1": _param(rng, (h, h)),
            "t_b1": _zeros(h),
            "t_w2": _param(rng, (h, h)),
            "t_b2": _zeros(h),
            "out_w": _param(rng, (h, d)),
            "out_b": _zeros(d),
        }
        p.update(init_trunk(cfg, rng))
        self.params = p

    def time_conditioning(self, t) -> Tensor:
        """Step-conditioning vectors, shape (len(t), hidden)."""
        t = np.atleast_1d(np.asarray(t))
        if t.min() < 0 or t.max() > self.cfg.max_steps:
            raise ValueError(f"step outside [0, {self.cfg.max_steps}]")
        emb = ad.constant(sinusoidal_steps(t, self.cfg.hidden))
        p = self.params
        hmid = ad.gelu(ad.add(ad.matmul(emb, p["t_w1"]), p["t_b1"]))
        return ad.add(ad.matmul(hmid, p["t_w2"]), p["t_b2"])

    def forward(self, x, t, rng: np.random.Generator | None = None) -> Tensor:
        """x: (B, n, d) Tensor or array; t: scalar or (B,) step indices.
        Pass rng to enable dropout (training mode)."""
        if not isinstance(x, Tensor):
            x = ad.constant(x)
        B, n, d = x.shape
        cfg = self.cfg
        if n != cfg.seq_len or d != cfg.embed_dim:
            raise ShapeMismatchError(f"latent shape {(n, d)} != {(cfg.seq_len, cfg.embed_dim)}")
        p = self.params
        h = ad.add(ad.matmul(x, p["in_w"]), p["in_b"])
        h = ad.add(h, p["pos"])
        tvec = self.time_conditioning(np.broadcast_to(np.asarray(t), (B,)))
        h = ad.add(h, ad.reshape(tvec, (B, 1, cfg.hidden)))
        h = apply_trunk(p, h, cfg, rng=rng)
        return ad.add(ad.matmul(h, p["out_w"]), p["out_b"])
