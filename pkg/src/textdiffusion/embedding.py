"""Discrete <-> continuous bridge: the trainable embedding table, the
stochastic embedding transition q(x0 | w), the weight-tied softmax rounding
head, nearest-neighbor clamping, and argmax decoding.

Token id conventions: 0 = PAD, 1 = END, 2 = UNK. Sequences are fixed-length;
everything after the first END is PAD.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ShapeMismatchError

PAD_ID = 0
END_ID = 1
UNK_ID = 2


def normalize_end_pad(tokens: np.ndarray) -> np.ndarray:
    """Force every position after the first END to PAD (per row)."""
    tokens = np.array(tokens, copy=True)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
        squeeze = True
    else:
        squeeze = False
    for row in tokens:
        ends = np.flatnonzero(row == END_ID)
        if ends.size:
            row[ends[0] + 1:] = PAD_ID
    return tokens[0] if squeeze else tokens


def seq_length(tokens: np.ndarray) -> int:
    """Number of tokens before the first END (or the full length if no END)."""
    ends = np.flatnonzero(np.asarray(tokens) == END_ID)
    return int(ends[0]) if ends.size else len(tokens)


class EmbeddingTable:
    """Vocabulary -> R^d map with a weight-tied dot-product rounding head."""

    def __init__(self, vocab_size: int, dim: int, sigma0: float = 0.1,
                 rng: np.random.Generator | None = None, weights: np.ndarray | None = None):
        if sigma0 < 0:
            raise ValueError("sigma0 must be nonnegative")
        self.vocab_size = vocab_size
        self.dim = dim
        self.sigma0 = float(sigma0)
        if weights is None:
            rng = rng or np.random.default_rng(0)
            weights = rng.standard_normal((vocab_size, dim)) / np.sqrt(dim)
        self.E = Tensor(np.asarray(weights, dtype=ad.default_dtype()), requires_grad=True)

    def _check_ids(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w)
        if w.min() < 0 or w.max() >= self.vocab_size:
            raise IndexError(f"token id outside [0, {self.vocab_size})")
        return w

    def embed(self, w: np.ndarray) -> Tensor:
        """Row-stack of embedding rows; differentiable w.r.t. the table."""
        return ad.gather_rows(self.E, self._check_ids(w))

    def sample_x0(self, w: np.ndarray, rng: np.random.Generator) -> Tensor:
        """Reparametrized draw from q(x0 | w) = N(Emb(w), sigma0^2 I)."""
        emb = self.embed(w)
        noise = ad.constant(self.sigma0 * rng.standard_normal(emb.shape))
        return ad.add(emb, noise)

    def rounding_logits(self, x0: Tensor) -> Tensor:
        if x0.shape[-1] != self.dim:
            raise ShapeMismatchError(f"latent dim {x0.shape[-1]} != {self.dim}")
        return ad.matmul(x0, ad.transpose(self.E))

    def rounding_logprob(self, x0: Tensor, w: np.ndarray) -> Tensor:
        """Sum_i log softmax(x_i . E^T)[w_i] over all positions (scalar)."""
        w = self._check_ids(w)
        nll = ad.cross_entropy(self.rounding_logits(x0), w)
        return ad.scale(ad.tsum(nll), -1.0)

    def nearest_ids(self, x: np.ndarray) -> np.ndarray:
        """Euclidean nearest embedding row per position; ties -> lowest id."""
        E = self.E.data
        # ||x - e||^2 = ||x||^2 - 2 x.e + ||e||^2; the ||x||^2 term is constant per row
        d2 = np.sum(E * E, axis=1) - 2.0 * (x @ E.T)
        return np.argmin(d2, axis=-1)

    def clamp(self, xhat: np.ndarray) -> np.ndarray:
        """Replace each row by its nearest embedding row (exact table rows)."""
        return self.E.data[self.nearest_ids(xhat)]

    def decode_argmax(self, x0: np.ndarray) -> np.ndarray:
        """Most probable token per position under the rounding head, then
        END/PAD normalization."""
        logits = x0 @ self.E.data.T
        return normalize_end_pad(np.argmax(logits, axis=-1))
