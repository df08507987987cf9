"""Training losses and the optimizer loop.

The default objective is the end-to-end simple loss with x0-parametrization:
a single uniformly sampled diffusion step per sequence, an embedding-matching
term at t=1, the rounding NLL, and the alpha_bar_T ||x0||^2 regularizer
(identically zero for schedules that reach alpha_bar_T = 0). mu- and
eps-parametrizations are provided for ablations and differ from the x0 term
by exact per-step scalings.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import Denoiser
from .diffusion import posterior_coeffs
from .embedding import EmbeddingTable
from .exceptions import DivergenceError, NonFiniteError
from .schedules import Schedule

PARAMETRIZATIONS = ("x0", "mu", "eps")


@dataclass
class LossBreakdown:
    t_term: float
    diffusion: float
    emb_match: float
    rounding: float
    total: float
    per_sample: np.ndarray | None = None  # per-sequence step terms (diagnostics)

    def as_dict(self) -> dict:
        return {
            "t_term": self.t_term,
            "diffusion": self.diffusion,
            "emb_match": self.emb_match,
            "rounding": self.rounding,
            "total": self.total,
        }


@dataclass
class TrainConfig:
    iterations: int = 4000
    batch_size: int = 32
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    seed: int = 0
    parametrization: str = "x0"
    objective: str = "simple"      # "simple" | "vlb"
    grad_clip: float | None = None  # used by the vlb objective
    importance_sampling: bool = False  # vlb objective only
    dropout: bool = True
    eval_every: int = 250
    sigma1: float = 0.1            # t=1 decoder std for the vlb bound
    lr_decay_iters: int | None = None  # decay horizon; None decays over iterations
    # joint training is unstable if the embedding table moves before the
    # denoiser can identify tokens under noise, or faster than it can track:
    # an early garbage denoiser drags all rows toward contextual means and
    # same-role tokens collapse onto one point. Freeze the table first, then
    # let it move slowly.
    freeze_embeddings_iters: int = 0
    embedding_lr_scale: float = 1.0
    # weight on the rounding NLL in the simple objective. None resolves to the
    # embedding dimension so the per-token CE and the per-element squared error
    # enter at comparable scale; with the raw summed norms the diffusion term
    # outweighs the CE by a factor of d and same-role embedding rows collapse
    # onto one point. The vlb objective always keeps the bound's unit weight.
    rounding_weight: float | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.iterations <= 0:
            raise ValueError("lr and iterations must be positive")
        if self.lr_decay_iters is not None and self.lr_decay_iters <= 0:
            raise ValueError("lr_decay_iters must be positive")
        if self.embedding_lr_scale <= 0:
            raise ValueError("embedding_lr_scale must be positive")
        if self.rounding_weight is not None and self.rounding_weight <= 0:
            raise ValueError("rounding_weight must be positive")
        if self.freeze_embeddings_iters < 0:
            raise ValueError("freeze_embeddings_iters must be >= 0")
        if self.parametrization not in PARAMETRIZATIONS:
            raise ValueError(f"parametrization must be one of {PARAMETRIZATIONS}")


def _per_sample_sq(a: Tensor, b: Tensor) -> Tensor:
    d = ad.sub(a, b)
    return ad.tsum(ad.mul(d, d), axis=(1, 2))


def _step_constants(sched: Schedule, t: np.ndarray):
    """Posterior-mean coefficients per sampled step; t=1 maps to (c0=1, ct=0)
    so the embedding-matching term reuses the same code path."""
    c0 = np.ones(len(t))
    ct = np.zeros(len(t))
    for i, ti in enumerate(np.asarray(t)):
        if ti >= 2:
            pc = posterior_coeffs(sched, int(ti))
            c0[i], ct[i] = pc.c0, pc.ct
    return c0[:, None, None], ct[:, None, None]


def diffusion_step_terms(
    sched: Schedule,
    parametrization: str,
    pred: Tensor,
    x0: Tensor,
    xt: Tensor,
    eps: Tensor,
    emb: Tensor,
    t: np.ndarray,
) -> Tensor:
    """Per-sequence squared-error terms for one sampled step each.

    pred is the raw network output, interpreted per parametrization. At t=1
    the target is Emb(w) in latent space for every parametrization.
    """
    B = len(t)
    mask1 = ad.constant((t == 1).astype(float))
    mask2 = ad.constant((t >= 2).astype(float))
    z = _select(x0, emb, t)  # x0 for t >= 2, Emb(w) at t = 1
    if parametrization == "x0":
        return _per_sample_sq(z, pred)
    if parametrization == "mu":
        c0, ct = _step_constants(sched, t)
        ctxt = ad.mul(ad.constant(ct), xt)
        mu_hat = ad.add(ad.mul(ad.constant(c0), z), ctxt)
        mu_pred = ad.add(ad.mul(ad.constant(c0), pred), ctxt)
        return _per_sample_sq(mu_hat, mu_pred)
    if parametrization == "eps":
        term2 = _per_sample_sq(eps, pred)
        # t = 1: convert the eps prediction to x0-space and match Emb(w)
        ab1 = sched.alpha_bar_t(1)
        x0hat = ad.scale(
            ad.sub(xt, ad.scale(pred, np.sqrt(1.0 - ab1))), 1.0 / np.sqrt(ab1)
        )
        term1 = _per_sample_sq(emb, x0hat)
        return ad.add(ad.mul(mask2, term2), ad.mul(mask1, term1))
    raise ValueError(f"unknown parametrization {parametrization!r}")


def _select(a: Tensor, b: Tensor, t: np.ndarray) -> Tensor:
    """Per-sample switch: row i is a[i] where t[i] >= 2, else b[i]."""
    m = (t >= 2).astype(float)[:, None, None]
    return ad.add(ad.mul(ad.constant(m), a), ad.mul(ad.constant(1.0 - m), b))


def predicted_x0(sched: Schedule, parametrization: str, pred: Tensor | np.ndarray,
                 xt: np.ndarray, t: int):
    """Interpret a network output as an x0 estimate (numpy, sampling path)."""
    data = pred.data if isinstance(pred, Tensor) else pred
    if parametrization in ("x0", "mu"):
        return data
    # x0 is unidentifiable from eps at alpha_bar = 0 (t = T); floor the
    # divisor so the first reverse step stays finite
    ab = max(sched.alpha_bar_t(t), 1e-12)
    return (xt - np.sqrt(1.0 - ab) * data) / np.sqrt(ab)


def loss_e2e_simple(
    tokens: np.ndarray,
    denoiser: Denoiser,
    table: EmbeddingTable,
    sched: Schedule,
    rng: np.random.Generator,
    parametrization: str = "x0",
    dropout_rng: np.random.Generator | None = None,
    t_override: np.ndarray | None = None,
    vlb_weights: bool = False,
    t_weights: np.ndarray | None = None,
    rounding_scale: float = 1.0,
) -> tuple[Tensor, LossBreakdown]:
    """One unbiased single-t estimate of the end-to-end simple loss over a
    token batch. Returns (scalar loss on the active tape, breakdown)."""
    tokens = np.atleast_2d(tokens)
    B = tokens.shape[0]
    T = sched.T
    emb = table.embed(tokens)
    x0 = table.sample_x0(tokens, rng)
    t = t_override if t_override is not None else rng.integers(1, T + 1, size=B)
    eps_arr = rng.standard_normal(emb.shape)
    ab = sched.alpha_bar[t][:, None, None]
    xt = ad.add(
        ad.mul(ad.constant(np.sqrt(ab)), x0),
        ad.constant(np.sqrt(1.0 - ab) * eps_arr),
    )
    pred = denoiser.forward(xt, t, rng=dropout_rng)
    terms = diffusion_step_terms(
        sched, parametrization, pred, x0, xt, ad.constant(eps_arr), emb, t
    )
    if vlb_weights:
        w = np.ones(B)
        for i, ti in enumerate(t):
            if ti >= 2:
                pc = posterior_coeffs(sched, int(ti))
                w[i] = pc.c0**2 / (2.0 * pc.var)
        terms = ad.mul(terms, ad.constant(w))
    if t_weights is not None:
        terms = ad.mul(terms, ad.constant(t_weights))

    mask1 = (t == 1).astype(float)
    diffusion = ad.scale(ad.tsum(ad.mul(terms, ad.constant(1.0 - mask1))), 1.0 / B)
    emb_match = ad.scale(ad.tsum(ad.mul(terms, ad.constant(mask1))), 1.0 / B)

    nll = ad.cross_entropy(table.rounding_logits(x0), tokens)
    rounding = ad.scale(ad.tsum(nll), rounding_scale / B)

    ab_T = sched.alpha_bar_t(T)
    if ab_T > 0.0:
        t_term = ad.scale(ad.tsum(ad.mul(x0, x0)), ab_T / B)
    else:
        t_term = ad.constant(0.0)

    total = ad.add(ad.add(diffusion, emb_match), ad.add(rounding, t_term))
    bd = LossBreakdown(
        t_term=t_term.item(),
        diffusion=diffusion.item(),
        emb_match=emb_match.item(),
        rounding=rounding.item(),
        total=total.item(),
        per_sample=terms.data.copy(),
    )
    return total, bd


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """AdamW with linear learning-rate decay to zero over total_iters.

    Weight decay applies only to matrices (ndim >= 2); gains and biases are
    exempt."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas=(0.9, 0.999), weight_decay: float = 0.01,
                 eps: float = 1e-8, total_iters: int = 10000,
                 lr_scales: dict[str, float] | None = None):
        self.params = params
        self.lr = lr
        self.lr_scales = lr_scales or {}
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.total_iters = total_iters
        self.iteration = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def current_lr(self) -> float:
        frac = min(self.iteration / self.total_iters, 1.0)
        return self.lr * (1.0 - frac)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        lr = self.current_lr()
        self.iteration += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.iteration
        bc2 = 1.0 - b2**self.iteration
        for k, p in self.params.items():
            if not p.requires_grad:
                continue
            g = grads[k]
            ad.check_finite(g, f"gradient of {k}")
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            upd = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                upd = upd + self.weight_decay * p.data
            p.data = p.data - lr * self.lr_scales.get(k, 1.0) * upd

    def state(self) -> dict:
        return {"iteration": self.iteration, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.iteration = int(state["iteration"])
        self.m = {k: np.asarray(v) for k, v in state["m"].items()}
        self.v = {k: np.asarray(v) for k, v in state["v"].items()}


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scl = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scl
    return total


# ---------------------------------------------------------------------------
# training loop


def all_params(denoiser: Denoiser, table: EmbeddingTable) -> dict[str, Tensor]:
    p = dict(denoiser.params)
    p["embedding.E"] = table.E
    return p


def rounding_accuracy(tokens: np.ndarray, table: EmbeddingTable,
                      rng: np.random.Generator) -> float:
    """Token accuracy of argmax rounding applied to fresh q(x0|w) draws."""
    x0 = table.embed(tokens).data + table.sigma0 * rng.standard_normal(
        tokens.shape + (table.dim,)
    )
    return float(np.mean(table.decode_argmax(x0) == tokens))


class ImportanceSampler:
    """Loss-second-moment proportional sampling over t (vlb objective).

    Falls back to uniform until every step has history."""

    def __init__(self, T: int, history: int = 10):
        self.T = T
        self.hist = np.zeros((T, history))
        self.count = np.zeros(T, dtype=int)

    def ready(self) -> bool:
        return bool(np.all(self.count >= self.hist.shape[1]))

    def sample(self, rng: np.random.Generator, size: int):
        if not self.ready():
            t = rng.integers(1, self.T + 1, size=size)
            return t, np.ones(size)
        w = np.sqrt(np.mean(self.hist**2, axis=1))
        p = w / w.sum()
        t = rng.choice(self.T, size=size, p=p) + 1
        # reweight so the estimator stays unbiased
        return t, 1.0 / (self.T * p[t - 1])

    def update(self, t: np.ndarray, losses: np.ndarray) -> None:
        for ti, li in zip(t, losses):
            i = int(ti) - 1
            self.hist[i, self.count[i] % self.hist.shape[1]] = li
            self.count[i] += 1


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    final_accuracy: float = 0.0


def train(
    config: TrainConfig,
    train_tokens: np.ndarray,
    denoiser: Denoiser,
    table: EmbeddingTable,
    sched: Schedule,
    metrics_sink=None,
    stop_at_accuracy: float | None = None,
    optimizer: AdamW | None = None,
    rng: np.random.Generator | None = None,
) -> TrainResult:
    """Train denoiser and embeddings jointly; deterministic given the seed.

    metrics_sink: optional callable receiving one dict per eval point.
    Aborts with DivergenceError if the loss exceeds 10x its initial value
    for 3 consecutive evals."""
    params = all_params(denoiser, table)
    opt = optimizer or AdamW(
        params, lr=config.lr, betas=config.betas,
        weight_decay=config.weight_decay,
        total_iters=config.lr_decay_iters or config.iterations,
        lr_scales=({"embedding.E": config.embedding_lr_scale}
                   if config.embedding_lr_scale != 1.0 else None),
    )
    rng = rng or np.random.default_rng(config.seed)
    result = TrainResult()
    initial_loss = None
    bad_evals = 0
    sampler = ImportanceSampler(sched.T) if (
        config.objective == "vlb" and config.importance_sampling) else None
    vlb = config.objective == "vlb"
    rounding_scale = 1.0 if vlb else (
        config.rounding_weight if config.rounding_weight is not None
        else float(table.E.data.shape[1]))

    eval_tokens = train_tokens[: min(256, len(train_tokens))]
    for _ in range(config.iterations - opt.iteration):
        if config.freeze_embeddings_iters:
            table.E.requires_grad = opt.iteration >= config.freeze_embeddings_iters
        idx = rng.integers(0, len(train_tokens), size=config.batch_size)
        batch = train_tokens[idx]
        t_override = t_weights = None
        if sampler is not None:
            t_override, t_weights = sampler.sample(rng, config.batch_size)
        drop_rng = rng if (config.dropout and denoiser.cfg.dropout > 0) else None
        with ad.Tape() as tape:
            loss, bd = loss_e2e_simple(
                batch, denoiser, table, sched, rng,
                parametrization=config.parametrization,
                dropout_rng=drop_rng,
                t_override=t_override,
                vlb_weights=vlb,
                t_weights=t_weights,
                rounding_scale=rounding_scale,
            )
        if not np.isfinite(bd.total):
            raise NonFiniteError(f"non-finite loss: {bd.as_dict()}")
        grads_by_tensor = ad.backward(tape, loss)
        grads = {k: grads_by_tensor[p] for k, p in params.items()
                 if p.requires_grad}
        if vlb and config.grad_clip:
            clip_grad_norm(grads, config.grad_clip)
        if sampler is not None:
            sampler.update(t_override, bd.per_sample)
        opt.step(grads)

        it = opt.iteration
        if it % config.eval_every == 0 or it == config.iterations:
            acc = rounding_accuracy(eval_tokens, table, np.random.default_rng(12345))
            rec = {"iter": it, "rounding_acc": acc, "lr": opt.current_lr()}
            rec.update(bd.as_dict())
            result.metrics.append(rec)
            result.final_accuracy = acc
            if metrics_sink is not None:
                metrics_sink(rec)
            if initial_loss is None:
                initial_loss = bd.total
            bad_evals = bad_evals + 1 if bd.total > 10 * initial_loss else 0
            if bad_evals >= 3:
                raise DivergenceError(
                    f"loss {bd.total:.4g} > 10x initial {initial_loss:.4g} "
                    f"for 3 consecutive evals at iter {it}"
                )
            if stop_at_accuracy is not None and acc >= stop_at_accuracy:
                break
    return result


# ---------------------------------------------------------------------------
# variational bound


def _gaussian_logpdf(x: np.ndarray, mean: np.ndarray, std: float) -> float:
    d = x - mean
    return float(-0.5 * np.sum(d * d) / std**2 - x.size * np.log(std * np.sqrt(2 * np.pi)))


# Snap-to-row refinement is only reliable where the signal dominates the
# noise; below this alpha_bar the nearest row is often wrong and the raw
# network prediction gives a tighter bound.
_CLAMP_ABAR_MIN = 0.5


def _clamped_x0_mean(x0hat: np.ndarray, xt: np.ndarray, alpha_bar: float,
                     table: EmbeddingTable) -> np.ndarray:
    """Reverse-process x0 mean with rounding-aware clamping.

    Snaps the prediction to its nearest embedding row, then applies the exact
    Gaussian posterior correction for the sigma0 rounding noise: given the
    snapped row e, E[x0 | xt] = e + shrink * (xt - sqrt(ab) e) with
    shrink = sigma0^2 sqrt(ab) / (sigma0^2 ab + 1 - ab)."""
    e = table.clamp(x0hat)
    s2 = table.sigma0 ** 2
    shrink = s2 * np.sqrt(alpha_bar) / (s2 * alpha_bar + 1.0 - alpha_bar)
    return e + shrink * (xt - np.sqrt(alpha_bar) * e)


def nll_bound(
    tokens: np.ndarray,
    denoiser: Denoiser,
    table: EmbeddingTable,
    sched: Schedule,
    rng: np.random.Generator,
    num_t_samples: int = 32,
    parametrization: str = "x0",
    sigma1: float = 0.1,
    clamped: bool = True,
) -> tuple[float, float]:
    """Monte-Carlo estimate of the end-to-end variational bound.

    Returns (nats per position, standard error). Exact Gaussian KLs for the
    middle terms; the t=1 decoder is N(f(x1, 1), sigma1^2 I).

    With clamped=True (default) the bound scores the deployed reverse
    process, whose x0 estimate at high-signal steps is the network
    prediction snapped to its nearest embedding row plus the exact
    posterior correction for the rounding noise. clamped=False scores the
    raw network prediction at every step."""
    tokens = np.atleast_2d(tokens)
    if table.sigma0 <= 0:
        raise ValueError("nll_bound requires sigma0 > 0")
    T = sched.T
    n = tokens.shape[1]
    totals = []
    for w in tokens:
        w = w[None, :]
        emb = table.embed(w).data
        x0 = emb + table.sigma0 * rng.standard_normal(emb.shape)

        # L_round
        logits = x0 @ table.E.data.T
        z = logits - logits.max(axis=-1, keepdims=True)
        ls = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        l_round = -float(np.take_along_axis(ls, w[..., None], axis=-1).sum())

        # L_0 = log q(x0|w) - log p(x0|x1)
        ab1 = sched.alpha_bar_t(1)
        x1 = np.sqrt(ab1) * x0 + np.sqrt(1 - ab1) * rng.standard_normal(x0.shape)
        f1 = predicted_x0(sched, parametrization,
                          denoiser.forward(x1, 1).data, x1, 1)
        if clamped and ab1 >= _CLAMP_ABAR_MIN:
            f1 = _clamped_x0_mean(f1, x1, ab1, table)
        l_0 = _gaussian_logpdf(x0, emb, table.sigma0) - _gaussian_logpdf(x0, f1, sigma1)

        # L_T
        ab_T = sched.alpha_bar_t(T)
        if ab_T > 0.0:
            l_T = 0.5 * (ab_T * float(np.sum(x0 * x0))
                         - x0.size * (ab_T + np.log(1.0 - ab_T)))
        else:
            l_T = 0.0

        # sum_{t=2}^T KL_t, uniform t subsampling
        ts = rng.integers(2, T + 1, size=num_t_samples)
        kls = []
        for t in ts:
            ab = sched.alpha_bar_t(int(t))
            xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * rng.standard_normal(x0.shape)
            x0hat = predicted_x0(sched, parametrization,
                                 denoiser.forward(xt, int(t)).data, xt, int(t))
            if clamped and ab >= _CLAMP_ABAR_MIN:
                x0hat = _clamped_x0_mean(x0hat, xt, ab, table)
            pc = posterior_coeffs(sched, int(t))
            mu_hat = pc.c0 * x0 + pc.ct * xt
            mu_pred = pc.c0 * x0hat + pc.ct * xt
            kls.append(float(np.sum((mu_hat - mu_pred) ** 2)) / (2 * pc.var))
        l_mid = (T - 1) * float(np.mean(kls))

        totals.append((l_round + l_0 + l_T + l_mid) / n)
    totals = np.asarray(totals)
    return float(totals.mean()), float(totals.std(ddof=1) / np.sqrt(len(totals)))
