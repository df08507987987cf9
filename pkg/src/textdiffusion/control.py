"""Plug-and-play controllable generation.

Classifier-guided control runs a few Adagrad ascent steps on each reverse
latent, maximizing lambda * log p(x_{t-1} | x_t) + log p(c | x_{t-1}) with
the generative model and classifier frozen. Length control and infilling are
classifier-free: observed positions are re-anchored at every step with fresh
forward-marginal samples of their true embeddings.
"""
from __future__ import annotations

import shlex
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import OracleCorpus, Record
from .denoiser import Denoiser, ModelConfig, apply_trunk, init_trunk, sinusoidal_steps
from .diffusion import mu_from_x0, posterior_coeffs
from .embedding import END_ID, PAD_ID, EmbeddingTable
from .objectives import AdamW
from .sampler import SampleConfig, mbr_select, predict_x0, reverse_step

TASK_KINDS = ("semantic_content", "token_tags", "span_label", "length",
              "infill", "composite")


@dataclass
class ControlTask:
    kind: str
    payload: object
    middle_len: int = 0  # infill only

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "composite" and len(self.payload) < 2:
            raise ValueError("composite task needs >= 2 sub-tasks")


@dataclass
class GuidanceConfig:
    lambda_fluency: float = 0.01
    inner_steps: int = 3
    adagrad_lr: float = 0.1
    sigma1: float = 0.1  # fluency scale at the final step

    def __post_init__(self):
        if self.lambda_fluency < 0 or self.inner_steps < 0:
            raise ValueError("lambda_fluency and inner_steps must be >= 0")


# ---------------------------------------------------------------------------
# latent classifiers


class LatentClassifier:
    """Small transformer over (x_t, t) with a task-specific head.

    Heads: per-position tag softmax (token_tags), span-label softmax over a
    pooled span (span_label), or per-field value softmax over the pooled
    sequence with an explicit 'absent' class (semantic_content)."""

    def __init__(self, kind: str, cfg: ModelConfig, label_space,
                 rng: np.random.Generator):
        self.kind = kind
        self.cfg = cfg
        self.label_space = label_space
        d, h = cfg.embed_dim, cfg.hidden
        p = {
            "in_w": Tensor(rng.standard_normal((d, h)) * 0.02, requires_grad=True),
            "in_b": Tensor(np.zeros(h), requires_grad=True),
            "pos": Tensor(rng.standard_normal((cfg.seq_len, h)) * 0.02, requires_grad=True),
            "t_w1": Tensor(rng.standard_normal((h, h)) * 0.02, requires_grad=True),
            "t_b1": Tensor(np.zeros(h), requires_grad=True),
            "t_w2": Tensor(rng.standard_normal((h, h)) * 0.02, requires_grad=True),
            "t_b2": Tensor(np.zeros(h), requires_grad=True),
        }
        p.update(init_trunk(cfg, rng))
        if kind == "token_tags":
            num = len(label_space)
            p["head_w"] = Tensor(rng.standard_normal((h, num)) * 0.02, requires_grad=True)
            p["head_b"] = Tensor(np.zeros(num), requires_grad=True)
        elif kind == "span_label":
            num = len(label_space)
            p["head_w"] = Tensor(rng.standard_normal((h, num)) * 0.02, requires_grad=True)
            p["head_b"] = Tensor(np.zeros(num), requires_grad=True)
        elif kind == "semantic_content":
            # label_space: dict field -> tuple of values; class 0 = absent
            for f_name, values in label_space.items():
                num = len(values) + 1
                p[f"head_{f_name}_w"] = Tensor(
                    rng.standard_normal((h, num)) * 0.02, requires_grad=True)
                p[f"head_{f_name}_b"] = Tensor(np.zeros(num), requires_grad=True)
        else:
            raise ValueError(f"no classifier head for task kind {kind!r}")
        self.params = p

    def features(self, x, t) -> Tensor:
        """Trunk features (B, n, h); differentiable w.r.t. x."""
        if not isinstance(x, Tensor):
            x = ad.constant(x)
        B = x.shape[0]
        p = self.params
        h = ad.add(ad.matmul(x, p["in_w"]), p["in_b"])
        h = ad.add(h, p["pos"])
        emb = ad.constant(sinusoidal_steps(np.broadcast_to(np.asarray(t), (B,)),
                                           self.cfg.hidden))
        tv = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(emb, p["t_w1"]), p["t_b1"])),
                              p["t_w2"]), p["t_b2"])
        h = ad.add(h, ad.reshape(tv, (B, 1, self.cfg.hidden)))
        return apply_trunk(p, h, self.cfg)

    def tag_logprobs(self, x, t) -> Tensor:
        feats = self.features(x, t)
        logits = ad.add(ad.matmul(feats, self.params["head_w"]), self.params["head_b"])
        return ad.log_softmax(logits)

    def span_logprobs(self, x, t, span: tuple[int, int]) -> Tensor:
        i, j = span
        feats = self.features(x, t)
        B, n, h = feats.shape
        mask = np.zeros((1, n, 1))
        mask[:, i:j, :] = 1.0 / (j - i)
        pooled = ad.tsum(ad.mul(feats, ad.constant(mask)), axis=1)
        logits = ad.add(ad.matmul(pooled, self.params["head_w"]), self.params["head_b"])
        return ad.log_softmax(logits)

    def field_logprobs(self, x, t, f_name: str) -> Tensor:
        feats = self.features(x, t)
        B, n, h = feats.shape
        pooled = ad.tmean(feats, axis=1)
        logits = ad.add(ad.matmul(pooled, self.params[f"head_{f_name}_w"]),
                        self.params[f"head_{f_name}_b"])
        return ad.log_softmax(logits)


@dataclass
class ClassifierReport:
    accuracy_by_band: list[float] = field(default_factory=list)
    final_loss: float = 0.0


def _classifier_batch_loss(clf: LatentClassifier, corpus: OracleCorpus,
                           records: list[Record], idx, table: EmbeddingTable,
                           sched, rng) -> tuple[Tensor, float]:
    """Noised-latent classification loss on a batch; returns (loss, accuracy)."""
    tokens = np.stack([records[i].tokens for i in idx])
    B, n = tokens.shape
    emb = table.embed(tokens).data
    t = int(rng.integers(1, sched.T + 1))
    ab = sched.alpha_bar_t(t)
    xt = np.sqrt(ab) * emb + np.sqrt(1 - ab) * rng.standard_normal(emb.shape)
    return _classifier_loss_at(clf, corpus, [records[i] for i in idx], xt, t, rng)


def _classifier_loss_at(clf: LatentClassifier, corpus: OracleCorpus,
                        recs: list[Record], xt: np.ndarray, t: int, rng
                        ) -> tuple[Tensor, float]:
    B = len(recs)
    if clf.kind == "token_tags":
        tag_ids = np.array([[clf.label_space.index(tag) for tag in r.tags]
                            for r in recs])
        lp = clf.tag_logprobs(xt, t)
        nll = ad.scale(ad.tsum(ad.cross_entropy(lp, tag_ids)), 1.0 / B)
        acc = float(np.mean(np.argmax(lp.data, axis=-1) == tag_ids))
        return nll, acc
    if clf.kind == "span_label":
        # one span per sequence per step: a true clause span or a random
        # window labeled 'none'
        losses, correct = [], 0
        for b, r in enumerate(recs):
            n = len(r.tokens)
            if r.spans and rng.random() < 0.75:
                i, j, name = r.spans[rng.integers(0, len(r.spans))]
                label = clf.label_space.index(name)
            else:
                i = int(rng.integers(0, n - 1))
                j = int(rng.integers(i + 1, min(i + 5, n) + 1))
                match = [s for s in r.spans if s[0] == i and s[1] == j]
                label = clf.label_space.index(match[0][2]) if match else 0
            lp = clf.span_logprobs(xt[b:b + 1], t, (i, j))
            losses.append(ad.cross_entropy(lp, np.array([label])))
            correct += int(np.argmax(lp.data) == label)
        nll = ad.scale(ad.tsum(ad.concat(losses, axis=0)), 1.0 / B)
        return nll, correct / B
    if clf.kind == "semantic_content":
        total = None
        correct, count = 0, 0
        for f_name, values in clf.label_space.items():
            target = np.array([
                values.index(r.labels[f_name]) + 1 if f_name in r.labels else 0
                for r in recs])
            lp = clf.field_logprobs(xt, t, f_name)
            nll = ad.scale(ad.tsum(ad.cross_entropy(lp, target)), 1.0 / B)
            total = nll if total is None else ad.add(total, nll)
            correct += int(np.sum(np.argmax(lp.data, axis=-1) == target))
            count += B
        return total, correct / count
    raise ValueError(clf.kind)


def label_space_for(kind: str, corpus: OracleCorpus):
    if kind == "token_tags":
        return sorted(set(corpus._tag_of.values()))
    if kind == "span_label":
        return ["none"] + [f.name for f in corpus.spec.fields]
    if kind == "semantic_content":
        return {f.name: f.values for f in corpus.spec.fields}
    raise ValueError(f"no label space for {kind!r}")


def train_latent_classifier(
    kind: str,
    corpus: OracleCorpus,
    train_records: list[Record],
    dev_records: list[Record],
    table: EmbeddingTable,
    sched,
    cfg: ModelConfig,
    iterations: int = 1500,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
) -> tuple[LatentClassifier, ClassifierReport]:
    """Train a classifier on forward-noised latents of frozen embeddings;
    reports held-out accuracy per noise band (step quartiles)."""
    rng = np.random.default_rng(seed)
    clf = LatentClassifier(kind, cfg, label_space_for(kind, corpus), rng)
    opt = AdamW(clf.params, lr=lr, weight_decay=0.01, total_iters=iterations)
    report = ClassifierReport()
    for _ in range(iterations):
        idx = rng.integers(0, len(train_records), size=batch_size)
        with ad.Tape() as tape:
            loss, _ = _classifier_batch_loss(
                clf, corpus, train_records, idx, table, sched, rng)
        grads = ad.backward(tape, loss)
        opt.step({k: grads[p] for k, p in clf.params.items()})
        report.final_loss = loss.item()

    # held-out accuracy per noise quartile
    eval_rng = np.random.default_rng(seed + 1)
    T = sched.T
    for q in range(4):
        lo, hi = 1 + q * T // 4, (q + 1) * T // 4
        accs = []
        for _ in range(8):
            idx = eval_rng.integers(0, len(dev_records), size=min(32, len(dev_records)))
            tokens = np.stack([dev_records[i].tokens for i in idx])
            emb = table.embed(tokens).data
            t = int(eval_rng.integers(lo, hi + 1))
            ab = sched.alpha_bar_t(t)
            xt = np.sqrt(ab) * emb + np.sqrt(1 - ab) * eval_rng.standard_normal(emb.shape)
            _, acc = _classifier_loss_at(
                clf, corpus, [dev_records[i] for i in idx], xt, t, eval_rng)
            accs.append(acc)
        report.accuracy_by_band.append(float(np.mean(accs)))
    return clf, report


# ---------------------------------------------------------------------------
# guidance objective


def make_logprob_fn(task: ControlTask, classifiers: dict, corpus: OracleCorpus):
    """Build log p(c | x_t) as a differentiable function of the latent.

    Returns callable(x: Tensor, t: int) -> scalar Tensor summed over batch."""
    if task.kind == "composite":
        fns = [make_logprob_fn(t, classifiers, corpus) for t in task.payload]

        def composite(x, t):
            total = fns[0](x, t)
            for fn in fns[1:]:
                total = ad.add(total, fn(x, t))
            return total

        return composite
    clf = classifiers[task.kind]
    if task.kind == "semantic_content":
        f_name, value = task.payload
        target = clf.label_space[f_name].index(value) + 1

        def semantic(x, t):
            lp = clf.field_logprobs(x, t, f_name)
            return ad.tsum(ad.scale(ad.cross_entropy(lp, np.full(x.shape[0], target)), -1.0))

        return semantic
    if task.kind == "token_tags":
        tag_ids = np.array([clf.label_space.index(tag) for tag in task.payload])

        def tags(x, t):
            if len(tag_ids) != x.shape[1]:
                raise ValueError("token_tags payload must cover every position")
            lp = clf.tag_logprobs(x, t)
            ids = np.broadcast_to(tag_ids, (x.shape[0], len(tag_ids)))
            return ad.tsum(ad.scale(ad.cross_entropy(lp, ids), -1.0))

        return tags
    if task.kind == "span_label":
        i, j, name = task.payload
        target = clf.label_space.index(name)

        def span(x, t):
            lp = clf.span_logprobs(x, t, (i, j))
            return ad.tsum(ad.scale(
                ad.cross_entropy(lp, np.full(x.shape[0], target)), -1.0))

        return span
    raise ValueError(f"task kind {task.kind!r} is classifier-free")


def guided_reverse_step(
    denoiser: Denoiser,
    table: EmbeddingTable,
    sched,
    logprob_fn,
    xt: np.ndarray,
    t: int,
    sample_cfg: SampleConfig,
    gcfg: GuidanceConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """One reverse step followed by Adagrad ascent on the guidance objective
    lambda * log p(x_{t-1} | x_t) + log p(c | x_{t-1}); the model and the
    classifier stay frozen, gradients hit only the latent iterate."""
    x_next = reverse_step(denoiser, table, sched, xt, t, sample_cfg, rng)
    if gcfg.inner_steps == 0:
        return x_next
    x0hat = predict_x0(denoiser, table, sched, xt, t, sample_cfg)
    if t >= 2:
        if sample_cfg.resample_mode == "marginal_anchor":
            mean = np.sqrt(sched.alpha_bar_t(t - 1)) * x0hat
            var = 1.0 - sched.alpha_bar_t(t - 1)
        else:
            mean = mu_from_x0(sched, x0hat, xt, t)
            var = posterior_coeffs(sched, t).var
    else:
        mean, var = x0hat, gcfg.sigma1**2
    mean_c = ad.constant(mean)

    acc = np.zeros_like(x_next)
    x = x_next
    for _ in range(gcfg.inner_steps):
        leaf = Tensor(x, requires_grad=True)
        with ad.Tape() as tape:
            tape.watch(leaf)
            d = ad.sub(leaf, mean_c)
            fluency = ad.scale(ad.tsum(ad.mul(d, d)), -gcfg.lambda_fluency / (2 * var))
            obj = ad.add(fluency, logprob_fn(leaf, sched.model_step(t - 1)))
        g = ad.backward(tape, obj)[leaf]
        ad.check_finite(g, "guidance gradient")
        acc += g * g
        x = x + gcfg.adagrad_lr * g / np.sqrt(acc + 1e-10)
    return x


def guided_generate(
    denoiser: Denoiser,
    table: EmbeddingTable,
    sched,
    task: ControlTask,
    classifiers: dict,
    corpus: OracleCorpus,
    sample_cfg: SampleConfig,
    gcfg: GuidanceConfig,
    k: int,
) -> np.ndarray:
    """Classifier-guided sampling of k sequences (batched)."""
    logprob_fn = make_logprob_fn(task, classifiers, corpus)
    n, d = denoiser.cfg.seq_len, denoiser.cfg.embed_dim
    rng = np.random.default_rng(sample_cfg.seed)
    x = rng.standard_normal((k, n, d))
    for t in range(sched.T, 0, -1):
        x = guided_reverse_step(denoiser, table, sched, logprob_fn, x, t,
                                sample_cfg, gcfg, rng)
    return table.decode_argmax(x)


# ---------------------------------------------------------------------------
# classifier-free controls: anchoring


def anchored_generate(
    denoiser: Denoiser,
    table: EmbeddingTable,
    sched,
    anchor_mask: np.ndarray,     # (n,) bool
    anchor_tokens: np.ndarray,   # (n,) ids; only anchored entries used
    sample_cfg: SampleConfig,
    k: int,
) -> np.ndarray:
    """Reverse diffusion with observed positions re-anchored each step at
    their forward-marginal law; free positions evolve by reverse_step."""
    n, d = denoiser.cfg.seq_len, denoiser.cfg.embed_dim
    rng = np.random.default_rng(sample_cfg.seed)
    obs = table.embed(anchor_tokens[None, :]).data  # (1, n, d)
    mask = anchor_mask[None, :, None]

    def anchor(x, step):
        ab = sched.alpha_bar_t(step) if step > 0 else 1.0
        noised = np.sqrt(ab) * obs + np.sqrt(1 - ab) * rng.standard_normal(x.shape)
        return np.where(mask, noised, x)

    x = anchor(rng.standard_normal((k, n, d)), sched.T)
    for t in range(sched.T, 0, -1):
        x = reverse_step(denoiser, table, sched, x, t, sample_cfg, rng)
        x = anchor(x, t - 1)
    return table.decode_argmax(x)


def anchor_infill(
    denoiser: Denoiser,
    table: EmbeddingTable,
    sched,
    left: np.ndarray,
    right: np.ndarray,
    sample_cfg: SampleConfig,
    k: int = 8,
    middle_len: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Fill the span between anchored left/right contexts; END and PAD are
    anchored too. Returns (MBR-selected sequence, all k candidates)."""
    n = denoiser.cfg.seq_len
    left, right = np.asarray(left), np.asarray(right)
    if middle_len is None:
        middle_len = n - len(left) - len(right) - 1
    if middle_len < 0 or len(left) + middle_len + len(right) + 1 > n:
        raise ValueError("contexts too long for the sequence length")
    anchor_tokens = np.full(n, PAD_ID, dtype=np.int64)
    anchor_mask = np.ones(n, dtype=bool)
    anchor_tokens[: len(left)] = left
    lo = len(left) + middle_len
    anchor_tokens[lo: lo + len(right)] = right
    anchor_tokens[lo + len(right)] = END_ID
    anchor_mask[len(left): lo] = False
    outs = anchored_generate(denoiser, table, sched, anchor_mask, anchor_tokens,
                             sample_cfg, k)
    best = mbr_select(list(outs))
    return best, outs


def length_control(
    denoiser: Denoiser,
    table: EmbeddingTable,
    sched,
    target_len: int,
    sample_cfg: SampleConfig,
    k: int,
) -> np.ndarray:
    """Classifier-free length control: anchor END at the target position and
    PAD beyond it; all earlier positions are free."""
    n = denoiser.cfg.seq_len
    if not 1 <= target_len <= n - 1:
        raise ValueError(f"target length outside [1, {n - 1}]")
    anchor_tokens = np.full(n, PAD_ID, dtype=np.int64)
    anchor_tokens[target_len] = END_ID
    anchor_mask = np.zeros(n, dtype=bool)
    anchor_mask[target_len:] = True
    return anchored_generate(denoiser, table, sched, anchor_mask, anchor_tokens,
                             sample_cfg, k)


# ---------------------------------------------------------------------------
# task files


def format_task(task: ControlTask, vocab=None) -> str:
    if task.kind == "semantic_content":
        f_name, value = task.payload
        return f"semantic_content field={f_name} value={value}"
    if task.kind == "token_tags":
        return "token_tags " + "|".join(task.payload)
    if task.kind == "span_label":
        i, j, name = task.payload
        return f"span_label start={i} end={j} label={name}"
    if task.kind == "length":
        return f"length {int(task.payload)}"
    if task.kind == "infill":
        left, right = task.payload
        lw = " ".join(vocab.words(left)) if vocab is not None else " ".join(map(str, left))
        rw = " ".join(vocab.words(right)) if vocab is not None else " ".join(map(str, right))
        return f'infill left="{lw}" right="{rw}" middle={task.middle_len}'
    if task.kind == "composite":
        return "composite [" + " ; ".join(format_task(t, vocab) for t in task.payload) + "]"
    raise ValueError(task.kind)


def parse_task(line: str, vocab=None) -> ControlTask:
    line = line.strip()
    kind, _, rest = line.partition(" ")
    if kind == "composite":
        inner = rest.strip()
        if not (inner.startswith("[") and inner.endswith("]")):
            raise ValueError(f"malformed composite task: {line!r}")
        subs = [parse_task(p.strip(), vocab) for p in inner[1:-1].split(";")]
        return ControlTask("composite", subs)
    if kind == "length":
        return ControlTask("length", int(rest))
    if kind == "token_tags":
        return ControlTask("token_tags", tuple(rest.strip().split("|")))
    kv = dict(item.split("=", 1) for item in shlex.split(rest))
    if kind == "semantic_content":
        return ControlTask("semantic_content", (kv["field"], kv["value"]))
    if kind == "span_label":
        return ControlTask("span_label", (int(kv["start"]), int(kv["end"]), kv["label"]))
    if kind == "infill":
        to_ids = (lambda s: vocab.ids(s.split())) if vocab is not None else \
            (lambda s: np.array([int(x) for x in s.split()], dtype=np.int64))
        return ControlTask("infill", (to_ids(kv["left"]), to_ids(kv["right"])),
                           middle_len=int(kv.get("middle", 0)))
    raise ValueError(f"unknown task kind {kind!r}")
