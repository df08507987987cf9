"""Synthetic corpora with exact likelihood oracles.

Sentences come from an unambiguous probabilistic regular grammar over
templated field=value clauses (restaurant-review flavored), so every control
task has ground truth: token tags, clause spans, field labels, and lengths
are all deterministic functions of the token sequence.

The oracle distribution is a mixture: with probability (1 - escape_prob) a
grammar sentence, with probability escape_prob a uniform draw over all
V^n sequences. The escape component keeps the likelihood of off-manifold
model outputs finite while changing the entropy by a negligible amount;
corpus sampling draws only the grammar component.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .embedding import END_ID, PAD_ID, UNK_ID, seq_length

RESERVED = ("<pad>", "<end>", "<unk>")


class Vocab:
    def __init__(self, tokens: list[str]):
        if tuple(tokens[:3]) != RESERVED:
            raise ValueError("vocab must start with <pad>, <end>, <unk>")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ValueError("duplicate vocab tokens")

    def __len__(self):
        return len(self.tokens)

    def ids(self, words) -> np.ndarray:
        return np.array([self.index.get(w, UNK_ID) for w in words], dtype=np.int64)

    def words(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path) as f:
            return cls([line.rstrip("\n") for line in f if line.strip()])


@dataclass(frozen=True)
class FieldSpec:
    name: str
    values: tuple[str, ...]
    probs: tuple[float, ...]
    include_prob: float = 1.0
    prefix: tuple[str, ...] = ()
    suffix: tuple[str, ...] = ()
    # value index per key-field value; when non-empty the field's value is a
    # deterministic function of the first field's value and probs must be ()
    keyed: tuple[int, ...] = ()

    def __post_init__(self):
        if self.keyed:
            if self.probs:
                raise ValueError(f"field {self.name}: keyed fields take no probs")
            if any(not 0 <= i < len(self.values) for i in self.keyed):
                raise ValueError(f"field {self.name}: keyed index out of range")
        else:
            if len(self.values) != len(self.probs):
                raise ValueError(f"field {self.name}: values/probs length mismatch")
            if abs(sum(self.probs) - 1.0) > 1e-9:
                raise ValueError(f"field {self.name}: probs must sum to 1")
        if not 0.0 < self.include_prob <= 1.0:
            raise ValueError(f"field {self.name}: include_prob outside (0, 1]")

    @property
    def width(self) -> int:
        return len(self.prefix) + 1 + len(self.suffix)

    @property
    def triggers(self) -> tuple[str, ...]:
        """Tokens whose appearance at the decision point signals inclusion."""
        return (self.prefix[0],) if self.prefix else self.values


@dataclass(frozen=True)
class CorpusSpec:
    name: str
    fields: tuple[FieldSpec, ...]
    seq_len: int = 16
    escape_prob: float = 1e-4

    def __post_init__(self):
        if sum(f.width for f in self.fields) + 1 > self.seq_len:
            raise ValueError("maximal sentence does not fit in seq_len")
        if any(f.keyed for f in self.fields):
            key = self.fields[0]
            if key.keyed or key.include_prob < 1.0:
                raise ValueError("key field must be first, mandatory, unkeyed")
            for f in self.fields[1:]:
                if f.keyed and len(f.keyed) != len(key.values):
                    raise ValueError(
                        f"field {f.name}: keyed map must cover every key value")
        # optional fields are recognized by their trigger token at the decision
        # point, so a later field's trigger may not collide with it
        for i, f in enumerate(self.fields):
            if f.include_prob == 1.0:
                continue
            later = set()
            for g in self.fields[i + 1:]:
                later.update(g.triggers)
            later.add("<end>")
            if set(f.triggers) & later:
                raise ValueError(f"field {f.name}: ambiguous grammar triggers")


_NAMES = (
    "amber", "basil", "canopy", "dahlia", "ember", "fable", "grove", "harbor",
    "iris", "juniper", "koral", "lumen", "meadow", "nectar", "opal", "pavilion",
    "quartz", "raven", "saffron", "tavern", "umber", "violet", "willow", "xenia",
    "yarrow", "zephyr", "anchor", "beacon", "cedar", "dune",
)
_FOODS = (
    "japanese", "italian", "mexican", "thai", "indian", "french", "greek",
    "korean", "chinese", "spanish", "turkish", "vietnamese", "lebanese",
    "ethiopian", "peruvian", "german", "brazilian", "moroccan", "russian", "cuban",
)
_AREAS = ("north", "south", "east", "west", "center", "uptown", "downtown",
          "riverside", "hillside", "harborside")
_PRICES = ("cheap", "budget", "moderate", "fair", "premium", "upscale",
           "lavish", "bargain")
_RATINGS = ("one", "two", "three", "four", "five", "six", "seven", "eight",
            "nine", "ten")
_GUESTS = ("families", "couples", "groups", "tourists")


def _geometric_probs(k: int, decay: float = 0.85) -> tuple[float, ...]:
    w = np.array([decay**i for i in range(k)])
    return tuple(w / w.sum())


def _uniform_probs(k: int) -> tuple[float, ...]:
    return tuple(np.full(k, 1.0 / k))


def easy_spec() -> CorpusSpec:
    return CorpusSpec(
        name="easy",
        fields=(
            FieldSpec("name", _NAMES, _geometric_probs(len(_NAMES), 0.95)),
            FieldSpec("food", _FOODS, _geometric_probs(len(_FOODS)),
                      include_prob=0.8, prefix=("serves",), suffix=("food",)),
            FieldSpec("area", _AREAS, _geometric_probs(len(_AREAS)),
                      include_prob=0.6, prefix=("in", "the"), suffix=("area",)),
            FieldSpec("price", _PRICES, _geometric_probs(len(_PRICES)),
                      include_prob=0.6, prefix=("costs",)),
            FieldSpec("rating", _RATINGS, _geometric_probs(len(_RATINGS)),
                      include_prob=0.7, prefix=("rated",)),
        ),
    )


def hard_spec() -> CorpusSpec:
    """Higher-entropy variant: uniform values, denser clauses, an extra field."""
    return CorpusSpec(
        name="hard",
        fields=(
            FieldSpec("name", _NAMES, _uniform_probs(len(_NAMES))),
            FieldSpec("food", _FOODS, _uniform_probs(len(_FOODS)),
                      include_prob=0.9, prefix=("serves",), suffix=("food",)),
            FieldSpec("area", _AREAS, _uniform_probs(len(_AREAS)),
                      include_prob=0.9, prefix=("in", "the"), suffix=("area",)),
            FieldSpec("price", _PRICES, _uniform_probs(len(_PRICES)),
                      include_prob=0.9, prefix=("costs",)),
            FieldSpec("rating", _RATINGS, _uniform_probs(len(_RATINGS)),
                      include_prob=0.9, prefix=("rated",)),
            FieldSpec("guests", _GUESTS, _uniform_probs(len(_GUESTS)),
                      include_prob=0.9, prefix=("welcomes",)),
        ),
    )


def micro_spec() -> CorpusSpec:
    """Tiny instance (V=5, n=4) for exhaustive normalization checks."""
    return CorpusSpec(
        name="micro",
        seq_len=4,
        fields=(
            FieldSpec("head", ("a", "b"), (0.7, 0.3)),
            FieldSpec("tail", ("a", "b"), (0.5, 0.5), include_prob=0.4),
        ),
    )


@dataclass
class Record:
    tokens: np.ndarray
    tags: tuple[str, ...]
    spans: tuple[tuple[int, int, str], ...]
    labels: dict[str, str]
    length: int  # tokens before END
    parsed: bool = True
    grammar_logprob: float = 0.0


class OracleCorpus:
    """Grammar generator + exact likelihood + deterministic annotators."""

    def __init__(self, spec: CorpusSpec):
        self.spec = spec
        words: list[str] = list(RESERVED)
        self._tag_of: dict[str, str] = {"<pad>": "PAD", "<end>": "END", "<unk>": "UNK"}
        for f in spec.fields:
            for w in f.prefix + f.suffix:
                if w not in self._tag_of:
                    words.append(w)
                    self._tag_of[w] = "W_" + w
            for v in f.values:
                if v not in self._tag_of:
                    words.append(v)
                    self._tag_of[v] = f.name.upper()
        self.vocab = Vocab(words)
        self.seq_len = spec.seq_len

    # -- generation ---------------------------------------------------------

    def sample_record(self, rng: np.random.Generator) -> Record:
        words: list[str] = []
        spans: list[tuple[int, int, str]] = []
        labels: dict[str, str] = {}
        key_vi = 0
        for f in self.spec.fields:
            if f.include_prob < 1.0 and rng.random() >= f.include_prob:
                continue
            start = len(words)
            if f.keyed:
                vi = f.keyed[key_vi]
            else:
                vi = rng.choice(len(f.values), p=f.probs)
            if f is self.spec.fields[0]:
                key_vi = vi
            value = f.values[vi]
            words.extend(f.prefix)
            words.append(value)
            words.extend(f.suffix)
            spans.append((start, len(words), f.name))
            labels[f.name] = value
        length = len(words)
        words.append("<end>")
        words.extend(["<pad>"] * (self.seq_len - len(words)))
        tokens = self.vocab.ids(words)
        return Record(tokens, self.tags(tokens), tuple(spans), labels, length)

    def sample_tokens(self, rng: np.random.Generator, k: int) -> np.ndarray:
        return np.stack([self.sample_record(rng).tokens for _ in range(k)])

    # -- annotation ---------------------------------------------------------

    def tags(self, tokens: np.ndarray) -> tuple[str, ...]:
        return tuple(self._tag_of[w] for w in self.vocab.words(tokens))

    def parse(self, tokens: np.ndarray) -> Record | None:
        """Recover the unique derivation, or None if the sequence is not in
        the grammar (including END/PAD convention violations)."""
        words = self.vocab.words(tokens)
        pos = 0
        logp = 0.0
        spans: list[tuple[int, int, str]] = []
        labels: dict[str, str] = {}
        key_vi = 0
        for f in self.spec.fields:
            included = pos < len(words) and words[pos] in f.triggers
            if f.include_prob < 1.0:
                logp += math.log(f.include_prob if included else 1.0 - f.include_prob)
            elif not included:
                return None
            if not included:
                continue
            start = pos
            for w in f.prefix:
                if pos >= len(words) or words[pos] != w:
                    return None
                pos += 1
            if pos >= len(words) or words[pos] not in f.values:
                return None
            vi = f.values.index(words[pos])
            if f.keyed:
                # value is determined by the key; any other value is off-grammar
                if vi != f.keyed[key_vi]:
                    return None
            else:
                logp += math.log(f.probs[vi])
            if f is self.spec.fields[0]:
                key_vi = vi
            labels[f.name] = words[pos]
            pos += 1
            for w in f.suffix:
                if pos >= len(words) or words[pos] != w:
                    return None
                pos += 1
            spans.append((start, pos, f.name))
        length = pos
        if pos >= len(words) or words[pos] != "<end>":
            return None
        pos += 1
        if any(w != "<pad>" for w in words[pos:]):
            return None
        return Record(np.asarray(tokens), self.tags(tokens), tuple(spans), labels,
                      length, grammar_logprob=logp)

    def annotate(self, tokens: np.ndarray) -> Record:
        rec = self.parse(tokens)
        if rec is not None:
            return rec
        return Record(np.asarray(tokens), self.tags(tokens), (), {},
                      seq_length(tokens), parsed=False)

    # -- exact likelihood ---------------------------------------------------

    def exact_nll(self, tokens: np.ndarray) -> float:
        """-log P(tokens) under the escape-smoothed oracle mixture."""
        eta = self.spec.escape_prob
        log_pe = -self.seq_len * math.log(len(self.vocab))
        rec = self.parse(tokens)
        terms = [math.log(eta) + log_pe]
        if rec is not None:
            terms.append(math.log1p(-eta) + rec.grammar_logprob)
        m = max(terms)
        return -(m + math.log(sum(math.exp(x - m) for x in terms)))

    def entropy_estimate(self, rng: np.random.Generator, k: int = 50_000) -> float:
        """Mean oracle NLL per position of fresh generator samples."""
        nll = [self.exact_nll(self.sample_record(rng).tokens) for _ in range(k)]
        return float(np.mean(nll)) / self.seq_len


class UniformCorpus:
    """Fixed-length uniform word sequences terminated by END; the exact
    per-sequence likelihood is (num_words)^-(n-1)."""

    def __init__(self, num_words: int = 26, seq_len: int = 16):
        words = list(RESERVED) + [f"w{i}" for i in range(num_words)]
        self.vocab = Vocab(words)
        self.num_words = num_words
        self.seq_len = seq_len

    def sample_record(self, rng: np.random.Generator) -> Record:
        ids = rng.integers(3, 3 + self.num_words, size=self.seq_len - 1)
        tokens = np.concatenate([ids, [END_ID]])
        tags = tuple("WORD" for _ in ids) + ("END",)
        return Record(tokens, tags, (), {}, self.seq_len - 1)

    def sample_tokens(self, rng: np.random.Generator, k: int) -> np.ndarray:
        return np.stack([self.sample_record(rng).tokens for _ in range(k)])

    def exact_nll(self, tokens: np.ndarray) -> float:
        tokens = np.asarray(tokens)
        ok = tokens[-1] == END_ID and np.all(tokens[:-1] >= 3)
        if not ok:
            return math.inf
        return (self.seq_len - 1) * math.log(self.num_words)

    def entropy_estimate(self, rng=None, k: int = 0) -> float:
        return (self.seq_len - 1) * math.log(self.num_words) / self.seq_len


@dataclass
class CorpusSplits:
    corpus: OracleCorpus
    train: list[Record]
    dev: list[Record]
    test: list[Record]

    def tokens(self, split: str) -> np.ndarray:
        return np.stack([r.tokens for r in getattr(self, split)])


def generate_corpus(spec: CorpusSpec, seed: int,
                    sizes: tuple[int, int, int] = (4096, 512, 512)) -> CorpusSplits:
    corpus = OracleCorpus(spec)
    rng = np.random.default_rng(seed)
    splits = [[corpus.sample_record(rng) for _ in range(k)] for k in sizes]
    return CorpusSplits(corpus, *splits)


# -- metrics ---------------------------------------------------------------


def lm_score(samples: np.ndarray, scorer) -> float:
    """Mean per-position NLL of sample sequences.

    scorer: an oracle corpus (exact_nll) or a trained teacher (nll)."""
    samples = np.atleast_2d(np.asarray(samples))
    if samples.shape[0] == 0:
        raise ValueError("lm_score needs a non-empty sample set")
    if hasattr(scorer, "exact_nll"):
        total = sum(scorer.exact_nll(s) for s in samples)
    else:
        total = float(sum(scorer.nll(samples)))
    return total / (samples.shape[0] * samples.shape[1])


def control_success(task, outputs: np.ndarray, corpus: OracleCorpus) -> float:
    """Task-specific success rate over output sequences, judged against the
    grammar's ground-truth annotators."""
    outputs = np.atleast_2d(np.asarray(outputs))
    if outputs.shape[0] == 0:
        raise ValueError("control_success needs non-empty outputs")
    scores = []
    for out in outputs:
        rec = corpus.annotate(out)
        scores.append(_task_score(task, out, rec, corpus))
    return float(np.mean(scores))


def _task_score(task, out: np.ndarray, rec: Record, corpus: OracleCorpus) -> float:
    kind = task.kind
    if kind == "semantic_content":
        value_id = corpus.vocab.index[task.payload[1]]
        return float(value_id in out)
    if kind == "token_tags":
        target = task.payload
        tags = rec.tags
        m = min(len(target), len(tags))
        return float(np.mean([tags[i] == target[i] for i in range(m)]))
    if kind == "span_label":
        return float(tuple(task.payload) in rec.spans)
    if kind == "length":
        return float(abs(rec.length - int(task.payload)) <= 2)
    if kind == "infill":
        left, right = task.payload
        n_l, n_r = len(left), len(right)
        return float(
            np.array_equal(out[:n_l], left)
            and np.array_equal(out[n_l + task.middle_len:n_l + task.middle_len + n_r], right)
        )
    if kind == "composite":
        return float(np.mean([_task_score(t, out, rec, corpus) for t in task.payload]))
    raise ValueError(f"unknown task kind {kind!r}")


# -- corpus files ----------------------------------------------------------


def save_records(path, records: list[Record], vocab: Vocab) -> None:
    with open(path, "w") as f:
        for r in records:
            toks = "|".join(vocab.words(r.tokens))
            tags = "|".join(r.tags)
            spans = ";".join(f"{i}:{j}:{n}" for i, j, n in r.spans)
            labels = ";".join(f"{k}={v}" for k, v in r.labels.items())
            f.write(f"tokens={toks}\ttags={tags}\tspans={spans}\t"
                    f"labels={labels}\tlen={r.length}\n")


def load_records(path, vocab: Vocab) -> list[Record]:
    records = []
    with open(path) as f:
        for line in f:
            fields = dict(kv.split("=", 1) for kv in line.rstrip("\n").split("\t"))
            tokens = vocab.ids(fields["tokens"].split("|"))
            tags = tuple(fields["tags"].split("|"))
            spans = tuple(
                (int(i), int(j), n)
                for i, j, n in (s.split(":") for s in fields["spans"].split(";") if s)
            )
            labels = dict(kv.split("=", 1) for kv in fields["labels"].split(";") if fields["labels"])
            records.append(Record(tokens, tags, spans, labels, int(fields["len"])))
    return records
