"""Metric-based few-shot token classifier: windowed encoder, prototypes,
similarity heads, token softmax, Adam updates and IO-span decoding."""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
MASK_TOKEN = "[MASK]"
RESERVED_TOKENS = (PAD_TOKEN, UNK_TOKEN, MASK_TOKEN)
PAD_ID, UNK_ID, MASK_ID = 0, 1, 2

PARAM_NAMES = ("embedding", "enc_w", "enc_b", "rel_w1", "rel_b1", "rel_w2", "rel_b2")


class DegenerateSupportError(ValueError):
    """Raised when a support set has no tokens for one of the two classes."""


class SimilarityKind(str, Enum):
    PROTO = "proto"
    RELATION = "relation"


@dataclass(frozen=True)
class TokenSequence:
    """A tokenized sentence, optionally with binary trigger labels."""

    tokens: tuple[str, ...]
    labels: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.labels is not None:
            labels = tuple(int(x) for x in self.labels)
            if len(labels) != len(self.tokens):
                raise ValueError("labels and tokens must have the same length")
            if any(x not in (0, 1) for x in labels):
                raise ValueError("labels must be 0 or 1")
            object.__setattr__(self, "labels", labels)


class Vocab:
    """Token-to-id mapping with reserved [PAD]/[UNK]/[MASK] slots.

    Lookups are lowercased except for the reserved literals themselves.
    """

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:3]) != RESERVED_TOKENS:
            tokens = list(RESERVED_TOKENS) + [t for t in tokens if t not in RESERVED_TOKENS]
        self.tokens: tuple[str, ...] = tuple(tokens)
        self._index = {t: i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, corpus_tokens: Iterable[str]) -> "Vocab":
        seen = sorted({t.lower() for t in corpus_tokens} - set(RESERVED_TOKENS))
        return cls(list(RESERVED_TOKENS) + seen)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        if token in (PAD_TOKEN, UNK_TOKEN, MASK_TOKEN):
            return self._index[token]
        return self._index.get(token.lower(), UNK_ID)

    def ids(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.id(t) for t in tokens], dtype=int)


@dataclass(frozen=True)
class ModelParams:
    """All trainable weights plus the vocabulary they index.

    Arrays are read-only; updates produce a new instance.
    """

    vocab: Vocab
    embedding: np.ndarray
    enc_w: np.ndarray
    enc_b: np.ndarray
    rel_w1: np.ndarray
    rel_b1: np.ndarray
    rel_w2: np.ndarray
    rel_b2: np.ndarray
    d_emb: int
    d_rep: int
    d_hid: int
    window: int

    def __post_init__(self) -> None:
        span = 2 * self.window + 1
        expected = {
            "embedding": (len(self.vocab), self.d_emb),
            "enc_w": (span * self.d_emb, self.d_rep),
            "enc_b": (self.d_rep,),
            "rel_w1": (3 * self.d_rep, self.d_hid),
            "rel_b1": (self.d_hid,),
            "rel_w2": (self.d_hid, 1),
            "rel_b2": (1,),
        }
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "ModelParams":
        return replace(self, **tensors)


def init_params(
    vocab: Vocab,
    rng: np.random.Generator,
    d_emb: int = 32,
    d_rep: int = 32,
    d_hid: int = 64,
    window: int = 2,
) -> ModelParams:
    """Uniform Glorot init for matrices, [-0.1, 0.1] for embeddings, zero biases."""

    def glorot(fan_in: int, fan_out: int) -> np.ndarray:
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_in, fan_out))

    span = 2 * window + 1
    return ModelParams(
        vocab=vocab,
        embedding=rng.uniform(-0.1, 0.1, size=(len(vocab), d_emb)),
        enc_w=glorot(span * d_emb, d_rep),
        enc_b=np.zeros(d_rep),
        rel_w1=glorot(3 * d_rep, d_hid),
        rel_b1=np.zeros(d_hid),
        rel_w2=glorot(d_hid, 1),
        rel_b2=np.zeros(1),
        d_emb=d_emb,
        d_rep=d_rep,
        d_hid=d_hid,
        window=window,
    )


def init_params_structured(
    vocab: Vocab,
    rng: np.random.Generator,
    d_emb: int = 16,
    d_rep: int = 96,
    d_hid: int = 64,
    window: int = 2,
    center_frac: float = 0.5,
    scale: float = 3.0,
) -> ModelParams:
    """Slot-structured encoder init: each window slot projects into its own
    block of representation dimensions (center gets `center_frac` of them),
    off-block weights start at zero.

    Dense uniform init empirically cannot escape type-memorizing optima on
    episodic training; starting in the slot-matching basin can. Training is
    free to fill the off-blocks afterwards.
    """
    params = init_params(vocab, rng, d_emb=d_emb, d_rep=d_rep, d_hid=d_hid, window=window)
    slots = 2 * window + 1
    center = window
    d_center = int(d_rep * center_frac)
    d_slot = (d_rep - d_center) // (slots - 1)
    enc_w = np.zeros((slots * d_emb, d_rep))
    col = 0
    for s in range(slots):
        if s == center:
            continue
        a = np.sqrt(6.0 / (d_emb + d_slot))
        enc_w[s * d_emb : (s + 1) * d_emb, col : col + d_slot] = rng.uniform(
            -a, a, (d_emb, d_slot)
        )
        col += d_slot
    a = np.sqrt(6.0 / (d_emb + d_center))
    enc_w[center * d_emb : (center + 1) * d_emb, col : col + d_center] = rng.uniform(
        -a, a, (d_emb, d_center)
    )
    return params.with_tensors({"enc_w": enc_w * scale})


def distributional_embeddings(
    vocab: Vocab,
    sentences: Iterable[Sequence[str]],
    d_emb: int,
    window: int = 2,
    n_features: int | None = None,
) -> np.ndarray:
    """Unsupervised embedding table from windowed co-occurrence.

    Positive PMI over (neighbor token, offset) features, reduced by SVD and
    row-normalized: words sharing contexts land close together, the desk-scale
    stand-in for a pretrained encoder's semantic space. Reserved rows are
    scaled to near-zero.
    """
    if n_features is None:
        n_features = 2 * window * 50
    counts = np.zeros((len(vocab), n_features))
    for sentence in sentences:
        ids = vocab.ids(sentence if not isinstance(sentence, TokenSequence) else sentence.tokens)
        n = len(ids)
        for j in range(n):
            for off in range(-window, window + 1):
                if off == 0 or not 0 <= j + off < n:
                    continue
                slot = off + window if off < 0 else off + window - 1
                feature = (ids[j + off] * 2 * window + slot) % n_features
                counts[ids[j], feature] += 1
    row = counts.sum(axis=1, keepdims=True)
    col = counts.sum(axis=0, keepdims=True)
    total = counts.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.log(counts * total / (row * col))
    pmi[~np.isfinite(pmi)] = 0.0
    pmi = np.maximum(pmi, 0.0)
    u, s, _ = np.linalg.svd(pmi, full_matrices=False)
    emb = u[:, :d_emb] * np.sqrt(s[:d_emb])
    emb = emb / (np.linalg.norm(emb, axis=1, keepdims=True) + 1e-9) * 0.5
    emb[:len(RESERVED_TOKENS)] *= 0.01
    return emb


def window_token_ids(ids: np.ndarray, window: int) -> np.ndarray:
    """(n, 2w+1) matrix of token ids: row j is the PAD-padded window around j."""
    n = len(ids)
    padded = np.full(n + 2 * window, PAD_ID, dtype=int)
    padded[window : window + n] = ids
    take = np.arange(2 * window + 1)[None, :] + np.arange(n)[:, None]
    return padded[take]


def encode_windows(params: ModelParams, windows: np.ndarray) -> np.ndarray:
    """One representation per window row: tanh(W . concat(embeddings) + b)."""
    flat = params.embedding[windows].reshape(windows.shape[0], -1)
    return np.tanh(flat @ params.enc_w + params.enc_b)


def encode(params: ModelParams, seq: TokenSequence | Sequence[str]) -> np.ndarray:
    """Representations for every token; position j sees tokens [j-w, j+w] only."""
    tokens = seq.tokens if isinstance(seq, TokenSequence) else tuple(seq)
    ids = params.vocab.ids(tokens)
    if len(ids) == 0:
        return np.zeros((0, params.d_rep))
    return encode_windows(params, window_token_ids(ids, params.window))


@dataclass(frozen=True)
class Prototype:
    p0: np.ndarray
    p1: np.ndarray


def prototypes(
    reps: np.ndarray | Sequence[np.ndarray],
    labels: Sequence[int] | Sequence[Sequence[int]],
) -> Prototype:
    """Class prototypes as the pooled mean of token representations per label."""
    if isinstance(reps, np.ndarray):
        reps_list = [reps]
        labels_list = [labels]
    else:
        reps_list = list(reps)
        labels_list = list(labels)
    stacked = np.concatenate([np.asarray(r) for r in reps_list], axis=0)
    flat_labels = np.concatenate([np.asarray(l, dtype=int) for l in labels_list])
    if stacked.shape[0] != flat_labels.shape[0]:
        raise ValueError("labels and representations are misaligned")
    mask1 = flat_labels == 1
    if not mask1.any() or mask1.all():
        raise DegenerateSupportError("degenerate support")
    return Prototype(p0=stacked[~mask1].mean(axis=0), p1=stacked[mask1].mean(axis=0))


def similarity(kind: SimilarityKind, params: ModelParams, p: np.ndarray, q: np.ndarray) -> float:
    """Score one (prototype, token) pair: negative squared Euclidean distance
    for the prototypical head, the two-layer ReLU net on [p; q; |p-q|] for the
    relation head."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != (params.d_rep,) or q.shape != (params.d_rep,):
        raise ValueError(f"expected vectors of dimension {params.d_rep}")
    if kind == SimilarityKind.PROTO:
        diff = p - q
        return float(-(diff @ diff))
    feats = np.concatenate([p, q, np.abs(p - q)])
    hidden = np.maximum(feats @ params.rel_w1 + params.rel_b1, 0.0)
    return float((hidden @ params.rel_w2 + params.rel_b2)[0])


def pair_scores(
    kind: SimilarityKind, params: ModelParams, proto: Prototype, reps: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized (s0, s1) scores for a matrix of token representations."""
    if kind == SimilarityKind.PROTO:
        d0 = reps - proto.p0
        d1 = reps - proto.p1
        return -(d0 * d0).sum(axis=1), -(d1 * d1).sum(axis=1)
    n = reps.shape[0]
    scores = []
    for p in (proto.p0, proto.p1):
        feats = np.concatenate([np.tile(p, (n, 1)), reps, np.abs(reps - p)], axis=1)
        hidden = np.maximum(feats @ params.rel_w1 + params.rel_b1, 0.0)
        scores.append((hidden @ params.rel_w2 + params.rel_b2)[:, 0])
    return scores[0], scores[1]


def classify_token(s0: float, s1: float) -> tuple[float, float]:
    """Softmax over the two class scores."""
    m = max(s0, s1)
    e0 = np.exp(s0 - m)
    e1 = np.exp(s1 - m)
    z = e0 + e1
    return float(e0 / z), float(e1 / z)


def token_losses(s0: np.ndarray, s1: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-token cross-entropy -log P(gold), computed stably."""
    flip = 1.0 - 2.0 * labels
    return np.logaddexp(0.0, (s1 - s0) * flip)


def episode_loss(
    params: ModelParams,
    proto: Prototype,
    queries: Sequence[TokenSequence],
    kind: SimilarityKind = SimilarityKind.PROTO,
) -> float:
    """Mean cross-entropy over every token of every labeled query."""
    losses = []
    for query in queries:
        if query.labels is None:
            raise ValueError("queries must carry gold labels")
        reps = encode(params, query)
        s0, s1 = pair_scores(kind, params, proto, reps)
        losses.append(token_losses(s0, s1, np.asarray(query.labels, dtype=float)))
    if not losses:
        raise ValueError("no query tokens")
    return float(np.concatenate(losses).mean())


def decode_spans(tags: Sequence[int]) -> list[tuple[int, int]]:
    """Maximal runs of 1s as (start, end-exclusive) spans."""
    spans = []
    start = None
    for i, tag in enumerate(tags):
        if tag == 1 and start is None:
            start = i
        elif tag != 1 and start is not None:
            spans.append((start, i))
            start = None
    if start is not None:
        spans.append((start, len(tags)))
    return spans


def spans_to_tags(spans: Iterable[tuple[int, int]], length: int) -> list[int]:
    tags = [0] * length
    for start, end in spans:
        for i in range(start, end):
            tags[i] = 1
    return tags


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def init(cls, params: ModelParams) -> "AdamState":
        zeros = {name: np.zeros_like(arr) for name, arr in params.tensors().items()}
        return cls(step=0, m=zeros, v={k: v.copy() for k, v in zeros.items()})


def update_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> tuple[ModelParams, AdamState]:
    """Adam with bias correction; decoupled weight decay is applied to the
    parameters before the Adam delta."""
    t = state.step + 1
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    new_tensors: dict[str, np.ndarray] = {}
    for name, p in params.tensors().items():
        g = np.asarray(grads[name], dtype=float)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}: {g.shape} vs {p.shape}")
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        decayed = p * (1.0 - lr * weight_decay)
        new_tensors[name] = decayed - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_m[name] = m
        new_v[name] = v
    return params.with_tensors(new_tensors), AdamState(step=t, m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# Textual parameter snapshots
# ---------------------------------------------------------------------------

def save_params(params: ModelParams, path) -> None:
    """Write a flat textual snapshot: dims, vocabulary, then each tensor with
    shape header and row-major shortest-round-trip decimals."""
    lines = ["fsed-params v1"]
    lines.append(f"dims {params.d_emb} {params.d_rep} {params.d_hid} {params.window}")
    lines.append(f"vocab {len(params.vocab)}")
    lines.extend(params.vocab.tokens)
    for name, arr in params.tensors().items():
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {dims}")
        flat = arr.reshape(-1)
        lines.append(" ".join(repr(float(x)) for x in flat))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(path) -> ModelParams:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "fsed-params v1":
        raise ValueError(f"{path}: not a parameter snapshot")
    d_emb, d_rep, d_hid, window = (int(x) for x in lines[1].split()[1:])
    vocab_size = int(lines[2].split()[1])
    vocab = Vocab(lines[3 : 3 + vocab_size])
    cursor = 3 + vocab_size
    tensors: dict[str, np.ndarray] = {}
    while cursor < len(lines):
        header = lines[cursor].split()
        if header[0] != "tensor":
            raise ValueError(f"{path}: malformed tensor header at line {cursor + 1}")
        name = header[1]
        shape = tuple(int(x) for x in header[2:])
        values = np.array([float(x) for x in lines[cursor + 1].split()])
        tensors[name] = values.reshape(shape)
        cursor += 2
    missing = set(PARAM_NAMES) - set(tensors)
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")
    return ModelParams(
        vocab=vocab, d_emb=d_emb, d_rep=d_rep, d_hid=d_hid, window=window, **tensors
    )
