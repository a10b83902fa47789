"""Masked-token candidate sources: an offline count-based predictor and a
loader for externally produced logits files."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .intervene import CandidateTrigger, MaskedContext
from .model import TokenSequence

log = logging.getLogger(__name__)

BOS = "<s>"
EOS = "</s>"


class PredictorError(ValueError):
    """Invalid predictor construction or logits file."""


@dataclass
class CountPredictor:
    """Adjacent-bigram evidence with add-k smoothing.

    A candidate token v for a mask with neighbors (prev, next) scores
    log(count(prev, v) + k) + log(count(v, next) + k); sentence boundaries
    contribute reserved markers. Deterministic and order-invariant over the
    fitting corpus.
    """

    vocabulary: tuple[str, ...]
    k: float
    left: dict[str, dict[str, int]] = field(repr=False)   # prev -> token -> count
    right: dict[str, dict[str, int]] = field(repr=False)  # next -> token -> count
    unigram: dict[str, int] = field(repr=False)

    def __post_init__(self) -> None:
        if self.k <= 0:
            raise PredictorError("smoothing constant k must be > 0")
        self._token_index = {t: i for i, t in enumerate(self.vocabulary)}

    def logits(self, prev: str, nxt: str) -> np.ndarray:
        """Score every vocabulary token for a (prev, next) mask slot."""
        n = len(self.vocabulary)
        left_counts = np.zeros(n)
        for token, count in self.left.get(prev.lower(), {}).items():
            left_counts[self._token_index[token]] = count
        right_counts = np.zeros(n)
        for token, count in self.right.get(nxt.lower(), {}).items():
            right_counts[self._token_index[token]] = count
        return np.log(left_counts + self.k) + np.log(right_counts + self.k)


def fit_counts(corpus: Sequence[TokenSequence | Sequence[str]], k: float = 1.0) -> CountPredictor:
    """Accumulate unigram and adjacent-bigram counts over the corpus."""
    if k <= 0:
        raise PredictorError("smoothing constant k must be > 0")
    if not corpus:
        raise PredictorError("empty corpus")
    left: dict[str, dict[str, int]] = {}
    right: dict[str, dict[str, int]] = {}
    unigram: dict[str, int] = {}

    def bump(table: dict[str, dict[str, int]], key: str, token: str) -> None:
        row = table.setdefault(key, {})
        row[token] = row.get(token, 0) + 1

    for seq in corpus:
        tokens = [
            t.lower()
            for t in (seq.tokens if isinstance(seq, TokenSequence) else seq)
        ]
        padded = [BOS] + tokens + [EOS]
        for i, token in enumerate(tokens):
            unigram[token] = unigram.get(token, 0) + 1
            bump(left, padded[i], token)
            bump(right, padded[i + 2], token)
    vocabulary = tuple(sorted(unigram))
    return CountPredictor(vocabulary, k, left, right, unigram)


def predict_candidates(
    model: CountPredictor,
    masked: MaskedContext,
    top_n: int,
) -> list[CandidateTrigger]:
    """Top-n single-token candidates for the mask slot, scored from the tokens
    adjacent to the mask; ties broken lexicographically, the original trigger
    surface excluded."""
    if top_n < 0:
        raise PredictorError("top_n must be non-negative")
    if top_n == 0:
        return []
    i = masked.mask_index
    prev = masked.tokens[i - 1] if i > 0 else BOS
    nxt = masked.tokens[i + 1] if i + 1 < len(masked.tokens) else EOS
    logits = model.logits(prev, nxt)
    original = tuple(t.lower() for t in masked.original_trigger)
    ranked = sorted(
        (
            (-logit, token)
            for token, logit in zip(model.vocabulary, logits)
            if (token,) != original
        ),
    )
    return [
        CandidateTrigger((token,), -neg_logit, is_original=False)
        for neg_logit, token in ranked[:top_n]
    ]


def count_candidate_fn(model: CountPredictor):
    """Adapt a CountPredictor to the (masked, top_n) callable the loss layer uses."""

    def fn(masked: MaskedContext, top_n: int) -> list[CandidateTrigger]:
        return predict_candidates(model, masked, top_n)

    return fn


def save_predictor(model: CountPredictor, path) -> None:
    payload = {
        "format": "fsed-count-predictor v1",
        "k": model.k,
        "vocabulary": list(model.vocabulary),
        "left": model.left,
        "right": model.right,
        "unigram": model.unigram,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_predictor(path) -> CountPredictor:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != "fsed-count-predictor v1":
        raise PredictorError(f"{path}: not a serialized count predictor")
    return CountPredictor(
        vocabulary=tuple(payload["vocabulary"]),
        k=float(payload["k"]),
        left={p: {t: int(c) for t, c in row.items()} for p, row in payload["left"].items()},
        right={p: {t: int(c) for t, c in row.items()} for p, row in payload["right"].items()},
        unigram={t: int(c) for t, c in payload["unigram"].items()},
    )


# ---------------------------------------------------------------------------
# External logits files
# ---------------------------------------------------------------------------

def load_external_logits(path) -> dict[str, list[CandidateTrigger]]:
    """Parse a logits JSONL file: one {"id", "candidates": [{token, logit}...]}
    object per line, candidates sorted by logit descending with unique
    surfaces. Unknown extra fields are ignored."""
    records: dict[str, list[CandidateTrigger]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise PredictorError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            try:
                rid = str(record["id"])
                raw = [(str(c["token"]), float(c["logit"])) for c in record["candidates"]]
            except (KeyError, TypeError) as exc:
                raise PredictorError(f"{path}:{lineno}: malformed record ({exc})") from exc
            logits = [logit for _, logit in raw]
            if any(a < b for a, b in zip(logits, logits[1:])):
                raise PredictorError(f"{path}:{lineno}: candidates not sorted")
            surfaces = [token for token, _ in raw]
            if len(set(surfaces)) != len(surfaces):
                raise PredictorError(f"{path}:{lineno}: duplicate candidate surfaces")
            if rid in records:
                raise PredictorError(f"{path}:{lineno}: duplicate id {rid!r}")
            records[rid] = [
                CandidateTrigger((token,), logit, is_original=False)
                for token, logit in raw
            ]
    return records


class ExternalCandidateSource:
    """Serve per-instance candidates from a loaded logits file.

    Candidates matching the masked context's original trigger are dropped at
    use time; a counter tracks how many were discarded.
    """

    def __init__(self, records: Mapping[str, list[CandidateTrigger]]):
        self.records = dict(records)
        self.dropped_originals = 0

    def __call__(self, masked: MaskedContext, top_n: int) -> list[CandidateTrigger]:
        if masked.source_id not in self.records:
            raise PredictorError(f"unknown instance id {masked.source_id!r} in logits file")
        original = tuple(t.lower() for t in masked.original_trigger)
        out = []
        for cand in self.records[masked.source_id]:
            if tuple(t.lower() for t in cand.surface) == original:
                self.dropped_originals += 1
                log.warning(
                    "dropping original-trigger candidate %r for instance %s",
                    cand.surface, masked.source_id,
                )
                continue
            out.append(cand)
        return out[:top_n]


# ---------------------------------------------------------------------------
# Masked-instances export (input for the external logits producer)
# ---------------------------------------------------------------------------

def write_masked_instances(contexts: Iterable[MaskedContext], path) -> int:
    """One JSON object per masked context. The original trigger rides along as
    an extra field so exporters can pre-drop it; consumers that only know the
    core schema ignore it."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ctx in contexts:
            record = {
                "id": ctx.source_id,
                "tokens": list(ctx.tokens),
                "mask_index": ctx.mask_index,
                "original": list(ctx.original_trigger),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            count += 1
    return count
