"""Causal-intervention machinery: trigger masking, the smoothed trigger
posterior, weighted instance expansion, and backdoor-adjusted prototypes.

The driving idea: instead of trusting the observed support triggers, mask
them, ask a contextual predictor for plausible substitutes, and average the
support representations over that candidate distribution. The original
trigger keeps a reserved probability mass (lambda); with lambda = 1 the whole
pipeline collapses to the unadjusted baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .data import EventInstance
from .model import (
    MASK_TOKEN,
    ModelParams,
    Prototype,
    TokenSequence,
    encode_windows,
    window_token_ids,
)

WEIGHT_TOL = 1e-12


class InterventionError(ValueError):
    """Invalid masking, posterior, or expansion request."""


class Side(str, Enum):
    NONE = "none"
    SUPPORT = "support"
    QUERY = "query"
    BOTH = "both"


class CandidateMode(str, Enum):
    PER_INSTANCE = "per-instance"
    POOLED = "pooled"


@dataclass(frozen=True)
class MaskedContext:
    """A sentence with one trigger span collapsed to a single mask token."""

    tokens: tuple[str, ...]
    mask_index: int
    original_trigger: tuple[str, ...]
    source_id: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "original_trigger", tuple(self.original_trigger))
        if sum(1 for t in self.tokens if t == MASK_TOKEN) != 1:
            raise InterventionError("masked context must contain exactly one mask token")
        if self.tokens[self.mask_index] != MASK_TOKEN:
            raise InterventionError("mask_index does not point at the mask token")
        if not self.original_trigger:
            raise InterventionError("original trigger must be non-empty")


@dataclass(frozen=True)
class CandidateTrigger:
    surface: tuple[str, ...]
    logit: float
    is_original: bool

    def __post_init__(self) -> None:
        object.__setattr__(self, "surface", tuple(self.surface))
        if not self.surface:
            raise InterventionError("candidate surface must be non-empty")
        if not self.is_original and len(self.surface) != 1:
            raise InterventionError("predicted candidates must be single tokens")


@dataclass(frozen=True)
class TriggerPosterior:
    """Distribution over candidate triggers for one masked context: the
    original keeps mass lambda, the rest is softmax over predicted logits."""

    candidates: tuple[CandidateTrigger, ...]
    weights: tuple[float, ...]
    lam: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.candidates) != len(self.weights):
            raise InterventionError("candidates and weights are misaligned")
        originals = [c for c in self.candidates if c.is_original]
        if len(originals) != 1:
            raise InterventionError("posterior must contain exactly one original candidate")
        if any(w < 0 for w in self.weights):
            raise InterventionError("negative posterior weight")
        if abs(sum(self.weights) - 1.0) > WEIGHT_TOL:
            raise InterventionError("posterior weights must sum to 1")
        if len(self.candidates) > 1:
            w_orig = self.weights[
                next(i for i, c in enumerate(self.candidates) if c.is_original)
            ]
            if abs(w_orig - self.lam) > WEIGHT_TOL:
                raise InterventionError("original candidate must carry the lambda mass")


@dataclass(frozen=True)
class WeightedInstance:
    """A candidate-substituted support sentence with its expansion weight."""

    tokens: tuple[str, ...]
    span: tuple[int, int]
    weight: float
    source_id: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        start, end = self.span
        if not (0 <= start < end <= len(self.tokens)):
            raise InterventionError("trigger span out of range")
        if self.weight <= 0:
            raise InterventionError("instance weight must be positive")


@dataclass(frozen=True)
class InterventionConfig:
    lam: float = 0.5
    top_n: int = 10
    side: Side = Side.SUPPORT
    candidate_mode: CandidateMode = CandidateMode.PER_INSTANCE

    def __post_init__(self) -> None:
        if not 0.0 < self.lam <= 1.0:
            raise InterventionError("lambda must be in (0, 1]")
        if self.top_n < 0:
            raise InterventionError("top_n must be non-negative")

    @property
    def adjusts_support(self) -> bool:
        return self.side in (Side.SUPPORT, Side.BOTH)

    @property
    def adjusts_query(self) -> bool:
        return self.side in (Side.QUERY, Side.BOTH)


CandidateFn = Callable[[MaskedContext, int], list[CandidateTrigger]]


def mask_trigger(instance: EventInstance, event_type: str) -> MaskedContext:
    """Replace the instance's single concerned-event span (even multi-token)
    with one mask token."""
    spans = instance.spans_of(event_type)
    if len(spans) != 1:
        raise InterventionError(
            f"instance {instance.id} has {len(spans)} trigger spans of type "
            f"{event_type!r}; masking needs exactly one"
        )
    span = spans[0]
    tokens = (
        instance.tokens[: span.start] + (MASK_TOKEN,) + instance.tokens[span.end :]
    )
    return MaskedContext(
        tokens=tokens,
        mask_index=span.start,
        original_trigger=instance.tokens[span.start : span.end],
        source_id=instance.id,
    )


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def trigger_posterior(
    original: CandidateTrigger,
    predicted: Sequence[CandidateTrigger],
    lam: float,
) -> TriggerPosterior:
    """lambda on the original; (1 - lambda) spread over the predicted
    candidates by softmax of their logits. No predicted candidates means a
    point mass on the original regardless of lambda."""
    if not 0.0 < lam <= 1.0:
        raise InterventionError("lambda must be in (0, 1]")
    if not original.is_original:
        raise InterventionError("first argument must be the original candidate")
    surfaces = [c.surface for c in predicted]
    if len(set(surfaces)) != len(surfaces):
        raise InterventionError("duplicate surfaces among predicted candidates")
    if original.surface in surfaces:
        raise InterventionError(
            "predicted candidates must exclude the original surface (dedupe upstream)"
        )
    if any(c.is_original for c in predicted):
        raise InterventionError("predicted candidates must not be flagged original")
    if not predicted:
        return TriggerPosterior((original,), (1.0,), lam)
    probs = _softmax(np.array([c.logit for c in predicted], dtype=float))
    weights = (lam,) + tuple((1.0 - lam) * p for p in probs)
    return TriggerPosterior((original,) + tuple(predicted), weights, lam)


def dedupe_candidates(
    predicted: Sequence[CandidateTrigger],
    original_surface: tuple[str, ...],
) -> list[CandidateTrigger]:
    """Drop predicted candidates matching the original surface (and repeats),
    case-insensitively."""
    seen = {tuple(t.lower() for t in original_surface)}
    out = []
    for cand in predicted:
        key = tuple(t.lower() for t in cand.surface)
        if key in seen:
            continue
        seen.add(key)
        out.append(cand)
    return out


def pooled_posterior(
    contexts: Sequence[MaskedContext],
    predicted_lists: Sequence[Sequence[CandidateTrigger]],
    lam: float,
) -> TriggerPosterior:
    """One posterior over the union of predicted candidates across contexts.

    Every surface equal to any context's original trigger is excluded; repeats
    keep their highest logit. The single original entry is a stand-in: at
    expansion time each context substitutes its own original trigger for it.
    """
    if len(contexts) != len(predicted_lists):
        raise InterventionError("one predicted list per context required")
    if not contexts:
        raise InterventionError("no contexts to pool")
    originals = {
        tuple(t.lower() for t in ctx.original_trigger) for ctx in contexts
    }
    best: dict[tuple[str, ...], float] = {}
    for cands in predicted_lists:
        for cand in cands:
            key = tuple(t.lower() for t in cand.surface)
            if key in originals:
                continue
            if key not in best or cand.logit > best[key]:
                best[key] = cand.logit
    pooled = [
        CandidateTrigger(surface, logit, is_original=False)
        for surface, logit in sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))
    ]
    original = CandidateTrigger(contexts[0].original_trigger, 0.0, is_original=True)
    return trigger_posterior(original, pooled, lam)


def substitute(context: MaskedContext, surface: Sequence[str]) -> tuple[tuple[str, ...], tuple[int, int]]:
    """Fill the mask slot with a candidate surface; returns tokens and the
    trigger span in the substituted sentence."""
    surface = tuple(surface)
    tokens = (
        context.tokens[: context.mask_index]
        + surface
        + context.tokens[context.mask_index + 1 :]
    )
    return tokens, (context.mask_index, context.mask_index + len(surface))


def expand_instances(
    contexts: Sequence[MaskedContext],
    posteriors: Sequence[TriggerPosterior],
    mode: CandidateMode = CandidateMode.PER_INSTANCE,
) -> list[WeightedInstance]:
    """Emit every (context, candidate) sentence with weight
    posterior_weight / K. Zero-weight candidates are dropped; the surviving
    weights always sum to 1."""
    k = len(contexts)
    if k == 0:
        raise InterventionError("no contexts to expand")
    if mode == CandidateMode.PER_INSTANCE:
        if len(posteriors) != k:
            raise InterventionError(
                f"per-instance mode needs one posterior per context "
                f"({len(posteriors)} != {k})"
            )
        pairs = list(zip(contexts, posteriors))
    else:
        if len(posteriors) != 1:
            raise InterventionError("pooled mode needs a single pooled posterior")
        pairs = [(ctx, posteriors[0]) for ctx in contexts]

    out: list[WeightedInstance] = []
    for ctx, posterior in pairs:
        for cand, weight in zip(posterior.candidates, posterior.weights):
            if weight == 0.0:
                continue
            surface = ctx.original_trigger if cand.is_original else cand.surface
            tokens, span = substitute(ctx, surface)
            out.append(WeightedInstance(tokens, span, weight / k, ctx.source_id))
    total = sum(w.weight for w in out)
    if abs(total - 1.0) > WEIGHT_TOL * max(1, k):
        raise InterventionError(f"expansion weights sum to {total}, expected 1")
    return out


def build_support_expansion(
    support: Sequence[EventInstance],
    event_type: str,
    config: InterventionConfig,
    candidate_fn: CandidateFn,
) -> list[WeightedInstance]:
    """Mask every support trigger, fetch candidates, build posteriors and
    expand, honoring the configured candidate mode."""
    contexts = [mask_trigger(inst, event_type) for inst in support]
    predicted = [
        dedupe_candidates(candidate_fn(ctx, config.top_n), ctx.original_trigger)
        for ctx in contexts
    ]
    if config.candidate_mode == CandidateMode.POOLED:
        posteriors = [pooled_posterior(contexts, predicted, config.lam)]
    else:
        posteriors = [
            trigger_posterior(
                CandidateTrigger(ctx.original_trigger, 0.0, is_original=True),
                cands,
                config.lam,
            )
            for ctx, cands in zip(contexts, predicted)
        ]
    return expand_instances(contexts, posteriors, config.candidate_mode)


def adjusted_prototypes(
    params: ModelParams,
    weighted: Sequence[WeightedInstance],
) -> Prototype:
    """Intervened prototypes: token-pooled means where each instance's tokens
    carry its expansion weight.

    With uniform weights this is exactly the unadjusted pooled prototype, so
    lambda = 1 reproduces the baseline.
    """
    total = sum(w.weight for w in weighted)
    if abs(total - 1.0) > 1e-9:
        raise InterventionError(f"expansion weights sum to {total}, expected 1")
    d = params.d_rep
    num1 = np.zeros(d)
    num0 = np.zeros(d)
    den1 = 0.0
    den0 = 0.0
    for inst in weighted:
        start, end = inst.span
        if end - start == len(inst.tokens):
            raise InterventionError(
                f"instance {inst.source_id} has no non-trigger token"
            )
        reps = encode_windows(
            params, window_token_ids(params.vocab.ids(inst.tokens), params.window)
        )
        inside = reps[start:end]
        outside = np.concatenate([reps[:start], reps[end:]], axis=0)
        num1 += inst.weight * inside.sum(axis=0)
        den1 += inst.weight * inside.shape[0]
        num0 += inst.weight * outside.sum(axis=0)
        den0 += inst.weight * outside.shape[0]
    return Prototype(p0=num0 / den0, p1=num1 / den1)


def query_position_mix(
    params: ModelParams,
    tokens: Sequence[str],
    position: int,
    candidate_fn: CandidateFn,
    config: InterventionConfig,
    source_id: str = "",
) -> tuple[np.ndarray, np.ndarray]:
    """Window-id variants and posterior weights for one query position.

    Masks the token at `position`, fetches candidates, and returns the stacked
    (2w+1)-windows with each candidate substituted at the center, plus the
    matching posterior weights (zero-weight candidates dropped). Only the
    center cell varies, which is all encoder locality requires.
    """
    tokens = tuple(tokens)
    if not 0 <= position < len(tokens):
        raise InterventionError(f"position {position} out of range")
    masked = MaskedContext(
        tokens=tokens[:position] + (MASK_TOKEN,) + tokens[position + 1 :],
        mask_index=position,
        original_trigger=(tokens[position],),
        source_id=source_id or f"query@{position}",
    )
    predicted = dedupe_candidates(
        candidate_fn(masked, config.top_n), masked.original_trigger
    )
    posterior = trigger_posterior(
        CandidateTrigger(masked.original_trigger, 0.0, is_original=True),
        predicted,
        config.lam,
    )
    base_row = window_token_ids(params.vocab.ids(tokens), params.window)[position]
    rows = []
    weights = []
    for cand, weight in zip(posterior.candidates, posterior.weights):
        if weight == 0.0:
            continue
        row = base_row.copy()
        token = tokens[position] if cand.is_original else cand.surface[0]
        row[params.window] = params.vocab.id(token)
        rows.append(row)
        weights.append(weight)
    return np.stack(rows), np.array(weights)


def query_side_adjust(
    params: ModelParams,
    query: TokenSequence | Sequence[str],
    position: int,
    candidate_fn: CandidateFn,
    config: InterventionConfig,
    source_id: str = "",
) -> np.ndarray:
    """Posterior-weighted representation of one query position across
    candidate substitutions at that position."""
    if not config.adjusts_query:
        raise InterventionError("query-side adjustment requires side=query or side=both")
    tokens = query.tokens if isinstance(query, TokenSequence) else tuple(query)
    rows, weights = query_position_mix(
        params, tokens, position, candidate_fn, config, source_id
    )
    return weights @ encode_windows(params, rows)
