"""Episode losses with and without intervention, exact gradients, and the
enumeration-style reference objective used to cross-check the surrogate."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, check_finite
from .episodes import Episode
from .intervene import (
    CandidateFn,
    InterventionConfig,
    InterventionError,
    WeightedInstance,
    build_support_expansion,
    query_position_mix,
)
from .model import (
    DegenerateSupportError,
    ModelParams,
    PARAM_NAMES,
    Prototype,
    SimilarityKind,
    TokenSequence,
    encode_windows,
    episode_loss,
    pair_scores,
    prototypes,
    token_losses,
    window_token_ids,
)

REFERENCE_ENUMERATION_BOUND = 64


class Link(str, Enum):
    IDENTITY = "identity"
    SQUARE = "square"


# ---------------------------------------------------------------------------
# Episode plans: all intervention decisions resolved to constants, so the
# numpy evaluator and the differentiable graph share exactly the same data.
# ---------------------------------------------------------------------------

@dataclass
class SupportPlan:
    windows: np.ndarray      # (N, 2w+1) token-id windows, all rows stacked
    class1: np.ndarray       # (N,) bool
    token_weight: np.ndarray # (N,) instance weight carried by each token
    den1: float
    den0: float

    def mixing_matrix(self) -> np.ndarray:
        m = np.zeros((2, self.windows.shape[0]))
        m[0, ~self.class1] = self.token_weight[~self.class1] / self.den0
        m[1, self.class1] = self.token_weight[self.class1] / self.den1
        return m


@dataclass
class QueryPlan:
    windows: np.ndarray          # (R, 2w+1)
    labels: np.ndarray           # (n,)
    mix: np.ndarray | None       # (n, R); None when rows are the token reps


@dataclass
class EpisodePlan:
    support: SupportPlan
    queries: list[QueryPlan]


def _support_plan_from_sequences(
    params: ModelParams, sequences: Sequence[TokenSequence]
) -> SupportPlan:
    windows = []
    class1 = []
    weights = []
    for seq in sequences:
        if seq.labels is None:
            raise ValueError("support sequences must carry labels")
        windows.append(window_token_ids(params.vocab.ids(seq.tokens), params.window))
        class1.append(np.array(seq.labels, dtype=bool))
        weights.append(np.full(len(seq.tokens), 1.0))
    class1 = np.concatenate(class1)
    weights = np.concatenate(weights)
    den1 = float(weights[class1].sum())
    den0 = float(weights[~class1].sum())
    if den1 == 0.0 or den0 == 0.0:
        raise DegenerateSupportError("degenerate support")
    return SupportPlan(np.concatenate(windows), class1, weights, den1, den0)


def _support_plan_from_expansion(
    params: ModelParams, weighted: Sequence[WeightedInstance]
) -> SupportPlan:
    windows = []
    class1 = []
    weights = []
    den1 = 0.0
    den0 = 0.0
    for inst in weighted:
        start, end = inst.span
        n = len(inst.tokens)
        if end - start == n:
            raise InterventionError(f"instance {inst.source_id} has no non-trigger token")
        windows.append(window_token_ids(params.vocab.ids(inst.tokens), params.window))
        mask = np.zeros(n, dtype=bool)
        mask[start:end] = True
        class1.append(mask)
        weights.append(np.full(n, inst.weight))
        den1 += inst.weight * (end - start)
        den0 += inst.weight * (n - (end - start))
    return SupportPlan(
        np.concatenate(windows), np.concatenate(class1), np.concatenate(weights),
        den1, den0,
    )


def _query_plan_plain(params: ModelParams, seq: TokenSequence) -> QueryPlan:
    if seq.labels is None:
        raise ValueError("queries must carry gold labels")
    windows = window_token_ids(params.vocab.ids(seq.tokens), params.window)
    return QueryPlan(windows, np.array(seq.labels, dtype=float), mix=None)


def _query_plan_adjusted(
    params: ModelParams,
    seq: TokenSequence,
    config: InterventionConfig,
    candidate_fn: CandidateFn,
    source_id: str = "",
) -> QueryPlan:
    if seq.labels is None:
        raise ValueError("queries must carry gold labels")
    rows = []
    weights = []
    n = len(seq.tokens)
    for position in range(n):
        sid = f"{source_id}@{position}" if source_id else ""
        variant_rows, variant_weights = query_position_mix(
            params, seq.tokens, position, candidate_fn, config, sid
        )
        rows.append(variant_rows)
        weights.append(variant_weights)
    total = sum(r.shape[0] for r in rows)
    mix = np.zeros((n, total))
    offset = 0
    for j, w in enumerate(weights):
        mix[j, offset : offset + len(w)] = w
        offset += len(w)
    return QueryPlan(np.concatenate(rows), np.array(seq.labels, dtype=float), mix)


def build_episode_plan(
    params: ModelParams,
    episode: Episode,
    config: InterventionConfig | None,
    candidate_fn: CandidateFn | None = None,
) -> EpisodePlan:
    adjust_support = config is not None and config.adjusts_support
    adjust_query = config is not None and config.adjusts_query
    if (adjust_support or adjust_query) and candidate_fn is None:
        raise InterventionError("intervention requires a candidate source")

    if adjust_support:
        expansion = build_support_expansion(
            episode.support, episode.event_type, config, candidate_fn
        )
        support = _support_plan_from_expansion(params, expansion)
    else:
        support = _support_plan_from_sequences(params, episode.support_sequences())

    queries = []
    for inst, seq in zip(episode.queries, episode.labeled_queries()):
        if adjust_query:
            queries.append(
                _query_plan_adjusted(params, seq, config, candidate_fn, inst.id)
            )
        else:
            queries.append(_query_plan_plain(params, seq))
    return EpisodePlan(support, queries)


# ---------------------------------------------------------------------------
# Numpy evaluation (prediction, finite differences)
# ---------------------------------------------------------------------------

def plan_prototype(params: ModelParams, plan: SupportPlan) -> Prototype:
    reps = encode_windows(params, plan.windows)
    mixed = plan.mixing_matrix() @ reps
    return Prototype(p0=mixed[0], p1=mixed[1])


def plan_query_reps(params: ModelParams, query: QueryPlan) -> np.ndarray:
    rows = encode_windows(params, query.windows)
    return rows if query.mix is None else query.mix @ rows


def plan_loss(params: ModelParams, kind: SimilarityKind, plan: EpisodePlan) -> float:
    proto = plan_prototype(params, plan.support)
    losses = []
    for query in plan.queries:
        reps = plan_query_reps(params, query)
        s0, s1 = pair_scores(kind, params, proto, reps)
        losses.append(token_losses(s0, s1, query.labels))
    return float(np.concatenate(losses).mean())


def surrogate_episode_loss(
    params: ModelParams,
    episode: Episode,
    config: InterventionConfig | None,
    kind: SimilarityKind = SimilarityKind.PROTO,
    candidate_fn: CandidateFn | None = None,
) -> float:
    """Episode cross-entropy with prototypes and/or query representations
    replaced by their intervened versions. side=none delegates to the plain
    baseline loss, bit for bit."""
    if config is None or (not config.adjusts_support and not config.adjusts_query):
        support = episode.support_sequences()
        proto = prototypes(
            [np.asarray(encode_windows(params, window_token_ids(params.vocab.ids(s.tokens), params.window))) for s in support],
            [s.labels for s in support],
        )
        return episode_loss(params, proto, episode.labeled_queries(), kind)
    plan = build_episode_plan(params, episode, config, candidate_fn)
    return plan_loss(params, kind, plan)


# ---------------------------------------------------------------------------
# Differentiable graph
# ---------------------------------------------------------------------------

def _encode_rows_graph(
    leaves: dict[str, Tensor], params: ModelParams, windows: np.ndarray
) -> Tensor:
    span = 2 * params.window + 1
    gathered = ad.gather(leaves["embedding"], windows)
    flat = ad.reshape(gathered, (windows.shape[0], span * params.d_emb))
    return ad.tanh((flat @ leaves["enc_w"]) + leaves["enc_b"])


def _scores_graph(
    leaves: dict[str, Tensor],
    params: ModelParams,
    kind: SimilarityKind,
    proto: Tensor,
    reps: Tensor,
    which: int,
) -> Tensor:
    p = ad.gather(proto, which)
    n = reps.shape[0]
    if kind == SimilarityKind.PROTO:
        diff = reps - p
        return ad.neg(ad.tsum(diff * diff, axis=1))
    tiled = ad.repeat_row(p, n)
    feats = ad.concat([tiled, reps, ad.absolute(reps - tiled)], axis=1)
    hidden = ad.relu((feats @ leaves["rel_w1"]) + leaves["rel_b1"])
    raw = (hidden @ leaves["rel_w2"]) + leaves["rel_b2"]
    return ad.reshape(raw, (n,))


def plan_loss_graph(
    leaves: dict[str, Tensor], params: ModelParams, kind: SimilarityKind, plan: EpisodePlan
) -> Tensor:
    support_reps = _encode_rows_graph(leaves, params, plan.support.windows)
    proto = ad.const_matmul(plan.support.mixing_matrix(), support_reps)

    all_windows = np.concatenate([q.windows for q in plan.queries])
    all_rows = _encode_rows_graph(leaves, params, all_windows)
    n_tokens = sum(len(q.labels) for q in plan.queries)
    big_mix = np.zeros((n_tokens, all_windows.shape[0]))
    row_offset = 0
    token_offset = 0
    for query in plan.queries:
        n = len(query.labels)
        r = query.windows.shape[0]
        block = np.eye(n) if query.mix is None else query.mix
        big_mix[token_offset : token_offset + n, row_offset : row_offset + r] = block
        row_offset += r
        token_offset += n
    query_reps = ad.const_matmul(big_mix, all_rows)

    labels = np.concatenate([q.labels for q in plan.queries])
    s0 = _scores_graph(leaves, params, kind, proto, query_reps, 0)
    s1 = _scores_graph(leaves, params, kind, proto, query_reps, 1)
    flip = ad.const(1.0 - 2.0 * labels)
    per_token = ad.softplus((s1 - s0) * flip)
    return ad.scale(ad.tsum(per_token), 1.0 / n_tokens)


def loss_and_gradients(
    params: ModelParams,
    episode: Episode,
    kind: SimilarityKind = SimilarityKind.PROTO,
    config: InterventionConfig | None = None,
    candidate_fn: CandidateFn | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Exact reverse-mode gradients of the (possibly intervened) episode loss
    with respect to every parameter tensor."""
    plan = build_episode_plan(params, episode, config, candidate_fn)
    leaves = {name: ad.leaf(arr, name) for name, arr in params.tensors().items()}
    loss = plan_loss_graph(leaves, params, kind, plan)
    check_finite("loss", loss.value)
    ad.backward(loss)
    grads = {}
    for name in PARAM_NAMES:
        grad = leaves[name].grad
        if grad is None:
            grad = np.zeros_like(params.tensors()[name])
        check_finite(name, grad)
        grads[name] = grad
    return float(loss.value), grads


def gradients(
    params: ModelParams,
    episode: Episode,
    kind: SimilarityKind = SimilarityKind.PROTO,
    config: InterventionConfig | None = None,
    candidate_fn: CandidateFn | None = None,
) -> dict[str, np.ndarray]:
    return loss_and_gradients(params, episode, kind, config, candidate_fn)[1]


# ---------------------------------------------------------------------------
# Reference interventional objective (full enumeration)
# ---------------------------------------------------------------------------

def reference_token_terms(
    params: ModelParams,
    episode: Episode,
    config: InterventionConfig,
    kind: SimilarityKind = SimilarityKind.PROTO,
    link: Link | None = None,
    candidate_fn: CandidateFn | None = None,
) -> np.ndarray:
    """Per-query-token values f(sum_s w_s phi(s, q)) over the full expansion.

    phi is the Euclidean distance to the instance's trigger representation
    (prototypical head, squared link) or the relation score (identity link).
    """
    if candidate_fn is None:
        raise InterventionError("reference loss requires a candidate source")
    if link is None:
        link = Link.SQUARE if kind == SimilarityKind.PROTO else Link.IDENTITY
    expansion = build_support_expansion(
        episode.support, episode.event_type, config, candidate_fn
    )
    if len(expansion) > REFERENCE_ENUMERATION_BOUND:
        raise InterventionError(
            f"enumeration bound exceeded: {len(expansion)} weighted instances "
            f"(limit {REFERENCE_ENUMERATION_BOUND})"
        )
    weights = np.array([w.weight for w in expansion])
    trigger_reps = []
    for inst in expansion:
        reps = encode_windows(
            params, window_token_ids(params.vocab.ids(inst.tokens), params.window)
        )
        trigger_reps.append(reps[inst.span[0] : inst.span[1]].mean(axis=0))
    trigger_reps = np.stack(trigger_reps)

    terms = []
    for seq in episode.labeled_queries():
        qreps = encode_windows(
            params, window_token_ids(params.vocab.ids(seq.tokens), params.window)
        )
        for q in qreps:
            if kind == SimilarityKind.PROTO:
                phi = np.linalg.norm(trigger_reps - q, axis=1)
            else:
                diff = np.abs(trigger_reps - q)
                feats = np.concatenate(
                    [trigger_reps, np.tile(q, (len(expansion), 1)), diff], axis=1
                )
                hidden = np.maximum(feats @ params.rel_w1 + params.rel_b1, 0.0)
                phi = (hidden @ params.rel_w2 + params.rel_b2)[:, 0]
            inner = float(weights @ phi)
            terms.append(inner * inner if link == Link.SQUARE else inner)
    return np.array(terms)


def reference_interventional_loss(
    params: ModelParams,
    episode: Episode,
    config: InterventionConfig,
    kind: SimilarityKind = SimilarityKind.PROTO,
    link: Link | None = None,
    candidate_fn: CandidateFn | None = None,
) -> float:
    """Negated sum of the per-token reference terms; the brute-force twin the
    surrogate loss is checked against in its exact regimes."""
    terms = reference_token_terms(params, episode, config, kind, link, candidate_fn)
    return float(-terms.sum())
