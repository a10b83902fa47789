"""One-way K-shot episode sampling, including the ambiguity augmentation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import EventInstance, binary_labels, contains_surface
from .model import TokenSequence


class EpisodeSamplingError(ValueError):
    """The instance pool cannot satisfy the requested episode."""


@dataclass(frozen=True)
class Episode:
    """One support set (single event type) plus labeled query sentences."""

    event_type: str
    support: tuple[EventInstance, ...]
    queries: tuple[EventInstance, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "support", tuple(self.support))
        object.__setattr__(self, "queries", tuple(self.queries))
        support_ids = {inst.id for inst in self.support}
        query_ids = {inst.id for inst in self.queries}
        if support_ids & query_ids:
            raise EpisodeSamplingError(
                f"support and queries overlap: {sorted(support_ids & query_ids)}"
            )
        for inst in self.support:
            if not inst.has_event(self.event_type):
                raise EpisodeSamplingError(
                    f"support instance {inst.id} has no {self.event_type} trigger"
                )

    def support_sequences(self) -> list[TokenSequence]:
        return [
            TokenSequence(inst.tokens, binary_labels(inst, self.event_type))
            for inst in self.support
        ]

    def labeled_queries(self) -> list[TokenSequence]:
        return [
            TokenSequence(inst.tokens, binary_labels(inst, self.event_type))
            for inst in self.queries
        ]


def _pick(pool: Sequence[EventInstance], count: int, rng: np.random.Generator) -> list[EventInstance]:
    idx = rng.permutation(len(pool))[:count]
    return [pool[i] for i in sorted(idx)]


def sample_train_episode(
    pool: Sequence[EventInstance],
    event_type: str,
    k: int,
    n_pos: int,
    n_neg: int,
    rng: np.random.Generator,
) -> Episode:
    """K support instances plus n_pos positive and n_neg negative queries,
    all with disjoint ids. A negative carries no trigger of the concerned
    type (other types are fine)."""
    positives = [inst for inst in pool if inst.has_event(event_type)]
    negatives = [inst for inst in pool if not inst.has_event(event_type)]
    if len(positives) < k + n_pos:
        raise EpisodeSamplingError(
            f"event type {event_type!r} has {len(positives)} positive instances; "
            f"need at least {k + n_pos}"
        )
    if len(negatives) < n_neg:
        raise EpisodeSamplingError(
            f"only {len(negatives)} negative instances available; need {n_neg}"
        )
    chosen = _pick(positives, k + n_pos, rng)
    support = chosen[:k]
    pos_queries = chosen[k:]
    neg_queries = _pick(negatives, n_neg, rng)
    return Episode(event_type, tuple(support), tuple(pos_queries + neg_queries))


def support_trigger_surfaces(episode: Episode) -> set[tuple[str, ...]]:
    """Full trigger surfaces plus their individual words: an instance reusing
    any word of a support trigger counts as surface-ambiguous."""
    surfaces = set()
    for inst in episode.support:
        for ev in inst.spans_of(episode.event_type):
            span = tuple(t.lower() for t in inst.tokens[ev.start : ev.end])
            surfaces.add(span)
            for token in span:
                surfaces.add((token,))
    return surfaces


def is_ambiguous_distractor(
    instance: EventInstance,
    surfaces: set[tuple[str, ...]],
    event_type: str,
) -> bool:
    """True when the instance contains some support-trigger surface but no gold
    span of the concerned type."""
    if instance.has_event(event_type):
        return False
    return any(contains_surface(instance.tokens, s) for s in surfaces)


def sample_ambiguous_negatives(
    pool: Sequence[EventInstance],
    episode: Episode,
    n: int,
    rng: np.random.Generator,
) -> Episode:
    """Append n negatives that contain a support-trigger surface form."""
    if n == 0:
        return episode
    surfaces = support_trigger_surfaces(episode)
    used = {inst.id for inst in episode.support} | {inst.id for inst in episode.queries}
    eligible = [
        inst
        for inst in pool
        if inst.id not in used and is_ambiguous_distractor(inst, surfaces, episode.event_type)
    ]
    if len(eligible) < n:
        raise EpisodeSamplingError(
            f"only {len(eligible)} ambiguous instances available; requested {n}"
        )
    extra = _pick(eligible, n, rng)
    return replace(episode, queries=episode.queries + tuple(extra))
