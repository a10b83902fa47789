"""Span-level scoring and the two evaluation protocols: full-test-set
traversal and sampled episodes with optional ambiguity augmentation."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import EventInstance
from .episodes import (
    Episode,
    EpisodeSamplingError,
    sample_ambiguous_negatives,
    sample_train_episode,
)
from .intervene import CandidateFn, InterventionConfig
from .losses import build_episode_plan, plan_prototype, plan_query_reps
from .model import ModelParams, SimilarityKind, decode_spans, pair_scores

TypedSpan = tuple[str, int, int]


@dataclass(frozen=True)
class TypeScore:
    type: str
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class EvalReport:
    """Per-type precision/recall/F1 plus pooled micro and unweighted macro."""

    per_type: tuple[TypeScore, ...]
    micro_precision: float
    micro_recall: float
    micro_f1: float
    macro_f1: float
    repeat: int = 0
    seed: int = 0

    def to_rows(self) -> list[dict]:
        return [
            {
                "type": score.type,
                "precision": score.precision,
                "recall": score.recall,
                "f1": score.f1,
                "micro_f1": self.micro_f1,
                "macro_f1": self.macro_f1,
                "repeat": self.repeat,
                "seed": self.seed,
            }
            for score in self.per_type
        ]


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0.0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def span_f1(
    predictions: Mapping[str, Sequence[TypedSpan]],
    gold: Mapping[str, Sequence[TypedSpan]],
    types: Iterable[str] | None = None,
) -> EvalReport:
    """Exact-match scoring: a predicted span is a TP iff type, start and end
    all match a distinct gold span of the same sentence.

    Micro pools global counts; macro averages per-type F1, where a type with
    neither gold nor predicted spans counts as vacuously perfect.
    """
    if types is None:
        types = {t for spans in predictions.values() for t, _, _ in spans} | {
            t for spans in gold.values() for t, _, _ in spans
        }
    type_list = sorted(types)

    counts = {t: [0, 0, 0] for t in type_list}  # tp, fp, fn
    sentence_ids = set(predictions) | set(gold)
    for sid in sentence_ids:
        pred_spans = Counter(tuple(s) for s in predictions.get(sid, ()))
        gold_spans = Counter(tuple(s) for s in gold.get(sid, ()))
        for span in pred_spans | gold_spans:
            etype = span[0]
            if etype not in counts:
                continue
            matched = min(pred_spans[span], gold_spans[span])
            counts[etype][0] += matched
            counts[etype][1] += pred_spans[span] - matched
            counts[etype][2] += gold_spans[span] - matched

    per_type = []
    for etype in type_list:
        tp, fp, fn = counts[etype]
        if tp == fp == fn == 0:
            per_type.append(TypeScore(etype, 1.0, 1.0, 1.0, 0, 0, 0))
        else:
            p, r, f = _prf(tp, fp, fn)
            per_type.append(TypeScore(etype, p, r, f, tp, fp, fn))

    tp = sum(s.tp for s in per_type)
    fp = sum(s.fp for s in per_type)
    fn = sum(s.fn for s in per_type)
    if tp == fp == fn == 0:
        micro = (1.0, 1.0, 1.0)
    else:
        micro = _prf(tp, fp, fn)
    macro = float(np.mean([s.f1 for s in per_type])) if per_type else 0.0
    return EvalReport(tuple(per_type), micro[0], micro[1], micro[2], macro)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

@dataclass
class Detector:
    """A trained model plus its (optional) intervention setup."""

    params: ModelParams
    kind: SimilarityKind = SimilarityKind.PROTO
    config: InterventionConfig | None = None
    candidate_fn: CandidateFn | None = None

    def predict(
        self,
        support: Sequence[EventInstance],
        event_type: str,
        queries: Sequence[EventInstance],
    ) -> dict[str, list[TypedSpan]]:
        """Spans of `event_type` predicted in each query sentence. A token is
        tagged 1 when its class-1 probability reaches 0.5."""
        episode = Episode(event_type, tuple(support), tuple(queries))
        plan = build_episode_plan(self.params, episode, self.config, self.candidate_fn)
        proto = plan_prototype(self.params, plan.support)
        out: dict[str, list[TypedSpan]] = {}
        for inst, query in zip(episode.queries, plan.queries):
            reps = plan_query_reps(self.params, query)
            s0, s1 = pair_scores(self.kind, self.params, proto, reps)
            tags = (s1 >= s0).astype(int)
            out[inst.id] = [
                (event_type, start, end) for start, end in decode_spans(tags)
            ]
        return out


# ---------------------------------------------------------------------------
# Protocols
# ---------------------------------------------------------------------------

def _instances_by_type(pool: Sequence[EventInstance]) -> dict[str, list[EventInstance]]:
    by_type: dict[str, list[EventInstance]] = {}
    for inst in pool:
        for etype in {ev.type for ev in inst.events}:
            by_type.setdefault(etype, []).append(inst)
    return by_type


def _run_prediction_tasks(
    detector: Detector,
    tasks: Sequence[tuple[str, Sequence[EventInstance], Sequence[EventInstance]]],
    workers: int,
) -> list[dict[str, list[TypedSpan]]]:
    """Predict each (type, support, queries) task, optionally on a thread
    pool. Episodes are sampled before this point, so worker count never
    changes the results."""
    if workers <= 1:
        return [detector.predict(s, t, q) for t, s, q in tasks]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda task: detector.predict(task[1], task[0], task[2]), tasks))


def test_protocol(
    detector: Detector,
    pool: Sequence[EventInstance],
    k: int,
    repeats: int = 4,
    rng: np.random.Generator | None = None,
    seed: int = 0,
    workers: int = 1,
) -> list[EvalReport]:
    """Full-test-set traversal: for every event type sample K supports and use
    every remaining instance as a query; pool counts across types, repeat with
    fresh supports."""
    if rng is None:
        rng = np.random.default_rng(seed)
    by_type = _instances_by_type(pool)
    types = sorted(by_type)
    for etype, instances in by_type.items():
        if len(instances) <= k:
            raise EpisodeSamplingError(
                f"event type {etype!r} has {len(instances)} instances; "
                f"the protocol needs more than {k}"
            )
    reports = []
    for repeat in range(repeats):
        tasks = []
        for etype in types:
            positives = by_type[etype]
            idx = rng.permutation(len(positives))[:k]
            support = [positives[i] for i in sorted(idx)]
            support_ids = {inst.id for inst in support}
            queries = [inst for inst in pool if inst.id not in support_ids]
            tasks.append((etype, support, queries))
        predicted_per_type = _run_prediction_tasks(detector, tasks, workers)

        predictions: dict[str, list[TypedSpan]] = {}
        gold: dict[str, list[TypedSpan]] = {}
        for (etype, _, queries), predicted in zip(tasks, predicted_per_type):
            for sid, spans in predicted.items():
                predictions.setdefault(sid, []).extend(spans)
            for inst in queries:
                for ev in inst.spans_of(etype):
                    gold.setdefault(inst.id, []).append((etype, ev.start, ev.end))
        report = span_f1(predictions, gold, types)
        reports.append(replace(report, repeat=repeat, seed=seed))
    return reports


def episode_protocol(
    detector: Detector,
    pool: Sequence[EventInstance],
    k: int,
    n_pos: int,
    n_neg: int,
    n_ambiguous: int = 0,
    repeats: int = 4,
    rng: np.random.Generator | None = None,
    seed: int = 0,
    workers: int = 1,
) -> list[EvalReport]:
    """Sampled-episode evaluation, optionally appending negatives that contain
    a support-trigger surface (the ambiguity stressor)."""
    if rng is None:
        rng = np.random.default_rng(seed)
    types = sorted(_instances_by_type(pool))
    reports = []
    for repeat in range(repeats):
        tasks = []
        for etype in types:
            # an unlucky support draw may not leave enough ambiguous
            # distractors; resample the episode a few times before giving up
            for attempt in range(20):
                episode = sample_train_episode(pool, etype, k, n_pos, n_neg, rng)
                try:
                    if n_ambiguous:
                        episode = sample_ambiguous_negatives(
                            pool, episode, n_ambiguous, rng
                        )
                    break
                except EpisodeSamplingError:
                    if attempt == 19:
                        raise
            tasks.append((etype, episode.support, episode.queries))
        predicted_per_type = _run_prediction_tasks(detector, tasks, workers)

        predictions: dict[str, list[TypedSpan]] = {}
        gold: dict[str, list[TypedSpan]] = {}
        for (etype, _, queries), predicted in zip(tasks, predicted_per_type):
            for sid, spans in predicted.items():
                key = f"{etype}/{sid}"
                predictions.setdefault(key, []).extend(spans)
            for inst in queries:
                key = f"{etype}/{inst.id}"
                gold.setdefault(key, [])
                for ev in inst.spans_of(etype):
                    gold[key].append((etype, ev.start, ev.end))
        report = span_f1(predictions, gold, types)
        reports.append(replace(report, repeat=repeat, seed=seed))
    return reports


def paired_ambiguity_protocol(
    detector: Detector,
    pool: Sequence[EventInstance],
    k: int,
    n_pos: int,
    n_neg: int,
    n_ambiguous: int,
    repeats: int = 4,
    rng: np.random.Generator | None = None,
    seed: int = 0,
) -> tuple[list[EvalReport], list[EvalReport]]:
    """Score the same sampled episodes twice: plain, and with the ambiguity
    augmentation appended. Pairing removes episode-sampling noise from the
    clean-versus-ambiguous comparison."""
    if rng is None:
        rng = np.random.default_rng(seed)
    types = sorted(_instances_by_type(pool))
    clean_reports = []
    amb_reports = []
    for repeat in range(repeats):
        episodes = []
        for etype in types:
            for attempt in range(20):
                episode = sample_train_episode(pool, etype, k, n_pos, n_neg, rng)
                try:
                    augmented = sample_ambiguous_negatives(
                        pool, episode, n_ambiguous, rng
                    )
                    break
                except EpisodeSamplingError:
                    if attempt == 19:
                        raise
            episodes.append((etype, episode, augmented))

        for variant, idx in (("clean", 1), ("ambiguous", 2)):
            predictions: dict[str, list[TypedSpan]] = {}
            gold: dict[str, list[TypedSpan]] = {}
            for etype, *variants in episodes:
                episode = variants[idx - 1]
                predicted = detector.predict(episode.support, etype, episode.queries)
                for sid, spans in predicted.items():
                    key = f"{etype}/{sid}"
                    predictions.setdefault(key, []).extend(spans)
                for inst in episode.queries:
                    key = f"{etype}/{inst.id}"
                    gold.setdefault(key, [])
                    for ev in inst.spans_of(etype):
                        gold[key].append((etype, ev.start, ev.end))
            report = replace(span_f1(predictions, gold, types), repeat=repeat, seed=seed)
            (clean_reports if variant == "clean" else amb_reports).append(report)
    return clean_reports, amb_reports


def mean_micro_f1(reports: Sequence[EvalReport]) -> float:
    return float(np.mean([r.micro_f1 for r in reports]))
