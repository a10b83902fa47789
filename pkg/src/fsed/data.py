"""Dataset records, JSONL I/O and the synthetic corpus generator."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class DatasetError(ValueError):
    """Malformed dataset file or record."""


@dataclass(frozen=True)
class EventSpan:
    type: str
    start: int
    end: int


@dataclass(frozen=True)
class EventInstance:
    """A tokenized sentence with typed trigger spans (end exclusive)."""

    id: str
    tokens: tuple[str, ...]
    events: tuple[EventSpan, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "events", tuple(self.events))
        n = len(self.tokens)
        by_type: dict[str, list[EventSpan]] = {}
        for ev in self.events:
            if not ev.type:
                raise DatasetError(f"instance {self.id}: empty event type")
            if not (0 <= ev.start < ev.end <= n):
                raise DatasetError(
                    f"instance {self.id}: span ({ev.start}, {ev.end}) out of range for "
                    f"{n} tokens"
                )
            by_type.setdefault(ev.type, []).append(ev)
        for etype, spans in by_type.items():
            spans = sorted(spans, key=lambda s: s.start)
            for a, b in zip(spans, spans[1:]):
                if b.start < a.end:
                    raise DatasetError(
                        f"instance {self.id}: overlapping {etype} spans"
                    )

    def spans_of(self, event_type: str) -> tuple[EventSpan, ...]:
        return tuple(ev for ev in self.events if ev.type == event_type)

    def has_event(self, event_type: str) -> bool:
        return any(ev.type == event_type for ev in self.events)


def binary_labels(instance: EventInstance, event_type: str) -> tuple[int, ...]:
    """One-way labeling: 1 on tokens inside a span of the concerned type."""
    labels = [0] * len(instance.tokens)
    for ev in instance.spans_of(event_type):
        for i in range(ev.start, ev.end):
            labels[i] = 1
    return tuple(labels)


def contains_surface(tokens: Sequence[str], surface: Sequence[str]) -> bool:
    """Case-insensitive contiguous-subsequence test."""
    hay = [t.lower() for t in tokens]
    needle = [t.lower() for t in surface]
    m = len(needle)
    if m == 0 or m > len(hay):
        return False
    return any(hay[i : i + m] == needle for i in range(len(hay) - m + 1))


def load_dataset(path) -> list[EventInstance]:
    """Read one JSON object per line; validation failures report line numbers."""
    instances: list[EventInstance] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            try:
                instance = EventInstance(
                    id=str(record["id"]),
                    tokens=tuple(record["tokens"]),
                    events=tuple(
                        EventSpan(str(e["type"]), int(e["start"]), int(e["end"]))
                        for e in record.get("events", [])
                    ),
                )
            except KeyError as exc:
                raise DatasetError(f"{path}:{lineno}: missing field {exc}") from exc
            except DatasetError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
            if instance.id in seen_ids:
                raise DatasetError(f"{path}:{lineno}: duplicate id {instance.id!r}")
            seen_ids.add(instance.id)
            instances.append(instance)
    return instances


def save_dataset(instances: Iterable[EventInstance], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            record = {
                "id": inst.id,
                "tokens": list(inst.tokens),
                "events": [
                    {"type": e.type, "start": e.start, "end": e.end}
                    for e in inst.events
                ],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def tokenize(text: str) -> list[str]:
    """Whitespace splitting, lowercased."""
    return text.lower().split()


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

# Share of trigger occurrences given to each of the five head triggers when the
# dominance target is hit; scaled linearly for other targets.
_HEAD_SHAPE = np.array([0.30, 0.18, 0.12, 0.10, 0.08])


@dataclass(frozen=True)
class SyntheticConfig:
    n_types: int = 10
    instances_per_type: int = 1000
    n_triggers_per_type: int = 12
    frame_pool: int = 32
    frames_per_type: int = 4
    topic_pool: int = 64
    topics_per_type: int = 8
    n_fillers: int = 120
    dominance: float = 0.78
    ambiguity_rate: float = 0.3
    decoy_rate: float | None = None  # default: half the ambiguity rate
    min_len: int = 8
    max_len: int = 16

    @property
    def effective_decoy_rate(self) -> float:
        if self.ambiguity_rate == 0.0:
            return 0.0
        return self.ambiguity_rate / 2 if self.decoy_rate is None else self.decoy_rate

    def __post_init__(self) -> None:
        if self.n_types < 2:
            raise DatasetError("need at least 2 event types")
        if self.n_triggers_per_type < 6:
            raise DatasetError(
                "infeasible config: trigger lexicon must exceed the 5 head triggers"
            )
        if not 0.0 < self.dominance < 1.0:
            raise DatasetError("dominance target must be in (0, 1)")
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise DatasetError("ambiguity rate must be in [0, 1]")
        if self.min_len < 6 or self.max_len < self.min_len:
            raise DatasetError("sentence length range must satisfy 6 <= min <= max")
        if self.frames_per_type > self.frame_pool or self.topics_per_type > self.topic_pool:
            raise DatasetError("per-type lexicon cannot exceed its shared pool")
        if self.decoy_rate is not None and not 0.0 <= self.decoy_rate <= 1.0:
            raise DatasetError("decoy rate must be in [0, 1]")


def _largest_remainder_quotas(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer quotas summing to `total`, proportional to `weights`."""
    raw = weights / weights.sum() * total
    quotas = np.floor(raw).astype(int)
    remainder = total - quotas.sum()
    order = np.argsort(-(raw - quotas))
    quotas[order[:remainder]] += 1
    return quotas


def _homograph_partners(config: SyntheticConfig) -> dict[int, int]:
    """Type-index pairs whose top triggers are the same word."""
    n_shared = 2 * int(round(config.ambiguity_rate * config.n_types / 2))
    partners = {}
    for pair in range(n_shared // 2):
        a, b = 2 * pair, 2 * pair + 1
        partners[a] = b
        partners[b] = a
    return partners


def _trigger_lexicons(config: SyntheticConfig) -> list[list[str]]:
    """Per-type trigger words; homograph partners share a mid-rank trigger.

    Sharing a mid-rank word (rather than the dominant one) makes the trap a
    sampling artifact: a 5-shot support that happens to draw it overstates its
    probability severalfold, which is exactly the overfit the smoothed trigger
    posterior corrects."""
    lexicons = [
        [f"trg{t:02d}x{i:02d}" for i in range(config.n_triggers_per_type)]
        for t in range(config.n_types)
    ]
    partners = _homograph_partners(config)
    for t, p in partners.items():
        if t < p:
            word = f"amb{t // 2:02d}"
            lexicons[t][2] = word
            lexicons[p][2] = word
    return lexicons


def generate_synthetic(config: SyntheticConfig, seed: int) -> list[EventInstance]:
    """Templated corpus with dominant head triggers and homograph stressors.

    Each type's five head triggers receive exactly `dominance` of its trigger
    occurrences (largest-remainder quotas, so measured coverage is tight).
    Trigger words are type-specific except that homograph partner types share
    their dominant trigger: the same surface that screams one event type is
    plain language in the partner's sentences. The trigger's four window
    neighbors come from per-slot frame lexicons (a small per-type combination
    over shared positional pools), so context identifies the type, unseen
    types still speak in trained words, and adjacent-bigram statistics around
    a masked trigger point straight back at the type's own trigger lexicon.
    Sentences occasionally carry a decoy token, another type's trigger used as
    plain language away from the frame.
    """
    rng = np.random.default_rng(seed)
    type_names = [f"evt{t:02d}" for t in range(config.n_types)]
    triggers = _trigger_lexicons(config)
    slot_pools = {
        slot: [f"fr{slot}{i:03d}" for i in range(config.frame_pool)]
        for slot in ("l2", "l1", "r1", "r2")
    }
    topic_global = [f"top{i:03d}" for i in range(config.topic_pool)]
    fillers = [f"flr{i:03d}" for i in range(config.n_fillers)]

    def draw(pool: list[str], count: int) -> list[str]:
        idx = rng.choice(len(pool), size=count, replace=False)
        return [pool[i] for i in sorted(idx)]

    frames = {
        slot: [draw(slot_pools[slot], config.frames_per_type) for _ in type_names]
        for slot in slot_pools
    }
    topics = [draw(topic_global, config.topics_per_type) for _ in type_names]

    m = config.n_triggers_per_type
    head = config.dominance * (_HEAD_SHAPE / _HEAD_SHAPE.sum())
    tail = np.full(m - 5, (1.0 - config.dominance) / (m - 5))
    trigger_weights = np.concatenate([head, tail])
    quotas = _largest_remainder_quotas(trigger_weights, config.instances_per_type)

    instances: list[EventInstance] = []
    for t, type_name in enumerate(type_names):
        trigger_draws = np.repeat(np.arange(m), quotas)
        rng.shuffle(trigger_draws)
        for i in range(config.instances_per_type):
            trigger = triggers[t][trigger_draws[i]]
            length = int(rng.integers(config.min_len, config.max_len + 1))
            position = int(rng.integers(2, length - 2))
            slot_of = {
                position - 2: "l2",
                position - 1: "l1",
                position + 1: "r1",
                position + 2: "r2",
            }
            tokens: list[str] = []
            for j in range(length):
                if j == position:
                    tokens.append(trigger)
                elif j in slot_of:
                    pool = frames[slot_of[j]][t]
                    tokens.append(pool[int(rng.integers(config.frames_per_type))])
                elif rng.random() < 0.5:
                    tokens.append(topics[t][int(rng.integers(config.topics_per_type))])
                else:
                    tokens.append(fillers[int(rng.integers(len(fillers)))])
            if config.effective_decoy_rate > 0:
                slots = [j for j in range(length) if abs(j - position) > 2]
                for _ in range(2):
                    if slots and rng.random() < config.effective_decoy_rate:
                        slot = slots.pop(int(rng.integers(len(slots))))
                        other = int(rng.integers(config.n_types - 1))
                        if other >= t:
                            other += 1
                        # uniform over the lexicon: tail triggers decoy as
                        # often as heads, so surface traps are not confined to
                        # the dominant words
                        decoy_idx = int(rng.integers(m))
                        tokens[slot] = triggers[other][decoy_idx]
            instances.append(
                EventInstance(
                    id=f"{type_name}-{i:05d}",
                    tokens=tuple(tokens),
                    events=(EventSpan(type_name, position, position + 1),),
                )
            )
    return instances


def trigger_coverage(instances: Sequence[EventInstance], top_k: int = 5) -> dict[str, float]:
    """Per-type share of trigger occurrences carried by the top-k surfaces."""
    counts: dict[str, dict[tuple[str, ...], int]] = {}
    for inst in instances:
        for ev in inst.events:
            surface = tuple(inst.tokens[ev.start : ev.end])
            per_type = counts.setdefault(ev.type, {})
            per_type[surface] = per_type.get(surface, 0) + 1
    coverage = {}
    for etype, table in counts.items():
        totals = sorted(table.values(), reverse=True)
        coverage[etype] = sum(totals[:top_k]) / sum(totals)
    return coverage


def type_clusters(instances: Sequence[EventInstance]) -> list[list[str]]:
    """Group event types that share any trigger word (homograph partners)."""
    surface_types: dict[str, set[str]] = {}
    all_types: set[str] = set()
    for inst in instances:
        for ev in inst.events:
            for token in inst.tokens[ev.start : ev.end]:
                surface_types.setdefault(token.lower(), set()).add(ev.type)
            all_types.add(ev.type)

    parent = {t: t for t in all_types}

    def find(t: str) -> str:
        while parent[t] != t:
            parent[t] = parent[parent[t]]
            t = parent[t]
        return t

    for types in surface_types.values():
        types = sorted(types)
        for other in types[1:]:
            parent[find(other)] = find(types[0])

    clusters: dict[str, list[str]] = {}
    for t in sorted(all_types):
        clusters.setdefault(find(t), []).append(t)
    return sorted(clusters.values(), key=lambda c: c[0])


def split_by_types(
    instances: Sequence[EventInstance],
    fractions: tuple[float, float, float],
    seed: int,
) -> tuple[list[EventInstance], list[EventInstance], list[EventInstance]]:
    """Split by event type with homograph partners kept together.

    Clusters are assigned largest-first to the split with the biggest relative
    deficit, so multi-type homograph clusters spread across splits instead of
    all draining into train.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError("split fractions must sum to 1")
    clusters = type_clusters(instances)
    n_types = sum(len(c) for c in clusters)
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(clusters)))
    order.sort(key=lambda i: -len(clusters[i]))

    names = ("train", "test", "dev")  # tie-break preference after train
    wants = {
        "train": fractions[0] * n_types,
        "dev": fractions[1] * n_types,
        "test": fractions[2] * n_types,
    }
    counts = {name: 0 for name in names}
    buckets: dict[str, str] = {}
    for idx in order:
        cluster = clusters[idx]
        dest = max(
            names,
            key=lambda s: ((wants[s] - counts[s]) / max(wants[s], 1e-9), wants[s]),
        )
        for t in cluster:
            buckets[t] = dest
        counts[dest] += len(cluster)

    splits = {"train": [], "dev": [], "test": []}
    for inst in instances:
        dest = buckets[inst.events[0].type] if inst.events else "train"
        splits[dest].append(inst)
    return splits["train"], splits["dev"], splits["test"]
