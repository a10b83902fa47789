"""Dataset records, JSONL I/O, the generator and type-disjoint splitting."""

import json

import numpy as np
import pytest

from fsed.data import (
    DatasetError,
    EventInstance,
    EventSpan,
    SyntheticConfig,
    binary_labels,
    contains_surface,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_by_types,
    tokenize,
    trigger_coverage,
    type_clusters,
)


class TestEventInstance:
    def test_offset_validation(self):
        with pytest.raises(DatasetError, match="out of range"):
            EventInstance("x", ("a", "b"), (EventSpan("A", 1, 3),))

    def test_same_type_overlap_rejected(self):
        with pytest.raises(DatasetError, match="overlap"):
            EventInstance(
                "x", ("a", "b", "c"),
                (EventSpan("A", 0, 2), EventSpan("A", 1, 3)),
            )

    def test_cross_type_overlap_allowed(self):
        inst = EventInstance(
            "x", ("a", "b", "c"),
            (EventSpan("A", 0, 2), EventSpan("B", 1, 3)),
        )
        assert inst.has_event("A") and inst.has_event("B")

    def test_empty_type_rejected(self):
        with pytest.raises(DatasetError, match="empty event type"):
            EventInstance("x", ("a",), (EventSpan("", 0, 1),))

    def test_binary_labels(self):
        inst = EventInstance(
            "x", ("a", "b", "c", "d"),
            (EventSpan("A", 1, 3), EventSpan("B", 0, 1)),
        )
        assert binary_labels(inst, "A") == (0, 1, 1, 0)
        assert binary_labels(inst, "B") == (1, 0, 0, 0)

    def test_contains_surface(self):
        assert contains_surface(("He", "will", "fire", "him"), ("fire",))
        assert contains_surface(("open", "fire", "now"), ("Open", "Fire"))
        assert not contains_surface(("a", "b"), ("b", "a"))


class TestJsonl:
    def test_roundtrip(self, tmp_path):
        instances = [
            EventInstance("a", ("x", "fired", "y"), (EventSpan("Attack", 1, 2),)),
            EventInstance("b", ("no", "events"), ()),
        ]
        path = tmp_path / "data.jsonl"
        save_dataset(instances, path)
        assert load_dataset(path) == instances

    def test_valid_line_example(self, tmp_path):
        path = tmp_path / "data.jsonl"
        path.write_text(
            '{"id":"a","tokens":["x","fired","y"],'
            '"events":[{"type":"Attack","start":1,"end":2}]}\n',
            encoding="utf-8",
        )
        out = load_dataset(path)
        assert len(out) == 1
        assert out[0].spans_of("Attack") == (EventSpan("Attack", 1, 2),)

    def test_bad_offsets_report_line(self, tmp_path):
        path = tmp_path / "data.jsonl"
        path.write_text(
            '{"id":"a","tokens":["x"],"events":[]}\n'
            '{"id":"b","tokens":["x"],"events":[{"type":"A","start":0,"end":2}]}\n',
            encoding="utf-8",
        )
        with pytest.raises(DatasetError, match=":2:"):
            load_dataset(path)

    def test_duplicate_ids(self, tmp_path):
        path = tmp_path / "data.jsonl"
        path.write_text(
            '{"id":"a","tokens":["x"],"events":[]}\n'
            '{"id":"a","tokens":["y"],"events":[]}\n',
            encoding="utf-8",
        )
        with pytest.raises(DatasetError, match="duplicate id"):
            load_dataset(path)

    def test_parse_error_reports_line(self, tmp_path):
        path = tmp_path / "data.jsonl"
        path.write_text('{"id":"a","tokens":["x"],"events":[]}\n{broken\n', encoding="utf-8")
        with pytest.raises(DatasetError, match=":2:"):
            load_dataset(path)


class TestTokenize:
    def test_lowercase_whitespace(self):
        assert tokenize("They Were KILLED") == ["they", "were", "killed"]


class TestGenerator:
    def test_determinism(self):
        config = SyntheticConfig(n_types=4, instances_per_type=30)
        assert generate_synthetic(config, seed=5) == generate_synthetic(config, seed=5)

    def test_coverage_quota(self):
        config = SyntheticConfig(n_types=4, instances_per_type=200)
        corpus = generate_synthetic(config, seed=1)
        coverage = trigger_coverage(corpus)
        assert len(coverage) == 4
        for value in coverage.values():
            assert value == pytest.approx(0.78, abs=0.03)

    def test_zero_ambiguity_no_shared_words(self):
        config = SyntheticConfig(n_types=4, instances_per_type=40, ambiguity_rate=0.0)
        corpus = generate_synthetic(config, seed=2)
        clusters = type_clusters(corpus)
        assert all(len(c) == 1 for c in clusters)

    def test_ambiguity_creates_partner_clusters(self):
        config = SyntheticConfig(n_types=4, instances_per_type=40, ambiguity_rate=1.0)
        corpus = generate_synthetic(config, seed=2)
        clusters = type_clusters(corpus)
        assert sorted(len(c) for c in clusters) == [2, 2]

    def test_sentence_length_bounds(self):
        config = SyntheticConfig(n_types=2, instances_per_type=50, min_len=8, max_len=12)
        corpus = generate_synthetic(config, seed=3)
        for inst in corpus:
            assert 8 <= len(inst.tokens) <= 12

    def test_infeasible_lexicon(self):
        with pytest.raises(DatasetError, match="infeasible"):
            SyntheticConfig(n_triggers_per_type=5)

    def test_single_event_per_instance(self):
        config = SyntheticConfig(n_types=2, instances_per_type=20)
        for inst in generate_synthetic(config, seed=0):
            assert len(inst.events) == 1


class TestSplit:
    def test_partners_stay_together_and_splits_filled(self):
        config = SyntheticConfig(n_types=10, instances_per_type=30, ambiguity_rate=0.4)
        corpus = generate_synthetic(config, seed=0)
        train, dev, test = split_by_types(corpus, (0.6, 0.2, 0.2), seed=0)
        splits = {"train": train, "dev": dev, "test": test}
        type_of_split = {}
        for name, instances in splits.items():
            for inst in instances:
                for ev in inst.events:
                    type_of_split.setdefault(ev.type, name)
        for cluster in type_clusters(corpus):
            assert len({type_of_split[t] for t in cluster}) == 1
        assert all(len(s) > 0 for s in splits.values())

    def test_types_disjoint(self):
        config = SyntheticConfig(n_types=6, instances_per_type=20)
        corpus = generate_synthetic(config, seed=1)
        train, dev, test = split_by_types(corpus, (0.5, 0.25, 0.25), seed=1)
        def types(pool):
            return {ev.type for inst in pool for ev in inst.events}
        assert not (types(train) & types(dev))
        assert not (types(train) & types(test))
        assert not (types(dev) & types(test))

    def test_bad_fractions(self):
        with pytest.raises(DatasetError, match="sum to 1"):
            split_by_types([], (0.5, 0.2, 0.2), seed=0)
