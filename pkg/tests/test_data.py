"""Corpus ingestion, templates, balancing, splitting, toy data."""

from __future__ import annotations

import json
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpsynth.data import (
    BUILTIN_TEMPLATES,
    DatasetSplit,
    LabeledText,
    PromptTemplate,
    SchemaError,
    ToyDatasetSpec,
    balance_labels,
    dump_jsonl,
    label_set,
    load_jsonl,
    load_template,
    make_toy_dataset,
    render_prompt,
    split,
)
from dpsynth.privacy import audit_author_contributions


def as_multiset(records):
    return Counter((r.text, r.label, r.author_id) for r in records)


class TestLabeledText:
    def test_rejects_blank_text(self):
        with pytest.raises(ValueError):
            LabeledText(text="   ", label="a")

    def test_rejects_empty_label(self):
        with pytest.raises(ValueError):
            LabeledText(text="hello", label="")


class TestTemplates:
    @pytest.mark.parametrize(
        "name,label,expected",
        [
            ("webmd", "great", "write a great medicine review: "),
            ("webmd", "terrible", "write a terrible medicine review: "),
            ("swmh", "anxiety", "write a post to the anxiety community:"),
            ("spam", "spam", "write a spam e-mail:"),
            ("spam", "non-spam", "write a non-spam e-mail:"),
            ("thumbs_up", "mild", "write a mild negative app review: "),
        ],
    )
    def test_builtin_rendering(self, name, label, expected):
        assert render_prompt(BUILTIN_TEMPLATES[name], label) == expected

    def test_unknown_label(self):
        with pytest.raises(ValueError, match="meh"):
            render_prompt(BUILTIN_TEMPLATES["webmd"], "meh")

    def test_pattern_needs_exactly_one_slot(self):
        with pytest.raises(ValueError):
            PromptTemplate(pattern="no slot here", label_phrases={"a": "a"})
        with pytest.raises(ValueError):
            PromptTemplate(pattern="{} and {}", label_phrases={"a": "a"})

    def test_rendering_injective_for_distinct_phrases(self):
        for template in BUILTIN_TEMPLATES.values():
            rendered = [render_prompt(template, label) for label in template.labels]
            assert len(set(rendered)) == len(rendered)

    def test_template_file_round_trip(self, tmp_path):
        path = tmp_path / "tmpl.json"
        path.write_text(
            json.dumps({"pattern": "say something {}:", "label_phrases": {"x": "nice"}})
        )
        template = load_template(path)
        assert render_prompt(template, "x") == "say something nice:"


class TestLoadJsonl:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert load_jsonl(path) == []

    def test_round_trip_identity(self, tmp_path):
        records = [
            LabeledText(
                text=f"sample text {i}",
                label=f"label{i % 3}",
                author_id=None if i % 7 == 0 else f"auth{i % 11}",
            )
            for i in range(100)
        ]
        path = tmp_path / "corpus.jsonl"
        dump_jsonl(records, path)
        assert load_jsonl(path) == records

    def test_missing_label_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"text": "ok", "label": "a"}\n{"text": "no label"}\n')
        with pytest.raises(SchemaError, match="line 2"):
            load_jsonl(path)

    def test_all_problems_collected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(
            "not json\n"
            '{"text": "", "label": "a"}\n'
            '{"text": "ok", "label": "a", "author_id": 5}\n'
            '["array"]\n'
        )
        with pytest.raises(SchemaError) as exc:
            load_jsonl(path)
        assert [n for n, _ in exc.value.problems] == [1, 2, 3, 4]

    def test_blank_lines_skipped_and_order_kept(self, tmp_path):
        path = tmp_path / "gaps.jsonl"
        path.write_text('{"text": "a", "label": "x"}\n\n{"text": "b", "label": "y"}\n')
        texts = [r.text for r in load_jsonl(path)]
        assert texts == ["a", "b"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_jsonl(tmp_path / "nope.jsonl")


def toy_records(counts: dict[str, int]) -> list[LabeledText]:
    out = []
    i = 0
    for label, n in counts.items():
        for _ in range(n):
            out.append(LabeledText(text=f"text {i}", label=label))
            i += 1
    return out


class TestBalanceLabels:
    def test_already_balanced_unchanged(self):
        data = toy_records({"A": 10, "B": 10})
        assert len(balance_labels(data, seed=0)) == 20

    def test_downsamples_to_min(self):
        data = toy_records({"A": 100, "B": 10})
        balanced = balance_labels(data, seed=0)
        counts = Counter(r.label for r in balanced)
        assert counts == {"A": 10, "B": 10}

    def test_deterministic(self):
        data = toy_records({"A": 50, "B": 7, "C": 23})
        assert balance_labels(data, seed=3) == balance_labels(data, seed=3)
        assert balance_labels(data, seed=3) != balance_labels(data, seed=4)

    def test_survivors_keep_input_order(self):
        data = toy_records({"A": 40, "B": 5})
        balanced = balance_labels(data, seed=1)
        positions = [data.index(r) for r in balanced]
        assert positions == sorted(positions)

    def test_missing_declared_label(self):
        data = toy_records({"A": 5})
        with pytest.raises(ValueError, match="B"):
            balance_labels(data, seed=0, labels=["A", "B"])

    @given(
        counts=st.dictionaries(
            st.sampled_from(["A", "B", "C", "D"]),
            st.integers(1, 60),
            min_size=2,
        ),
        seed=st.integers(0, 10),
    )
    @settings(max_examples=40, deadline=None)
    def test_counts_exactly_equal(self, counts, seed):
        data = toy_records(counts)
        balanced = balance_labels(data, seed=seed)
        got = Counter(r.label for r in balanced)
        assert set(got.values()) == {min(counts.values())}
        assert as_multiset(balanced) <= as_multiset(data)


RATIO_CHOICES = [(0.8, 0.2), (0.8, 0.1, 0.1), (0.5, 0.25, 0.25), (0.6, 0.4)]


class TestSplit:
    def test_80_20_on_100(self):
        result = split(toy_records({"A": 60, "B": 40}), (0.8, 0.2), seed=0)
        assert (len(result.train), len(result.validation), len(result.test)) == (80, 0, 20)

    def test_8_1_1_on_1000(self):
        result = split(toy_records({"A": 500, "B": 500}), (0.8, 0.1, 0.1), seed=0)
        assert (len(result.train), len(result.validation), len(result.test)) == (800, 100, 100)

    def test_deterministic(self):
        data = toy_records({"A": 37, "B": 21, "C": 42})
        a = split(data, (0.8, 0.1, 0.1), seed=5)
        b = split(data, (0.8, 0.1, 0.1), seed=5)
        assert a == b
        c = split(data, (0.8, 0.1, 0.1), seed=6)
        assert a != c

    def test_label_smaller_than_parts(self):
        data = toy_records({"A": 10, "B": 2})
        with pytest.raises(ValueError, match="B"):
            split(data, (0.8, 0.1, 0.1), seed=0)

    def test_bad_ratios(self):
        data = toy_records({"A": 10, "B": 10})
        with pytest.raises(ValueError):
            split(data, (0.5, 0.2), seed=0)
        with pytest.raises(ValueError):
            split(data, (1.2, -0.2), seed=0)
        with pytest.raises(ValueError):
            split(data, (1.0,), seed=0)

    def test_stratified(self):
        data = toy_records({"A": 800, "B": 200})
        result = split(data, (0.8, 0.1, 0.1), seed=9)
        train_counts = Counter(r.label for r in result.train)
        assert abs(train_counts["A"] - 640) <= 2
        assert abs(train_counts["B"] - 160) <= 2

    @given(
        counts=st.dictionaries(
            st.sampled_from(["A", "B", "C", "D"]),
            st.integers(3, 80),
            min_size=1,
        ),
        ratios=st.sampled_from(RATIO_CHOICES),
        seed=st.integers(0, 5),
    )
    @settings(max_examples=60, deadline=None)
    def test_partition_and_proportion_invariants(self, counts, ratios, seed):
        data = toy_records(counts)
        result = split(data, ratios, seed=seed)
        parts = [p for p in result.parts() if len(ratios) == 3 or p is not result.validation]
        total = len(data)
        # exact partition: every record exactly once
        combined = Counter()
        for part in parts:
            combined += as_multiset(part)
        assert combined == as_multiset(data)
        # each part within one example of its fractional share
        for part, ratio in zip(parts, ratios):
            assert abs(len(part) - total * ratio) <= 1.0 + 1e-9


class TestToyDataset:
    def test_record_count(self):
        spec = ToyDatasetSpec(labels=("pos", "neg"), n_per_label=500)
        assert len(make_toy_dataset(spec, seed=0)) == 1000

    def test_perfect_separability_by_frequency_rule(self):
        spec = ToyDatasetSpec(labels=("pos", "neg"), n_per_label=200)
        data = make_toy_dataset(spec, seed=1)
        vocabs = {label: set(spec.label_vocabulary(label)) for label in spec.labels}
        for r in data:
            tokens = r.text.split()
            scores = {label: sum(t in v for t in tokens) for label, v in vocabs.items()}
            assert max(scores, key=scores.get) == r.label

    def test_label_vocabularies_disjoint(self):
        spec = ToyDatasetSpec(labels=("a", "b", "c"))
        vocabs = [set(spec.label_vocabulary(label)) for label in spec.labels]
        shared = set(spec.shared_vocabulary())
        for i, v in enumerate(vocabs):
            assert not (v & shared)
            for w in vocabs[i + 1 :]:
                assert not (v & w)

    def test_author_policy_k2_detected_by_audit(self):
        spec = ToyDatasetSpec(labels=("pos", "neg"), n_per_label=50, author_policy=2)
        report = audit_author_contributions(make_toy_dataset(spec, seed=0))
        assert report.k_max == 2
        assert report.authors_known

    def test_author_policy_unique(self):
        spec = ToyDatasetSpec(labels=("pos", "neg"), n_per_label=50, author_policy=1)
        report = audit_author_contributions(make_toy_dataset(spec, seed=0))
        assert report.k_max == 1

    def test_author_policy_zero_is_unverifiable(self):
        spec = ToyDatasetSpec(labels=("pos", "neg"), n_per_label=10, author_policy=0)
        report = audit_author_contributions(make_toy_dataset(spec, seed=0))
        assert not report.authors_known

    def test_deterministic(self):
        spec = ToyDatasetSpec(labels=("pos", "neg"), n_per_label=30)
        assert make_toy_dataset(spec, seed=7) == make_toy_dataset(spec, seed=7)
        assert make_toy_dataset(spec, seed=7) != make_toy_dataset(spec, seed=8)

    def test_lengths_respect_range(self):
        spec = ToyDatasetSpec(labels=("pos", "neg"), n_per_label=100, length_range=(3, 6))
        for r in make_toy_dataset(spec, seed=2):
            assert 3 <= len(r.text.split()) <= 6

    def test_label_set_helper(self):
        data = toy_records({"B": 2, "A": 3})
        assert label_set(data) == ("A", "B")
