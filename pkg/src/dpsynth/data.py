"""Corpus ingestion, prompt rendering, balancing, splitting, and toy data.

The on-disk format is JSONL with one object per line: ``{"text": ...,
"label": ..., "author_id": ...}`` where ``author_id`` is optional. Toy
corpora give each label a private vocabulary so that desk-scale experiments
have a known, perfectly separable signal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from dpsynth.rng import child_rng


class SchemaError(ValueError):
    """One or more JSONL lines violate the corpus schema."""

    def __init__(self, path: str | Path, problems: Sequence[tuple[int, str]]):
        self.path = str(path)
        self.problems = tuple(problems)
        shown = "; ".join(f"line {n}: {why}" for n, why in self.problems[:5])
        more = "" if len(self.problems) <= 5 else f" (+{len(self.problems) - 5} more)"
        super().__init__(f"{self.path}: {len(self.problems)} bad line(s): {shown}{more}")


@dataclass(frozen=True)
class LabeledText:
    """One training record: a text, its categorical label, optional author."""

    text: str
    label: str
    author_id: str | None = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("text must be non-empty")
        if not self.label:
            raise ValueError("label must be non-empty")


@dataclass(frozen=True)
class Corpus:
    """A named record collection with a privacy flag.

    ``private`` defaults to True so data never silently becomes eligible
    for budget-free stages (pretraining, vocabulary building); public
    corpora must be marked explicitly.
    """

    records: tuple[LabeledText, ...]
    name: str = "corpus"
    private: bool = True

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class PromptTemplate:
    """Instruction pattern with a single slot filled by a per-label phrase."""

    pattern: str
    label_phrases: Mapping[str, str]

    def __post_init__(self) -> None:
        if self.pattern.count("{}") != 1:
            raise ValueError("pattern must contain exactly one {} slot")

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self.label_phrases)


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train/validation/test partition of one corpus."""

    train: tuple[LabeledText, ...]
    validation: tuple[LabeledText, ...]
    test: tuple[LabeledText, ...]
    split_seed: int

    def parts(self) -> tuple[tuple[LabeledText, ...], ...]:
        return self.train, self.validation, self.test


@dataclass(frozen=True)
class ToyDatasetSpec:
    """Recipe for a synthetic benchmark corpus with disjoint label vocabularies.

    ``author_policy`` is the number of consecutive records attributed to each
    author; 0 omits author ids entirely (making privacy audits
    unverifiable on purpose).
    """

    labels: tuple[str, ...]
    n_per_label: int = 500
    vocab_per_label: int = 8
    shared_vocab: int = 8
    length_range: tuple[int, int] = (4, 12)
    author_policy: int = 1
    label_token_rate: float = 0.5

    def __post_init__(self) -> None:
        if len(self.labels) < 2:
            raise ValueError("need at least two labels")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("labels must be distinct")
        if self.n_per_label < 1 or self.vocab_per_label < 1 or self.shared_vocab < 0:
            raise ValueError("sizes must be positive (shared_vocab may be zero)")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad length_range {self.length_range}")
        if self.author_policy < 0:
            raise ValueError("author_policy must be >= 0")
        if not 0.0 < self.label_token_rate <= 1.0:
            raise ValueError("label_token_rate must be in (0, 1]")

    def label_vocabulary(self, label: str) -> tuple[str, ...]:
        idx = self.labels.index(label)
        return tuple(f"w{idx}_{j}" for j in range(self.vocab_per_label))

    def shared_vocabulary(self) -> tuple[str, ...]:
        return tuple(f"c{j}" for j in range(self.shared_vocab))


# Instruction templates from the source tasks, verbatim including the
# presence or absence of a trailing space after the colon.
BUILTIN_TEMPLATES: dict[str, PromptTemplate] = {
    "spam": PromptTemplate(
        pattern="write a {} e-mail:",
        label_phrases={"spam": "spam", "non-spam": "non-spam"},
    ),
    "swmh": PromptTemplate(
        pattern="write a post to the {} community:",
        label_phrases={
            label: label
            for label in ("anxiety", "bipolar", "depression", "offmychest", "suicidewatch")
        },
    ),
    "thumbs_up": PromptTemplate(
        pattern="write a {} negative app review: ",
        label_phrases={
            label: label for label in ("mild", "notable", "concerning", "serious", "hot")
        },
    ),
    "webmd": PromptTemplate(
        pattern="write a {} medicine review: ",
        label_phrases={
            label: label for label in ("terrible", "poor", "neutral", "good", "great")
        },
    ),
}


def render_prompt(template: PromptTemplate, label: str) -> str:
    """Instruction string for one label; unknown labels are an error."""
    try:
        phrase = template.label_phrases[label]
    except KeyError:
        known = ", ".join(sorted(template.label_phrases))
        raise ValueError(f"unknown label {label!r}; template covers: {known}") from None
    return template.pattern.format(phrase)


def load_template(path: str | Path) -> PromptTemplate:
    """Read a template file: JSON with fields pattern and label_phrases."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return PromptTemplate(pattern=raw["pattern"], label_phrases=dict(raw["label_phrases"]))


def load_jsonl(path: str | Path) -> list[LabeledText]:
    """Parse a JSONL corpus, preserving record order.

    Malformed lines are collected and reported together in a single
    SchemaError naming each offending line number; nothing is silently
    dropped.
    """
    records: list[LabeledText] = []
    problems: list[tuple[int, str]] = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                problems.append((lineno, f"invalid JSON ({err.msg})"))
                continue
            if not isinstance(obj, dict):
                problems.append((lineno, "expected a JSON object"))
                continue
            text = obj.get("text")
            label = obj.get("label")
            author_id = obj.get("author_id")
            if not isinstance(text, str) or not text.strip():
                problems.append((lineno, "missing or empty \"text\""))
                continue
            if not isinstance(label, str) or not label:
                problems.append((lineno, "missing or empty \"label\""))
                continue
            if author_id is not None and not isinstance(author_id, str):
                problems.append((lineno, "\"author_id\" must be a string when present"))
                continue
            records.append(LabeledText(text=text, label=label, author_id=author_id))
    if problems:
        raise SchemaError(path, problems)
    return records


def dump_jsonl(records: Iterable[LabeledText], path: str | Path) -> None:
    """Write records one JSON object per line; inverse of load_jsonl."""
    with open(path, "w", encoding="utf-8") as handle:
        for r in records:
            obj: dict[str, object] = {"text": r.text, "label": r.label}
            if r.author_id is not None:
                obj["author_id"] = r.author_id
            handle.write(json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n")


def label_set(data: Sequence[LabeledText]) -> tuple[str, ...]:
    """Sorted distinct labels present in the data."""
    return tuple(sorted({r.label for r in data}))


def balance_labels(
    data: Sequence[LabeledText],
    seed: int,
    labels: Sequence[str] | None = None,
) -> list[LabeledText]:
    """Down-sample every label uniformly to the smallest label count.

    Output preserves the original record order among the survivors. When a
    declared label set is given, each declared label must be present.
    """
    declared = tuple(labels) if labels is not None else label_set(data)
    by_label: dict[str, list[int]] = {label: [] for label in declared}
    for i, r in enumerate(data):
        if r.label in by_label:
            by_label[r.label].append(i)
    missing = [label for label, idxs in by_label.items() if not idxs]
    if missing:
        raise ValueError(f"labels with no examples: {missing}")
    floor = min(len(idxs) for idxs in by_label.values())
    rng = child_rng(seed, "data", "balance")
    keep: list[int] = []
    for label in declared:
        idxs = by_label[label]
        chosen = rng.choice(len(idxs), size=floor, replace=False)
        keep.extend(idxs[j] for j in chosen)
    return [data[i] for i in sorted(keep)]


def _apportion(targets: Sequence[float], total: int) -> list[int]:
    """Integer allocation summing to ``total``, each within 1 of its target."""
    floors = [max(0, int(np.floor(t))) for t in targets]
    alloc = list(floors)
    leftover = total - sum(alloc)
    if leftover > 0:
        order = sorted(range(len(targets)), key=lambda p: targets[p] - floors[p], reverse=True)
        for p in order[:leftover]:
            alloc[p] += 1
    elif leftover < 0:
        order = sorted(range(len(targets)), key=lambda p: alloc[p] - targets[p], reverse=True)
        for p in order:
            if leftover == 0:
                break
            if alloc[p] > 0:
                alloc[p] -= 1
                leftover += 1
    return alloc


def split(
    data: Sequence[LabeledText],
    ratios: Sequence[float],
    seed: int,
) -> DatasetSplit:
    """Stratified random partition into 2 (train/test) or 3 parts.

    Each part's overall size is within one example of its exact fractional
    share. Within each label, a running target keeps per-part rounding
    errors from accumulating across labels.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) not in (2, 3):
        raise ValueError("ratios must have 2 (train/test) or 3 (train/val/test) parts")
    if any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got sum {sum(ratios)}")

    n_parts = len(ratios)
    by_label: dict[str, list[int]] = {}
    for i, r in enumerate(data):
        by_label.setdefault(r.label, []).append(i)
    for label, idxs in by_label.items():
        if len(idxs) < n_parts:
            raise ValueError(
                f"label {label!r} has {len(idxs)} example(s), fewer than {n_parts} split parts"
            )

    rng = child_rng(seed, "data", "split")
    assigned = [0.0] * n_parts
    cum_target = [0.0] * n_parts
    part_indices: list[list[int]] = [[] for _ in range(n_parts)]
    for label in sorted(by_label):
        idxs = list(by_label[label])
        rng.shuffle(idxs)
        for p in range(n_parts):
            cum_target[p] += len(idxs) * ratios[p]
        counts = _apportion([cum_target[p] - assigned[p] for p in range(n_parts)], len(idxs))
        start = 0
        for p, count in enumerate(counts):
            part_indices[p].extend(idxs[start : start + count])
            assigned[p] += count
            start += count

    parts = tuple(tuple(data[i] for i in sorted(indices)) for indices in part_indices)
    if n_parts == 2:
        return DatasetSplit(train=parts[0], validation=(), test=parts[1], split_seed=seed)
    return DatasetSplit(train=parts[0], validation=parts[1], test=parts[2], split_seed=seed)


def make_toy_dataset(spec: ToyDatasetSpec, seed: int) -> list[LabeledText]:
    """Generate a labeled corpus whose label signal is perfectly recoverable.

    Every text mixes tokens from its label's private vocabulary with shared
    tokens and always contains at least one private token, so a frequency
    rule separates the labels without error.
    """
    rng = child_rng(seed, "data", "toy")
    shared = spec.shared_vocabulary()
    records: list[LabeledText] = []
    lo, hi = spec.length_range
    for label in spec.labels:
        own = spec.label_vocabulary(label)
        for _ in range(spec.n_per_label):
            length = int(rng.integers(lo, hi + 1))
            tokens: list[str] = []
            for _ in range(length):
                if not shared or rng.random() < spec.label_token_rate:
                    tokens.append(own[int(rng.integers(len(own)))])
                else:
                    tokens.append(shared[int(rng.integers(len(shared)))])
            if not any(t in own for t in tokens):
                tokens[0] = own[int(rng.integers(len(own)))]
            records.append(LabeledText(text=" ".join(tokens), label=label))
    if spec.author_policy >= 1:
        k = spec.author_policy
        records = [
            LabeledText(text=r.text, label=r.label, author_id=f"author-{i // k:05d}")
            for i, r in enumerate(records)
        ]
    return records
