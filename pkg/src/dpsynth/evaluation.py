"""Synthetic-corpus sampling and utility measurement.

The utility protocol: sample a label-balanced corpus from a trained
generator, train a small text classifier on it, score that classifier on
the original test split, and measure corpus perplexity under a reference
language model. Multi-seed runs aggregate to mean +/- population std.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from dpsynth.data import LabeledText, PromptTemplate, render_prompt
from dpsynth.models import autoregressive as ar
from dpsynth.models import diffusion as df
from dpsynth.models import nn
from dpsynth.models.vocab import SEP_ID, TokenSequence, Vocabulary, decode, encode, pad_batch
from dpsynth.privacy import PrivacyBudget
from dpsynth.rng import child_rng

GENERATOR_KINDS = ("autoregressive", "diffusion")
MAX_GENERATION_ATTEMPTS = 4  # one try plus up to three retries
VALIDATION_CAP = 2000
GENERATION_CHUNK = 250


@dataclass(frozen=True)
class GenerationSpec:
    """How to sample a synthetic corpus: size, decoding, and seed."""

    n_per_label: int
    max_new_tokens: int = 24
    temperature: float = 1.0
    top_k: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_per_label < 1:
            raise ValueError("n_per_label must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.top_k < 1:
            raise ValueError("top_k must be positive")


@dataclass(frozen=True)
class TrainedGenerator:
    """A trained generative model plus the budget its training realized."""

    kind: str
    params: nn.Params
    config: ar.ArConfig | df.DiffusionConfig
    vocab: Vocabulary
    budget: PrivacyBudget
    name: str = "generator"

    def __post_init__(self) -> None:
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"kind must be one of {GENERATOR_KINDS}")


@dataclass(frozen=True)
class SyntheticRecord:
    text: str
    label: str
    generator: str
    seed: int
    failed: bool = False


@dataclass(frozen=True)
class SyntheticCorpus:
    records: tuple[SyntheticRecord, ...]
    provenance: PrivacyBudget

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(sorted({r.label for r in self.records}))

    @property
    def failure_count(self) -> int:
        return sum(1 for r in self.records if r.failed)

    def texts(self) -> list[str]:
        return [r.text for r in self.records]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            for r in self.records:
                row = {
                    "text": r.text, "label": r.label, "generator": r.generator,
                    "seed": r.seed, "failed": r.failed,
                }
                handle.write(json.dumps(row, sort_keys=True) + "\n")


def _sample_label_batch(
    generator: TrainedGenerator,
    instruction: str,
    spec: GenerationSpec,
    rngs: list[np.random.Generator],
) -> list[str]:
    """One decoding pass producing one text per rng, all for a single label."""
    vocab = generator.vocab
    prefix = [vocab.token_to_id(w) for w in instruction.split()] + [SEP_ID]
    texts: list[str] = []
    for start in range(0, len(rngs), GENERATION_CHUNK):
        chunk = rngs[start : start + GENERATION_CHUNK]
        if generator.kind == "autoregressive":
            rows = ar.generate_batch(
                generator.params, generator.config, [list(prefix)] * len(chunk),
                max_new_tokens=spec.max_new_tokens, temperature=spec.temperature,
                top_k=min(spec.top_k, generator.config.vocab_size), rngs=chunk,
            )
            texts.extend(
                decode(vocab, TokenSequence(ids=tuple(prefix + row), instruction_length=len(prefix)))
                for row in rows
            )
        else:
            schedule = generator.config.schedule()
            blocks = df.reverse_sample_batch(
                generator.params, generator.config, [list(prefix)] * len(chunk),
                schedule, chunk,
            )
            texts.extend(df.decode_target_block(vocab, block) for block in blocks)
    return texts


def generate_corpus(
    generator: TrainedGenerator, template: PromptTemplate, spec: GenerationSpec
) -> SyntheticCorpus:
    """Label-balanced sampling: exactly n_per_label records per label.

    A sample that decodes to an empty text is retried (its generator
    continues the same stream) up to three times, then kept as an empty
    record with ``failed`` set — failures are counted, never resampled
    away.
    """
    records: list[SyntheticRecord] = []
    for label in template.labels:
        instruction = render_prompt(template, label)
        rngs = [
            child_rng(spec.seed, "generate", generator.name, label, str(i))
            for i in range(spec.n_per_label)
        ]
        texts = [""] * spec.n_per_label
        pending = list(range(spec.n_per_label))
        for _attempt in range(MAX_GENERATION_ATTEMPTS):
            if not pending:
                break
            fresh = _sample_label_batch(
                generator, instruction, spec, [rngs[i] for i in pending]
            )
            for i, text in zip(pending, fresh):
                texts[i] = text
            pending = [i for i in pending if not texts[i].strip()]
        failed = set(pending)
        records.extend(
            SyntheticRecord(
                text=texts[i] if i not in failed else "",
                label=label, generator=generator.name, seed=spec.seed,
                failed=i in failed,
            )
            for i in range(spec.n_per_label)
        )
    return SyntheticCorpus(records=tuple(records), provenance=generator.budget)


# ---------------------------------------------------------------------------
# downstream classifier


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    accuracy: float
    macro_f1: float


@dataclass(frozen=True)
class DownstreamClassifier:
    """Averaged-embedding softmax classifier over whitespace tokens."""

    vocab: Vocabulary
    labels: tuple[str, ...]
    emb: np.ndarray
    w: np.ndarray
    b: np.ndarray
    best_epoch: int
    history: tuple[EpochMetrics, ...]

    def _features(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.emb.shape[1]))
        for i, text in enumerate(texts):
            ids = [self.vocab.token_to_id(w) for w in text.split()]
            if ids:
                out[i] = self.emb[ids].mean(axis=0)
        return out

    def predict(self, texts: Sequence[str]) -> list[str]:
        logits = self._features(texts) @ self.w + self.b
        return [self.labels[i] for i in np.argmax(logits, axis=1)]


def _average_embedding_step(
    emb: np.ndarray, w: np.ndarray, b: np.ndarray,
    token_ids: list[np.ndarray], gold: np.ndarray, learning_rate: float,
) -> None:
    """One in-place SGD step of softmax cross-entropy on mean-embedding features."""
    batch = len(token_ids)
    dim = emb.shape[1]
    feats = np.zeros((batch, dim))
    for i, ids in enumerate(token_ids):
        if len(ids):
            feats[i] = emb[ids].mean(axis=0)
    logits = feats @ w + b
    probs = nn.softmax(logits, axis=-1)
    dlogits = probs.copy()
    dlogits[np.arange(batch), gold] -= 1.0
    dlogits /= batch
    dw = feats.T @ dlogits
    db = dlogits.sum(axis=0)
    dfeats = dlogits @ w.T
    w -= learning_rate * dw
    b -= learning_rate * db
    for i, ids in enumerate(token_ids):
        if len(ids):
            np.add.at(emb, ids, -learning_rate * dfeats[i] / len(ids))


def train_downstream_classifier(
    corpus: SyntheticCorpus,
    validation: Sequence[LabeledText],
    seed: int,
    num_epochs: int = 5,
    embedding_dim: int = 16,
    learning_rate: float = 0.5,
    batch_size: int = 32,
    validation_cap: int = VALIDATION_CAP,
) -> DownstreamClassifier:
    """5-epoch protocol: train, validate each epoch, keep the best macro-F1.

    Validation is subsampled once to at most ``validation_cap`` records.
    Ties on macro-F1 keep the earliest epoch.
    """
    labels = corpus.labels
    val_labels = {r.label for r in validation}
    if not val_labels.issubset(set(labels)):
        raise ValueError("corpus labels must cover the validation label set")
    for label in labels:
        if all(not r.text.strip() for r in corpus.records if r.label == label):
            warnings.warn(f"all texts for label {label!r} are empty", stacklevel=2)

    vocab = Vocabulary.from_texts([r.text for r in corpus.records])
    rng = child_rng(seed, "classifier", "init")
    emb = rng.normal(0.0, 0.1, (vocab.size, embedding_dim))
    w = np.zeros((embedding_dim, len(labels)))
    b = np.zeros(len(labels))

    if len(validation) > validation_cap:
        keep = child_rng(seed, "classifier", "valsub").choice(
            len(validation), size=validation_cap, replace=False
        )
        validation = [validation[i] for i in sorted(keep)]

    label_index = {label: i for i, label in enumerate(labels)}
    token_ids = [
        np.array([vocab.token_to_id(word) for word in r.text.split()], dtype=np.int64)
        for r in corpus.records
    ]
    gold = np.array([label_index[r.label] for r in corpus.records])

    best: tuple[float, int, np.ndarray, np.ndarray, np.ndarray] | None = None
    history: list[EpochMetrics] = []
    order_rng = child_rng(seed, "classifier", "shuffle")
    for epoch in range(num_epochs):
        order = order_rng.permutation(len(token_ids))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            _average_embedding_step(
                emb, w, b, [token_ids[i] for i in idx], gold[idx], learning_rate
            )
        snapshot = DownstreamClassifier(
            vocab=vocab, labels=labels, emb=emb.copy(), w=w.copy(), b=b.copy(),
            best_epoch=epoch, history=(),
        )
        accuracy, macro_f1 = evaluate(snapshot, validation)
        history.append(EpochMetrics(epoch=epoch, accuracy=accuracy, macro_f1=macro_f1))
        if best is None or macro_f1 > best[0]:
            best = (macro_f1, epoch, snapshot.emb, snapshot.w, snapshot.b)

    assert best is not None
    return DownstreamClassifier(
        vocab=vocab, labels=labels, emb=best[2], w=best[3], b=best[4],
        best_epoch=best[1], history=tuple(history),
    )


# ---------------------------------------------------------------------------
# metrics


def accuracy_score(gold: Sequence[str], predicted: Sequence[str]) -> float:
    if not gold or len(gold) != len(predicted):
        raise ValueError("gold and predictions must be equal-length and non-empty")
    return sum(1 for g, p in zip(gold, predicted) if g == p) / len(gold)


def macro_f1_score(
    gold: Sequence[str], predicted: Sequence[str], classes: Sequence[str]
) -> float:
    """Unweighted mean of per-class F1; a class absent everywhere scores 0."""
    if not gold or len(gold) != len(predicted):
        raise ValueError("gold and predictions must be equal-length and non-empty")
    if not classes:
        raise ValueError("need at least one class")
    total = 0.0
    for cls in classes:
        tp = sum(1 for g, p in zip(gold, predicted) if g == cls and p == cls)
        fp = sum(1 for g, p in zip(gold, predicted) if g != cls and p == cls)
        fn = sum(1 for g, p in zip(gold, predicted) if g == cls and p != cls)
        denom = 2 * tp + fp + fn
        total += (2 * tp / denom) if denom else 0.0
    return total / len(classes)


def evaluate(classifier: DownstreamClassifier, test: Sequence[LabeledText]) -> tuple[float, float]:
    """(accuracy, macro-F1) of the classifier on original labeled texts."""
    if not test:
        raise ValueError("test set must be non-empty")
    predicted = classifier.predict([r.text for r in test])
    gold = [r.label for r in test]
    return (
        accuracy_score(gold, predicted),
        macro_f1_score(gold, predicted, classifier.labels),
    )


# ---------------------------------------------------------------------------
# perplexity under a reference language model


def corpus_nll(
    params: nn.Params,
    config: ar.ArConfig,
    vocab: Vocabulary,
    texts: Sequence[str],
    batch_size: int = 128,
) -> tuple[float, int]:
    """(summed NLL, token count) over the text tokens of non-empty texts."""
    sequences = [
        encode(vocab, "", text, config.max_sequence_length)
        for text in texts
        if text.strip()
    ]
    total_nll = 0.0
    total_tokens = 0
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start : start + batch_size]
        ids, lengths, _ = pad_batch(chunk)
        nll = ar.position_nll(params, config, ids)
        # row layout is [sep, text .., eos]: positions 0..n_text-1 of the
        # shifted grid predict exactly the text tokens
        text_counts = lengths - 2
        mask = np.arange(ids.shape[1] - 1)[None, :] < text_counts[:, None]
        total_nll += float((nll * mask).sum())
        total_tokens += int(text_counts.sum())
    return total_nll, total_tokens


def perplexity(
    params: nn.Params, config: ar.ArConfig, vocab: Vocabulary, texts: Sequence[str]
) -> float:
    """exp of the token-weighted mean NLL pooled across the corpus."""
    total_nll, total_tokens = corpus_nll(params, config, vocab, texts)
    if total_tokens == 0:
        raise ValueError("perplexity is undefined for an all-empty corpus")
    return float(np.exp(total_nll / total_tokens))


# ---------------------------------------------------------------------------
# aggregate reporting


@dataclass(frozen=True)
class SeedResult:
    seed: int
    accuracy: float
    macro_f1: float
    perplexity: float
    failed_generations: int = 0


@dataclass(frozen=True)
class MetricSummary:
    values: tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))  # population std; 0 for one run


@dataclass(frozen=True)
class EvalReport:
    seed_results: tuple[SeedResult, ...]

    def __post_init__(self) -> None:
        if not self.seed_results:
            raise ValueError("need at least one run")

    def _summary(self, attr: str) -> MetricSummary:
        return MetricSummary(values=tuple(getattr(r, attr) for r in self.seed_results))

    @property
    def accuracy(self) -> MetricSummary:
        return self._summary("accuracy")

    @property
    def macro_f1(self) -> MetricSummary:
        return self._summary("macro_f1")

    @property
    def perplexity(self) -> MetricSummary:
        return self._summary("perplexity")

    @property
    def failed_generations(self) -> int:
        return sum(r.failed_generations for r in self.seed_results)

    def as_dict(self) -> dict:
        out: dict = {"seeds": [r.seed for r in self.seed_results]}
        for attr in ("accuracy", "macro_f1", "perplexity"):
            summary = self._summary(attr)
            out[attr] = {
                "mean": summary.mean,
                "std": summary.std,
                "per_seed": {str(r.seed): getattr(r, attr) for r in self.seed_results},
            }
        out["failed_generations"] = self.failed_generations
        return out


def multi_seed_report(runs: Sequence[SeedResult]) -> EvalReport:
    """Aggregate per-seed results; order of the input runs is irrelevant."""
    return EvalReport(seed_results=tuple(sorted(runs, key=lambda r: r.seed)))


def evaluate_synthetic(
    corpus: SyntheticCorpus,
    validation: Sequence[LabeledText],
    test: Sequence[LabeledText],
    reference: TrainedGenerator,
    seed: int,
) -> SeedResult:
    """Full utility measurement of one synthetic corpus.

    An all-empty corpus has no defined perplexity; it is reported as
    infinity here (with every generation counted as failed) rather than
    aborting the run.
    """
    classifier = train_downstream_classifier(corpus, validation, seed)
    accuracy, macro_f1 = evaluate(classifier, test)
    try:
        ppl = perplexity(reference.params, reference.config, reference.vocab, corpus.texts())
    except ValueError:
        ppl = float("inf")
    return SeedResult(
        seed=seed, accuracy=accuracy, macro_f1=macro_f1, perplexity=ppl,
        failed_generations=corpus.failure_count,
    )
