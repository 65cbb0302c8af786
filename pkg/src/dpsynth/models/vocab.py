"""Whitespace tokenization with a dense-id vocabulary and reserved specials.

Ids are dense 0..V-1. The first four ids are reserved: pad 0, end-of-
sequence 1, unknown 2, and the separator 3 that splits an instruction
prefix from the text it conditions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD_ID = 0
EOS_ID = 1
UNK_ID = 2
SEP_ID = 3
SPECIAL_TOKENS: tuple[str, ...] = ("<pad>", "<eos>", "<unk>", "<sep>")


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token list; position in the list is the token id."""

    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        if tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise ValueError(f"ids 0..3 are reserved for {SPECIAL_TOKENS}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("tokens must be distinct")

    @cached_property
    def _index(self) -> dict[str, int]:
        return {token: i for i, token in enumerate(self.tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def token_to_id(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def id_to_token(self, token_id: int) -> str:
        return self.tokens[token_id]

    @classmethod
    def from_texts(cls, texts: Iterable[str], min_count: int = 1) -> "Vocabulary":
        counts: dict[str, int] = {}
        for text in texts:
            for word in text.split():
                counts[word] = counts.get(word, 0) + 1
        kept = sorted(w for w, c in counts.items() if c >= min_count and w not in SPECIAL_TOKENS)
        return cls(tokens=SPECIAL_TOKENS + tuple(kept))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(list(self.tokens), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(tokens=tuple(json.loads(Path(path).read_text(encoding="utf-8"))))


@dataclass(frozen=True)
class TokenSequence:
    """Encoded ⟨instruction, sep, text, eos⟩ with the prefix length recorded.

    ``instruction_length`` counts the instruction tokens plus the separator,
    i.e. the number of leading positions that are conditioning rather than
    content.
    """

    ids: tuple[int, ...]
    instruction_length: int

    def __post_init__(self) -> None:
        if not 0 <= self.instruction_length <= len(self.ids):
            raise ValueError("instruction_length out of range")

    def __len__(self) -> int:
        return len(self.ids)


def encode(
    vocab: Vocabulary, instruction: str, text: str, max_sequence_length: int
) -> TokenSequence:
    """Tokenize ⟨instruction, sep, text, eos⟩, truncating text to fit.

    The instruction is never truncated; if even ⟨instruction, sep, eos⟩
    exceeds the window this is an error. Out-of-vocabulary words map to the
    unknown id.
    """
    instr_ids = [vocab.token_to_id(w) for w in instruction.split()]
    prefix_len = len(instr_ids) + 1  # separator included
    if prefix_len + 1 > max_sequence_length:
        raise ValueError(
            f"instruction occupies {prefix_len} of {max_sequence_length} positions, "
            "leaving no room for text and eos"
        )
    text_ids = [vocab.token_to_id(w) for w in text.split()]
    budget = max_sequence_length - prefix_len - 1
    ids = instr_ids + [SEP_ID] + text_ids[:budget] + [EOS_ID]
    return TokenSequence(ids=tuple(ids), instruction_length=prefix_len)


def decode(vocab: Vocabulary, sequence: TokenSequence) -> str:
    """Text part of an encoded sequence: after the prefix, before eos."""
    out = []
    for token_id in sequence.ids[sequence.instruction_length :]:
        if token_id == EOS_ID:
            break
        if token_id == PAD_ID:
            continue
        out.append(vocab.id_to_token(token_id))
    return " ".join(out)


def pad_batch(
    sequences: Sequence[TokenSequence], length: int | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad to a common length; returns (ids, lengths, instruction_lengths)."""
    if not sequences:
        raise ValueError("cannot pad an empty batch")
    width = max(len(s) for s in sequences) if length is None else length
    ids = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
    lengths = np.zeros(len(sequences), dtype=np.int64)
    instr = np.zeros(len(sequences), dtype=np.int64)
    for i, s in enumerate(sequences):
        if len(s) > width:
            raise ValueError(f"sequence of length {len(s)} exceeds pad width {width}")
        ids[i, : len(s)] = s.ids
        lengths[i] = len(s)
        instr[i] = s.instruction_length
    return ids, lengths, instr
