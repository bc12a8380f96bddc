"""Toy word-level tokenizer with a corpus-learned vocabulary.

Splits on whitespace and punctuation, lowercases, truncates to max_len and
pads with <PAD>. Anything exposing encode()/vocab_size can be plugged in
behind the same interface (e.g. an adapter around a pretrained tokenizer).
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EncoderError

PAD_TOKEN = "<PAD>"
UNK_TOKEN = "<UNK>"

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def split_words(text: str) -> list[str]:
    """Lowercased word/punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class TokenizedText:
    token_ids: tuple[int, ...]
    attention_mask: tuple[int, ...]
    pad_id: int

    def __post_init__(self):
        if len(self.token_ids) != len(self.attention_mask):
            raise EncoderError("token_ids and attention_mask lengths differ")
        for tid, m in zip(self.token_ids, self.attention_mask):
            if m not in (0, 1):
                raise EncoderError("attention mask entries must be 0/1")
            if m == 0 and tid != self.pad_id:
                raise EncoderError("masked-out positions must hold the pad id")

    @property
    def length(self) -> int:
        return len(self.token_ids)

    @property
    def real_length(self) -> int:
        return sum(self.attention_mask)


class WordTokenizer:
    def __init__(self, tokens: Sequence[str]):
        """tokens: full vocabulary in id order; must start with PAD and UNK."""
        if len(tokens) < 2 or tokens[0] != PAD_TOKEN or tokens[1] != UNK_TOKEN:
            raise EncoderError(
                f"vocabulary must start with {PAD_TOKEN}, {UNK_TOKEN}"
            )
        if len(set(tokens)) != len(tokens):
            raise EncoderError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @classmethod
    def train(cls, texts: Iterable[str], min_count: int = 1) -> "WordTokenizer":
        """Learn the vocabulary from corpus texts.

        Tokens are ordered by descending frequency, then alphabetically, so
        the mapping is deterministic for a given corpus.
        """
        counts = Counter()
        for text in texts:
            counts.update(split_words(text))
        kept = sorted(
            (t for t, c in counts.items() if c >= min_count),
            key=lambda t: (-counts[t], t),
        )
        return cls([PAD_TOKEN, UNK_TOKEN] + kept)

    def encode(self, text: str, max_len: int = 512) -> TokenizedText:
        if not text or not text.strip():
            raise EncoderError("cannot tokenize empty text")
        if max_len < 1:
            raise EncoderError(f"max_len must be >= 1, got {max_len}")
        words = split_words(text)[:max_len]
        ids = [self._ids.get(w, self.unk_id) for w in words]
        mask = [1] * len(ids)
        ids += [self.pad_id] * (max_len - len(ids))
        mask += [0] * (max_len - len(mask))
        return TokenizedText(tuple(ids), tuple(mask), self.pad_id)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids if i != self.pad_id]

    def save(self, path) -> None:
        """Token-per-line vocabulary file: "<id>\t<token>"."""
        with Path(path).open("w") as handle:
            for i, token in enumerate(self.tokens):
                handle.write(f"{i}\t{token}\n")

    @classmethod
    def load(cls, path) -> "WordTokenizer":
        tokens = []
        for line_no, line in enumerate(Path(path).read_text().splitlines()):
            if not line:
                continue
            idx, _, token = line.partition("\t")
            if int(idx) != len(tokens):
                raise EncoderError(f"vocabulary line {line_no}: ids out of order")
            tokens.append(token)
        return cls(tokens)
