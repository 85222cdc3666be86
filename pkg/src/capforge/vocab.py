"""Caption tokenization and the token vocabulary.

Ids are assigned deterministically: ``<end>`` is 0, ``<unk>`` is 1, then
surviving tokens by descending count with lexicographic tie-breaks. The
``<end>`` id doubles as the begin-of-sequence marker fed to the decoder at
the first step, so no third special token is needed.
"""

from __future__ import annotations

import io
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

END = "<end>"
UNK = "<unk>"
SPECIALS = (END, UNK)

VOCAB_VERSION = "# capforge-vocab v1"

_PUNCT = re.compile(r'[.,!?;:"()]')


def tokenize(text: str) -> list[str]:
    """Lowercase, drop the punctuation characters ``.,!?;:"()`` and split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass(frozen=True)
class CaptionRecord:
    image_id: str
    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.tokens:
            raise ValueError(f"caption for image {self.image_id!r} is empty after tokenization")

    @classmethod
    def from_text(cls, image_id: str, text: str) -> "CaptionRecord":
        return cls(str(image_id), tuple(tokenize(text)))


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple[str, ...]
    counts: dict[str, int] = field(compare=False)
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mapping = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        for special in SPECIALS:
            if special not in mapping:
                raise ValueError(f"vocabulary is missing {special}")
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def end_id(self) -> int:
        return self.token_to_id[END]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def start_id(self) -> int:
        return self.end_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)


def build_vocab(corpus: Iterable[CaptionRecord], min_count: int = 5) -> Vocabulary:
    """Count tokens over ``corpus`` and keep those seen at least ``min_count`` times."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counter: Counter[str] = Counter()
    for record in corpus:
        counter.update(record.tokens)
    for special in SPECIALS:
        counter.pop(special, None)
    kept = sorted(
        (tok for tok, n in counter.items() if n >= min_count),
        key=lambda tok: (-counter[tok], tok),
    )
    counts = {END: 0, UNK: 0}
    counts.update((tok, counter[tok]) for tok in kept)
    return Vocabulary(SPECIALS + tuple(kept), counts)


def encode(tokens: Sequence[str], vocab: Vocabulary, max_len: int = 50) -> list[int]:
    """Map tokens to ids, truncating to ``max_len`` and appending ``<end>``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = [vocab.id_of(tok) for tok in tokens[:max_len]]
    ids.append(vocab.end_id)
    return ids


def decode_ids(ids: Iterable[int], vocab: Vocabulary) -> list[str]:
    """Tokens up to, not including, the first ``<end>``."""
    out = []
    size = len(vocab)
    for i in ids:
        i = int(i)
        if not 0 <= i < size:
            raise ValueError(f"token id {i} out of range for vocabulary of size {size}")
        if i == vocab.end_id:
            break
        out.append(vocab.id_to_token[i])
    return out


# -- file formats -----------------------------------------------------------

def read_corpus(path: str | os.PathLike) -> list[CaptionRecord]:
    """Read ``image_id<TAB>caption`` lines; blank lines and ``#`` comments are skipped."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected image_id<TAB>caption")
            image_id, text = line.split("\t", 1)
            records.append(CaptionRecord.from_text(image_id, text))
    return records


def format_corpus(records: Iterable[CaptionRecord]) -> str:
    return "".join(f"{r.image_id}\t{' '.join(r.tokens)}\n" for r in records)


def dump_vocab(vocab: Vocabulary) -> str:
    buf = io.StringIO()
    buf.write(f"{VOCAB_VERSION} size={len(vocab)}\n")
    for i, tok in enumerate(vocab.id_to_token):
        buf.write(f"{i}\t{tok}\t{vocab.counts.get(tok, 0)}\n")
    return buf.getvalue()


def parse_vocab(text: str) -> Vocabulary:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(VOCAB_VERSION):
        raise ValueError("not a capforge vocabulary file (bad version line)")
    tokens, counts = [], {}
    for lineno, line in enumerate(lines[1:], 2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"vocabulary line {lineno}: expected id<TAB>token<TAB>count")
        idx, tok, count = int(parts[0]), parts[1], int(parts[2])
        if idx != len(tokens):
            raise ValueError(f"vocabulary line {lineno}: ids must be contiguous from 0")
        tokens.append(tok)
        counts[tok] = count
    return Vocabulary(tuple(tokens), counts)


def load_vocab(path: str | os.PathLike) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        return parse_vocab(fh.read())
