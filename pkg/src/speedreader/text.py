"""Tokenization, punctuation classes, and the jump-target index.

Tokenization rules:
  - Text is lowercased and split on whitespace.
  - Each leading or trailing character in { , . ! ? } of a chunk is split
    off as its own token. Interior punctuation stays inside the token.
  - A token is classified as a comma iff its surface is exactly ",", and
    as a sentence end iff its surface is exactly ".", "!", or "?".
    All other punctuation (;:'"- etc.) is structurally inert.

The structure index precomputes, for every position i, the position of
the next comma and the next sentence terminator strictly after i, with
the one-past-the-end position T as the sentinel when none exists. Jump
actions land on the token AFTER the target punctuation mark (clamped to
the document end), so a resolved jump always advances.

Corpus file format: UTF-8, one example per line, ``<label><TAB><text>``.
Labels are arbitrary non-empty strings mapped to ids in lexicographic
order.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

PUNCT_COMMA = "comma"
PUNCT_SENTENCE_END = "sentence_end"
PUNCT_NONE = "none"

_STRUCTURAL_CHARS = frozenset(",.!?")
_SENTENCE_END_SURFACES = frozenset(".!?")

# Id 0 is the shared out-of-vocabulary id; real words start at 1.
OOV_ID = 0


class CorpusFormatError(ValueError):
    """Raised for malformed corpus files, with the offending line number."""


@dataclass(frozen=True, slots=True)
class Token:
    surface: str  # lowercased surface form
    vocab_id: int  # OOV_ID when not in the vocabulary
    position: int  # 0-based index within the document
    punct_class: str  # one of PUNCT_COMMA / PUNCT_SENTENCE_END / PUNCT_NONE


@dataclass(frozen=True, slots=True)
class Document:
    tokens: tuple[Token, ...]
    label_id: int
    raw: str  # original line text, pre-tokenization


@dataclass(frozen=True, slots=True)
class StructureIndex:
    """Per-position landing targets for the jump actions.

    ``next_comma[i]`` is the smallest j > i whose token is a comma, or
    ``doc_end`` if there is none; analogously for ``next_sentence_end``.
    Both arrays are non-decreasing in i.
    """

    next_comma: tuple[int, ...]
    next_sentence_end: tuple[int, ...]
    doc_end: int  # = number of tokens (one past the last position)


def punct_class_of(surface: str) -> str:
    if surface == ",":
        return PUNCT_COMMA
    if surface in _SENTENCE_END_SURFACES:
        return PUNCT_SENTENCE_END
    return PUNCT_NONE


def tokenize(text: str, vocab: Mapping[str, int] | None = None) -> list[Token]:
    """Split text into tokens with punctuation classes and vocab ids.

    An empty or whitespace-only text yields an empty list. With no vocab
    every token gets OOV_ID.
    """
    surfaces: list[str] = []
    for chunk in text.lower().split():
        i, j = 0, len(chunk)
        lead: list[str] = []
        while i < j and chunk[i] in _STRUCTURAL_CHARS:
            lead.append(chunk[i])
            i += 1
        trail: list[str] = []
        while j > i and chunk[j - 1] in _STRUCTURAL_CHARS:
            trail.append(chunk[j - 1])
            j -= 1
        surfaces.extend(lead)
        if i < j:
            surfaces.append(chunk[i:j])
        surfaces.extend(reversed(trail))

    tokens = []
    for pos, surface in enumerate(surfaces):
        vid = vocab.get(surface, OOV_ID) if vocab else OOV_ID
        tokens.append(Token(surface, vid, pos, punct_class_of(surface)))
    return tokens


def build_vocab(documents: Iterable[Document], min_freq: int = 2) -> dict[str, int]:
    """Build a word -> id map from token surfaces, most frequent first.

    Words below ``min_freq`` are dropped and fall back to OOV_ID. Ids
    start at 1; ties are broken lexicographically so the map is
    deterministic.
    """
    counts: Counter[str] = Counter()
    for doc in documents:
        counts.update(t.surface for t in doc.tokens)
    kept = sorted(
        (w for w, c in counts.items() if c >= min_freq),
        key=lambda w: (-counts[w], w),
    )
    return {w: i + 1 for i, w in enumerate(kept)}


def assign_vocab_ids(documents: Sequence[Document], vocab: Mapping[str, int]) -> list[Document]:
    """Return copies of the documents with vocab ids looked up in ``vocab``."""
    out = []
    for doc in documents:
        tokens = tuple(
            Token(t.surface, vocab.get(t.surface, OOV_ID), t.position, t.punct_class)
            for t in doc.tokens
        )
        out.append(Document(tokens, doc.label_id, doc.raw))
    return out


def build_structure_index(tokens: Sequence[Token]) -> StructureIndex:
    """Single backward scan; sentinel is T for positions with no target ahead."""
    t = len(tokens)
    next_comma = [t] * t
    next_sentence_end = [t] * t
    nc, ns = t, t
    for i in range(t - 1, -1, -1):
        next_comma[i] = nc
        next_sentence_end[i] = ns
        cls = tokens[i].punct_class
        if cls == PUNCT_COMMA:
            nc = i
        elif cls == PUNCT_SENTENCE_END:
            ns = i
    return StructureIndex(tuple(next_comma), tuple(next_sentence_end), t)


# Jump action codes. The order fixes the jump head's logit layout and the
# trace wire format, so it must never be reordered.
JUMP_CONTINUE = 0
JUMP_TO_COMMA = 1
JUMP_TO_SENTENCE_END = 2
JUMP_TO_DOC_END = 3

JUMP_ACTION_NAMES = ("continue", "to_comma", "to_sentence_end", "to_doc_end")
NUM_JUMP_ACTIONS = 4


def resolve_jump(index: StructureIndex, position: int, action: int) -> int:
    """Map a jump action at ``position`` to the next reading position.

    Landing is the token after the target punctuation, clamped to
    ``doc_end``. The result is strictly greater than ``position``.
    Out-of-range positions are a programming error.
    """
    if not 0 <= position < index.doc_end:
        raise ValueError(
            f"position {position} outside document of length {index.doc_end}"
        )
    if action == JUMP_CONTINUE:
        return position + 1
    if action == JUMP_TO_COMMA:
        return min(index.next_comma[position] + 1, index.doc_end)
    if action == JUMP_TO_SENTENCE_END:
        return min(index.next_sentence_end[position] + 1, index.doc_end)
    if action == JUMP_TO_DOC_END:
        return index.doc_end
    raise ValueError(f"unknown jump action {action!r}")


def read_corpus_lines(path: str | Path) -> list[tuple[str, str]]:
    """Read ``<label><TAB><text>`` lines; reject lines with no TAB."""
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise CorpusFormatError(f"{path}: line {lineno}: missing TAB separator")
            label, text = line.split("\t", 1)
            if not label:
                raise CorpusFormatError(f"{path}: line {lineno}: empty label")
            pairs.append((label, text))
    return pairs


def build_label_map(labels: Iterable[str]) -> dict[str, int]:
    return {lab: i for i, lab in enumerate(sorted(set(labels)))}


def load_corpus(
    path: str | Path,
    vocab: Mapping[str, int] | None = None,
    label_map: Mapping[str, int] | None = None,
) -> tuple[list[Document], dict[str, int]]:
    """Load a TAB-separated corpus file.

    When ``label_map`` is given, unseen labels are rejected; otherwise the
    map is built from the file's labels in lexicographic order. Returns
    the documents and the label map in effect.
    """
    pairs = read_corpus_lines(path)
    if label_map is None:
        label_map = build_label_map(lab for lab, _ in pairs)
    docs = []
    for label, text in pairs:
        if label not in label_map:
            raise CorpusFormatError(
                f"{path}: label {label!r} not in label map {dict(label_map)}"
            )
        tokens = tuple(tokenize(text, vocab))
        docs.append(Document(tokens, label_map[label], text))
    return docs, dict(label_map)


def write_corpus(path: str | Path, pairs: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for label, text in pairs:
            fh.write(f"{label}\t{text}\n")
