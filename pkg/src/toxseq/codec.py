"""Character-level SMILES lexing, vocabulary, encoding and a light validator."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_INDEX = 0
UNK_INDEX = 1
PAD_TOKEN = "<PAD>"
UNK_TOKEN = "<UNK>"
# rendered in place of unknown tokens by decode()
UNK_PLACEHOLDER = "?"
MAX_LEN_CAP = 256

_EXTRA_CHARS = set("-=#()[]@+/\\.%")
_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}


class EmptyCorpus(ValueError):
    pass


class EmptyString(ValueError):
    pass


class IndexOutOfVocabulary(ValueError):
    pass


class VocabFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    index_of: dict
    char_of: dict
    pad_index: int = PAD_INDEX
    unk_index: int = UNK_INDEX

    @property
    def size(self) -> int:
        return len(self.char_of) + 2

    @property
    def chars(self) -> list[str]:
        return [self.char_of[i] for i in range(2, self.size)]

    @classmethod
    def from_chars(cls, chars) -> "Vocabulary":
        index_of = {}
        for ch in chars:
            if len(ch) != 1:
                raise VocabFormatError(f"vocabulary entries are single characters, got {ch!r}")
            if ch in index_of:
                raise VocabFormatError(f"duplicate vocabulary character {ch!r}")
            index_of[ch] = len(index_of) + 2
        return cls(index_of=index_of, char_of={i: c for c, i in index_of.items()})


@dataclass(frozen=True)
class EncodedSequence:
    tokens: np.ndarray
    true_length: int
    truncated: bool = field(default=False, compare=False)

    @property
    def max_len(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple = ()

    @property
    def is_plausible(self) -> bool:
        return not self.issues


def build_vocab(corpus) -> Vocabulary:
    """Index every distinct character from 2 upward, in first-appearance order."""
    seen: dict[str, None] = {}
    for s in corpus:
        for ch in s:
            seen.setdefault(ch, None)
    if not seen:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    return Vocabulary.from_chars(seen)


def default_max_len(corpus) -> int:
    longest = max((len(s) for s in corpus), default=0)
    if longest == 0:
        raise EmptyCorpus("corpus has no non-empty strings")
    return min(longest, MAX_LEN_CAP)


def encode(vocab: Vocabulary, smiles: str, max_len: int) -> EncodedSequence:
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    if not smiles:
        raise EmptyString("cannot encode an empty SMILES string")
    truncated = len(smiles) > max_len
    body = smiles[:max_len]
    tokens = np.zeros(max_len, dtype=np.int64)
    tokens[: len(body)] = [vocab.index_of.get(ch, vocab.unk_index) for ch in body]
    return EncodedSequence(tokens=tokens, true_length=len(body), truncated=truncated)


def decode(vocab: Vocabulary, seq: EncodedSequence) -> str:
    n = seq.true_length
    if not 1 <= n <= len(seq.tokens):
        raise IndexOutOfVocabulary(f"invalid true_length {n} for {len(seq.tokens)} tokens")
    out = []
    for tok in seq.tokens[:n]:
        tok = int(tok)
        if tok == vocab.unk_index:
            out.append(UNK_PLACEHOLDER)
        elif tok in vocab.char_of:
            out.append(vocab.char_of[tok])
        else:
            raise IndexOutOfVocabulary(f"token {tok} is not a character index")
    return "".join(out)


def one_hot(vocab: Vocabulary, seq: EncodedSequence) -> np.ndarray:
    """(max_len, vocab.size) 0/1 matrix; inspection helper, the model uses indices."""
    out = np.zeros((len(seq.tokens), vocab.size), dtype=np.float64)
    out[np.arange(len(seq.tokens)), seq.tokens] = 1.0
    return out


def validate_smiles(smiles: str) -> ValidationReport:
    """Cheap lexical checks: bracket balance, ring-digit parity, character classes.

    Issues are (position, kind) pairs. Ring digits are counted outside of
    ``[...]`` atoms only, since digits inside brackets are isotopes, charges
    or hydrogen counts. ``%nn`` two-digit ring labels are counted as one label.
    """
    if not smiles:
        return ValidationReport(issues=((0, "empty"),))
    issues = []
    depth = 0
    open_positions = []
    in_bracket = None
    ring_first: dict[str, int] = {}
    ring_count: dict[str, int] = {}

    def bump_ring(label, pos):
        ring_count[label] = ring_count.get(label, 0) + 1
        ring_first.setdefault(label, pos)

    i = 0
    n = len(smiles)
    while i < n:
        ch = smiles[i]
        if not (ch.isascii() and (ch.isalnum() or ch in _EXTRA_CHARS)):
            issues.append((i, "invalid-character"))
        elif ch == "[":
            if in_bracket is not None:
                issues.append((i, "nested-bracket"))
            in_bracket = i
        elif ch == "]":
            if in_bracket is None:
                issues.append((i, "unbalanced-bracket"))
            in_bracket = None
        elif in_bracket is None:
            if ch == "(":
                depth += 1
                open_positions.append(i)
            elif ch == ")":
                if depth == 0:
                    issues.append((i, "unbalanced-parenthesis"))
                else:
                    depth -= 1
                    open_positions.pop()
            elif ch.isdigit():
                bump_ring(ch, i)
            elif ch == "%":
                label = smiles[i + 1 : i + 3]
                if len(label) == 2 and label.isdigit():
                    bump_ring("%" + label, i)
                    i += 2
                else:
                    issues.append((i, "bad-ring-label"))
        i += 1

    issues.extend((pos, "unbalanced-parenthesis") for pos in open_positions)
    if in_bracket is not None:
        issues.append((in_bracket, "unbalanced-bracket"))
    for label, count in ring_count.items():
        if count % 2:
            issues.append((ring_first[label], "unpaired-ring-closure"))
    issues.sort()
    return ValidationReport(issues=tuple(issues))


def _escape(ch: str) -> str:
    return _ESCAPES.get(ch, ch)


def _unescape(text: str) -> str:
    for raw, esc in _ESCAPES.items():
        if text == esc:
            return raw
    return text


def vocab_lines(vocab: Vocabulary) -> list[str]:
    lines = [f"{PAD_INDEX}\t{PAD_TOKEN}", f"{UNK_INDEX}\t{UNK_TOKEN}"]
    lines += [f"{i}\t{_escape(vocab.char_of[i])}" for i in range(2, vocab.size)]
    return lines


def parse_vocab_lines(lines) -> Vocabulary:
    lines = list(lines)
    if lines[:2] != [f"{PAD_INDEX}\t{PAD_TOKEN}", f"{UNK_INDEX}\t{UNK_TOKEN}"]:
        raise VocabFormatError("vocabulary must start with the PAD and UNK entries")
    chars = []
    for expected, line in enumerate(lines[2:], start=2):
        idx, sep, text = line.partition("\t")
        if not sep or idx != str(expected):
            raise VocabFormatError(f"bad vocabulary line {line!r}, expected index {expected}")
        chars.append(_unescape(text))
    return Vocabulary.from_chars(chars)


def save_vocab(vocab: Vocabulary, path) -> None:
    Path(path).write_text("\n".join(vocab_lines(vocab)) + "\n", encoding="utf-8")


def load_vocab(path) -> Vocabulary:
    return parse_vocab_lines(Path(path).read_text(encoding="utf-8").splitlines())
