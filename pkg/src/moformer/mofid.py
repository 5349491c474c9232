"""MOFid parsing, SMILES tokenization, vocabulary and fixed-length encoding."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, EmptyCorpus, MalformedMofId, UntokenizableCharacter

MAX_LEN = 512

CLS, SEP, PAD, UNK, SECTION_SEP = "[CLS]", "[SEP]", "[PAD]", "[UNK]", "&&"
SPECIAL_TOKENS = (CLS, SEP, PAD, UNK, SECTION_SEP)
CLS_ID, SEP_ID, PAD_ID, UNK_ID, SECTION_SEP_ID = range(5)

SMILES_PATTERN = (
    r"(\[[^\]]+]|Br?|Cl?|N|O|S|P|F|I|b|c|n|o|s|p|\(|\)|\.|=|#|-|\+|\\|\/|:|~|@|\?|>|\*|\$|\%[0-9]{2}|[0-9])"
)
_SMILES_RE = re.compile(SMILES_PATTERN)

_FORMAT_MARKER = "MOFid-v1"
_TOPOLOGY_RE = re.compile(r"^[a-z0-9]{2,6}(?:-[a-z0-9]+)*(?:,[a-z0-9]{2,6}(?:-[a-z0-9]+)*)*$")


@dataclass(frozen=True)
class MofId:
    smiles_parts: tuple[str, ...]
    topology: str
    catenation: int
    name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "smiles_parts", tuple(self.smiles_parts))
        if not self.smiles_parts or any(not p for p in self.smiles_parts):
            raise MalformedMofId("MOFid needs at least one non-empty SMILES part")
        if not _TOPOLOGY_RE.match(self.topology):
            raise MalformedMofId(f"invalid topology code {self.topology!r}")
        if self.catenation < 0:
            raise MalformedMofId(f"negative catenation {self.catenation}")

    def __str__(self) -> str:
        s = f"{'.'.join(self.smiles_parts)} {_FORMAT_MARKER}.{self.topology}.cat{self.catenation}"
        return s if self.name is None else f"{s};{self.name}"


def _split_top_level(smiles: str) -> list[str]:
    parts, depth, start = [], 0, 0
    for k, ch in enumerate(smiles):
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        elif ch == "." and depth == 0:
            parts.append(smiles[start:k])
            start = k + 1
    parts.append(smiles[start:])
    return parts


def parse_mofid(raw: str) -> MofId:
    """Parse ``"<smiles> MOFid-v1.<topology>.cat<N>[;name]"``."""
    text = raw.strip()
    if not text:
        raise MalformedMofId("empty MOFid string")
    body, _, name = text.partition(";")
    name = name.strip() or None
    idx = body.rfind(_FORMAT_MARKER)
    if idx < 0:
        raise MalformedMofId(f"missing {_FORMAT_MARKER} marker in {raw!r}")
    smiles = body[:idx].strip()
    if not smiles:
        raise MalformedMofId(f"empty SMILES section in {raw!r}")
    fields = body[idx + len(_FORMAT_MARKER):].strip().split(".")
    if len(fields) != 3 or fields[0] != "":
        raise MalformedMofId(f"expected '.<topology>.cat<N>' after marker in {raw!r}")
    topology, cat = fields[1], fields[2]
    if not cat.startswith("cat") or not cat[3:].isdigit():
        raise MalformedMofId(f"non-numeric catenation {cat!r} in {raw!r}")
    parts = _split_top_level(smiles)
    if any(not p for p in parts):
        raise MalformedMofId(f"empty building block in {smiles!r}")
    return MofId(tuple(parts), topology, int(cat[3:]), name)


def tokenize_smiles(smiles: str) -> list[str]:
    """Regex segmentation; the joined tokens always reproduce ``smiles``."""
    if not smiles:
        raise UntokenizableCharacter("empty SMILES string")
    tokens, pos = [], 0
    for m in _SMILES_RE.finditer(smiles):
        if m.start() != pos:
            break
        tokens.append(m.group(0))
        pos = m.end()
    if pos != len(smiles):
        raise UntokenizableCharacter(
            f"character {smiles[pos]!r} at position {pos} of {smiles!r} is not SMILES"
        )
    return tokens


def tokenize_mofid(m: MofId) -> list[str]:
    tokens: list[str] = []
    for k, part in enumerate(m.smiles_parts):
        if k:
            tokens.append(".")
        tokens.extend(tokenize_smiles(part))
    tokens += [SECTION_SEP, m.topology, f"cat{m.catenation}"]
    return tokens


class Vocabulary:
    """Immutable token <-> id bijection with the five specials at ids 0..4."""

    def __init__(self, tokens: Sequence[str]):
        tokens = tuple(tokens)
        if tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the reserved special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens are not unique")
        self._tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    @property
    def token_to_id(self) -> dict[str, int]:
        return dict(self._ids)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def encode_tokens(self, tokens: Iterable[str]) -> list[int]:
        return [self._ids.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._tokens[int(i)] for i in ids]

    def save(self, path: str | Path) -> None:
        lines = [f"{t}\t{i}\n" for i, t in enumerate(self._tokens)]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        rows = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            token, sep, idx = line.rpartition("\t")
            if not sep or not idx.isdigit():
                raise DataError(f"{path}:{lineno}: expected 'token<TAB>id'")
            rows.append((int(idx), token))
        rows.sort()
        if [i for i, _ in rows] != list(range(len(rows))):
            raise DataError(f"{path}: ids are not a contiguous 0..n-1 range")
        try:
            return cls([t for _, t in rows])
        except ValueError as e:
            raise DataError(f"{path}: {e}") from None


def build_vocabulary(corpus: Iterable[MofId]) -> Vocabulary:
    """Specials first, then tokens by descending frequency, ties lexicographic."""
    counts: Counter[str] = Counter()
    seen = False
    for m in corpus:
        seen = True
        counts.update(t for t in tokenize_mofid(m) if t not in SPECIAL_TOKENS)
    if not seen:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary(SPECIAL_TOKENS + tuple(ordered))


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    pad_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_tokens(self) -> int:
        return int((~self.pad_mask).sum())


def encode(m: MofId, vocab: Vocabulary, max_len: int = MAX_LEN) -> TokenSequence:
    """``[CLS] tokens [SEP]`` truncated or PAD-filled to ``max_len``.

    On overflow the trailing SEP is the first thing cut.
    """
    ids = [CLS_ID] + vocab.encode_tokens(tokenize_mofid(m)) + [SEP_ID]
    ids = ids[:max_len] + [PAD_ID] * (max_len - len(ids))
    arr = np.asarray(ids, dtype=np.int64)
    return TokenSequence(arr, arr == PAD_ID)


def decode_tokens(seq: TokenSequence, vocab: Vocabulary) -> list[str]:
    """Non-special tokens of ``seq`` in order."""
    return [t for t in vocab.decode(seq.ids[~seq.pad_mask]) if t not in (CLS, SEP)]
