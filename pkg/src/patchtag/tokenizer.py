"""Byte-level BPE tokenizer compatible with released contrastive text encoders.

Text is lowercased and whitespace-collapsed, split with the released
word-boundary pattern, mapped to printable byte symbols, then merged
bottom-up following an ordered merge list. The vocabulary ships as two
sidecar files next to the weight bundle: a token-to-id JSON table and a
plain-text ordered merge list (one space-separated pair per line).
"""

import functools
import html
import json
from dataclasses import dataclass, field
from pathlib import Path

import regex

from .errors import ParseError, SchemaError

SOT_TOKEN = "<|startoftext|>"
EOT_TOKEN = "<|endoftext|>"
PAD_ID = 0
WORD_END = "</w>"

_WORD_PATTERN = regex.compile(
    r"""<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+""",
    regex.IGNORECASE,
)


@functools.lru_cache(maxsize=1)
def byte_symbols() -> tuple[str, ...]:
    """The 256 printable unicode symbols standing in for raw byte values."""
    printable = set(range(ord("!"), ord("~") + 1))
    printable |= set(range(ord("\xa1"), ord("\xac") + 1))
    printable |= set(range(ord("\xae"), ord("\xff") + 1))
    table = {}
    bumped = 0
    for b in range(256):
        if b in printable:
            table[b] = chr(b)
        else:
            table[b] = chr(256 + bumped)
            bumped += 1
    return tuple(table[b] for b in range(256))


@dataclass(frozen=True)
class Vocabulary:
    """Token table plus ordered merges; ids are dense in [0, vocab_size)."""
    encoder: dict[str, int]
    merges: list[tuple[str, str]]
    ranks: dict[tuple[str, str], int] = field(init=False, repr=False)

    def __post_init__(self):
        for tok in (SOT_TOKEN, EOT_TOKEN):
            if tok not in self.encoder:
                raise SchemaError(f"vocabulary is missing the special token {tok!r}")
        missing = [s for s in byte_symbols()
                   if s not in self.encoder or s + WORD_END not in self.encoder]
        if missing:
            raise SchemaError(
                f"vocabulary is not byte-complete; first gaps: {missing[:5]}")
        ids = sorted(self.encoder.values())
        if ids[0] != 0 or ids[-1] != len(ids) - 1 or len(set(ids)) != len(ids):
            raise SchemaError("vocabulary ids must be dense in [0, vocab_size)")
        object.__setattr__(self, "ranks", {m: i for i, m in enumerate(self.merges)})

    def __len__(self) -> int:
        return len(self.encoder)

    @property
    def sot_id(self) -> int:
        return self.encoder[SOT_TOKEN]

    @property
    def eot_id(self) -> int:
        return self.encoder[EOT_TOKEN]


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length id sequence: start token, body, end token, padding."""
    ids: tuple[int, ...]
    eot_index: int


def load_vocabulary(encoder_path: Path, merges_path: Path) -> Vocabulary:
    try:
        table = json.loads(Path(encoder_path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ParseError(f"cannot read vocabulary table {encoder_path}: {exc}") from exc
    if not isinstance(table, dict) or not all(isinstance(v, int) for v in table.values()):
        raise SchemaError(f"vocabulary table {encoder_path} must map token -> integer id")
    merges = []
    try:
        lines = Path(merges_path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read merge list {merges_path}: {exc}") from exc
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) != 2:
            raise ParseError(f"{merges_path}:{n}: expected two space-separated symbols")
        merges.append((parts[0], parts[1]))
    return Vocabulary(encoder=table, merges=merges)


def save_vocabulary(vocab: Vocabulary, encoder_path: Path, merges_path: Path) -> None:
    Path(encoder_path).write_text(
        json.dumps(vocab.encoder, ensure_ascii=False, indent=0, sort_keys=False) + "\n",
        encoding="utf-8")
    Path(merges_path).write_text(
        "".join(f"{a} {b}\n" for a, b in vocab.merges), encoding="utf-8")


def clean_text(text: str) -> str:
    text = html.unescape(html.unescape(text))
    text = " ".join(text.split())
    return text.strip().lower()


def _pairs(word: tuple[str, ...]) -> set[tuple[str, str]]:
    return set(zip(word, word[1:]))


def bpe_word(token: str, vocab: Vocabulary) -> tuple[str, ...]:
    """Merge a single pre-split token bottom-up by ascending merge rank."""
    word = tuple(token[:-1]) + (token[-1] + WORD_END,)
    while len(word) > 1:
        candidates = [p for p in _pairs(word) if p in vocab.ranks]
        if not candidates:
            break
        first, second = min(candidates, key=vocab.ranks.__getitem__)
        merged = []
        i = 0
        while i < len(word):
            if i + 1 < len(word) and word[i] == first and word[i + 1] == second:
                merged.append(first + second)
                i += 2
            else:
                merged.append(word[i])
                i += 1
        word = tuple(merged)
    return word


def encode_text_ids(text: str, vocab: Vocabulary) -> list[int]:
    """Body token ids for a string (no start/end tokens, no padding)."""
    table = byte_symbols()
    ids = []
    for token in _WORD_PATTERN.findall(clean_text(text)):
        mapped = "".join(table[b] for b in token.encode("utf-8"))
        for symbol in bpe_word(mapped, vocab):
            ids.append(vocab.encoder[symbol])
    return ids


def tokenize(text: str, vocab: Vocabulary, context_length: int) -> TokenSequence:
    """Fixed-length sequence: start id, body (truncated), end id, padding."""
    body = encode_text_ids(text, vocab)[: context_length - 2]
    ids = [vocab.sot_id, *body, vocab.eot_id]
    eot_index = len(ids) - 1
    ids.extend([PAD_ID] * (context_length - len(ids)))
    return TokenSequence(ids=tuple(ids), eot_index=eot_index)
