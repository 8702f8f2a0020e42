"""Vocabulary loading, greedy longest-match tokenization and corpus ingestion."""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

METASPACE = "▁"
PAD, UNK, MASK, BOS, EOS = "<pad>", "<unk>", "<mask>", "<s>", "</s>"
SPECIAL_TOKENS = (PAD, UNK, MASK, BOS, EOS)
BYTE_TOKENS = tuple(f"<0x{b:02X}>" for b in range(256))


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    entries: tuple[str, ...]
    index: dict[str, int] = field(repr=False)
    pad_id: int
    unk_id: int
    mask_id: int
    bos_id: int
    eos_id: int
    byte_ids: np.ndarray = field(repr=False)  # byte value -> token id

    @property
    def size(self) -> int:
        return len(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((self.pad_id, self.unk_id, self.mask_id, self.bos_id, self.eos_id))

    @property
    def special_mask(self) -> np.ndarray:
        m = np.zeros(self.size, dtype=bool)
        m[list(self.special_ids)] = True
        return m

    @property
    def reserved_mask(self) -> np.ndarray:
        """Specials plus byte-fallback entries."""
        m = self.special_mask
        m[self.byte_ids] = True
        return m

    @property
    def normal_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.special_mask)

    def id_of(self, token: str) -> int:
        return self.index[token]

    def detokenize(self, ids: Iterable[int]) -> str:
        byte_value = {int(t): b for b, t in enumerate(self.byte_ids)}
        out: list[str] = []
        pending = bytearray()
        for i in ids:
            i = int(i)
            if i in byte_value:
                pending.append(byte_value[i])
                continue
            if pending:
                out.append(pending.decode("utf-8", errors="replace"))
                pending.clear()
            out.append(self.entries[i].replace(METASPACE, " "))
        if pending:
            out.append(pending.decode("utf-8", errors="replace"))
        text = "".join(out)
        # drop the dummy prefix space added by tokenize()
        return text[1:] if text.startswith(" ") else text


def build_vocab(tokens: Sequence[str]) -> Vocabulary:
    """Validate an ordered token list and resolve reserved ids."""
    index: dict[str, int] = {}
    for i, tok in enumerate(tokens):
        if tok == "":
            raise VocabError(f"empty token on line {i + 1}")
        if tok in index:
            raise VocabError(f"duplicate token {tok!r} on lines {index[tok] + 1} and {i + 1}")
        index[tok] = i
    missing = [t for t in SPECIAL_TOKENS if t not in index]
    if missing:
        raise VocabError(f"missing special token(s): {', '.join(missing)}")
    missing_bytes = [t for t in BYTE_TOKENS if t not in index]
    if missing_bytes:
        shown = ", ".join(missing_bytes[:4]) + (" ..." if len(missing_bytes) > 4 else "")
        raise VocabError(f"missing {len(missing_bytes)} byte-fallback token(s): {shown}")
    return Vocabulary(
        entries=tuple(tokens),
        index=index,
        pad_id=index[PAD],
        unk_id=index[UNK],
        mask_id=index[MASK],
        bos_id=index[BOS],
        eos_id=index[EOS],
        byte_ids=np.array([index[t] for t in BYTE_TOKENS], dtype=np.int64),
    )


def _read_lines(path: str | Path) -> list[str]:
    # str.splitlines() would also break on U+2028 and friends
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [ln[:-1] if ln.endswith("\r") else ln for ln in lines]


def load_vocab(path: str | Path) -> Vocabulary:
    return build_vocab(_read_lines(path))


def save_vocab(vocab: Vocabulary, path: str | Path) -> None:
    Path(path).write_text("".join(t + "\n" for t in vocab.entries), encoding="utf-8")


@dataclass
class TokenSequence:
    ids: np.ndarray
    doc_id: int = 0

    def __len__(self) -> int:
        return len(self.ids)


class Tokenizer:
    """Greedy longest-match segmenter with byte fallback.

    Spaces become the metaspace marker and one marker is prefixed to the
    text, so ``"do"`` is matched against ``"▁do"``. A literal ``▁`` in the
    input can never be matched by a vocabulary entry (it would come back as
    a space) and is always emitted as bytes.
    """

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        reserved = vocab.reserved_mask
        self._lookup = {t: i for i, t in enumerate(vocab.entries) if not reserved[i]}
        self._max_len = max((len(t) for t in self._lookup), default=0)

    def encode(self, text: str) -> list[int]:
        if not text:
            return []
        s = METASPACE + text.replace(" ", METASPACE)
        literal = [False] + [c == METASPACE for c in text]
        ids: list[int] = []
        n, i = len(s), 0
        while i < n:
            hi = min(n, i + self._max_len)
            # a match may not cover a literal metaspace
            for k in range(i, hi):
                if literal[k]:
                    hi = k
                    break
            for j in range(hi, i, -1):
                tid = self._lookup.get(s[i:j])
                if tid is not None:
                    ids.append(tid)
                    i = j
                    break
            else:
                ch = " " if i == 0 else text[i - 1]
                ids.extend(int(self.vocab.byte_ids[b]) for b in ch.encode("utf-8"))
                i += 1
        return ids


def tokenize(text: str, vocab: Vocabulary, doc_id: int = 0) -> TokenSequence:
    return TokenSequence(np.array(Tokenizer(vocab).encode(text), dtype=np.int64), doc_id)


def read_documents(path: str | Path) -> list[str]:
    return _read_lines(path)


def tokenize_documents(docs: Iterable[str], vocab: Vocabulary) -> list[np.ndarray]:
    tok = Tokenizer(vocab)
    return [np.array(tok.encode(d), dtype=np.int64) for d in docs]


def chunk_documents(docs: Sequence[np.ndarray], seq_len: int) -> list[TokenSequence]:
    """Split every document into contiguous chunks; the tail chunk is kept."""
    if seq_len < 1:
        raise ValueError("seq_len must be positive")
    out = []
    for doc_id, ids in enumerate(docs):
        for start in range(0, len(ids), seq_len):
            out.append(TokenSequence(ids[start:start + seq_len], doc_id))
    return out


def write_pretokenized(docs: Iterable[np.ndarray], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ids in docs:
            fh.write(" ".join(str(int(i)) for i in ids))
            fh.write("\n")


def read_pretokenized(path: str | Path, vocab_size: int | None = None) -> list[np.ndarray]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            try:
                ids = np.array([int(x) for x in line.split()], dtype=np.int64)
            except ValueError as exc:
                raise VocabError(f"{path}:{lineno}: non-integer token id") from exc
            if vocab_size is not None and ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
                raise VocabError(f"{path}:{lineno}: token id out of range for vocab of {vocab_size}")
            docs.append(ids)
    return docs


@dataclass(frozen=True)
class FrequencyRanking:
    rank_of: np.ndarray  # token id -> rank
    counts: np.ndarray  # token id -> occurrences
    order: np.ndarray  # rank -> token id

    @property
    def size(self) -> int:
        return len(self.rank_of)


def compute_frequency_ranking(
    corpus: Iterable[TokenSequence | np.ndarray], vocab_size: int
) -> FrequencyRanking:
    """Rank token ids by descending count, ties by ascending id."""
    counts = np.zeros(vocab_size, dtype=np.int64)
    seen = False
    for seq in corpus:
        ids = seq.ids if isinstance(seq, TokenSequence) else np.asarray(seq)
        seen = True
        if ids.size:
            counts += np.bincount(ids, minlength=vocab_size)[:vocab_size]
    if not seen:
        raise ValueError("cannot rank an empty corpus")
    return ranking_from_counts(counts)


def ranking_from_counts(counts: np.ndarray) -> FrequencyRanking:
    counts = np.asarray(counts, dtype=np.int64)
    vocab_size = len(counts)
    # lexsort: last key is primary
    order = np.lexsort((np.arange(vocab_size), -counts))
    rank_of = np.empty(vocab_size, dtype=np.int64)
    rank_of[order] = np.arange(vocab_size)
    return FrequencyRanking(rank_of=rank_of, counts=counts, order=order)
