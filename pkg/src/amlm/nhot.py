"""Sub-token membership features: for each vocabulary entry, the ids of the
other (non-reserved) entries that occur inside its surface string."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import FormatError, Reader, Writer
from .vocab import Vocabulary


class NHotCompatibilityError(ValueError):
    pass


@dataclass(frozen=True)
class NHotTable:
    offsets: np.ndarray  # int64[V + 1]
    features: np.ndarray  # int64, flattened sorted feature ids

    @property
    def vocab_size(self) -> int:
        return len(self.offsets) - 1

    @property
    def total(self) -> int:
        return len(self.features)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NHotTable):
            return NotImplemented
        return np.array_equal(self.offsets, other.offsets) and np.array_equal(self.features, other.features)

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def padded(self, pad_value: int) -> np.ndarray:
        """``V x max_features`` matrix of feature ids, right-padded with ``pad_value``."""
        counts = self.counts()
        width = max(int(counts.max(initial=0)), 1)
        out = np.full((self.vocab_size, width), pad_value, dtype=np.int64)
        rows = np.repeat(np.arange(self.vocab_size), counts)
        cols = np.arange(self.total) - np.repeat(self.offsets[:-1], counts)
        out[rows, cols] = self.features
        return out


def encode(token_id: int, table: NHotTable) -> np.ndarray:
    if not 0 <= token_id < table.vocab_size:
        raise IndexError(f"token id {token_id} outside vocabulary of size {table.vocab_size}")
    return table.features[table.offsets[token_id]:table.offsets[token_id + 1]]


def build_nhot(vocab: Vocabulary) -> NHotTable:
    reserved = vocab.reserved_mask
    lookup = {t: i for i, t in enumerate(vocab.entries) if not reserved[i]}
    max_len = max((len(t) for t in lookup), default=0)
    offsets = np.zeros(vocab.size + 1, dtype=np.int64)
    chunks: list[np.ndarray] = []
    for tid, tok in enumerate(vocab.entries):
        found: set[int] = set()
        if not reserved[tid]:
            n = len(tok)
            for i in range(n):
                # proper substrings only, and no longer than any vocab entry
                for j in range(i + 1, min(n, i + max_len) + 1):
                    if j - i == n:
                        continue
                    fid = lookup.get(tok[i:j])
                    if fid is not None:
                        found.add(fid)
        feats = np.array(sorted(found), dtype=np.int64)
        chunks.append(feats)
        offsets[tid + 1] = offsets[tid] + len(feats)
    features = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
    return NHotTable(offsets=offsets, features=features)


# --- file format --------------------------------------------------------------
#
# magic      8 bytes  b"AMLMNHOT"
# version    u32      (1)
# vocab_size u64      (V)
# total      u64      (F, number of feature ids)
# offsets    u64[V + 1]
# features   u32[F]
# little-endian throughout

NHOT_MAGIC = b"AMLMNHOT"
NHOT_VERSION = 1


def save_nhot(table: NHotTable, path: str | Path) -> None:
    out = Writer()
    out.raw(NHOT_MAGIC)
    out.pack("IQQ", NHOT_VERSION, table.vocab_size, table.total)
    out.array(table.offsets, "u8")
    out.array(table.features, "u4")
    out.write(path)


def load_nhot(path: str | Path, vocab_size: int | None = None) -> NHotTable:
    rd = Reader.open(path)
    rd.expect_magic(NHOT_MAGIC)
    rd.expect_version(NHOT_VERSION)
    v, total = rd.unpack("QQ")
    offsets = rd.array("u8", v + 1).astype(np.int64)
    features = rd.array("u4", total).astype(np.int64)
    rd.finish()
    if offsets[0] != 0 or offsets[-1] != total or np.any(np.diff(offsets) < 0):
        raise FormatError(f"{path}: corrupt offset index")
    if total and features.max() >= v:
        raise FormatError(f"{path}: feature id out of range")
    if vocab_size is not None and v != vocab_size:
        raise NHotCompatibilityError(f"{path}: table built for vocab of {v}, loaded vocab has {vocab_size}")
    return NHotTable(offsets=offsets, features=features)
