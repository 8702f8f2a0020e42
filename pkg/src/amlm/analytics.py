"""Group mask-weight snapshots by frequency rank or POS tag and export them."""

from __future__ import annotations

import csv
import json
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .vocab import FrequencyRanking

UPOS_TAGS = frozenset(
    "ADJ ADP ADV AUX CCONJ DET INTJ NOUN NUM PART PRON PROPN PUNCT SCONJ SYM VERB X".split()
)
KINDS = ("freq_bin", "pos", "token")
CSV_COLUMNS = ("timestep", "kind", "key", "mean_weight", "count")


@dataclass(frozen=True)
class TrajectoryRecord:
    timestep: int
    kind: str
    key: int | str
    mean_weight: float
    count: int


def _sort_key(r: TrajectoryRecord):
    key = (0, r.key, "") if isinstance(r.key, int) else (1, 0, r.key)
    return (r.timestep, KINDS.index(r.kind), key)


@dataclass
class TrajectoryLog:
    records: list[TrajectoryRecord] = field(default_factory=list)

    def extend(self, records: Iterable[TrajectoryRecord]) -> None:
        self.records.extend(records)

    def sorted(self) -> list[TrajectoryRecord]:
        return sorted(self.records, key=_sort_key)

    def timesteps(self) -> list[int]:
        return sorted({r.timestep for r in self.records})

    def series(self, kind: str, key) -> list[tuple[int, float]]:
        return [(r.timestep, r.mean_weight) for r in self.sorted() if r.kind == kind and r.key == key]

    def at(self, timestep: int, kind: str) -> list[TrajectoryRecord]:
        return [r for r in self.sorted() if r.timestep == timestep and r.kind == kind]

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class PosMap:
    tag_of: dict[int, str]

    def tags(self, vocab_size: int) -> np.ndarray:
        out = np.full(vocab_size, "X", dtype=object)
        for tid, tag in self.tag_of.items():
            if 0 <= tid < vocab_size:
                out[tid] = tag
        return out


def load_pos_map(path: str | Path) -> PosMap:
    tag_of: dict[int, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected token_id<TAB>TAG")
            try:
                tid = int(parts[0])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad token id {parts[0]!r}") from exc
            tag = parts[1].strip()
            if tag not in UPOS_TAGS:
                raise ValueError(f"{path}:{lineno}: {tag!r} is not a Universal POS tag")
            tag_of[tid] = tag
    return PosMap(tag_of)


def _group_means(w, member, group_ids, n_groups, occ=None):
    gw = group_ids[member]
    counts = np.bincount(gw, minlength=n_groups)
    if occ is None:
        sums = np.bincount(gw, weights=w[member], minlength=n_groups)
        denom = counts.astype(np.float64)
    else:
        occ = occ[member].astype(np.float64)
        sums = np.bincount(gw, weights=w[member] * occ, minlength=n_groups)
        denom = np.bincount(gw, weights=occ, minlength=n_groups)
    return sums, denom, counts


def bin_by_frequency(
    w: np.ndarray,
    special: np.ndarray,
    ranking: FrequencyRanking,
    bin_size: int = 1000,
    occurrence_weighted: bool = False,
) -> list[tuple[int, float, int]]:
    """``(bin, mean weight, type count)`` for rank bins ``[k*bin_size, (k+1)*bin_size)``.

    Special ids are left out; bins with no members are omitted. With
    ``occurrence_weighted`` each type counts in proportion to its corpus
    frequency (bins with zero total frequency then fall back to type means).
    """
    if bin_size < 1:
        raise ValueError("bin_size must be positive")
    if ranking.size != len(w):
        raise ValueError(f"ranking covers {ranking.size} ids, weight table has {len(w)}")
    member = ~np.asarray(special, dtype=bool)
    bins = ranking.rank_of // bin_size
    n_bins = int(bins.max()) + 1 if len(bins) else 0
    sums, denom, counts = _group_means(w, member, bins, n_bins)
    if occurrence_weighted:
        osums, odenom, _ = _group_means(w, member, bins, n_bins, ranking.counts)
        use = odenom > 0
        sums[use], denom[use] = osums[use], odenom[use]
    return [(k, float(sums[k] / denom[k]), int(counts[k])) for k in range(n_bins) if counts[k] > 0]


def group_by_pos(
    w: np.ndarray,
    special: np.ndarray,
    pos_map: PosMap,
    occurrence_counts: np.ndarray | None = None,
) -> list[tuple[str, float, int]]:
    """``(tag, mean weight, type count)`` per POS tag; unmapped ids count as ``X``."""
    tags = sorted(UPOS_TAGS)
    tag_index = {t: i for i, t in enumerate(tags)}
    tag_of = pos_map.tags(len(w))
    gid = np.array([tag_index[t] for t in tag_of], dtype=np.int64)
    member = ~np.asarray(special, dtype=bool)
    sums, denom, counts = _group_means(w, member, gid, len(tags))
    if occurrence_counts is not None:
        osums, odenom, _ = _group_means(w, member, gid, len(tags), occurrence_counts)
        use = odenom > 0
        sums[use], denom[use] = osums[use], odenom[use]
    return [(tags[k], float(sums[k] / denom[k]), int(counts[k])) for k in range(len(tags)) if counts[k] > 0]


def snapshot(
    timestep: int,
    w: np.ndarray,
    special: np.ndarray,
    ranking: FrequencyRanking | None = None,
    bin_size: int = 1000,
    pos_map: PosMap | None = None,
    tokens: bool = False,
    occurrence_weighted: bool = False,
) -> list[TrajectoryRecord]:
    """All trajectory records for one weight table."""
    recs: list[TrajectoryRecord] = []
    occ = ranking.counts if (occurrence_weighted and ranking is not None) else None
    if ranking is not None:
        recs += [
            TrajectoryRecord(timestep, "freq_bin", k, m, c)
            for k, m, c in bin_by_frequency(w, special, ranking, bin_size, occurrence_weighted)
        ]
    if pos_map is not None:
        recs += [TrajectoryRecord(timestep, "pos", t, m, c) for t, m, c in group_by_pos(w, special, pos_map, occ)]
    if tokens:
        recs += [TrajectoryRecord(timestep, "token", int(i), float(w[i]), 1) for i in np.flatnonzero(~special)]
    return recs


def _key_from_text(kind: str, key: str) -> int | str:
    return key if kind == "pos" else int(key)


def export(log: TrajectoryLog, path: str | Path, fmt: str = "csv") -> None:
    rows = log.sorted()
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(CSV_COLUMNS)
            for r in rows:
                wr.writerow((r.timestep, r.kind, r.key, repr(r.mean_weight), r.count))
    elif fmt in ("jsonl", "json-lines"):
        with open(path, "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps(dict(zip(CSV_COLUMNS, (r.timestep, r.kind, r.key, r.mean_weight, r.count)))))
                fh.write("\n")
    else:
        raise ValueError(f"unknown export format {fmt!r} (csv or jsonl)")


def import_log(path: str | Path) -> TrajectoryLog:
    path = Path(path)
    log = TrajectoryLog()
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        fh.seek(0)
        if first.startswith("{"):
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    log.records.append(
                        TrajectoryRecord(int(d["timestep"]), d["kind"], _key_from_text(d["kind"], str(d["key"])),
                                         float(d["mean_weight"]), int(d["count"]))
                    )
        else:
            rd = csv.DictReader(fh)
            if tuple(rd.fieldnames or ()) != CSV_COLUMNS:
                raise ValueError(f"{path}: expected columns {','.join(CSV_COLUMNS)}")
            for row in rd:
                log.records.append(
                    TrajectoryRecord(int(row["timestep"]), row["kind"], _key_from_text(row["kind"], row["key"]),
                                     float(row["mean_weight"]), int(row["count"]))
                )
    return log
