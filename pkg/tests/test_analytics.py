import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amlm.analytics import (
    CSV_COLUMNS,
    PosMap,
    TrajectoryLog,
    TrajectoryRecord,
    bin_by_frequency,
    export,
    group_by_pos,
    import_log,
    load_pos_map,
    snapshot,
)
from amlm.vocab import compute_frequency_ranking


def setup(v=30, n_special=3, seed=0):
    g = np.random.default_rng(seed)
    special = np.zeros(v, dtype=bool)
    special[:n_special] = True
    w = np.where(special, 0.0, g.uniform(0, 0.4, v))
    corpus = [g.integers(0, v, size=200)]
    return w, special, compute_frequency_ranking(corpus, v)


def test_bins_follow_ranks():
    w, special, ranking = setup()
    rows = bin_by_frequency(w, special, ranking, bin_size=10)
    for k, mean, count in rows:
        members = [i for i in range(len(w)) if ranking.rank_of[i] // 10 == k and not special[i]]
        assert count == len(members)
        assert mean == pytest.approx(np.mean(w[members]), abs=1e-15)


def test_bin_size_larger_than_vocab():
    w, special, ranking = setup()
    rows = bin_by_frequency(w, special, ranking, bin_size=1000)
    assert len(rows) == 1 and rows[0][2] == 27


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(5, 80))
def test_partition_and_weighted_mean(seed, bin_size, v):
    w, special, ranking = setup(v=v, n_special=min(3, v - 1), seed=seed)
    rows = bin_by_frequency(w, special, ranking, bin_size)
    total = sum(c for _, _, c in rows)
    assert total == int((~special).sum())
    weighted = sum(m * c for _, m, c in rows) / total
    assert abs(weighted - w[~special].mean()) <= 1e-10


def test_occurrence_weighted_bins():
    w, special, ranking = setup()
    rows = bin_by_frequency(w, special, ranking, bin_size=10, occurrence_weighted=True)
    for k, mean, _ in rows:
        m = (ranking.rank_of // 10 == k) & ~special
        occ = ranking.counts[m].astype(float)
        want = (w[m] * occ).sum() / occ.sum() if occ.sum() else w[m].mean()
        assert mean == pytest.approx(want, abs=1e-15)


def test_pos_grouping_defaults_to_x():
    w, special, _ = setup(v=10)
    pos = PosMap({3: "NOUN", 4: "NOUN", 5: "VERB"})
    rows = {t: (m, c) for t, m, c in group_by_pos(w, special, pos)}
    assert rows["NOUN"][1] == 2 and rows["VERB"][1] == 1
    assert rows["X"][1] == 4
    assert sum(c for _, c in rows.values()) == 7
    assert rows["NOUN"][0] == pytest.approx((w[3] + w[4]) / 2)


def test_load_pos_map(tmp_path):
    p = tmp_path / "pos.tsv"
    p.write_text("3\tNOUN\n4\tVERB\n\n")
    assert load_pos_map(p).tag_of == {3: "NOUN", 4: "VERB"}
    p.write_text("3\tNOUNISH\n")
    with pytest.raises(ValueError, match="Universal POS"):
        load_pos_map(p)
    p.write_text("x\tNOUN\n")
    with pytest.raises(ValueError, match="bad token id"):
        load_pos_map(p)


def test_snapshot_contents():
    w, special, ranking = setup()
    recs = snapshot(4, w, special, ranking, bin_size=10, pos_map=PosMap({}), tokens=True)
    kinds = {r.kind for r in recs}
    assert kinds == {"freq_bin", "pos", "token"}
    assert all(r.timestep == 4 for r in recs)
    assert sum(r.count for r in recs if r.kind == "token") == 27


def _log():
    log = TrajectoryLog()
    log.extend([
        TrajectoryRecord(1, "pos", "VERB", 0.1, 2),
        TrajectoryRecord(0, "freq_bin", 10, 0.2, 5),
        TrajectoryRecord(0, "freq_bin", 2, 1 / 3, 5),
        TrajectoryRecord(0, "pos", "ADJ", 0.3, 1),
        TrajectoryRecord(1, "freq_bin", 0, 0.123456789012345678, 7),
    ])
    return log


def test_export_ordering(tmp_path):
    export(_log(), tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert [tuple(l.split(",")[:3]) for l in lines[1:]] == [
        ("0", "freq_bin", "2"), ("0", "freq_bin", "10"), ("0", "pos", "ADJ"),
        ("1", "freq_bin", "0"), ("1", "pos", "VERB"),
    ]


@pytest.mark.parametrize("fmt", ["csv", "jsonl"])
def test_export_round_trip(tmp_path, fmt):
    log = _log()
    export(log, tmp_path / "t.out", fmt)
    back = import_log(tmp_path / "t.out")
    assert back.sorted() == log.sorted()


def test_export_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        export(_log(), tmp_path / "t", "xml")


def test_series_and_at():
    log = _log()
    assert log.series("freq_bin", 0) == [(1, 0.123456789012345678)]
    assert [r.key for r in log.at(0, "freq_bin")] == [2, 10]
    assert log.timesteps() == [0, 1]
