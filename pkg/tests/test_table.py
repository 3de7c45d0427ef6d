import pytest

from lstore import Database, DuplicateKey, Isolation, TableConfig, TxnAbort, WriteWriteConflict
from lstore.errors import ConfigError, IllegalTransition
from worked_example import Example, base_image, expected_tail, hm, tail_image


def test_tail_records_match_walkthrough(example):
    assert tail_image(example) == expected_tail()


def test_base_indirection_points_at_latest_tail(example):
    img = base_image(example, range(1, 7))
    assert [img[i][0] for i in range(1, 7)] == ["t8", "t5", "t7", None, None, None]
    # nothing merged yet: schema bits and values are still the originals
    assert img[2][1] == set() and img[2][4] == [2, 102, 202, 302]


def test_second_range_untouched(example):
    assert example.t.ranges[1].written_seq == 0
    assert example.rng.written_seq == 8


def test_latest_reads(example):
    t, b = example.t, example.b
    ctx = example.db.begin()
    assert t.read(ctx, b[1]) is None
    assert t.read(ctx, b[2]) == {0: 2, 1: 1022, 2: 202, 3: 3021}
    assert t.read(ctx, b[3]) == {0: 3, 1: 103, 2: 203, 3: 3031}
    assert t.read(ctx, b[5], [2]) == {2: 205}
    example.db.commit(ctx)


@pytest.mark.parametrize("when,row2,row3", [
    ("13:03", None, None),
    ("14:00", [2, 102, 202, 302], None),
    ("19:21", [2, 1021, 202, 302], [3, 103, 203, 303]),
    ("19:24", [2, 1022, 202, 302], [3, 103, 203, 303]),
    ("19:30", [2, 1022, 202, 3021], [3, 103, 203, 303]),
    ("19:46", [2, 1022, 202, 3021], [3, 103, 203, 3031]),
])
def test_time_travel(example, when, row2, row3):
    t, b = example.t, example.b
    ctx = example.db.begin()
    for rid, want in ((b[2], row2), (b[3], row3)):
        got = t.select_version(ctx, rid, hm(when))
        assert (None if got is None else [got.values[c] for c in range(4)]) == want
    example.db.commit(ctx)


def test_snapshot_isolated_from_later_commit(example):
    t, b, db = example.t, example.b, example.db
    old = db.begin()
    db.run(lambda c: t.update(c, b[4], {2: 9}))
    assert t.read(old, b[4])[2] == 204
    db.commit(old)
    new = db.begin()
    assert t.read(new, b[4])[2] == 9
    db.commit(new)


def test_own_writes_visible(db):
    t = db.create_table(3)
    ctx = db.begin()
    rid = t.insert(ctx, [1, 2, 3])
    t.update(ctx, rid, {1: 20})
    assert t.read(ctx, rid) == {0: 1, 1: 20, 2: 3}
    other = db.begin()
    assert t.read(other, rid) is None
    db.commit(ctx)
    db.commit(other)


def test_abort_rolls_back(db):
    t = db.create_table(2)
    rid = db.run(lambda c: t.insert(c, [1, 10]))
    ctx = db.begin()
    t.update(ctx, rid, {1: 11})
    db.abort(ctx)
    ctx = db.begin()
    assert t.read(ctx, rid) == {0: 1, 1: 10}
    t.update(ctx, rid, {1: 12})  # the aborted link must not block new writers
    db.commit(ctx)
    ctx = db.begin()
    assert t.read(ctx, rid) == {0: 1, 1: 12}
    db.commit(ctx)


def test_write_write_conflict(db):
    t = db.create_table(2)
    rid = db.run(lambda c: t.insert(c, [1, 10]))
    a, b = db.begin(), db.begin()
    t.update(a, rid, {1: 11})
    with pytest.raises(WriteWriteConflict):
        t.update(b, rid, {1: 12})
    db.commit(a)


def test_first_committer_wins(db):
    t = db.create_table(2)
    rid = db.run(lambda c: t.insert(c, [1, 10]))
    old = db.begin()
    db.run(lambda c: t.update(c, rid, {1: 11}))
    with pytest.raises(TxnAbort):
        t.update(old, rid, {1: 12})


def test_read_committed_may_overwrite(db):
    t = db.create_table(2)
    rid = db.run(lambda c: t.insert(c, [1, 10]))
    rc = db.begin(Isolation.READ_COMMITTED)
    db.run(lambda c: t.update(c, rid, {1: 11}))
    assert t.read(rc, rid) == {0: 1, 1: 11}
    t.update(rc, rid, {1: 12})
    db.commit(rc)


def test_duplicate_key(db):
    t = db.create_table(2)
    db.run(lambda c: t.insert(c, [1, 10]))
    ctx = db.begin()
    with pytest.raises(DuplicateKey):
        t.insert(ctx, [1, 11])
    db.abort(ctx)


def test_key_is_immutable(db):
    t = db.create_table(2)
    rid = db.run(lambda c: t.insert(c, [1, 10]))
    ctx = db.begin()
    with pytest.raises(ValueError):
        t.update(ctx, rid, {0: 2})
    db.abort(ctx)


def test_closed_txn_rejects_ops(db):
    t = db.create_table(2)
    ctx = db.begin()
    db.commit(ctx)
    with pytest.raises(IllegalTransition):
        t.insert(ctx, [1, 2])


def test_select_latest_by_key(db):
    t = db.create_table(3, key_column=1)
    db.run(lambda c: t.insert(c, [5, 50, 500]))
    ctx = db.begin()
    rv = t.select_latest(ctx, 50)
    assert rv.values == {0: 5, 1: 50, 2: 500}
    assert t.select_latest(ctx, 51) is None
    db.commit(ctx)


def test_secondary_index_lookup(db):
    t = db.create_table(3)
    rids = [db.run(lambda c, i=i: t.insert(c, [i, i % 3, i])) for i in range(12)]
    t.create_index(1)
    db.run(lambda c: t.update(c, rids[0], {1: 2}))
    ctx = db.begin()
    got = sorted(r for r, _ in t.lookup(ctx, 1, 0))
    assert got == [rids[i] for i in (3, 6, 9)]
    assert rids[0] in [r for r, _ in t.lookup(ctx, 1, 2)]
    db.commit(ctx)


def test_inserts_readable_before_and_after_merge(db):
    t = db.create_table(3, config=TableConfig(range_size=256, insert_range_size=512))
    rids = [db.run(lambda c, i=i: t.insert(c, [i, 2 * i, 3 * i])) for i in range(300)]
    assert t.ranges[0].insert_merged == 0
    ctx = db.begin()
    assert t.scan_sum(ctx, 1) == sum(2 * i for i in range(300))
    db.commit(ctx)
    db.merge(t)
    assert t.ranges[0].insert_merged == 256
    ctx = db.begin()
    assert [t.read(ctx, r)[2] for r in rids[250:260]] == [3 * i for i in range(250, 260)]
    assert t.scan_sum(ctx, 1) == sum(2 * i for i in range(300))
    db.commit(ctx)


def test_insert_ranges_grow(db):
    t = db.create_table(2, config=TableConfig(range_size=256, insert_range_size=256))
    for i in range(700):
        db.run(lambda c, i=i: t.insert(c, [i, i]))
    assert len(t.insert_ranges) == 3
    ctx = db.begin()
    assert t.scan_sum(ctx, 1) == sum(range(700))
    db.commit(ctx)


def test_scan_respects_snapshot(example):
    t, db = example.t, example.db
    ctx = db.begin()
    before = t.scan_sum(ctx, 3)
    db.run(lambda c: t.update(c, example.b[6], {3: 0}))
    assert t.scan_sum(ctx, 3) == before
    db.commit(ctx)
    ctx = db.begin()
    assert t.scan_sum(ctx, 3) == before - 306
    db.commit(ctx)


def test_cumulative_reads_take_two_hops():
    ex = Example(track_hops=True)
    t, b, db = ex.t, ex.b, ex.db
    for v in range(10):
        db.run(lambda c, v=v: t.update(c, b[2], {v % 3 + 1: v}))
    t.hops[:] = 0
    ctx = db.begin()
    assert t.read(ctx, b[2]) == {0: 2, 1: 9, 2: 7, 3: 8}
    db.commit(ctx)
    assert t.hops.sum() == 1 and t.hops[:3].sum() == 1


@pytest.mark.parametrize("bad", [
    dict(range_size=100),
    dict(range_size=256, insert_range_size=300),
    dict(merge_threshold=0),
    dict(merge_group=0),
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TableConfig(**bad).validate()


def test_range_size_override():
    db = Database()
    t = db.create_table(2, range_size=512)
    assert t.range_size == 512
