import threading

import numpy as np
import pytest

from lstore import Database, TableConfig
from lstore.durability import (COMMIT, KIND_NAMES, decode, encode_record, parse_log, record_boundaries,
                               recover)
from lstore.page_store import Page
from scenarios import crash_matrix, expected_state, last_lsn, logged_run, visible_state


@pytest.fixture(scope="module")
def run60():
    db, done = logged_run(n_txns=60, seed=3, merge_every=15)
    return db.wal.log_bytes(), done


def test_record_roundtrip():
    rec = encode_record(9, COMMIT, b"abc")
    assert list(parse_log(rec)) == [(0, 9, COMMIT, b"abc")]
    assert list(parse_log(rec[:-1])) == []
    bad = bytearray(rec)
    bad[14] ^= 1
    assert list(parse_log(bytes(bad))) == []


def test_log_has_every_kind(run60):
    log, _ = run60
    kinds = {k for _, k, _ in decode(log)}
    assert {"dir", "insert", "tail", "commit", "merge"} <= kinds
    assert set(KIND_NAMES.values()) == {"tail-append", "commit", "merge-op", "directory-op"}


def test_full_log_recovers_everything(run60):
    log, done = run60
    assert visible_state(recover(log)) == expected_state(done, last_lsn(log))


def test_crash_at_every_boundary(run60):
    log, done = run60
    assert crash_matrix(log, done) == []


def test_torn_records_are_ignored(run60):
    log, done = run60
    bounds = record_boundaries(log)
    torn = [(a + b) // 2 for a, b in zip(bounds[::7], bounds[1::7])]
    assert crash_matrix(log, done, torn) == []


def test_recovered_engine_accepts_new_work(run60):
    log, done = run60
    db = recover(log)
    t = db.tables[0]
    rows = expected_state(done, last_lsn(log))
    rid = next(iter(rows))
    db.run(lambda c: t.update(c, rid, {1: 5}))
    new = db.run(lambda c: t.insert(c, [10 ** 6, 1, 2, 3]))
    db.merge(t)
    ctx = db.begin()
    assert t.read(ctx, rid)[1] == 5
    assert t.read(ctx, new) == {0: 10 ** 6, 1: 1, 2: 2, 3: 3}
    db.commit(ctx)


def test_file_backed_log(tmp_path):
    path = tmp_path / "redo.log"
    db = Database(logging=True, log_path=str(path), fsync=True)
    t = db.create_table(2)
    rid = db.run(lambda c: t.insert(c, [1, 2]))
    db.run(lambda c: t.update(c, rid, {1: 3}))
    db.close()
    back = recover(path.read_bytes())
    assert visible_state_2(back) == {rid: [1, 3]}


def visible_state_2(db):
    t = db.tables[0]
    ctx = db.begin()
    out = {r: [v[0], v[1]] for r in t.live_rids() if (v := t.read(ctx, r)) is not None}
    db.commit(ctx)
    return out


def test_uncommitted_tail_is_dropped():
    db = Database(logging=True)
    t = db.create_table(2)
    rid = db.run(lambda c: t.insert(c, [1, 2]))
    ctx = db.begin()
    t.update(ctx, rid, {1: 9})
    db.wal.flush()
    back = recover(db.wal.log_bytes())
    assert visible_state_2(back) == {rid: [1, 2]}


def _tail_writes(log):
    """(range, pno, col) -> [(lsn, slot)] for every logged tail cell."""
    from lstore.page_store import TAIL_PAGE_SLOTS
    out = {}
    for lsn, kind, r in decode(log):
        if kind != "tail":
            continue
        pno, slot = divmod(r["seq"] - 1, TAIL_PAGE_SLOTS)
        for c in list(r["vals"]) + ["meta"]:
            out.setdefault((r["range"], pno, c), []).append((lsn, slot))
    return out


def test_ownership_relay_with_100_writers():
    db = Database(logging=True, theta_s=8)
    t = db.create_table(3, config=TableConfig(range_size=256, insert_range_size=256))
    rids = [db.run(lambda c, i=i: t.insert(c, [i, 0, 0])) for i in range(100)]
    db.merge(t)
    barrier = threading.Barrier(100)

    def writer(rid):
        barrier.wait()
        for v in range(5):
            db.run(lambda c: t.update(c, rid, {1 + v % 2: v + 1}))

    threads = [threading.Thread(target=writer, args=(r,)) for r in rids]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    log = db.wal.log_bytes()
    writes = _tail_writes(log)
    rng = t.ranges[0]
    pages = {}
    for pno, row in rng.tv.items():
        for c, p in enumerate(row):
            if p is not None:
                key = c if c < t.num_columns else "meta"
                if c == t.SCHEMA or c < t.num_columns:
                    pages[(pno, key)] = p
    assert pages
    for (pno, key), p in pages.items():
        lsns = [lsn for lsn, _ in writes.get((0, pno, key), [])]
        # the page LSN names the newest record that touched the page
        assert p.page_lsn == max(lsns, default=0)
    assert db.wal.flush_log  # theta_s forced page flushes
    by_id = {id(p): (pno, key) for (pno, key), p in pages.items()}
    checked = 0
    for k, img in db.wal.stable_pages.items():
        if k[3] not in by_id:
            continue
        pno, key = by_id[k[3]]
        page = Page.from_image(img)
        assert page.page_lsn <= db.wal.flushed_lsn
        for lsn, slot in writes.get((0, pno, key), []):
            if lsn <= page.page_lsn:
                assert page.present[slot], (pno, key, lsn)
                checked += 1
    assert checked > 0
    ctx = db.begin()
    assert t.scan_sum(ctx, 1) == 100 * 5 and t.scan_sum(ctx, 2) == 100 * 4
    db.commit(ctx)


def test_recovery_uses_page_images():
    db = Database(logging=True)
    t = db.create_table(2, config=TableConfig(range_size=256, insert_range_size=256))
    rids = [db.run(lambda c, i=i: t.insert(c, [i, 0])) for i in range(10)]
    db.merge(t)
    for r in rids:
        db.run(lambda c, r=r: t.update(c, r, {1: r + 1}))
    images = {}
    for key in t.directory.keys():
        if key[0] == "tail":
            img = db.wal.flush_page(t.directory.get(key), key)
            images[(key[0], t.table_id) + key[1:]] = img
    back = recover(db.wal.log_bytes(), images=images)
    assert visible_state_2(back) == {r: [r, r + 1] for r in rids}
