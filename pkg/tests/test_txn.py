import threading

import pytest

from lstore import Isolation, TxnAbort, TxnState, ValidationFailed
from lstore.errors import IllegalTransition


@pytest.fixture
def row(db):
    t = db.create_table(3)
    rid = db.run(lambda c: t.insert(c, [1, 10, 100]))
    return t, rid


def test_commit_time_after_begin(db):
    a = db.begin()
    b = db.begin()
    db.commit(b)
    db.commit(a)
    assert a.begin_time < b.begin_time < b.commit_time < a.commit_time
    assert a.state == TxnState.COMMITTED


def test_unknown_isolation(db):
    with pytest.raises(ValueError):
        db.begin("chaos")


def test_double_finish_rejected(db):
    ctx = db.begin()
    db.abort(ctx)
    with pytest.raises(IllegalTransition):
        db.abort(ctx)
    with pytest.raises(IllegalTransition):
        db.commit(ctx)


def test_serializable_detects_stale_read(db, row):
    t, rid = row
    ctx = db.begin(Isolation.SERIALIZABLE)
    t.read(ctx, rid)
    db.run(lambda c: t.update(c, rid, {1: 11}))
    with pytest.raises(ValidationFailed):
        db.commit(ctx)
    assert ctx.state == TxnState.ABORTED


def test_snapshot_allows_same_history(db, row):
    t, rid = row
    ctx = db.begin(Isolation.SNAPSHOT)
    t.read(ctx, rid)
    db.run(lambda c: t.update(c, rid, {1: 11}))
    db.commit(ctx)


def test_serializable_clean_read_commits(db, row):
    t, rid = row
    ctx = db.begin(Isolation.SERIALIZABLE)
    assert t.read(ctx, rid)[1] == 10
    db.commit(ctx)


def test_speculative_read_waits_for_writer(db, row):
    t, rid = row
    w = db.begin()
    t.update(w, rid, {1: 12})
    assert db.txns.validate(w)  # w is now in PreCommit
    r = db.begin()
    assert t.speculative_read(r, rid)[1] == 12
    assert r.deps == [w.txn_id]
    db.commit(w)
    db.commit(r)


def test_speculative_reader_fails_if_writer_aborts(db, row):
    t, rid = row
    w = db.begin()
    t.update(w, rid, {1: 12})
    assert db.txns.validate(w)
    r = db.begin()
    t.speculative_read(r, rid)
    db.abort(w)
    with pytest.raises(ValidationFailed):
        db.commit(r)


def test_run_aborts_on_error(db, row):
    t, rid = row

    def boom(c):
        t.update(c, rid, {1: 99})
        raise RuntimeError("nope")

    with pytest.raises(RuntimeError):
        db.run(boom)
    ctx = db.begin()
    assert t.read(ctx, rid)[1] == 10
    db.commit(ctx)
    assert db.txns.aborted == 1


def test_finished_txns_leave_epoch(db):
    ctxs = [db.begin() for _ in range(3)]
    assert db.epoch.active_count() == 3
    db.commit(ctxs[0])
    db.abort(ctxs[1])
    assert db.epoch.floor() == ctxs[2].begin_time
    db.commit(ctxs[2])
    assert db.epoch.floor() is None


def test_concurrent_increments_are_not_lost(db, row):
    t, rid = row
    wins = []

    def worker():
        n = 0
        for _ in range(60):
            ctx = db.begin()
            try:
                v = t.read(ctx, rid)[1]
                t.update(ctx, rid, {1: v + 1})
                db.commit(ctx)
                n += 1
            except TxnAbort:
                if ctx.state == TxnState.ACTIVE:
                    db.abort(ctx)
        wins.append(n)

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    ctx = db.begin()
    assert t.read(ctx, rid)[1] == 10 + sum(wins)
    db.commit(ctx)
