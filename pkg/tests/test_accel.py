"""Compiled kernels and their numpy fallbacks must agree bit for bit."""

import os
import subprocess
import sys

import numpy as np
import pytest

from lstore import _accel

REF = _accel.numpy_kernels


def _merge_inputs(seed, n_slots=64, n_tail=200, ncols=3):
    r = np.random.default_rng(seed)
    cols = r.integers(0, 1 << 40, (ncols, n_slots), dtype=np.uint64)
    schema = np.zeros(n_slots, np.uint64)
    lut = r.integers(0, 100, n_slots, dtype=np.uint64)
    deleted = np.zeros(n_slots, np.uint8)
    t_off = r.integers(0, n_slots, n_tail).astype(np.int64)
    t_valid = (r.random(n_tail) < 0.8).astype(np.uint8)
    t_enc = r.integers(0, 1 << ncols, n_tail, dtype=np.uint64)
    t_start = np.arange(100, 100 + n_tail, dtype=np.uint64)
    t_vals = r.integers(0, 1 << 40, (ncols, n_tail), dtype=np.uint64)
    return cols, schema, lut, deleted, t_off, t_valid, t_enc, t_start, t_vals


def _copy(args):
    return [a.copy() for a in args]


@pytest.mark.parametrize("seed", range(8))
def test_merge_apply_paths_agree(seed):
    args = _merge_inputs(seed)
    a, b, c = _copy(args), _copy(args), _copy(args)
    na = _accel.merge_apply(*a)
    nb = REF["merge_apply"](*b)
    nc = _accel._merge_apply_loop(*c)  # interpreted loop as a third witness
    assert na == nb == nc
    for x, y, z in zip(a[:4], b[:4], c[:4]):
        assert np.array_equal(x, y) and np.array_equal(x, z)


def test_merge_apply_latest_wins():
    cols = np.zeros((1, 2), np.uint64)
    schema, lut, deleted = np.zeros(2, np.uint64), np.zeros(2, np.uint64), np.zeros(2, np.uint8)
    t_off = np.array([0, 0, 1, 1], np.int64)
    valid = np.array([1, 1, 1, 0], np.uint8)
    enc = np.array([1, 1, 0, 1], np.uint64)
    start = np.array([5, 6, 7, 8], np.uint64)
    vals = np.array([[10, 11, 0, 99]], np.uint64)
    n = _accel.merge_apply(cols, schema, lut, deleted, t_off, valid, enc, start, vals)
    assert n == 2
    assert cols.tolist() == [[11, 0]] and lut.tolist() == [6, 7] and deleted.tolist() == [0, 1]


@pytest.mark.parametrize("width", [0, 1, 7, 13, 64])
def test_for_pack_paths_agree(width):
    r = np.random.default_rng(width)
    hi = (1 << width) - 1 if width else 0
    d = r.integers(0, hi, 333, dtype=np.uint64, endpoint=True) if width else np.zeros(333, np.uint64)
    packed = _accel.for_pack(d, width)
    assert np.array_equal(packed, REF["for_pack"](d, width))
    assert np.array_equal(_accel.for_unpack(packed, 333, width), d)
    assert np.array_equal(REF["for_unpack"](packed, 333, width), d)


@pytest.mark.parametrize("seed", range(5))
def test_scan_classify_paths_agree(seed):
    r = np.random.default_rng(seed)
    n = 500
    vals = r.integers(0, 1000, n, dtype=np.uint64)
    starts = r.integers(0, 100, n, dtype=np.uint64)
    lut = r.integers(0, 100, n, dtype=np.uint64)
    deleted = (r.random(n) < 0.1).astype(np.uint8)
    link = np.where(r.random(n) < 0.5, r.integers(1, 50, n), 0).astype(np.uint64)
    got = _accel.scan_classify(vals, starts, lut, deleted, link, 25, 60)
    want = REF["scan_classify"](vals, starts, lut, deleted, link, 25, 60)
    assert got[0] == want[0]
    assert np.array_equal(got[1], want[1])


def test_env_switch_selects_numpy():
    env = dict(os.environ, LSTORE_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "import lstore; print(lstore.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
