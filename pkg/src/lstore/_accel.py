"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``LSTORE_DISABLE_NUMBA=1`` before import to force the numpy path.
Both paths must produce identical outputs; ``tests/test_accel.py`` checks that.
"""

import os

import numpy as np

DISABLED = os.environ.get("LSTORE_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

try:
    if DISABLED:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# --------------------------------------------------------------------------
# merge: reverse scan, latest committed version per base slot wins
# --------------------------------------------------------------------------

def _merge_apply_np(cols, schema, lut, deleted, t_off, t_valid, t_enc, t_start, t_vals):
    idx = np.nonzero(t_valid)[0]
    if idx.size == 0:
        return 0
    rev = idx[::-1]
    offs = t_off[rev]
    _, first = np.unique(offs, return_index=True)
    chosen = rev[first]
    c_off = t_off[chosen]
    c_enc = t_enc[chosen]
    for c in range(cols.shape[0]):
        m = ((c_enc >> np.uint64(c)) & np.uint64(1)).astype(bool)
        if m.any():
            cols[c, c_off[m]] = t_vals[c, chosen[m]]
    schema[c_off] |= c_enc
    lut[c_off] = t_start[chosen]
    dels = c_enc == 0
    deleted[c_off[dels]] = 1
    return int(chosen.size)


def _merge_apply_loop(cols, schema, lut, deleted, t_off, t_valid, t_enc, t_start, t_vals):
    n_slots = schema.shape[0]
    seen = np.zeros(n_slots, dtype=np.uint8)
    applied = 0
    ncols = cols.shape[0]
    for j in range(t_off.shape[0] - 1, -1, -1):
        if not t_valid[j]:
            continue
        off = t_off[j]
        if seen[off]:
            continue
        seen[off] = 1
        applied += 1
        enc = t_enc[j]
        if enc == 0:
            deleted[off] = 1
        for c in range(ncols):
            if (enc >> np.uint64(c)) & np.uint64(1):
                cols[c, off] = t_vals[c, j]
        schema[off] |= enc
        lut[off] = t_start[j]
        if applied == n_slots:
            break
    return applied


# --------------------------------------------------------------------------
# frame-of-reference packing: min + fixed per-slot delta width
# --------------------------------------------------------------------------

def _for_pack_np(deltas, width):
    n = deltas.shape[0]
    nbytes = (n * width + 7) // 8
    if width == 0 or n == 0:
        return np.zeros(nbytes, dtype=np.uint8)
    shifts = np.arange(width, dtype=np.uint64)
    bits = ((deltas[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.reshape(-1), bitorder="little")[:nbytes]


def _for_pack_loop(deltas, width):
    n = deltas.shape[0]
    nbytes = (n * width + 7) // 8
    out = np.zeros(nbytes, dtype=np.uint8)
    pos = 0
    for i in range(n):
        v = deltas[i]
        for b in range(width):
            if (v >> np.uint64(b)) & np.uint64(1):
                out[pos >> 3] |= np.uint8(1 << (pos & 7))
            pos += 1
    return out


def _for_unpack_np(packed, n, width):
    if width == 0 or n == 0:
        return np.zeros(n, dtype=np.uint64)
    bits = np.unpackbits(packed, bitorder="little")[: n * width].astype(np.uint64)
    bits = bits.reshape(n, width)
    weights = np.uint64(1) << np.arange(width, dtype=np.uint64)
    return (bits * weights[None, :]).sum(axis=1, dtype=np.uint64)


def _for_unpack_loop(packed, n, width):
    out = np.zeros(n, dtype=np.uint64)
    pos = 0
    for i in range(n):
        v = np.uint64(0)
        for b in range(width):
            if (packed[pos >> 3] >> (pos & 7)) & 1:
                v |= np.uint64(1) << np.uint64(b)
            pos += 1
        out[i] = v
    return out


# --------------------------------------------------------------------------
# scan: sum of rows answerable from the base page alone
# --------------------------------------------------------------------------

def _scan_classify_np(vals, starts, lut, deleted, link_seq, tps, snap):
    """Return (sum of base-answerable rows, mask of rows needing tail lookup)."""
    has_link = link_seq > 0
    unmerged = has_link & (link_seq > tps)
    merged = has_link & ~unmerged
    stale = merged & (lut >= snap)
    need = unmerged | stale
    ok = ~need & (starts < snap) & (deleted == 0)
    total = int(vals[ok].sum(dtype=np.uint64)) if ok.any() else 0
    return total, need


def _scan_classify_loop(vals, starts, lut, deleted, link_seq, tps, snap):
    n = vals.shape[0]
    need = np.zeros(n, dtype=np.bool_)
    total = np.uint64(0)
    for i in range(n):
        s = link_seq[i]
        if s > 0:
            if s > tps or lut[i] >= snap:
                need[i] = True
                continue
        if starts[i] < snap and deleted[i] == 0:
            total += vals[i]
    return total, need


if HAVE_NUMBA:
    merge_apply = njit(cache=True, nogil=True)(_merge_apply_loop)
    for_pack = njit(cache=True, nogil=True)(_for_pack_loop)
    for_unpack = njit(cache=True, nogil=True)(_for_unpack_loop)
    _scan_jit = njit(cache=True, nogil=True)(_scan_classify_loop)

    def scan_classify(vals, starts, lut, deleted, link_seq, tps, snap):
        total, need = _scan_jit(vals, starts, lut, deleted, link_seq, np.uint64(tps), np.uint64(snap))
        return int(total), need
else:
    merge_apply = _merge_apply_np
    for_pack = _for_pack_np

    def for_unpack(packed, n, width):
        return _for_unpack_np(packed, n, width)

    def scan_classify(vals, starts, lut, deleted, link_seq, tps, snap):
        return _scan_classify_np(vals, starts, lut, deleted, link_seq, np.uint64(tps), np.uint64(snap))


BACKEND = "numba" if HAVE_NUMBA else "numpy"

# numpy references, always importable (tests compare both paths)
numpy_kernels = {
    "merge_apply": _merge_apply_np,
    "for_pack": _for_pack_np,
    "for_unpack": _for_unpack_np,
    "scan_classify": lambda *a: _scan_classify_np(*a[:5], np.uint64(a[5]), np.uint64(a[6])),
}
