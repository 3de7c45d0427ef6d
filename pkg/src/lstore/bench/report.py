"""Report rendering: json, csv (one row per run) and a human-readable table."""

import csv
import io
import json

CSV_FIELDS = ["engine", "contention", "threads", "rows", "writers", "scanners", "read_ratio",
              "range_size", "merge_threshold", "elapsed_s", "committed", "aborted", "attempted",
              "txn_per_sec", "abort_rate", "scans", "scan_p50_ms", "scan_p95_ms", "scan_mean_ms",
              "merges", "backend", "verified"]


def _flat(rep):
    d = rep.as_dict() if hasattr(rep, "as_dict") else dict(rep)
    cfg = d.get("config", {})
    row = {k: d.get(k, cfg.get(k)) for k in CSV_FIELDS}
    row["merges"] = d.get("merge", {}).get("merges", 0)
    return row


def report_emit(reports, fmt="json"):
    """Render one report or a list of reports. Returns the text."""
    many = isinstance(reports, (list, tuple))
    reps = list(reports) if many else [reports]
    if fmt == "json":
        body = [r.as_dict() if hasattr(r, "as_dict") else r for r in reps]
        return json.dumps(body if many else body[0], indent=2, sort_keys=True)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in reps:
            w.writerow(_flat(r))
        return buf.getvalue()
    if fmt == "human":
        return _human([_flat(r) for r in reps])
    raise ValueError(f"unknown format {fmt!r}")


def _human(rows):
    head = ["System", "Contention", "Threads", "Txn/s", "Abort %", "Scan p50 (ms)", "Scan p95 (ms)", "Merges"]
    data = [[r["engine"], r["contention"], str(r["threads"]), f"{r['txn_per_sec']:.1f}",
             f"{100 * r['abort_rate']:.2f}", f"{r['scan_p50_ms']:.2f}", f"{r['scan_p95_ms']:.2f}",
             str(r["merges"])] for r in rows]
    widths = [max(len(h), *(len(d[i]) for d in data)) for i, h in enumerate(head)]
    line = "+".join("-" * (w + 2) for w in widths)
    out = [" | ".join(h.ljust(w) for h, w in zip(head, widths)), line]
    for d in data:
        out.append(" | ".join(x.rjust(w) if i > 1 else x.ljust(w) for i, (x, w) in enumerate(zip(d, widths))))
    return "\n".join(out) + "\n"
