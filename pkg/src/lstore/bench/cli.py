"""lstore-bench: run the mixed update/scan micro-benchmark against one or more engines."""

import argparse
import sys
from dataclasses import fields

from ..errors import ConfigError
from .report import report_emit
from .workload import WorkloadConfig, run_workload


def _threshold(text):
    text = str(text).strip()
    if text.endswith("%"):
        return float(text[:-1]) / 100.0
    v = float(text)
    return v / 100.0 if v > 1.0 else v


def _onoff(text):
    t = str(text).lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def load_config_file(path):
    """Flat key=value file; keys match the long flag names (dashes or underscores)."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line or line.startswith("["):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.replace("-", "_")] = v.strip("\"'")
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="lstore-bench", description=__doc__)
    p.add_argument("--config", help="key=value file with defaults for any flag")
    p.add_argument("--engine", default=None,
                   help="lstore, iuh, dbm, or a comma-separated list (default lstore)")
    p.add_argument("--contention", choices=["low", "med", "high"])
    p.add_argument("--rows", type=int)
    p.add_argument("--columns", type=int)
    p.add_argument("--writers", type=int)
    p.add_argument("--scanners", type=int)
    p.add_argument("--mergers", type=int)
    p.add_argument("--read-ratio", type=float)
    p.add_argument("--range-size", type=int)
    p.add_argument("--merge-threshold", type=_threshold,
                   help="fraction of the merge group span, e.g. 0.5 or 50%%")
    p.add_argument("--duration", type=float, help="seconds per run")
    p.add_argument("--txns", type=int, help="transactions per writer (overrides --duration)")
    p.add_argument("--seed", type=int)
    p.add_argument("--zipf", type=float, help="non-uniform key skew (extension; 0 = uniform)")
    p.add_argument("--format", choices=["json", "csv", "human"], default=None)
    p.add_argument("--verify", action="store_true", default=None,
                   help="record every read and scan and check them against the reference model")
    p.add_argument("--logging", type=_onoff, metavar="{on,off}")
    p.add_argument("--paper-scale", action="store_true", default=None,
                   help="use the full-size active sets instead of the desk-scale ones")
    p.add_argument("--out", help="write the report here instead of stdout")
    return p


_TYPES = {f.name: f.type for f in fields(WorkloadConfig)}


def _coerce(name, value):
    if name == "merge_threshold":
        return _threshold(value)
    if name in ("logging", "verify", "paper_scale"):
        return value if isinstance(value, bool) else _onoff(value)
    kind = _TYPES.get(name, str)
    return kind(value) if kind in (int, float, str) else value


def configs_from_args(args):
    base = {}
    if args.config:
        base.update(load_config_file(args.config))
    for k, v in vars(args).items():
        if k in ("config", "out", "format") or v is None:
            continue
        base[k] = v
    fmt = args.format or base.pop("format", "json")
    base.pop("out", None)
    engines = str(base.pop("engine", "lstore")).split(",")
    known = set(_TYPES)
    unknown = set(base) - known
    if unknown:
        raise ConfigError(f"unknown settings: {', '.join(sorted(unknown))}")
    cfgs = []
    for e in engines:
        kw = {k: _coerce(k, v) for k, v in base.items()}
        cfgs.append(WorkloadConfig(engine=e.strip(), **kw).validate())
    return cfgs, fmt


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfgs, fmt = configs_from_args(args)
    except (ConfigError, ValueError) as e:
        print(f"lstore-bench: {e}", file=sys.stderr)
        return 2
    reports = [run_workload(c) for c in cfgs]
    text = report_emit(reports if len(reports) > 1 else reports[0], fmt)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    if any(r.verified is False for r in reports):
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
