"""Command-line interface: ``flowsel select | verify | toy | sweep | gradcheck``.

Every output file carries the resolved run configuration and a format
version. Files are written to a temporary sibling and renamed into place.
Settings resolve as: explicit flag, then ``--config`` JSON, then the
``FLOWSEL_SEED`` environment variable (seed only), then the built-in default.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path

from . import checks
from .errors import FlowselError, InvalidRatio
from .features import TIMESTAMP_MODES, WeightVector, read_manifest
from .oracles import campaign, summarize
from .sampler import select_ratio
from .scenegen import METRIC_COLUMNS, STRATEGIES, AdaptConfig, PretrainConfig, compare_strategies, pretrain_frozen, sweep

FORMAT_VERSION = 1
SWEEP_COLUMNS = ("seed", "strategy", "ratio", "coverage_radius", "eval_mse", "plateau_ratio")

DEFAULTS = {
    "select": {"ratio": None, "weights": "2.0,1.0,1.0,0.5", "timestamp_mode": "relative", "out": None},
    "verify": {"instances": 200, "n_range": "6,12", "m_range": "2,4", "seed": 0, "out": None},
    "toy": {"preset": "redundancy", "strategy": "wgs", "ratio": 0.2, "steps": 60, "seeds": 10, "seed": 0,
            "lr": 0.05, "batch": 4, "pretrain_steps": 300, "out": None},
    "sweep": {"ratios": "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0", "strategy": "wgs", "preset": "redundancy",
              "steps": 60, "seeds": 1, "seed": 0, "lr": 0.05, "batch": 4, "pretrain_steps": 300, "out": None},
    "gradcheck": {"ops": "all", "seed": 0, "out": None},
}


def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` via a temporary file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults < config file < explicit flags, with the seed env fallback."""
    cfg = dict(DEFAULTS[command])
    from_file = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            from_file = json.load(fh)
        if not isinstance(from_file, dict):
            raise ValueError("--config must hold a JSON object")
        from_file = from_file.get(command, from_file)
    env_seed = os.environ.get("FLOWSEL_SEED")
    if "seed" in cfg and env_seed is not None:
        cfg["seed"] = int(env_seed)
    for key, value in from_file.items():
        key = key.replace("-", "_")
        if key in cfg:
            cfg[key] = value
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if command == "select":
        cfg["manifest"] = args.manifest
    cfg["command"] = command
    return cfg


def _int_pair(text) -> tuple:
    if isinstance(text, (list, tuple)):
        lo, hi = text
    else:
        lo, hi = (int(v) for v in str(text).split(","))
    if lo > hi:
        raise ValueError(f"range {text!r} has lo > hi")
    return int(lo), int(hi)


def _float_list(text) -> list:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _check_ratio(r) -> float:
    r = float(r)
    if not 0 < r <= 1:
        raise InvalidRatio(f"ratio must lie in (0, 1], got {r}")
    return r


def _csv_text(cfg: dict, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# format_version: {FORMAT_VERSION}\n")
    buf.write(f"# run_config: {json.dumps(cfg, sort_keys=True)}\n")
    writer = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: "" if row.get(k) is None else row[k] for k in columns})
    return buf.getvalue()


def _emit(cfg: dict, text: str) -> None:
    if cfg.get("out"):
        atomic_write(cfg["out"], text)
    else:
        sys.stdout.write(text)


def cmd_select(cfg: dict) -> int:
    if cfg["ratio"] is None:
        raise ValueError("--ratio is required")
    ratio = _check_ratio(cfg["ratio"])
    w = WeightVector.parse(cfg["weights"]) if isinstance(cfg["weights"], str) else WeightVector(*cfg["weights"])
    frames = read_manifest(cfg["manifest"])
    res = select_ratio(frames, ratio, w, timestamp_mode=cfg["timestamp_mode"])
    doc = res.to_json(frames, alpha=ratio, weights=w)
    doc.update(format_version=FORMAT_VERSION, run_config=cfg)
    _emit(cfg, json.dumps(doc, indent=2) + "\n")
    print(f"selected {res.m} of {len(frames)} frames, coverage radius {res.coverage_radius:.6g}", file=sys.stderr)
    return 0


def cmd_verify(cfg: dict) -> int:
    n_range, m_range = _int_pair(cfg["n_range"]), _int_pair(cfg["m_range"])
    reports = list(campaign(int(cfg["instances"]), n_range, m_range, seed=int(cfg["seed"])))
    summary = summarize(reports)
    lines = [json.dumps({"format_version": FORMAT_VERSION, "run_config": cfg})]
    lines += [json.dumps(r) for r in reports]
    lines.append(json.dumps({"summary": summary}))
    _emit(cfg, "\n".join(lines) + "\n")
    print(json.dumps(summary), file=sys.stderr)
    return 0 if summary["violations"] == 0 else 1


def _pretrained(cfg: dict):
    return pretrain_frozen(PretrainConfig(steps=int(cfg["pretrain_steps"]), seed=int(cfg["seed"])))


def _seeds(cfg: dict) -> list:
    base = int(cfg["seed"])
    return list(range(base, base + int(cfg["seeds"])))


def cmd_toy(cfg: dict) -> int:
    ratio = _check_ratio(cfg["ratio"])
    if cfg["strategy"] not in STRATEGIES:
        raise ValueError(f"unknown strategy {cfg['strategy']!r}")
    pipe = _pretrained(cfg)
    adapt = AdaptConfig(steps=int(cfg["steps"]), batch=int(cfg["batch"]), lr=float(cfg["lr"]))
    rows = compare_strategies(pipe, [cfg["strategy"]], ratio, _seeds(cfg), cfg["preset"], adapt)
    _emit(cfg, _csv_text(cfg, METRIC_COLUMNS, rows))
    return 0


def cmd_sweep(cfg: dict) -> int:
    ratios = [_check_ratio(r) for r in _float_list(cfg["ratios"])]
    pipe = _pretrained(cfg)
    adapt = AdaptConfig(steps=int(cfg["steps"]), batch=int(cfg["batch"]), lr=float(cfg["lr"]))
    rows = sweep(pipe, ratios, cfg["strategy"], _seeds(cfg), cfg["preset"], adapt)
    _emit(cfg, _csv_text(cfg, SWEEP_COLUMNS, rows))
    ok = True
    for seed in _seeds(cfg):
        radii = [r["coverage_radius"] for r in rows if r["seed"] == seed]
        ok &= all(a >= b for a, b in zip(radii, radii[1:]))
    return 0 if ok else 1


def cmd_gradcheck(cfg: dict, registry=None) -> int:
    registry = checks.REGISTRY if registry is None else registry
    ops = cfg["ops"]
    names = None if ops in ("all", None) else [o.strip() for o in (ops if isinstance(ops, list) else ops.split(","))]
    results = checks.run_checks(names, seed=int(cfg["seed"]), registry=registry)
    ok = all(r["passed"] for r in results)
    for r in results:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['op']:<26} max rel err {r['max_rel_error']:.3e}", file=sys.stderr)
    doc = {"format_version": FORMAT_VERSION, "run_config": cfg, "results": results, "passed": ok}
    _emit(cfg, json.dumps(doc, indent=2) + "\n")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowsel", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON file with defaults for this command")
        p.add_argument("--out", help="output path (stdout if omitted)")
        if seed:
            p.add_argument("--seed", type=int, help="global seed (falls back to FLOWSEL_SEED)")

    p = sub.add_parser("select", help="pick a subset of a JSONL manifest")
    p.add_argument("manifest")
    p.add_argument("--ratio", type=float)
    p.add_argument("--weights", help="w_t,w_x,w_y,w_s")
    p.add_argument("--timestamp-mode", dest="timestamp_mode", choices=TIMESTAMP_MODES)
    common(p, seed=False)

    p = sub.add_parser("verify", help="oracle campaign on random small instances")
    p.add_argument("--instances", type=int)
    p.add_argument("--n-range", dest="n_range", help="lo,hi")
    p.add_argument("--m-range", dest="m_range", help="lo,hi")
    common(p)

    p = sub.add_parser("toy", help="toy adaptation experiment, MetricsTable CSV")
    p.add_argument("--preset", choices=("redundancy", "plain"))
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--ratio", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seeds", type=int, help="number of consecutive seeds")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--pretrain-steps", dest="pretrain_steps", type=int)
    common(p)

    p = sub.add_parser("sweep", help="coverage radius and eval MSE across ratios")
    p.add_argument("--ratios", help="comma-separated ratios")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--preset", choices=("redundancy", "plain"))
    p.add_argument("--steps", type=int)
    p.add_argument("--seeds", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--pretrain-steps", dest="pretrain_steps", type=int)
    common(p)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every op and block")
    p.add_argument("--ops", help="'all' or a comma-separated list of check names")
    common(p)
    return parser


COMMANDS = {"select": cmd_select, "verify": cmd_verify, "toy": cmd_toy, "sweep": cmd_sweep,
            "gradcheck": cmd_gradcheck}


def main(argv=None, registry=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, registry)
        return COMMANDS[args.command](cfg)
    except (FlowselError, ValueError, KeyError, OSError) as exc:
        print(f"flowsel {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
