"""Command-line entry point: ``ebgqd {simulate,correlate,analyze,run,verify,presets}``.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 insufficient data or fit failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as cfgmod
from . import pipeline
from .errors import EbgError, InconsistentInputsError, ParameterError

EXIT_VERIFY = 1


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON experiment configuration")
    p.add_argument("--preset", help="named preset (see `ebgqd presets`)")
    p.add_argument("--seed", type=int, help="override the configuration seed")
    p.add_argument("--out", type=Path, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ebgqd", description="Virtual quantum-dot single-photon source experiments.")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, text in (
        ("simulate", "emit photons and run the optical bench; write timestamp files"),
        ("correlate", "histogram the timestamps in --out"),
        ("analyze", "fit the histograms in --out and write report.json"),
        ("run", "simulate, correlate and analyze in one go"),
    ):
        _add_common(sub.add_parser(verb, help=text))
    v = sub.add_parser("verify", help="check a report against expectations")
    v.add_argument("report", type=Path, help="report.json or a run directory")
    v.add_argument("--expect", type=Path, help="expectations JSON (defaults to the preset's)")
    _add_common(v)
    sub.add_parser("presets", help="list the bundled presets")
    return parser


def _resolve(args) -> dict:
    config = cfgmod.load_config_file(args.config) if args.config else {}
    if not args.preset and not config.get("preset") and not config:
        raise cfgmod.ConfigError([("config", "give --config or --preset")])
    return cfgmod.resolve(config, preset=args.preset, seed=args.seed)


def _out_dir(args, cfg) -> Path:
    if args.out is not None:
        return args.out
    d = cfg.get("output", {}).get("dir")
    if d:
        return Path(d)
    return Path("ebgqd-runs") / (cfg.get("preset") or cfg["experiment"])


def _print_report(report: dict, out: Path):
    print(f"experiment {report['experiment']}  status {report['status']}  config {report['config_hash'][:12]}")
    for k, v in report["metrics"].items():
        print(f"  {k:32s} {v:.6g}" if isinstance(v, float) else f"  {k:32s} {v}")
    for flag in report["flags"]:
        print(f"  flag: {flag}")
    print(f"report written to {out / 'report.json'}")


def _verify(args) -> int:
    path = args.report / "report.json" if args.report.is_dir() else args.report
    report = json.loads(path.read_text())
    chash = None
    if args.config or args.preset:
        chash = cfgmod.compute_hash(_resolve(args))
    if args.expect:
        expectations = json.loads(args.expect.read_text())
    else:
        name = args.preset or report.get("preset")
        if not name:
            raise cfgmod.ConfigError([("expect", "no expectations file and the report names no preset")])
        expectations = cfgmod.preset_expectations(name)
    summary = pipeline.verify_report(report, expectations, chash)
    for c in summary["checks"]:
        status = "PASS" if c["passed"] else "FAIL"
        detail = c.get("reason") or f"value {c['value']:.6g}"
        print(f"{status} {c['metric']}: {detail}")
    print(json.dumps({"passed": summary["passed"]}))
    return pipeline.EXIT_OK if summary["passed"] else EXIT_VERIFY


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "presets":
            for name in cfgmod.preset_names():
                print(name)
            return 0
        if args.verb == "verify":
            return _verify(args)
        cfg = _resolve(args)
        out = _out_dir(args, cfg)
        if args.verb == "simulate":
            products = pipeline.simulate_stage(cfg, out)
            for name, tf in products.timestamps.items():
                counts = {ch: len(t) for ch, t in tf.channels.items()}
                print(f"{name}: {counts}")
            return 0
        if args.verb == "correlate":
            for name, h in pipeline.correlate_stage(cfg, out).items():
                print(f"{name}: {len(h.counts)} bins, {h.total_pairs} pairs")
            return 0
        result = pipeline.run_pipeline(cfg, out) if args.verb == "run" else pipeline.analyze_stage(cfg, out)
        _print_report(result.report, out)
        return result.exit_code
    except cfgmod.ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for loc, msg in exc.problems:
            print(f"  {loc}: {msg}", file=sys.stderr)
        return pipeline.EXIT_SCHEMA
    except (ParameterError, InconsistentInputsError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return pipeline.EXIT_SCHEMA
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return pipeline.EXIT_SCHEMA
    except EbgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return pipeline.EXIT_ANALYSIS


if __name__ == "__main__":
    sys.exit(main())
