"""Command-line entry points: run, ablate, gradcheck, report."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

from .errors import ConfigError, SemiFedError
from .nn import gradcheck_suite
from .protocol import MODES, ExperimentConfig, build_data, run_experiment

REQUIRED = ("K", "rounds", "num_classes")
GRADCHECK_TOLERANCE = 1e-4


def _fmt(x):
    return f"{x:.6g}"


def _check_type(key, value, annotation):
    kinds = {"int": int, "float": (int, float), "str": str, "bool": bool}
    base = annotation.replace(" | None", "")
    if value is None:
        if "None" not in annotation:
            raise ConfigError(key, "may not be null")
        return value
    if base.startswith("list["):
        inner = kinds[base[5:-1]]
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, inner) for v in value):
            raise ConfigError(key, f"expected a list of {base[5:-1]}")
        return value
    expected = kinds[base]
    if (isinstance(value, bool) and base != "bool") or not isinstance(value, expected):
        raise ConfigError(key, f"expected {base}, got {type(value).__name__}")
    return float(value) if base == "float" else value


def config_from_dict(doc):
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a flat key-value object")
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    for key in doc:
        if key not in fields:
            raise ConfigError(key, "unknown key")
    for key in REQUIRED:
        if key not in doc:
            raise ConfigError(key, "required key missing")
    values = {k: _check_type(k, v, str(fields[k].type)) for k, v in doc.items()}
    return ExperimentConfig(**values)


def parse_config(path):
    """Read a flat JSON config file, validate it and fill in defaults."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(doc)


def serialize_config(config):
    return json.dumps(config.to_dict(), indent=2, sort_keys=True)


# ----------------------------------------------------------------- reports


METRICS_HEADER = ["round", "client_id", "accuracy", "upload_params", "download_params", "compressed"]
TRAFFIC_HEADER = ["round", "total_upload", "total_download", "conventional_upload"]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    return obj


def write_reports(report, out_dir):
    """Write metrics.csv, traffic.csv and summary.json; return their paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        metrics = out / "metrics.csv"
        with metrics.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRICS_HEADER)
            for rec in report.rounds:
                for k in rec.sampled:
                    w.writerow([rec.round, k, _fmt(rec.accuracy[k]), rec.upload_params[k],
                                rec.download_params[k], int(rec.compressed[k])])
        traffic = out / "traffic.csv"
        with traffic.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAFFIC_HEADER)
            for row in report.ledger.per_round(len(report.rounds)):
                w.writerow([row[h] for h in TRAFFIC_HEADER])
        summary = out / "summary.json"
        summary.write_text(json.dumps(_jsonable(report.to_dict()), indent=2))
    except OSError as exc:
        raise OSError(f"cannot write reports to {out}: {exc}") from exc
    return {"metrics": metrics, "traffic": traffic, "summary": summary}


def summary_table(summary):
    cfg, final, init = summary["config"], summary["final"], summary["init"]
    lines = [
        f"mode {cfg['mode']}  K={cfg['K']} B={cfg['B']} rounds={cfg['rounds']} seed={cfg['seed']}",
        f"  initial model accuracy   {_fmt(init['reference_accuracy'])}",
    ]
    if init.get("teacher_accuracy") is not None:
        lines.append(f"  teacher accuracy         {_fmt(init['teacher_accuracy'])}")
    lines += [
        f"  final mean accuracy      {_fmt(final['final_mean_accuracy'])} ({final['eval_scope']} scope)",
        f"  uploaded params          {final['total_upload']} (conventional {final['conventional_upload']})",
        f"  downloaded params        {final['total_download']} (conventional {final['conventional_download']})",
        f"  upload saving ratio      {final['saving_ratio']:.2f}%",
        f"  compression events       {final['compression_events']}",
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------- commands


def _apply_overrides(config, args):
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        changes["mode"] = args.mode
    return dataclasses.replace(config, **changes) if changes else config


def _out_dir(args):
    return Path(args.out) if args.out else Path("runs") / time.strftime("%Y%m%d-%H%M%S")


def cmd_run(args):
    config = _apply_overrides(parse_config(args.config), args)
    report = run_experiment(config)
    paths = write_reports(report, _out_dir(args))
    if not args.quiet:
        print(summary_table(json.loads(paths["summary"].read_text())))
        print(f"reports written to {paths['summary'].parent}")
    return 0


def cmd_ablate(args):
    config = _apply_overrides(parse_config(args.config), args)
    data = build_data(config)
    out = _out_dir(args)
    rows = []
    for mode in MODES:
        report = run_experiment(dataclasses.replace(config, mode=mode), data)
        write_reports(report, out / mode)
        rows.append((mode, report.final["final_mean_accuracy"], report.final["saving_ratio"]))
    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "final_mean_accuracy", "saving_ratio"])
        for mode, acc, saving in rows:
            w.writerow([mode, _fmt(acc), _fmt(saving)])
    if not args.quiet:
        print(f"{'mode':6s} {'accuracy':>9s} {'saving %':>9s}")
        for mode, acc, saving in rows:
            print(f"{mode:6s} {100 * acc:9.2f} {saving:9.2f}")
        print(f"reports written to {out}")
    return 0


def cmd_gradcheck(args):
    results = gradcheck_suite(args.architectures, args.seed, args.epsilon)
    worst = max(err for _, err in results)
    if not args.quiet:
        for label, err in results:
            print(f"{label:60s} {err:.3e}")
        print(f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:g})")
    return 0 if worst < GRADCHECK_TOLERANCE else 1


def cmd_report(args):
    print(summary_table(json.loads(Path(args.summary).read_text())))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="semifed", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode=True):
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (default ./runs/<timestamp>)")
        if mode:
            p.add_argument("--mode", choices=MODES, help="override the config mode")
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("config")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run full and AS1..AS4 on one partition")
    p.add_argument("config")
    common(p, mode=False)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the network engine")
    p.add_argument("--architectures", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="reprint the summary of a finished run")
    p.add_argument("summary")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SemiFedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
