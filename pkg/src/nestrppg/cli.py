"""Command line entry point.

Every invocation ends with one JSON line on stderr, e.g.
``{"status": "ok", "command": "train", "outputs": [...]}`` or
``{"status": "error", "exit_code": 2, "error": "ConfigError", "message": "..."}``.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from pathlib import Path

from .backbone import load_checkpoint, save_checkpoint
from .classical import EXTRACTORS, TraceMatrix, estimate_hr_fft
from .errors import ConfigError, DataError, NoSpectralPeakError, NumericError
from .harness.config import ExperimentConfig, resolve_domain
from .harness.diagnostics import run_basis_gap_diagnostic, run_label_curve_diagnostic
from .harness.report import csv_text, diagnostic_files, export_report, load_report, write_text
from .harness.train import RunReport, evaluate_target, load_data, train_experiment
from .metrics import hr_metrics
from .synthdata import ROWS, WINDOW, gen_domain_dataset, read_dataset, write_dataset

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
KIND_ALIASES = {"fig3": "basis-gaps", "fig5": "label-curve"}
GEN_KEYS = {"domains", "n_per_domain", "seed", "hr_range", "rows", "t_samples"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _checkpoint_name(key: str) -> str:
    return "model.nstw" if key == "final" else "model_" + key.replace("/", "_") + ".nstw"


# --- commands ----------------------------------------------------------------

def cmd_gen(args) -> list[str]:
    try:
        spec = json.loads(Path(args.spec).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read {args.spec}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{args.spec}: invalid JSON ({e})") from e
    if isinstance(spec, list):
        spec = {"domains": spec}
    unknown = set(spec) - GEN_KEYS
    if unknown:
        raise ConfigError(f"unknown keys in {args.spec}: {sorted(unknown)}")
    domains = [resolve_domain(d) for d in spec.get("domains", [])]
    if not domains:
        raise ConfigError("no domains in the domain file")
    n = args.n_per_domain or spec.get("n_per_domain", 400)
    seed = args.seed if args.seed is not None else spec.get("seed", 0)
    samples = gen_domain_dataset(domains, n, tuple(spec.get("hr_range", (48.0, 150.0))), seed=seed,
                                 rois=spec.get("rows", ROWS), t_samples=spec.get("t_samples", WINDOW),
                                 workers=args.workers)
    return [str(write_dataset(args.out, samples, domains, seed))]


def cmd_train(args) -> list[str]:
    config = ExperimentConfig.load(args.config)
    run = train_experiment(config, workers=args.workers)
    report = run.report
    if args.diagnose and config.protocol != "intra_kfold":
        model = run.models["final"]
        report.diagnostics["basis_gaps"] = run_basis_gap_diagnostic(config, model, run.data).to_dict()
        report.diagnostics["label_curve"] = run_label_curve_diagnostic(config, model, run.data,
                                                                         args.anchor).to_dict()
    out = Path(args.out)
    paths = export_report(report, out)
    if not args.no_checkpoint:
        for key, model in sorted(run.models.items()):
            p = out / _checkpoint_name(key)
            save_checkpoint(p, model)
            paths.append(p)
    return [str(p) for p in paths]


def _load_model(config, path):
    try:
        return load_checkpoint(path, config.model)
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e.strerror}") from e


def cmd_eval(args) -> list[str]:
    config = ExperimentConfig.load(args.config)
    model = _load_model(config, args.checkpoint)
    domains = args.domain or ([config.target_domain] if config.target_domain else config.domain_ids)
    data = load_data(config, args.workers, bank_domains=())
    counter = Counter()
    targets = {}
    for d in domains:
        if d not in config.domain_ids:
            raise ConfigError(f"unknown domain {d!r}")
        targets[d] = evaluate_target(config, model, data, data.indices([d]), d, counter)
    report = RunReport(config=config.to_dict(), seed=config.seed, targets=targets, curves=[], counters=dict(counter))
    return [str(p) for p in export_report(report, args.out)]


def cmd_baseline(args) -> list[str]:
    samples, _, _ = read_dataset(args.data)
    methods = sorted(EXTRACTORS) if args.method == "all" else [args.method]
    rows = []
    for dom in sorted({s.domain_id for s in samples}):
        group = [s for s in samples if s.domain_id == dom]
        for m in methods:
            preds, truths, fallback = [], [], 0
            for s in group:
                rgb = s.meta.get("raw_rgb")
                traces = TraceMatrix(rgb if rgb is not None else s.stmap.mean(axis=0).T, s.fps)
                bvp = EXTRACTORS[m](traces)
                try:
                    hr = estimate_hr_fft(bvp, s.fps)
                except NoSpectralPeakError:
                    hr = estimate_hr_fft(bvp, s.fps, peak_ratio=0)
                    fallback += 1
                preds.append(hr)
                truths.append(s.hr_bpm)
            rows.append({"domain": dom, "method": m, **hr_metrics(preds, truths).to_dict(), "no_peak": fallback})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "baseline_metrics.csv"
    write_text(path, csv_text(("domain", "method", "n", "sd", "mae", "rmse", "r", "no_peak"), rows))
    return [str(path)]


def cmd_diagnose(args) -> list[str]:
    config = ExperimentConfig.load(args.config)
    model = _load_model(config, args.checkpoint)
    data = load_data(config, args.workers, bank_domains=())
    diag = {}
    kind = KIND_ALIASES.get(args.kind, args.kind)
    if kind in ("basis-gaps", "both"):
        diag["basis_gaps"] = run_basis_gap_diagnostic(config, model, data).to_dict()
    if kind in ("label-curve", "both"):
        diag["label_curve"] = run_label_curve_diagnostic(config, model, data, args.anchor).to_dict()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in diagnostic_files(diag).items():
        write_text(out / name, text)
        paths.append(str(out / name))
    return paths


def cmd_report(args) -> list[str]:
    return [str(p) for p in export_report(load_report(args.report), args.out)]


# --- entry ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nestrppg", description="Synthetic rPPG bench: generate domains, train with NEST regularizers, "
                "evaluate, run classical baselines and representation diagnostics.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic STMap dataset from a domain-spec JSON file")
    g.add_argument("spec", help='JSON: a list of domains (objects or preset names) or {"domains": [...], ...}')
    g.add_argument("--out", required=True)
    g.add_argument("--n-per-domain", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run one experiment config and export its report")
    t.add_argument("config")
    t.add_argument("--out", required=True)
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--diagnose", action="store_true", help="add the basis-gap and label-curve diagnostics")
    t.add_argument("--anchor", type=float, default=60.0)
    t.add_argument("--no-checkpoint", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the config's target (or given) domains")
    e.add_argument("config")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--domain", action="append")
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("baseline", help="GREEN / CHROM / POS over a generated dataset")
    b.add_argument("data", help="manifest.json written by gen")
    b.add_argument("--method", choices=sorted(EXTRACTORS) + ["all"], default="all")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_baseline)

    d = sub.add_parser("diagnose", help="basis gaps and label-correlation curve of a checkpoint")
    d.add_argument("config")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--kind", choices=("basis-gaps", "label-curve", "both") + tuple(KIND_ALIASES), default="both",
                   help="fig3 and fig5 are accepted as aliases of basis-gaps and label-curve")
    d.add_argument("--anchor", type=float, default=60.0)
    d.add_argument("--out", required=True)
    d.add_argument("--workers", type=int, default=1)
    d.set_defaults(func=cmd_diagnose)

    r = sub.add_parser("report", help="re-export the files of a saved report.json")
    r.add_argument("report", help="report.json or the directory holding it")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def _exit_code(err: Exception) -> int:
    if isinstance(err, ConfigError):
        return EXIT_CONFIG
    if isinstance(err, NumericError):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv=None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        outputs = args.func(args)
    except (ConfigError, DataError, NumericError) as err:
        code = _exit_code(err)
        record = {"status": "error", "command": command, "exit_code": code, "error": type(err).__name__,
                  "message": str(err)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return code
    except FloatingPointError as err:
        record = {"status": "error", "command": command, "exit_code": EXIT_NUMERIC, "error": "FloatingPointError",
                  "message": str(err)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps({"status": "ok", "command": command, "outputs": outputs}, sort_keys=True), file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
