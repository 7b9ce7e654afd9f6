"""Command-line entry point: ``mtrseg {generate,run,eval,ablate,report}``.

Exit codes: 0 success, 1 unexpected failure, 2 configuration/shape error,
3 numeric failure (non-finite loss), 4 I/O error, 5 checkpoint version/schedule mismatch.
"""

from __future__ import annotations

import argparse
import csv
import glob
import io
import json
import logging
import os
import re
import shutil
import sys
import time


from .checkpoint import load_checkpoint
from .config import MATRICES, PRESETS, BASELINES, OUT_ENV, RunConfig, load_matrix
from .data import generate_dataset, load_corpus, save_corpus
from .engine import evaluate, run_continual
from .errors import EXIT_IO, EXIT_OK, ConfigError, MtrsegError, VersionError
from .evaluation import (
    MetricReport,
    continual_metrics,
    dumps_reports,
    format_table,
    metrics_csv,
    per_class_csv,
)
from .losses_kd import TERMS

log = logging.getLogger("mtrseg")

ABLATION_COLUMNS = ("name", "base", "inc", "all", "avg")


def _toggles(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--toggle expects name=on|off, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(args) -> RunConfig:
    if getattr(args, "config", None) and getattr(args, "preset", None):
        raise ConfigError("give either --config or --preset, not both")
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    elif getattr(args, "preset", None):
        cfg = RunConfig.preset(args.preset)
    else:
        cfg = RunConfig()
    if getattr(args, "baseline", None):
        cfg = cfg.override(BASELINES[args.baseline])
    if getattr(args, "seed", None) is not None:
        cfg = cfg.override({"seed": args.seed})
    if getattr(args, "toggle", None):
        cfg = cfg.with_toggles(_toggles(args.toggle))
    return cfg


def _corpus(cfg: RunConfig, corpus_dir: str | None):
    if corpus_dir:
        train, evals, manifest = load_corpus(corpus_dir)
        if manifest["spec"] != {**cfg.tree["data"], "shapes_per_image": list(cfg.tree["data"]["shapes_per_image"])}:
            log.warning("corpus manifest spec differs from the config's data section")
        return train, evals
    return generate_dataset(cfg.synth_spec())


def latest_checkpoint(run_dir: str) -> str | None:
    found = []
    for path in glob.glob(os.path.join(run_dir, "step_*.ckpt")):
        m = re.fullmatch(r"step_(\d+)\.ckpt", os.path.basename(path))
        if m:
            found.append((int(m.group(1)), path))
    return max(found)[1] if found else None


def write_run_outputs(run_dir: str, reports, final) -> None:
    with open(os.path.join(run_dir, "metrics.json"), "w") as f:
        f.write(dumps_reports(reports, final))
    with open(os.path.join(run_dir, "metrics.csv"), "w") as f:
        f.write(metrics_csv(reports))


# commands ------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    out = args.out or os.path.join(os.environ.get(OUT_ENV, "runs"), "corpus")
    train, evals = generate_dataset(cfg.synth_spec())
    manifest = save_corpus(out, cfg.synth_spec(), train, evals)
    print(json.dumps({"out": out, "classes": manifest["classes"], "train_class_counts": manifest["train_class_counts"]}))
    return EXIT_OK


def execute_run(cfg: RunConfig, out: str, resume: str | None = None, corpus_dir: str | None = None,
                stop_after: int | None = None):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.yaml"), "w") as f:
        f.write(cfg.dump())
    train, evals = _corpus(cfg, corpus_dir)
    started = time.time()
    report, _ = run_continual(cfg.model_config(), cfg.train_config(), cfg.objective(), cfg.schedule(), train, evals,
                              out_dir=out, resume=resume, stop_after=stop_after)
    write_run_outputs(out, report.steps, report.final)
    with open(os.path.join(out, "per_class.csv"), "w") as f:
        f.write(per_class_csv(report.steps, list(cfg.schedule().all_classes)))
    # wall-clock time lives apart from metrics.json so that file stays reproducible
    with open(os.path.join(out, "timing.json"), "w") as f:
        json.dump({"seconds": time.time() - started, "resumed_from": resume}, f)
    return report


def cmd_run(args) -> int:
    resume = None
    if args.resume:
        resume = args.resume if os.path.isfile(args.resume) else latest_checkpoint(args.resume)
        if resume is None:
            raise ConfigError(f"no step_*.ckpt found in {args.resume}")
        if not (args.config or args.preset):
            args.config = os.path.join(os.path.dirname(resume), "config.yaml")
    cfg = resolve_config(args)
    out = cfg.out_dir(args.out or (os.path.dirname(resume) if resume else None))
    report = execute_run(cfg, out, resume, args.corpus, args.stop_after)
    sys.stdout.write(format_table(report.final, cfg.schedule()))
    sys.stdout.write(metrics_csv(report.steps))
    return EXIT_OK


def _config_near(path: str) -> RunConfig:
    candidate = os.path.join(os.path.dirname(os.path.abspath(path)), "config.yaml")
    return RunConfig.load(candidate) if os.path.exists(candidate) else RunConfig()


def cmd_eval(args) -> int:
    target = args.target
    if os.path.isdir(target):
        paths = sorted(glob.glob(os.path.join(target, "step_*.ckpt")),
                       key=lambda p: int(re.search(r"step_(\d+)", p).group(1)))
        if not paths:
            raise ConfigError(f"no step_*.ckpt found in {target}")
    else:
        paths = [target]
    cfg = RunConfig.load(args.config) if args.config else _config_near(paths[0])
    train, evals = _corpus(cfg, args.corpus)
    alpha = cfg.train_config().eval_alpha
    reports = []
    schedule = None
    for path in paths:
        model, sched, step, _ = load_checkpoint(path)
        if schedule is not None and sched != schedule:
            raise VersionError(f"{path} belongs to schedule {sched.name}, not {schedule.name}")
        if sched != cfg.schedule():
            raise VersionError(f"checkpoint schedule {sched.name} differs from config schedule {cfg.schedule().name}")
        schedule = sched
        report = evaluate(model, evals, sched.classes_upto(step), step, alpha, include_background=args.include_background)
        reports.append(continual_metrics(reports + [report], sched))
    final = reports[-1]
    text = dumps_reports(reports, final)
    if args.json:
        sys.stdout.write(text + "\n")
    else:
        sys.stdout.write(format_table(final, schedule))
    if os.path.isdir(target):
        stored = os.path.join(target, "metrics.json")
        if os.path.exists(stored):
            with open(stored) as f:
                same = f.read() == text
            log.info("re-evaluation %s stored metrics.json", "matches" if same else "DIFFERS FROM")
            if args.check and not same:
                return 1
    return EXIT_OK


def _row_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([r["name"]] + ["" if r[k] is None else repr(float(r[k])) for k in ABLATION_COLUMNS[1:]])
    return buf.getvalue()


def run_ablation(base: RunConfig, rows: list[dict], out: str, corpus_dir: str | None = None) -> list[dict]:
    """One run per row with the base seed; rows whose step 1 is identical share one step-1 model."""
    os.makedirs(out, exist_ok=True)
    shared: dict[str, str] = {}
    results = []
    for row in rows:
        cfg = base.override(row["overrides"]).with_toggles(row["toggles"]).override({"name": row["name"]})
        row_dir = os.path.join(out, row["name"])
        os.makedirs(row_dir, exist_ok=True)
        key = cfg.step_one_key()
        resume = None
        if key in shared and cfg.schedule().steps > 1:
            src = shared[key]
            resume = os.path.join(row_dir, "step_1.ckpt")
            shutil.copyfile(src, resume)
            with open(os.path.join(os.path.dirname(src), "train_log.jsonl")) as f:
                step_one = [l for l in f if json.loads(l)["step"] == 1]
            with open(os.path.join(row_dir, "train_log.jsonl"), "w") as f:
                f.writelines(step_one)
            log.info("row %s reuses the step-1 model of an earlier row", row["name"])
        report = execute_run(cfg, row_dir, resume, corpus_dir)
        shared.setdefault(key, os.path.join(row_dir, "step_1.ckpt"))
        f = report.final
        results.append({"name": row["name"], "base": f.base, "inc": f.inc, "all": f.all, "avg": f.avg})
    with open(os.path.join(out, "ablation.csv"), "w") as fh:
        fh.write(_row_csv(results))
    return results


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    rows = load_matrix(args.matrix)
    out = args.out or os.path.join(os.environ.get(OUT_ENV, "runs"), f"ablate-{base.name}")
    results = run_ablation(base, rows, out, args.corpus)
    sys.stdout.write(_row_csv(results))
    return EXIT_OK


def cmd_report(args) -> int:
    from . import plotting

    target = args.target
    ablation = os.path.join(target, "ablation.csv")
    if os.path.exists(ablation):
        with open(ablation) as f:
            rows = [{k: (float(v) if k != "name" and v != "" else (None if v == "" else v)) for k, v in r.items()}
                    for r in csv.DictReader(f)]
        path = plotting.ablation_bars(rows, os.path.join(target, "ablation.png"))
        with open(ablation) as f:
            sys.stdout.write(f.read())
        log.info("wrote %s", path)
        return EXIT_OK
    metrics = os.path.join(target, "metrics.json")
    if not os.path.exists(metrics):
        raise ConfigError(f"{target} holds neither metrics.json nor ablation.csv")
    with open(metrics) as f:
        data = json.load(f)
    reports = [MetricReport.from_dict(d) for d in data["steps"]]
    cfg = RunConfig.load(os.path.join(target, "config.yaml"))
    records = []
    log_path = os.path.join(target, "train_log.jsonl")
    if os.path.exists(log_path):
        with open(log_path) as f:
            records = [json.loads(l) for l in f if l.strip()]
    paths = plotting.render_run(target, reports, list(cfg.schedule().all_classes), records, TERMS, cfg.name)
    sys.stdout.write(metrics_csv(reports))
    sys.stdout.write("\n")
    sys.stdout.write(per_class_csv(reports, list(cfg.schedule().all_classes)))
    for p in paths:
        log.info("wrote %s", p)
    return EXIT_OK


# parser ----------------------------------------------------------------------


def _add_config_flags(p, run_flags: bool = True):
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--preset", choices=sorted(PRESETS), help="built-in configuration")
    p.add_argument("--seed", type=int, help="override the run seed")
    if run_flags:
        p.add_argument("--baseline", choices=sorted(BASELINES), help="apply a comparison baseline")
        p.add_argument("--toggle", action="append", metavar="TERM=on|off",
                       help=f"switch a loss term ({', '.join(TERMS)}); repeatable")
        p.add_argument("--corpus", help="load the corpus from a 'generate' directory instead of synthesizing it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtrseg", description="Continual segmentation experiments on the synthetic shapes corpus.",
                                     epilog=f"Default output root: ${OUT_ENV} (else ./runs).")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write the synthetic corpus to disk")
    _add_config_flags(p, run_flags=False)
    p.add_argument("--out", help="corpus directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="train all continual steps and evaluate after each")
    _add_config_flags(p)
    p.add_argument("--out", help="run directory")
    p.add_argument("--resume", help="run directory or step checkpoint to continue from")
    p.add_argument("--stop-after", type=int, help="stop after this step (for staged runs)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate a checkpoint, or re-evaluate every step of a run directory")
    p.add_argument("target", help="step checkpoint or run directory")
    p.add_argument("--config", help="config giving the eval corpus (default: config.yaml beside the checkpoint)")
    p.add_argument("--corpus", help="corpus directory")
    p.add_argument("--json", action="store_true", help="print metrics JSON instead of the table")
    p.add_argument("--check", action="store_true", help="exit 1 if a run directory's metrics.json is not reproduced")
    p.add_argument("--include-background", action="store_true", help="count background in the 'all' mean")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="one run per ablation row; writes ablation.csv")
    _add_config_flags(p)
    p.add_argument("--matrix", default="forgetting", help=f"named matrix ({', '.join(MATRICES)}) or YAML file")
    p.add_argument("--out", help="ablation directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render figures for a run or ablation directory and print its CSV")
    p.add_argument("target", help="run or ablation directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except MtrsegError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
