"""Command-line entry point: ``python -m depcae <command> ...``.

Commands: ``gen``, ``train``, ``score``, ``threshold``, ``eval``,
``agreement`` and ``validate``. Every run writes its resolved config next
to its outputs, and every artifact carries the hash of that config so that
``eval`` can refuse to mix artifacts from different runs.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

from threadpoolctl import threadpool_limits

from depcae.benchmark import PROFILES, make_benchmark
from depcae.detect import (
    METHODS, ThresholdReport, classify, read_scores_csv, score_windows, write_scores_csv,
)
from depcae.experiment import (
    ARM_NAMES, THRESHOLD_METHODS, ExperimentConfig, TrainingAborted, ablation_run, make_weights,
    select_threshold, train_model,
)
from depcae.metrics import agreement_report, evaluate, format_table, report_json, stratified_eval
from depcae.model import CheckpointError, build_model, read_checkpoint, save_checkpoint
from depcae.pipeline import ManifestError, TnsError, load_depth, load_manifest, load_windows, validate_manifest

log = logging.getLogger("depcae")

CONFIG_FILE = "config.json"
CHECKPOINT_FILE = "model.dcae"
TRAIN_LOG = "train_log.csv"
THREADS_ENV = "DIV_THREADS"


class CliError(RuntimeError):
    """A runtime failure reported to the user with exit code 1."""


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        event = {"ts": round(record.created, 3), "level": record.levelname.lower(), "msg": record.getMessage()}
        event.update(getattr(record, "fields", {}))
        return json.dumps(event, sort_keys=True)


def _event(msg: str, **fields) -> None:
    log.info(msg, extra={"fields": fields})


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO if verbose else logging.WARNING)


def _worker_count(n: Optional[int]) -> int:
    """Scoring threads from ``--threads``, else ``$DIV_THREADS``, else 1."""
    if n is None:
        env = os.environ.get(THREADS_ENV)
        try:
            n = int(env) if env else 1
        except ValueError:
            raise CliError(f"${THREADS_ENV} must be an integer, got {env!r}") from None
    if n < 1:
        raise CliError("--threads must be at least 1")
    return n


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    d = cfg.to_dict()
    for key in ("dataset", "out", "threshold", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    train = d["train"]
    overrides = {
        "channel_plan": getattr(args, "channel_plan", None),
        "loss": getattr(args, "loss", None),
        "depth_exponent": getattr(args, "depth_exponent", None),
        "lr": getattr(args, "lr", None),
        "batch_size": getattr(args, "batch_size", None),
        "epochs": getattr(args, "epochs", None),
        "frames_per_sample": getattr(args, "frames_per_sample", None),
    }
    train.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
    return ExperimentConfig.from_dict(d)


def _run_dir(args) -> Path:
    run = Path(args.run)
    if not (run / CONFIG_FILE).exists():
        raise CliError(f"{run}: no {CONFIG_FILE}; is this a training output directory?")
    return run


def _run_hash(run: Path) -> str:
    return ExperimentConfig.load(run / CONFIG_FILE).hash()


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise CliError(f"missing {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _check_hashes(expected: str, artifacts: dict, force: bool) -> None:
    bad = {name: h for name, h in artifacts.items() if h != expected}
    if not bad:
        return
    msg = "config hash mismatch: " + ", ".join(f"{n} has {h}" for n, h in bad.items()) + f", run has {expected}"
    if not force:
        raise CliError(msg + " (pass --force to override)")
    log.warning(msg, extra={"fields": {"forced": True}})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    t0 = time.perf_counter()
    manifest = make_benchmark(args.profile, args.seed, args.out)
    counts = {}
    for w in manifest["windows"]:
        key = f"{w['split']}:{w['label']}"
        counts[key] = counts.get(key, 0) + 1
    _event("dataset written", out=str(args.out), config_hash=manifest["config_hash"], windows=counts,
           seconds=round(time.perf_counter() - t0, 2))
    print(json.dumps({"out": str(args.out), "config_hash": manifest["config_hash"], "windows": counts},
                     sort_keys=True))
    return 0


def cmd_validate(args) -> int:
    manifest = load_manifest(args.dataset)
    problems = validate_manifest(manifest, Path(args.dataset))
    for p in problems:
        print(p)
    if problems:
        return 1
    print(f"{args.dataset}: ok ({len(manifest['windows'])} windows)")
    return 0


def _train_purity(windows) -> None:
    bad = [w.id for w in windows if w.label == "anomalous"]
    if bad:
        raise CliError(f"train split contains {len(bad)} anomalous window(s), e.g. {bad[0]}; refusing to train")


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.out)
    root = Path(cfg.dataset)
    manifest = load_manifest(root)
    train = load_windows(root, "train", manifest)
    _train_purity(train)
    problems = validate_manifest(manifest, root)
    if problems:
        raise CliError("invalid dataset: " + "; ".join(problems))
    depth = load_depth(root, manifest)
    cfg.save(out / CONFIG_FILE)
    digest = cfg.hash()
    meta = {"config": cfg.to_dict(), "config_hash": digest, "dataset_hash": manifest["config_hash"]}

    log_path = out / TRAIN_LOG
    with log_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss", "seconds"])

        def on_epoch(row):
            writer.writerow([row["epoch"], repr(row["loss"]), row["seconds"]])
            fh.flush()
            _event("epoch", **row)

        model = build_model(cfg.train.channel_plan, cfg.train.seed, input_shape=train[0].frames.shape)
        try:
            model, history = train_model(train, cfg.train, depth, model=model, on_epoch=on_epoch)
        except TrainingAborted as exc:
            if exc.last_good is not None:
                model.load_state_dict(exc.last_good)
                save_checkpoint(model, out / CHECKPOINT_FILE, dict(meta, aborted=str(exc)))
            raise CliError(f"training aborted: {exc}; last good weights saved to {out / CHECKPOINT_FILE}") from None
    save_checkpoint(model, out / CHECKPOINT_FILE, meta)
    print(json.dumps({"checkpoint": str(out / CHECKPOINT_FILE), "config_hash": digest,
                      "initial_loss": history[0]["loss"], "final_loss": history[-1]["loss"]}))
    return 0


def _load_run_model(run: Path):
    ckpt = read_checkpoint(run / CHECKPOINT_FILE)
    return ckpt, ckpt.to_model()


def cmd_score(args) -> int:
    run = _run_dir(args)
    cfg = ExperimentConfig.load(run / CONFIG_FILE)
    ckpt, model = _load_run_model(run)
    _check_hashes(cfg.hash(), {"checkpoint": ckpt.config.get("config_hash")}, args.force)
    root = Path(args.dataset or cfg.dataset)
    manifest = load_manifest(root)
    _check_hashes(ckpt.config.get("dataset_hash"), {"dataset": manifest["config_hash"]}, args.force)
    weights = make_weights(cfg.train, load_depth(root, manifest))
    for split in args.split:
        scored = score_windows(model, load_windows(root, split, manifest), weights, workers=args.workers)
        path = write_scores_csv(scored, run / f"scores_{split}.csv")
        _write_json(run / f"scores_{split}.meta.json", {"config_hash": cfg.hash(), "split": split,
                                                        "n": len(scored)})
        _event("scored", split=split, n=len(scored), path=str(path))
    return 0


def _method_name(method: str) -> str:
    return "iqr-proxy-maxF1" if method == "iqr" else "annotated-proxy-maxF1"


def cmd_threshold(args) -> int:
    run = _run_dir(args)
    digest = _run_hash(run)
    meta = _read_json(run / "scores_train.meta.json")
    _check_hashes(digest, {"train scores": meta.get("config_hash")}, args.force)
    scored = read_scores_csv(run / "scores_train.csv")
    report = select_threshold(args.method, scored)
    payload = json.loads(report.to_json())
    payload["config_hash"] = digest
    _write_json(run / f"threshold_{args.method}.json", payload)
    print(json.dumps(payload, sort_keys=True))
    return 0


def _stratified_text(scored, key: str) -> str:
    rep = stratified_eval(scored, key)
    cols = dict(rep.rows)
    cols["average"] = rep.average
    return format_table(cols)


def cmd_eval(args) -> int:
    if args.ablation:
        return _eval_ablation(args)
    if not args.run:
        raise CliError("eval needs --run (or --ablation with --config)")
    run = _run_dir(args)
    digest = _run_hash(run)
    cfg = ExperimentConfig.load(run / CONFIG_FILE)
    method = args.method or cfg.threshold
    thr = _read_json(run / f"threshold_{method}.json")
    smeta = _read_json(run / "scores_test.meta.json")
    _check_hashes(digest, {"threshold": thr.get("config_hash"), "test scores": smeta.get("config_hash")},
                  args.force)
    scored = read_scores_csv(run / "scores_test.csv")
    if args.stratify_by:
        manifest = load_manifest(args.dataset or cfg.dataset)
        groups = {f"{w['clip']}@{w['start']}": w.get("group") for w in manifest["windows"]}
        for w in scored:
            w.group = groups.get(w.window_id)
    classify(scored, thr["threshold"])
    report = evaluate(scored)
    errors = report.consistency_errors()
    if errors:
        raise CliError(f"metrics report failed consistency checks: {errors}")
    out = {"config_hash": digest, "threshold": thr, "metrics": report.as_dict()}
    text = format_table({cfg.train.loss + "/" + method: report})
    if args.stratify_by:
        rep = stratified_eval(scored, args.stratify_by)
        out["stratified"] = {"group_key": args.stratify_by,
                             "rows": {g: (r.as_dict() if hasattr(r, "as_dict") else r) for g, r in rep.rows.items()},
                             "average": rep.average, "n_anomalous": rep.n_anomalous}
        text += "\n\n" + _stratified_text(scored, args.stratify_by)
    _write_json(run / f"report_{method}.json", out)
    (run / f"report_{method}.txt").write_text(text + "\n", encoding="utf-8")
    print(text if args.format == "text" else json.dumps(out, indent=2, sort_keys=True))
    return 0


def _eval_ablation(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.out)
    cfg.save(out / CONFIG_FILE)
    digest = cfg.hash()
    result = ablation_run(cfg.dataset, cfg.train, workers=args.workers,
                          on_epoch=lambda objective, row: _event("epoch", objective=objective, **row))
    columns = {name: result.arms[name].metrics for name in ARM_NAMES.values() if name in result.arms}
    text = format_table(columns)
    if args.stratify_by:
        for name, arm in result.arms.items():
            text += f"\n\n{name} by {args.stratify_by}\n" + _stratified_text(arm.test_scores, args.stratify_by)
    payload = {
        "config_hash": digest,
        "arms": {name: {"loss": arm.loss, "threshold": json.loads(arm.threshold.to_json()),
                        "metrics": arm.metrics.as_dict()} for name, arm in result.arms.items()},
        "histories": result.histories,
    }
    _write_json(out / "ablation.json", payload)
    (out / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    print(text if args.format == "text" else json.dumps(payload, indent=2, sort_keys=True))
    return 0


def _read_labels(path: Path) -> dict:
    """Rater labels keyed by window: CSV with ``clip_id,window_start,label`` columns."""
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"clip_id", "window_start", "label"} - set(reader.fieldnames or ())
        if missing:
            raise CliError(f"{path}: missing column(s) {sorted(missing)}")
        return {(row["clip_id"], int(row["window_start"])): row["label"] for row in reader}


def cmd_agreement(args) -> int:
    a = _read_labels(Path(args.rater_a))
    b = _read_labels(Path(args.rater_b))
    if set(a) != set(b):
        raise CliError(f"rater files cover different windows ({len(set(a) ^ set(b))} unmatched)")
    keys = sorted(a)
    rep = agreement_report([a[k] for k in keys], [b[k] for k in keys])
    print(json.dumps({"cohen_kappa": rep.cohen_kappa, "krippendorff_alpha": rep.krippendorff_alpha,
                      "percent_agreement": rep.percent_agreement, "n": rep.n,
                      "degenerate": list(rep.degenerate)}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _channel_plan(text: str) -> List[int]:
    try:
        plan = [int(c) for c in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if len(plan) != 3 or min(plan) < 1:
        raise argparse.ArgumentTypeError("channel plan needs three positive integers")
    return plan


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON; flags below override it")
    p.add_argument("--dataset", help="dataset root")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--channel-plan", type=_channel_plan, help="encoder widths, e.g. 16,32,64")
    p.add_argument("--loss", choices=("mse", "depth"))
    p.add_argument("--depth-exponent", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--frames-per-sample", type=int, help="train on this many random frames of each window")
    p.add_argument("--threshold", choices=THRESHOLD_METHODS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depcae", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int,
                        help=f"windows scored in parallel (default: ${THREADS_ENV} or 1); results do not depend on it")
    parser.add_argument("-v", "--verbose", action="store_true", help="emit JSON-lines progress events on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="render a synthetic benchmark")
    p.add_argument("--profile", default="corridor", choices=sorted(PROFILES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("validate", help="check a dataset manifest")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="train on the normal training windows")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score windows with a trained model")
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--dataset", help="dataset root (default: the one in the run config)")
    p.add_argument("--split", nargs="+", default=["train", "test"], choices=("train", "test"))
    p.add_argument("--force", action="store_true", help="ignore config hash mismatches")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("threshold", help="select an operating threshold from training scores")
    p.add_argument("--run", required=True)
    p.add_argument("--method", choices=THRESHOLD_METHODS, default="annotated")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser("eval", help="metrics on the test split, or a four-arm ablation")
    _add_config_flags(p)
    p.add_argument("--run")
    p.add_argument("--method", choices=THRESHOLD_METHODS)
    p.add_argument("--stratify-by", help="window group key, e.g. participant or sex")
    p.add_argument("--ablation", action="store_true", help="train both losses and report all four arms")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("agreement", help="inter-rater agreement between two label CSVs")
    p.add_argument("rater_a")
    p.add_argument("rater_b")
    p.set_defaults(func=cmd_agreement)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        args.workers = _worker_count(args.threads)
        # BLAS stays single-threaded: its blocking depends on the thread count and
        # would change float32 sums; parallelism comes from scoring windows concurrently
        with threadpool_limits(limits=1):
            return args.func(args)
    except (CliError, CheckpointError, ManifestError, TnsError, ValueError, OSError) as exc:
        print(f"depcae {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
