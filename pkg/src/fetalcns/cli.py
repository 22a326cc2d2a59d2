"""Command-line entry point.

Subcommands: ingest | split | train | evaluate | explain | serve | synth.
Every command writes a ``run_manifest.json`` next to its outputs recording
the flags, seed, input hashes and tool version; re-running with identical
inputs reproduces all other outputs byte for byte. Logs go to stderr, data
to files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, corpus, imageops, ingest, metrics, synth, trainer
from .corpus import PreprocessConfig, task_classes
from .errors import ConfigurationError, PipelineError, UndefinedMetricError
from .explain import OverlayConfig, grad_cam, write_triptych
from .net import NetConfig, desk_config, load_checkpoint, resnet34_config


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_manifest(
    out_dir: str | Path, command: str, args: argparse.Namespace, inputs: list, started: float
) -> None:
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": command,
        "flags": flags,
        "seed": flags.get("seed"),
        "input_hashes": {
            str(p): _sha256(p) for p in inputs if p is not None and Path(p).is_file()
        },
        "tool_version": __version__,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# ingest


def _cmd_ingest(args) -> int:
    started = time.time()
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    crops = ingest.read_crop_sidecar(args.crops) if args.crops else {}
    meta = json.loads(Path(args.meta).read_text(encoding="utf-8")) if args.meta else {}
    records = []
    for video_id, video_dir in ingest.iter_video_dirs(args.videos):
        indices = ingest.list_frame_indices(video_dir)
        if not indices:
            _log(f"skipping {video_id}: no frames")
            continue
        spec = ingest.FrameExtractionSpec(
            stride=args.stride,
            start_frame=args.start_frame,
            end_frame=indices[-1] if args.end_frame is None else args.end_frame,
        )
        available = set(indices)
        wanted = spec.indices()
        missing = [i for i in wanted if i not in available]
        if missing:
            raise ConfigurationError(
                f"{video_id}: frames missing for indices {missing[:5]} "
                f"(decoded directory is sparse)"
            )
        info = meta.get(video_id, {})
        for idx in wanted:
            image = imageops.load_image(ingest.frame_path(args.videos, video_id, idx))
            sample_id = f"{video_id}_{idx:06d}"
            if sample_id in crops:
                image = ingest.crop_roi(image, crops[sample_id])
            rel = f"images/{sample_id}.png"
            imageops.save_image(out / rel, image)
            records.append(
                ingest.SampleRecord(
                    sample_id=sample_id,
                    patient_id=info.get("patient_id", video_id),
                    path=rel,
                    label=info.get("label", "Normal"),
                    source="video_frame",
                    video_id=video_id,
                    frame_index=idx,
                    plane=info.get("plane"),
                    gestational_age_days=(
                        ingest.parse_gestational_age(info["gestational_age"])
                        if "gestational_age" in info
                        else None
                    ),
                    site=info.get("site", ""),
                )
            )
    manifest = ingest.build_manifest(records)
    ingest.write_manifest(manifest, out / "manifest.jsonl")
    _log(
        f"ingested {len(manifest.records)} frames from "
        f"{len({r.video_id for r in manifest.records})} videos"
    )
    _write_run_manifest(out, "ingest", args, [args.crops, args.meta], started)
    return 0


# ---------------------------------------------------------------------------
# split


def _cmd_split(args) -> int:
    started = time.time()
    manifest = ingest.read_manifest(args.manifest)
    if args.scheme == "loocv":
        plan = corpus.loocv_splits(manifest)
    else:
        plan = corpus.grouped_kfold(manifest, k=args.k, seed=args.seed)
    report = corpus.verify_no_leakage(plan)
    if not report.ok:
        _log(f"refusing to write leaky plan: {report.violations}")
        return 1
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus.write_split_plan(plan, out)
    _log(f"{plan.scheme} plan with {len(plan.folds)} folds -> {out}")
    _write_run_manifest(out.parent, "split", args, [args.manifest], started)
    return 0


# ---------------------------------------------------------------------------
# train


def _net_config(spec: str, num_classes: int) -> NetConfig:
    if spec == "desk":
        return desk_config(num_classes)
    if spec == "resnet34":
        return resnet34_config(num_classes)
    data = json.loads(Path(spec).read_text(encoding="utf-8"))
    data.setdefault("num_classes", num_classes)
    return NetConfig.from_json_dict(data)


def _train_one_fold(payload: dict) -> dict:
    """Worker for one fold; must stay importable for process pools."""
    manifest = ingest.read_manifest(payload["manifest"])
    plan = corpus.read_split_plan(payload["split"])
    net_config = NetConfig.from_json_dict(payload["net_config"])
    train_config = trainer.TrainConfig(**payload["train_config"])
    classes = tuple(payload["classes"])
    fold_id = payload["fold_id"]
    result = trainer.train_fold(
        fold_id,
        manifest,
        plan,
        net_config,
        train_config,
        data_root=payload["data_root"],
        out_dir=payload["out_dir"],
        classes=classes,
    )
    params, cfg = load_checkpoint(result.best_checkpoint)
    fold = plan.fold(fold_id)
    data = trainer.FoldData(
        manifest, fold, payload["data_root"], classes, PreprocessConfig()
    )
    preds = trainer.predict_records(
        params, cfg, data.test_records, data, fold_id, train_config.batch_size
    )
    return {
        "fold_id": fold_id,
        "result": result.to_json_dict(),
        "predictions": [p.to_json_dict() for p in preds],
    }


def _cmd_train(args) -> int:
    started = time.time()
    plan = corpus.read_split_plan(args.split)
    classes = task_classes(args.task)
    net_config = _net_config(args.net_config, len(classes))
    train_config = (
        trainer.TrainConfig.from_json_file(args.train_config)
        if args.train_config
        else trainer.TrainConfig()
    )
    if args.seed is not None:
        train_config.seed = args.seed
    data_root = args.data_root or str(Path(args.manifest).parent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    fold_ids = (
        [f.fold_id for f in plan.folds] if args.fold == "all" else [int(args.fold)]
    )
    payloads = [
        {
            "fold_id": fid,
            "manifest": args.manifest,
            "split": args.split,
            "net_config": net_config.to_json_dict(),
            "train_config": train_config.to_json_dict(),
            "classes": list(classes),
            "data_root": data_root,
            "out_dir": str(out),
        }
        for fid in fold_ids
    ]
    jobs = max(1, args.jobs)
    outputs = []
    if jobs == 1 or len(payloads) == 1:
        for p in payloads:
            _log(f"training fold {p['fold_id']} ...")
            outputs.append(_train_one_fold(p))
    else:
        # one BLAS thread per worker so fold processes do not fight for cores
        os.environ.setdefault("OMP_NUM_THREADS", "1")
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        os.environ.setdefault("MKL_NUM_THREADS", "1")
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for result in pool.map(_train_one_fold, payloads):
                _log(f"finished fold {result['fold_id']}")
                outputs.append(result)

    outputs.sort(key=lambda r: r["fold_id"])
    predictions = [
        metrics.PredictionRecord.from_json_dict(p)
        for r in outputs
        for p in r["predictions"]
    ]
    metrics.write_predictions(predictions, out / "predictions.jsonl")
    summary = {
        "folds": [
            {
                "fold_id": r["fold_id"],
                "best_val_accuracy": r["result"]["best_val_accuracy"],
                "epoch_of_best": r["result"]["epoch_of_best"],
                "epochs_run": len(r["result"]["epochs"]),
                "best_checkpoint": r["result"]["best_checkpoint"],
            }
            for r in outputs
        ]
    }
    (out / "training_summary.json").write_text(
        json.dumps(summary, indent=2) + "\n", encoding="utf-8"
    )
    _log(f"trained {len(outputs)} folds; predictions -> {out / 'predictions.jsonl'}")
    _write_run_manifest(
        out,
        "train",
        args,
        [args.manifest, args.split, args.train_config]
        + ([args.net_config] if Path(args.net_config).is_file() else []),
        started,
    )
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _roc_block(units, classes, out_dir: Path, level: str) -> dict:
    block: dict = {}
    curves_dir = out_dir / "curves"
    curves_dir.mkdir(parents=True, exist_ok=True)
    plot_curves: dict[str, tuple] = {}
    try:
        per_class = metrics.multiclass_roc(units, classes, "per_class")
        block["per_class_auc"] = {c: r.auc for c, r in per_class.items()}
        for c, r in per_class.items():
            _write_curve_csv(curves_dir / f"roc_{level}_{c}.csv", "fpr", r.fpr, "tpr", r.tpr)
            plot_curves[f"{c} ({r.auc:.3f})"] = (r.fpr, r.tpr)
    except UndefinedMetricError as exc:
        block["per_class_error"] = str(exc)
    try:
        micro = metrics.multiclass_roc(units, classes, "micro")
        block["micro_auc"] = micro.auc
        _write_curve_csv(curves_dir / f"roc_{level}_micro.csv", "fpr", micro.fpr, "tpr", micro.tpr)
        plot_curves[f"micro ({micro.auc:.3f})"] = (micro.fpr, micro.tpr)
    except UndefinedMetricError as exc:
        block["micro_error"] = str(exc)
    try:
        macro = metrics.multiclass_roc(units, classes, "macro")
        block["macro_auc"] = macro.auc
        _write_curve_csv(
            curves_dir / f"roc_{level}_macro.csv", "fpr", macro.fpr_grid, "tpr", macro.mean_tpr
        )
        plot_curves[f"macro ({macro.auc:.3f})"] = (macro.fpr_grid, macro.mean_tpr)
    except UndefinedMetricError as exc:
        block["macro_error"] = str(exc)
    if plot_curves:
        from . import svgplot

        (out_dir / "plots").mkdir(parents=True, exist_ok=True)
        svgplot.write_curves(
            out_dir / "plots" / f"roc_{level}.svg",
            plot_curves,
            f"ROC ({level})",
            "false positive rate",
            "true positive rate",
            diagonal=True,
        )
    return block


def _pr_block(units, classes, out_dir: Path, level: str) -> dict:
    block: dict = {}
    index = {c: i for i, c in enumerate(classes)}
    curves_dir = out_dir / "curves"
    curves_dir.mkdir(parents=True, exist_ok=True)
    plot_curves: dict[str, tuple] = {}
    for c in classes:
        scores = [u.probabilities[index[c]] for u in units]
        positives = [u.true_label == c for u in units]
        try:
            curve = metrics.pr_auc(scores, positives)
        except UndefinedMetricError as exc:
            block[c] = {"error": str(exc)}
            continue
        block[c] = {"auc": curve.auc}
        _write_curve_csv(
            curves_dir / f"pr_{level}_{c}.csv", "recall", curve.recall, "precision", curve.precision
        )
        plot_curves[f"{c} ({curve.auc:.3f})"] = (curve.recall, curve.precision)
    if plot_curves:
        from . import svgplot

        (out_dir / "plots").mkdir(parents=True, exist_ok=True)
        svgplot.write_curves(
            out_dir / "plots" / f"pr_{level}.svg",
            plot_curves,
            f"Precision-Recall ({level})",
            "recall",
            "precision",
        )
    return block


def _write_curve_csv(path: Path, xname: str, xs, yname: str, ys) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{xname},{yname}\n")
        for x, y in zip(xs, ys):
            fh.write(f"{x:.10g},{y:.10g}\n")


def _level_block(units, classes, out_dir: Path, level: str) -> dict:
    matrix = metrics.confusion(units, classes)
    return {
        "confusion": matrix.to_json_dict(),
        "summary_macro": metrics.summary_metrics(matrix, "macro").to_json_dict(),
        "summary_micro": metrics.summary_metrics(matrix, "micro").to_json_dict(),
        "roc": _roc_block(units, classes, out_dir, level),
        "pr": _pr_block(units, classes, out_dir, level),
    }


def _cmd_evaluate(args) -> int:
    started = time.time()
    records = metrics.read_predictions(args.predictions)
    if not records:
        raise ConfigurationError(f"no prediction records in {args.predictions}")
    classes = task_classes(args.task)
    if args.task == "binary":
        records = metrics.binary_collapse(records)
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)

    aggregates = metrics.aggregate_patients(records)
    report = {
        "task": args.task,
        "classes": list(classes),
        "image_level": _level_block(records, classes, out, "image"),
        "patient_level": _level_block(aggregates, classes, out, "patient"),
    }
    try:
        sub = metrics.subgroup_compare(aggregates, classes, cutoff_days=args.subgroup_cutoff_days)
        report["subgroup"] = sub.to_json_dict()
    except PipelineError as exc:
        report["subgroup"] = {"error": str(exc)}

    recalls = {}
    matrix = metrics.confusion(aggregates, classes)
    row = matrix.counts.sum(axis=1)
    diag = np.diag(matrix.counts)
    recalls["model"] = [
        float(diag[i] / row[i]) if row[i] else 0.0 for i in range(len(classes))
    ]
    from . import svgplot

    (out / "plots").mkdir(parents=True, exist_ok=True)
    svgplot.write_radar(
        out / "plots" / "recall_radar.svg",
        list(classes),
        recalls,
        "Patient-level per-class recall",
    )
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    _log(f"evaluation report -> {out / 'report.json'}")
    _write_run_manifest(out, "evaluate", args, [args.predictions], started)
    return 0


# ---------------------------------------------------------------------------
# explain


def _cmd_explain(args) -> int:
    started = time.time()
    params, net_cfg = load_checkpoint(args.checkpoint)
    by_count = {5: corpus.FIVE_CLASSES, 4: corpus.ANOMALY_CLASSES, 2: corpus.BINARY_CLASSES}
    classes = by_count.get(net_cfg.num_classes)
    if args.cls.isdigit():
        class_index = int(args.cls)
    else:
        if classes is None or args.cls not in classes:
            raise ConfigurationError(f"unknown class {args.cls!r} for this checkpoint")
        class_index = classes.index(args.cls)
    image = imageops.load_image(args.image)
    preprocess = PreprocessConfig()
    model_input = corpus.eval_transform(image, preprocess)
    heatmap = grad_cam(params, model_input, class_index, net_cfg)
    original = corpus.eval_crop(image, preprocess)
    out = Path(args.out)
    paths = write_triptych(
        out, Path(args.image).stem, original, heatmap, OverlayConfig(alpha=args.alpha)
    )
    _log(f"wrote {', '.join(str(p) for p in paths.values())}")
    _write_run_manifest(out, "explain", args, [args.checkpoint, args.image], started)
    return 0


# ---------------------------------------------------------------------------
# serve / synth


def _cmd_serve(args) -> int:
    from . import reader_service

    data_dir = args.data_dir or os.environ.get("DATA_DIR")
    if not data_dir:
        raise ConfigurationError("serve needs --data-dir or DATA_DIR")
    port = args.port or int(os.environ.get("PORT", "8000"))
    token = args.admin_token or os.environ.get("ADMIN_TOKEN", "")
    _log(f"serving reader study from {data_dir} on port {port}")
    reader_service.serve(
        data_dir,
        port,
        admin_token=token,
        study_seed=args.seed,
        cases_path=args.cases,
        ui_dir=args.ui_dir,
    )
    return 0


def _cmd_synth(args) -> int:
    started = time.time()
    manifest = synth.generate_corpus(
        patients=args.patients,
        images_per_patient=args.images_per_patient,
        seed=args.seed,
        out_dir=args.out,
    )
    _log(
        f"synthetic corpus: {len(manifest.records)} images, "
        f"{manifest.patient_count} patients -> {args.out}"
    )
    _write_run_manifest(args.out, "synth", args, [], started)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fetalcns", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="extract video frames, crop, and catalog")
    p.add_argument("--videos", required=True, help="directory of per-video frame dirs")
    p.add_argument("--stride", type=int, default=80)
    p.add_argument("--start-frame", type=int, default=0)
    p.add_argument("--end-frame", type=int, default=None)
    p.add_argument("--crops", default=None, help="crop sidecar JSONL")
    p.add_argument("--meta", default=None, help="per-video metadata JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("split", help="build a patient-grouped split plan")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scheme", choices=["loocv", "kfold"], required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="train folds and collect test predictions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--fold", default="all", help="'all' or a fold id")
    p.add_argument("--net-config", default="desk", help="'desk', 'resnet34', or JSON file")
    p.add_argument("--train-config", default=None, help="TrainConfig JSON file")
    p.add_argument("--task", choices=["4class", "5class", "binary"], default="5class")
    p.add_argument("--data-root", default=None)
    p.add_argument("--seed", type=int, default=None, help="override TrainConfig seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel folds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="metrics report from prediction records")
    p.add_argument("--predictions", required=True)
    p.add_argument("--task", choices=["4class", "5class", "binary"], default="5class")
    p.add_argument("--subgroup-cutoff-days", type=int, default=140)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("explain", help="Grad-CAM triptych for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="cls", required=True, help="label name or index")
    p.add_argument("--alpha", type=float, default=0.35)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("serve", help="run the reader-study HTTP service")
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--cases", default=None, help="cases JSONL (default DATA_DIR/cases.jsonl)")
    p.add_argument("--admin-token", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ui-dir", default=None, help="serve a built frontend from this directory")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("synth", help="generate the synthetic acceptance corpus")
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--images-per-patient", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
