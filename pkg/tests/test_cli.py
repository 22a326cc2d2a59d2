import json
from pathlib import Path

import numpy as np
import pytest

from fetalcns.cli import main
from fetalcns.corpus import ANOMALY_CLASSES
from fetalcns.imageops import load_image, save_image
from fetalcns.metrics import PredictionRecord, write_predictions


def run_cli(*argv):
    return main([str(a) for a in argv])


class TestSynthAndSplit:
    def test_synth_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_cli("synth", "--patients", 6, "--images-per-patient", 2, "--seed", 7, "--out", a) == 0
        assert run_cli("synth", "--patients", 6, "--images-per-patient", 2, "--seed", 7, "--out", b) == 0
        assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
        for img in sorted((a / "images").iterdir()):
            assert img.read_bytes() == (b / "images" / img.name).read_bytes()

    def test_split_loocv(self, tmp_path):
        corpus = tmp_path / "c"
        run_cli("synth", "--patients", 5, "--images-per-patient", 2, "--seed", 1, "--out", corpus)
        out = corpus / "split.json"
        assert run_cli("split", "--manifest", corpus / "manifest.jsonl", "--scheme", "loocv", "--out", out) == 0
        plan = json.loads(out.read_text())
        assert plan["scheme"] == "loocv"
        assert len(plan["folds"]) == 5

    def test_split_kfold(self, tmp_path):
        corpus = tmp_path / "c"
        run_cli("synth", "--patients", 10, "--images-per-patient", 2, "--seed", 1, "--out", corpus)
        out = corpus / "kfold.json"
        assert run_cli(
            "split", "--manifest", corpus / "manifest.jsonl", "--scheme", "kfold",
            "--k", 5, "--seed", 3, "--out", out,
        ) == 0
        plan = json.loads(out.read_text())
        assert len(plan["folds"]) == 5
        assert all(len(f["test_patient_ids"]) == 2 for f in plan["folds"])

    def test_run_manifest_written(self, tmp_path):
        corpus = tmp_path / "c"
        run_cli("synth", "--patients", 4, "--images-per-patient", 2, "--seed", 1, "--out", corpus)
        rm = json.loads((corpus / "run_manifest.json").read_text())
        assert rm["command"] == "synth"
        assert rm["seed"] == 1
        assert rm["tool_version"]


class TestIngest:
    def _make_frames(self, root: Path, video_id="vidA", count=25):
        rng = np.random.default_rng(0)
        vdir = root / video_id
        vdir.mkdir(parents=True)
        for i in range(count):
            save_image(vdir / f"{i:06d}.png", rng.integers(0, 255, (20, 24), dtype=np.uint8))

    def test_ingest_stride_and_crop(self, tmp_path):
        frames = tmp_path / "frames"
        self._make_frames(frames)
        crops = tmp_path / "crops.jsonl"
        crops.write_text(json.dumps(
            {"sample_id": "vidA_000010", "x": 2, "y": 3, "width": 10, "height": 12}
        ) + "\n")
        meta = tmp_path / "meta.json"
        meta.write_text(json.dumps(
            {"vidA": {"patient_id": "PX", "label": "Rachischisis", "gestational_age": "29w2d",
                      "site": "site-a"}}
        ))
        out = tmp_path / "out"
        assert run_cli(
            "ingest", "--videos", frames, "--stride", 10, "--crops", crops,
            "--meta", meta, "--out", out,
        ) == 0
        lines = [json.loads(l) for l in (out / "manifest.jsonl").read_text().splitlines()]
        assert [r["frame_index"] for r in lines] == [0, 10, 20]
        assert all(r["patient_id"] == "PX" for r in lines)
        assert all(r["label"] == "Rachischisis" for r in lines)
        assert all(r["gestational_age_days"] == 205 for r in lines)
        cropped = load_image(out / "images" / "vidA_000010.png")
        assert cropped.shape == (12, 10)
        uncropped = load_image(out / "images" / "vidA_000000.png")
        assert uncropped.shape == (20, 24)


def paper_fixture_predictions(path):
    matrix = {
        ("Anencephaly", "Anencephaly"): 3,
        ("Anencephaly", "Encephalocele"): 1,
        ("Encephalocele", "Encephalocele"): 8,
        ("Holoprosencephaly", "Holoprosencephaly"): 15,
        ("Rachischisis", "Holoprosencephaly"): 1,
        ("Rachischisis", "Rachischisis"): 8,
    }
    records = []
    k = 0
    for (true_cls, pred_cls), count in matrix.items():
        for _ in range(count):
            probs = [0.02, 0.02, 0.02, 0.02]
            probs[ANOMALY_CLASSES.index(pred_cls)] = 0.94
            records.append(
                PredictionRecord(
                    sample_id=f"img{k}", patient_id=f"patient{k:02d}", fold_id=k,
                    true_label=true_cls, probabilities=probs,
                )
            )
            k += 1
    write_predictions(records, path)
    return records


class TestEvaluate:
    def test_reproduces_reported_confusion_matrix(self, tmp_path):
        preds = tmp_path / "preds.jsonl"
        paper_fixture_predictions(preds)
        report_dir = tmp_path / "report"
        assert run_cli(
            "evaluate", "--predictions", preds, "--task", "4class", "--report", report_dir
        ) == 0
        report = json.loads((report_dir / "report.json").read_text())
        assert report["patient_level"]["confusion"]["counts"] == [
            [3, 1, 0, 0],
            [0, 8, 0, 0],
            [0, 0, 15, 0],
            [0, 0, 1, 8],
        ]
        acc = report["patient_level"]["summary_macro"]["accuracy"]
        assert abs(acc - 34 / 36) < 1e-12
        assert abs(acc - 0.945) < 0.01
        assert abs(report["patient_level"]["summary_macro"]["recall"] - 0.912) < 0.01

    def test_binary_task_collapses(self, tmp_path):
        preds = tmp_path / "p.jsonl"
        records = [
            PredictionRecord("a", "P1", 0, "Normal", [0.05, 0.05, 0.05, 0.05, 0.8]),
            PredictionRecord("b", "P2", 0, "Anencephaly", [0.6, 0.1, 0.1, 0.1, 0.1]),
            PredictionRecord("c", "P3", 0, "Rachischisis", [0.1, 0.1, 0.1, 0.6, 0.1]),
            PredictionRecord("d", "P4", 0, "Normal", [0.3, 0.3, 0.2, 0.1, 0.1]),
        ]
        write_predictions(records, preds)
        report_dir = tmp_path / "rep"
        assert run_cli(
            "evaluate", "--predictions", preds, "--task", "binary", "--report", report_dir
        ) == 0
        report = json.loads((report_dir / "report.json").read_text())
        assert report["classes"] == ["Abnormal", "Normal"]
        counts = np.array(report["patient_level"]["confusion"]["counts"])
        assert counts.sum() == 4
        assert counts[0].sum() == 2 and counts[1].sum() == 2  # 2 abnormal, 2 normal

    def test_curves_and_plots_emitted(self, tmp_path):
        preds = tmp_path / "p.jsonl"
        paper_fixture_predictions(preds)
        report_dir = tmp_path / "rep"
        run_cli("evaluate", "--predictions", preds, "--task", "4class", "--report", report_dir)
        assert (report_dir / "plots" / "roc_patient.svg").exists()
        assert (report_dir / "plots" / "pr_image.svg").exists()
        assert (report_dir / "plots" / "recall_radar.svg").exists()
        roc_csv = (report_dir / "curves" / "roc_image_micro.csv").read_text().splitlines()
        assert roc_csv[0] == "fpr,tpr"
        assert len(roc_csv) > 2


class TestSmallTrainRun:
    def test_single_fold_end_to_end(self, tmp_path):
        corpus = tmp_path / "c"
        run_cli("synth", "--patients", 10, "--images-per-patient", 2, "--seed", 5, "--out", corpus)
        run_cli("split", "--manifest", corpus / "manifest.jsonl", "--scheme", "loocv",
                "--out", corpus / "split.json")
        tc = tmp_path / "tc.json"
        tc.write_text(json.dumps({"max_epochs": 2, "early_stop_patience": 2, "batch_size": 8,
                                  "seed": 3}))
        out = tmp_path / "run"
        assert run_cli(
            "train", "--manifest", corpus / "manifest.jsonl", "--split", corpus / "split.json",
            "--fold", 0, "--net-config", "desk", "--task", "5class",
            "--train-config", tc, "--out", out,
        ) == 0
        assert (out / "fold000.best.ckpt").exists()
        assert (out / "fold000.epochs.csv").exists()
        preds = [json.loads(l) for l in (out / "predictions.jsonl").read_text().splitlines()]
        assert len(preds) == 2  # one patient's images
        assert all(len(p["probabilities"]) == 5 for p in preds)
        assert all(abs(sum(p["probabilities"]) - 1) < 1e-6 for p in preds)
        summary = json.loads((out / "training_summary.json").read_text())
        assert summary["folds"][0]["epochs_run"] == 2

    def test_explain_on_trained_checkpoint(self, tmp_path):
        corpus = tmp_path / "c"
        run_cli("synth", "--patients", 10, "--images-per-patient", 2, "--seed", 6, "--out", corpus)
        run_cli("split", "--manifest", corpus / "manifest.jsonl", "--scheme", "loocv",
                "--out", corpus / "split.json")
        tc = tmp_path / "tc.json"
        tc.write_text(json.dumps({"max_epochs": 2, "early_stop_patience": 2, "batch_size": 8}))
        out = tmp_path / "run"
        run_cli("train", "--manifest", corpus / "manifest.jsonl", "--split", corpus / "split.json",
                "--fold", 0, "--net-config", "desk", "--task", "5class",
                "--train-config", tc, "--out", out)
        image = corpus / "images" / "P000_img000.png"
        cam_dir = tmp_path / "cam"
        assert run_cli(
            "explain", "--checkpoint", out / "fold000.best.ckpt", "--image", image,
            "--class", "Anencephaly", "--alpha", 0.35, "--out", cam_dir,
        ) == 0
        for kind in ("orig", "cam", "overlay"):
            f = cam_dir / f"P000_img000.{kind}.png"
            assert f.exists()
            assert load_image(f).shape[:2] == (224, 224)


class TestUsageErrors:
    def test_unknown_flag_exits_nonzero(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("split", "--nonsense", "x")
        assert exc.value.code != 0

    def test_missing_required_flag(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("synth", "--patients", 5)
        assert exc.value.code != 0

    def test_pipeline_error_returns_2(self, tmp_path):
        corpus = tmp_path / "c"
        run_cli("synth", "--patients", 1, "--images-per-patient", 1, "--seed", 0, "--out", corpus)
        # loocv needs >= 2 patients
        assert run_cli(
            "split", "--manifest", corpus / "manifest.jsonl", "--scheme", "loocv",
            "--out", corpus / "s.json",
        ) == 2


class TestDeterminism:
    def test_training_a_fold_twice_yields_identical_logs(self, tmp_path):
        corpus = tmp_path / "c"
        run_cli("synth", "--patients", 10, "--images-per-patient", 2, "--seed", 9, "--out", corpus)
        run_cli("split", "--manifest", corpus / "manifest.jsonl", "--scheme", "loocv",
                "--out", corpus / "split.json")
        tc = tmp_path / "tc.json"
        tc.write_text(json.dumps({"max_epochs": 2, "early_stop_patience": 2,
                                  "batch_size": 8, "seed": 4}))
        outs = []
        for name in ("runA", "runB"):
            out = tmp_path / name
            assert run_cli(
                "train", "--manifest", corpus / "manifest.jsonl",
                "--split", corpus / "split.json", "--fold", 0, "--net-config", "desk",
                "--task", "5class", "--train-config", tc, "--out", out,
            ) == 0
            outs.append(out)
        a, b = outs
        assert (a / "fold000.epochs.csv").read_bytes() == (b / "fold000.epochs.csv").read_bytes()
        assert (a / "fold000.best.ckpt").read_bytes() == (b / "fold000.best.ckpt").read_bytes()
        assert (a / "predictions.jsonl").read_bytes() == (b / "predictions.jsonl").read_bytes()

    def test_evaluate_outputs_byte_reproducible(self, tmp_path):
        preds = tmp_path / "p.jsonl"
        paper_fixture_predictions(preds)
        reports = []
        for name in ("r1", "r2"):
            rd = tmp_path / name
            assert run_cli("evaluate", "--predictions", preds, "--task", "4class",
                           "--report", rd) == 0
            reports.append(rd)
        a, b = reports
        assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
        assert (a / "plots" / "roc_image.svg").read_bytes() == (b / "plots" / "roc_image.svg").read_bytes()
        for f in sorted((a / "curves").iterdir()):
            assert f.read_bytes() == (b / "curves" / f.name).read_bytes()
