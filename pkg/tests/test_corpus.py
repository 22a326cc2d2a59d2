import numpy as np
import pytest

from fetalcns import corpus
from fetalcns.corpus import (
    FIVE_CLASSES,
    PreprocessConfig,
    SplitPlan,
    Fold,
    denormalize,
    eval_transform,
    grouped_kfold,
    loocv_splits,
    normalize,
    read_split_plan,
    train_transform,
    verify_no_leakage,
    write_split_plan,
)
from fetalcns.errors import ConfigurationError, ManifestValidationError, PreprocessingError
from fetalcns.ingest import Manifest, SampleRecord, build_manifest


def _manifest(n_patients, images_per_patient=2):
    records = []
    for p in range(n_patients):
        for j in range(images_per_patient):
            records.append(
                SampleRecord(
                    sample_id=f"P{p:03d}_i{j}",
                    patient_id=f"P{p:03d}",
                    path=f"images/P{p:03d}_i{j}.png",
                    label=FIVE_CLASSES[p % 5],
                )
            )
    return build_manifest(records)


class TestLoocv:
    def test_one_fold_per_patient(self):
        plan = loocv_splits(_manifest(5))
        assert len(plan.folds) == 5
        for f in plan.folds:
            assert len(f.test_patient_ids) == 1
            assert len(f.train_patient_ids) == 4

    def test_thirty_seven_patients(self):
        # 37 pregnant women -> 37 folds
        plan = loocv_splits(_manifest(37))
        assert len(plan.folds) == 37

    def test_patient_without_images_rejected(self):
        m = _manifest(3)
        m.patient_counts["GHOST"] = 0
        with pytest.raises(ManifestValidationError):
            loocv_splits(m)

    def test_needs_two_patients(self):
        with pytest.raises(ConfigurationError):
            loocv_splits(_manifest(1))


class TestGroupedKfold:
    def test_even_partition(self):
        plan = grouped_kfold(_manifest(10), k=5, seed=0)
        assert sorted(len(f.test_patient_ids) for f in plan.folds) == [2, 2, 2, 2, 2]

    def test_remainder_rule(self):
        plan = grouped_kfold(_manifest(11), k=5, seed=0)
        assert sorted((len(f.test_patient_ids) for f in plan.folds), reverse=True) == [3, 2, 2, 2, 2]

    def test_deterministic(self):
        m = _manifest(9)
        p1 = grouped_kfold(m, k=3, seed=42)
        p2 = grouped_kfold(m, k=3, seed=42)
        assert p1.to_json_dict() == p2.to_json_dict()

    def test_seed_changes_grouping(self):
        m = _manifest(12)
        p1 = grouped_kfold(m, k=3, seed=1)
        p2 = grouped_kfold(m, k=3, seed=2)
        assert p1.to_json_dict() != p2.to_json_dict()

    def test_k_exceeds_patients(self):
        with pytest.raises(ConfigurationError):
            grouped_kfold(_manifest(4), k=5, seed=0)

    def test_plan_roundtrip(self, tmp_path):
        plan = grouped_kfold(_manifest(7), k=3, seed=9)
        write_split_plan(plan, tmp_path / "plan.json")
        again = read_split_plan(tmp_path / "plan.json")
        assert again.to_json_dict() == plan.to_json_dict()


class TestVerifyNoLeakage:
    def test_valid_plans_pass(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            n = int(rng.integers(2, 30))
            m = _manifest(n)
            assert verify_no_leakage(loocv_splits(m)).ok
            k = int(rng.integers(2, n + 1))
            assert verify_no_leakage(grouped_kfold(m, k=k, seed=int(rng.integers(1 << 30)))).ok

    def test_overlap_violation(self):
        plan = loocv_splits(_manifest(3))
        plan.folds[0].train_patient_ids.append(plan.folds[0].test_patient_ids[0])
        report = verify_no_leakage(plan)
        assert not report.ok
        assert any(
            v.kind == "overlap" and v.fold_id == 0 and v.patient_id == plan.folds[0].test_patient_ids[0]
            for v in report.violations
        )

    def test_missing_coverage_violation(self):
        plan = loocv_splits(_manifest(3))
        dropped = plan.folds[1].test_patient_ids[0]
        plan.folds[1].test_patient_ids = []
        report = verify_no_leakage(plan)
        assert any(v.kind == "missing_test" and v.patient_id == dropped for v in report.violations)

    def test_duplicate_test_violation(self):
        plan = loocv_splits(_manifest(3))
        dup = plan.folds[0].test_patient_ids[0]
        plan.folds[1].test_patient_ids.append(dup)
        report = verify_no_leakage(plan)
        assert any(v.kind == "duplicate_test" and v.patient_id == dup for v in report.violations)


class TestTransforms:
    def test_constant_image_normalization(self):
        cfg = PreprocessConfig()
        img = np.full((300, 300), 128, dtype=np.uint8)
        rng = np.random.default_rng(0)
        out = train_transform(img, cfg, rng)
        assert out.shape == (3, 224, 224)
        for c in range(3):
            expected = (128 / 255 - cfg.mean[c]) / cfg.std[c]
            assert np.allclose(out[c], expected, atol=1e-6)

    def test_deterministic_with_fixed_crop_and_no_flip(self):
        cfg = PreprocessConfig(hflip_probability=0.0)
        img = np.random.default_rng(3).integers(0, 255, size=(280, 310), dtype=np.uint8)
        a = train_transform(img, cfg, np.random.default_rng(0), crop_offset=(5, 9))
        b = train_transform(img, cfg, np.random.default_rng(99), crop_offset=(5, 9))
        assert np.array_equal(a, b)

    def test_normalization_formula_zero_point(self):
        # channel-0 pixel value 0.485*255 = 123.675 normalizes to exactly 0
        cfg = PreprocessConfig()
        img = np.full((256, 256, 3), 123.675, dtype=np.float64)
        out = eval_transform(img, cfg)
        assert abs(float(out[0, 0, 0])) < 1e-6

    def test_eval_resize_geometry(self):
        # 300x400 -> short side 256 (224*1.143 = 256.032 -> 256), aspect 400/300*256 = 341.33 -> 341
        cfg = PreprocessConfig()
        from fetalcns.imageops import resize_short_side

        img = np.zeros((300, 400), dtype=np.uint8)
        resized = resize_short_side(img, cfg.resize_short)
        assert resized.shape[:2] == (256, 341)
        out = eval_transform(img, cfg)
        assert out.shape == (3, 224, 224)

    def test_small_input_upscaled(self):
        cfg = PreprocessConfig()
        img = np.random.default_rng(0).integers(0, 255, (224, 224), dtype=np.uint8)
        out = eval_transform(img, cfg)
        assert out.shape == (3, 224, 224)

    def test_eval_transform_bit_identical(self):
        cfg = PreprocessConfig()
        img = np.random.default_rng(5).integers(0, 255, (300, 260, 3), dtype=np.uint8)
        a = eval_transform(img, cfg)
        b = eval_transform(img, cfg)
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("shape", [(256, 256), (300, 400), (512, 300), (224, 900)])
    def test_eval_output_shape_any_aspect(self, shape):
        cfg = PreprocessConfig()
        img = np.zeros(shape, dtype=np.uint8)
        assert eval_transform(img, cfg).shape == (3, 224, 224)

    def test_normalize_denormalize_inverse(self):
        cfg = PreprocessConfig()
        rng = np.random.default_rng(11)
        img = rng.integers(0, 255, size=(64, 64, 3)).astype(np.float64)
        back = denormalize(normalize(img, cfg), cfg)
        assert np.allclose(back, img, atol=1e-4)

    def test_train_matches_eval_given_center_crop(self):
        cfg = PreprocessConfig(hflip_probability=0.0)
        img = np.random.default_rng(7).integers(0, 255, (256, 256), dtype=np.uint8)
        ev = eval_transform(img, cfg)
        top = left = (256 - 224) // 2
        tr = train_transform(img, cfg, np.random.default_rng(0), crop_offset=(top, left))
        assert np.allclose(tr, ev, atol=1e-7)

    def test_crop_bigger_than_resized_image_fails(self):
        cfg = PreprocessConfig(val_resize_factor=0.5)  # resize short side to 112 < 224
        img = np.zeros((400, 400), dtype=np.uint8)
        with pytest.raises(PreprocessingError):
            eval_transform(img, cfg)

    def test_flip_probability_one_flips(self):
        cfg = PreprocessConfig(hflip_probability=1.0)
        img = np.zeros((256, 256), dtype=np.uint8)
        img[:, :128] = 200  # bright left half
        out = train_transform(img, cfg, np.random.default_rng(0), crop_offset=(16, 16))
        # after flip the right side of the crop is brighter
        assert out[0, :, -10:].mean() > out[0, :, :10].mean()

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            PreprocessConfig(std=(0.0, 0.1, 0.1))
        with pytest.raises(ConfigurationError):
            PreprocessConfig(hflip_probability=1.5)
        with pytest.raises(ConfigurationError):
            PreprocessConfig(target_size=0)


def test_split_plan_file_shape(tmp_path):
    plan = SplitPlan(
        scheme="loocv",
        seed=0,
        folds=[Fold(fold_id=0, train_patient_ids=["B"], test_patient_ids=["A"])],
    )
    write_split_plan(plan, tmp_path / "p.json")
    data = (tmp_path / "p.json").read_text()
    assert '"train_patient_ids"' in data and '"test_patient_ids"' in data


def test_preprocess_config_json_defaults(tmp_path):
    (tmp_path / "pp.json").write_text('{"hflip_probability": 0.25}')
    cfg = PreprocessConfig.from_json_file(tmp_path / "pp.json")
    assert cfg.hflip_probability == 0.25
    assert cfg.target_size == 224
    assert cfg.mean == (0.485, 0.456, 0.406)
    assert cfg.std == (0.229, 0.224, 0.225)
