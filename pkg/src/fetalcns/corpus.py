"""Labels, patient-grouped split plans, and image preprocessing pipelines.

The unit of cross-validation is the pregnant woman: a patient's images are
either all in a fold's training set or all in its test set, never both.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import imageops
from .errors import ConfigurationError, ManifestValidationError, PreprocessingError
from .ingest import Manifest


class AnomalyLabel(str, Enum):
    ANENCEPHALY = "Anencephaly"
    ENCEPHALOCELE = "Encephalocele"
    HOLOPROSENCEPHALY = "Holoprosencephaly"
    RACHISCHISIS = "Rachischisis"
    NORMAL = "Normal"


class PlaneKind(str, Enum):
    """Scan plane, metadata only; never used as a training target."""

    THALAMIC_TRANSVERSE = "ThalamicTransverse"
    LATERAL_VENTRICLE_TRANSVERSE = "LateralVentricleTransverse"
    CEREBELLAR_TRANSVERSE = "CerebellarTransverse"
    SPINAL_LONGITUDINAL = "SpinalLongitudinal"
    UNSPECIFIED = "Unspecified"


ANOMALY_CLASSES: tuple[str, ...] = (
    AnomalyLabel.ANENCEPHALY.value,
    AnomalyLabel.ENCEPHALOCELE.value,
    AnomalyLabel.HOLOPROSENCEPHALY.value,
    AnomalyLabel.RACHISCHISIS.value,
)
FIVE_CLASSES: tuple[str, ...] = ANOMALY_CLASSES + (AnomalyLabel.NORMAL.value,)
BINARY_CLASSES: tuple[str, ...] = ("Abnormal", "Normal")

TASK_CLASSES = {
    "4class": ANOMALY_CLASSES,
    "5class": FIVE_CLASSES,
    "binary": BINARY_CLASSES,
}


def task_classes(task: str) -> tuple[str, ...]:
    try:
        return TASK_CLASSES[task]
    except KeyError:
        raise ConfigurationError(f"unknown task {task!r}; expected one of {sorted(TASK_CLASSES)}")


# ---------------------------------------------------------------------------
# Split plans


@dataclass
class Fold:
    fold_id: int
    train_patient_ids: list[str]
    test_patient_ids: list[str]


@dataclass
class SplitPlan:
    scheme: str  # "loocv" | "grouped_kfold"
    seed: int
    folds: list[Fold]
    k: int | None = None

    def fold(self, fold_id: int) -> Fold:
        for f in self.folds:
            if f.fold_id == fold_id:
                return f
        raise ConfigurationError(f"no fold {fold_id} in plan ({len(self.folds)} folds)")

    def to_json_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "seed": self.seed,
            "k": self.k,
            "folds": [
                {
                    "fold_id": f.fold_id,
                    "train_patient_ids": list(f.train_patient_ids),
                    "test_patient_ids": list(f.test_patient_ids),
                }
                for f in self.folds
            ],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "SplitPlan":
        return cls(
            scheme=data["scheme"],
            seed=data["seed"],
            k=data.get("k"),
            folds=[
                Fold(
                    fold_id=f["fold_id"],
                    train_patient_ids=list(f["train_patient_ids"]),
                    test_patient_ids=list(f["test_patient_ids"]),
                )
                for f in data["folds"]
            ],
        )


def write_split_plan(plan: SplitPlan, path: str | Path) -> None:
    Path(path).write_text(json.dumps(plan.to_json_dict(), indent=2) + "\n", encoding="utf-8")


def read_split_plan(path: str | Path) -> SplitPlan:
    return SplitPlan.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _checked_patients(manifest: Manifest) -> list[str]:
    empty = sorted(p for p, n in manifest.patient_counts.items() if n < 1)
    if empty:
        raise ManifestValidationError([f"patient {p} has no images" for p in empty])
    return manifest.patient_ids()


def loocv_splits(manifest: Manifest) -> SplitPlan:
    """One fold per patient; that patient's images form the whole test set."""
    patients = _checked_patients(manifest)
    if len(patients) < 2:
        raise ConfigurationError(f"leave-one-out needs >= 2 patients, got {len(patients)}")
    folds = [
        Fold(
            fold_id=i,
            train_patient_ids=[q for q in patients if q != p],
            test_patient_ids=[p],
        )
        for i, p in enumerate(patients)
    ]
    return SplitPlan(scheme="loocv", seed=0, folds=folds)


def grouped_kfold(manifest: Manifest, k: int, seed: int) -> SplitPlan:
    """Partition patients into k seeded-shuffled groups with sizes differing by <= 1."""
    patients = _checked_patients(manifest)
    if k < 2:
        raise ConfigurationError(f"k must be >= 2, got {k}")
    if k > len(patients):
        raise ConfigurationError(f"k={k} exceeds patient count {len(patients)}")
    rng = np.random.default_rng(seed % 2**64)
    order = rng.permutation(len(patients))
    shuffled = [patients[i] for i in order]
    groups = [list(g) for g in np.array_split(np.asarray(shuffled, dtype=object), k)]
    folds = []
    for i, group in enumerate(groups):
        test = sorted(group)
        test_set = set(test)
        folds.append(
            Fold(
                fold_id=i,
                train_patient_ids=[p for p in patients if p not in test_set],
                test_patient_ids=test,
            )
        )
    return SplitPlan(scheme="grouped_kfold", seed=seed, k=k, folds=folds)


@dataclass(frozen=True)
class LeakageViolation:
    kind: str  # "overlap" | "duplicate_test" | "missing_test"
    patient_id: str
    fold_id: int | None = None


@dataclass
class LeakageReport:
    violations: list[LeakageViolation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def verify_no_leakage(plan: SplitPlan) -> LeakageReport:
    """Report-only check of the split-plan invariants.

    Empty report iff: train/test are disjoint within every fold, and every
    patient named anywhere in the plan appears in exactly one test set.
    """
    violations = []
    test_appearances: dict[str, list[int]] = {}
    all_patients: set[str] = set()
    for f in plan.folds:
        train = set(f.train_patient_ids)
        test = set(f.test_patient_ids)
        all_patients |= train | test
        for p in sorted(train & test):
            violations.append(LeakageViolation("overlap", p, f.fold_id))
        for p in test:
            test_appearances.setdefault(p, []).append(f.fold_id)
    for p, fold_ids in sorted(test_appearances.items()):
        if len(fold_ids) > 1:
            for fid in fold_ids[1:]:
                violations.append(LeakageViolation("duplicate_test", p, fid))
    for p in sorted(all_patients - set(test_appearances)):
        violations.append(LeakageViolation("missing_test", p))
    return LeakageReport(violations)


# ---------------------------------------------------------------------------
# Preprocessing


@dataclass
class PreprocessConfig:
    """Geometry and normalization constants of the model input pipeline."""

    target_size: int = 224
    val_resize_factor: float = 1.143
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    hflip_probability: float = 0.5

    def __post_init__(self):
        if self.target_size < 1:
            raise ConfigurationError(f"target_size must be >= 1, got {self.target_size}")
        if any(s <= 0 for s in self.std):
            raise ConfigurationError(f"std components must be > 0, got {self.std}")
        if not 0.0 <= self.hflip_probability <= 1.0:
            raise ConfigurationError(
                f"hflip_probability must be within [0,1], got {self.hflip_probability}"
            )

    @property
    def resize_short(self) -> int:
        # round-half-up of target_size * factor: 224 * 1.143 -> 256
        return int(np.floor(self.target_size * self.val_resize_factor + 0.5))

    @classmethod
    def from_json_file(cls, path: str | Path) -> "PreprocessConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        kwargs = {}
        for key in ("target_size", "val_resize_factor", "hflip_probability"):
            if key in data:
                kwargs[key] = data[key]
        for key in ("mean", "std"):
            if key in data:
                kwargs[key] = tuple(data[key])
        return cls(**kwargs)


def normalize(image_hwc: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """(pixel/255 - mean_c) / std_c per channel; returns float32 3×H×W."""
    arr = np.asarray(image_hwc, dtype=np.float32) / np.float32(255.0)
    mean = np.asarray(config.mean, dtype=np.float32)
    std = np.asarray(config.std, dtype=np.float32)
    out = (arr - mean) / std
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def denormalize(array_chw: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Invert :func:`normalize` back to H×W×3 pixels on the 0-255 scale."""
    mean = np.asarray(config.mean, dtype=np.float64)[:, None, None]
    std = np.asarray(config.std, dtype=np.float64)[:, None, None]
    pixels = (np.asarray(array_chw, dtype=np.float64) * std + mean) * 255.0
    return pixels.transpose(1, 2, 0)


def _resized(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    # channel replication happens after the crop; resampling grayscale once
    # is cheaper than three identical planes
    resized = imageops.resize_short_side(np.asarray(image), config.resize_short)
    h, w = resized.shape[:2]
    if h < config.target_size or w < config.target_size:
        raise PreprocessingError(
            f"image {h}x{w} after resize is smaller than crop target {config.target_size}"
        )
    return resized


def train_transform(
    image: np.ndarray,
    config: PreprocessConfig,
    rng: np.random.Generator,
    crop_offset: tuple[int, int] | None = None,
) -> np.ndarray:
    """Training-time pipeline: short-side resize, random crop, random hflip, normalize.

    Randomness comes only from the supplied generator: two integer draws for
    the crop window (skipped when ``crop_offset`` pins it), then one uniform
    draw for the flip (skipped when hflip_probability is 0).
    """
    resized = _resized(image, config)
    h, w = resized.shape[:2]
    size = config.target_size
    if crop_offset is None:
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
    else:
        top, left = crop_offset
    window = imageops.crop(resized, top, left, size, size)
    if config.hflip_probability > 0 and rng.random() < config.hflip_probability:
        window = window[:, ::-1]
    return normalize(imageops.ensure_3channel(window), config)


def eval_transform(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Deterministic pipeline: short-side resize, center crop, normalize."""
    resized = _resized(image, config)
    window = imageops.center_crop(resized, config.target_size)
    return normalize(imageops.ensure_3channel(window), config)


def eval_crop(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """The eval-transform geometry without normalization, as uint8 H×W×3.

    This is the pixel window the model actually sees; overlays are rendered
    on it so heatmap coordinates line up.
    """
    resized = _resized(image, config)
    window = imageops.center_crop(resized, config.target_size)
    return np.clip(np.rint(imageops.ensure_3channel(window)), 0, 255).astype(np.uint8)
